#pragma once

#include <cstdint>
#include <iosfwd>
#include <map>
#include <span>
#include <string>
#include <vector>

namespace entlab {

using TokenId = std::int32_t;
using TokenSeq = std::vector<TokenId>;

// Token layout used throughout: payload tokens occupy [0, V-2), bos is V-2
// and eos is V-1. Only the invariants below are enforced, so other layouts
// can be built explicitly.
struct Vocab {
  int size = 0;
  TokenId bos = 0;
  TokenId eos = 0;

  static Vocab standard(int size);

  bool contains(TokenId t) const { return t >= 0 && t < size; }
  void validate() const;

  bool operator==(const Vocab&) const = default;
};

struct TokenDistribution {
  std::vector<double> probs;

  double entropy() const;
};

// Order-k logit table. A context key is the last k tokens of
// (prompt + generated prefix), left-padded with bos. Keys absent from the
// table have all-zero logits, i.e. the uniform distribution.
class PolicyParams {
 public:
  using Key = TokenSeq;
  using Table = std::map<Key, std::vector<double>>;

  PolicyParams(Vocab vocab, int context_order);

  const Vocab& vocab() const { return vocab_; }
  int context_order() const { return order_; }
  const Table& table() const { return table_; }

  // Key for predicting the token that follows `context`.
  Key key_for(std::span<const TokenId> context) const;

  // Key for predicting position `pos` of `response` after `prompt`.
  Key key_at(std::span<const TokenId> prompt, std::span<const TokenId> response,
             std::size_t pos) const;

  std::span<const double> logits(const Key& key) const;
  // Materializes the key with zero logits if needed.
  std::vector<double>& mutable_logits(const Key& key);
  void set_logits(const Key& key, std::vector<double> logits);

  bool operator==(const PolicyParams&) const = default;

 private:
  void check_tokens(std::span<const TokenId> tokens) const;

  Vocab vocab_;
  int order_;
  Table table_;
  std::vector<double> zeros_;
};

// Max-subtracted softmax.
TokenDistribution softmax(std::span<const double> logits);

// ln softmax(logits)[token], computed without forming the distribution.
double token_logprob(std::span<const double> logits, TokenId token);

TokenDistribution distribution(const PolicyParams& params,
                               std::span<const TokenId> context);
TokenDistribution distribution_at_key(const PolicyParams& params,
                                      const PolicyParams::Key& key);

// Ancestral sampling at temperature 1 until eos (inclusive) or max_len.
TokenSeq sample_response(const PolicyParams& params,
                         std::span<const TokenId> prompt, int max_len,
                         std::uint64_t rng_seed);

// Element t is ln pi(response[t] | prompt, response[<t]).
std::vector<double> sequence_logprob(const PolicyParams& params,
                                     std::span<const TokenId> prompt,
                                     std::span<const TokenId> response);

double token_entropy(const PolicyParams& params,
                     std::span<const TokenId> context);

// Mean of token_entropy over the response positions.
double response_entropy(const PolicyParams& params,
                        std::span<const TokenId> prompt,
                        std::span<const TokenId> response);

// d(A * ln pi(sampled)) / dz = (onehot(sampled) - pi) * A. On-policy form:
// no ratio, no clipping.
std::vector<double> objective_grad_wrt_logits(const TokenDistribution& dist,
                                              TokenId sampled,
                                              double advantage);
std::vector<double> objective_grad_wrt_logits(const PolicyParams& params,
                                              std::span<const TokenId> context,
                                              TokenId sampled,
                                              double advantage);

// dH/dz_v = -pi_v (ln pi_v + H).
std::vector<double> entropy_grad_wrt_logits(const TokenDistribution& dist);
std::vector<double> entropy_grad_wrt_logits(const PolicyParams& params,
                                            std::span<const TokenId> context);

// Checkpoint format (text, one context per line, keys in sorted order):
//
//   entlab-policy 1
//   vocab <V> <bos> <eos>
//   order <k>
//   contexts <n>
//   <k space-separated key tokens>\t<V logits, %.17g, space-separated>
//
// Logits are printed with 17 significant digits so parsing recovers the
// exact doubles.
void write_policy(std::ostream& out, const PolicyParams& params);
PolicyParams read_policy(std::istream& in);

std::string format_double(double x);

}  // namespace entlab
