#include "entlab/policy.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <istream>
#include <ostream>
#include <sstream>

#include "entlab/error.hpp"
#include "entlab/random.hpp"

namespace entlab {

const char* to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::kInvalidToken: return "invalid-token";
    case ErrorCode::kEmptySequence: return "empty-sequence";
    case ErrorCode::kEmptyPool: return "empty-pool";
    case ErrorCode::kInvalidParameter: return "invalid-parameter";
    case ErrorCode::kGroupTooSmall: return "group-too-small";
    case ErrorCode::kNumericalDomain: return "numerical-domain";
    case ErrorCode::kConfiguration: return "configuration";
    case ErrorCode::kNonFiniteGradient: return "non-finite-gradient";
    case ErrorCode::kUndefinedCorrelation: return "undefined-correlation";
    case ErrorCode::kDegenerateRatio: return "degenerate-ratio";
    case ErrorCode::kParse: return "parse";
    case ErrorCode::kIo: return "io";
  }
  return "unknown";
}

Vocab Vocab::standard(int size) {
  Vocab v{size, size - 2, size - 1};
  v.validate();
  return v;
}

void Vocab::validate() const {
  if (size < 2) {
    throw Error(ErrorCode::kInvalidParameter, "vocab size must be >= 2");
  }
  if (!contains(bos) || !contains(eos) || bos == eos) {
    throw Error(ErrorCode::kInvalidParameter,
                "bos/eos must be distinct ids inside the vocab");
  }
}

double TokenDistribution::entropy() const {
  double h = 0.0;
  for (double p : probs) {
    if (p > 0.0) h -= p * std::log(p);
  }
  return h;
}

PolicyParams::PolicyParams(Vocab vocab, int context_order)
    : vocab_(vocab), order_(context_order),
      zeros_(static_cast<std::size_t>(vocab.size), 0.0) {
  vocab_.validate();
  if (context_order < 0) {
    throw Error(ErrorCode::kInvalidParameter, "context order must be >= 0");
  }
}

void PolicyParams::check_tokens(std::span<const TokenId> tokens) const {
  for (TokenId t : tokens) {
    if (!vocab_.contains(t)) {
      throw Error(ErrorCode::kInvalidToken,
                  "token id " + std::to_string(t) + " outside vocab of size " +
                      std::to_string(vocab_.size));
    }
  }
}

PolicyParams::Key PolicyParams::key_for(std::span<const TokenId> context) const {
  check_tokens(context);
  Key key(static_cast<std::size_t>(order_), vocab_.bos);
  const std::size_t k = key.size();
  const std::size_t n = std::min(k, context.size());
  std::copy(context.end() - static_cast<std::ptrdiff_t>(n), context.end(),
            key.end() - static_cast<std::ptrdiff_t>(n));
  return key;
}

PolicyParams::Key PolicyParams::key_at(std::span<const TokenId> prompt,
                                       std::span<const TokenId> response,
                                       std::size_t pos) const {
  check_tokens(prompt);
  check_tokens(response.first(pos));
  Key key(static_cast<std::size_t>(order_), vocab_.bos);
  // Walk backwards over response[<pos] then prompt.
  std::size_t filled = 0;
  const std::size_t k = key.size();
  for (std::size_t i = pos; i > 0 && filled < k; --i, ++filled) {
    key[k - 1 - filled] = response[i - 1];
  }
  for (std::size_t i = prompt.size(); i > 0 && filled < k; --i, ++filled) {
    key[k - 1 - filled] = prompt[i - 1];
  }
  return key;
}

std::span<const double> PolicyParams::logits(const Key& key) const {
  auto it = table_.find(key);
  if (it == table_.end()) return zeros_;
  return it->second;
}

std::vector<double>& PolicyParams::mutable_logits(const Key& key) {
  auto [it, inserted] = table_.try_emplace(key, zeros_);
  return it->second;
}

void PolicyParams::set_logits(const Key& key, std::vector<double> logits) {
  if (logits.size() != zeros_.size()) {
    throw Error(ErrorCode::kInvalidParameter, "logit vector length != vocab size");
  }
  for (double z : logits) {
    if (!std::isfinite(z)) {
      throw Error(ErrorCode::kNumericalDomain, "non-finite logit");
    }
  }
  check_tokens(key);
  table_[key] = std::move(logits);
}

TokenDistribution softmax(std::span<const double> logits) {
  TokenDistribution d;
  d.probs.resize(logits.size());
  const double zmax = *std::max_element(logits.begin(), logits.end());
  double total = 0.0;
  for (std::size_t v = 0; v < logits.size(); ++v) {
    d.probs[v] = std::exp(logits[v] - zmax);
    total += d.probs[v];
  }
  for (double& p : d.probs) p /= total;
  return d;
}

TokenDistribution distribution_at_key(const PolicyParams& params,
                                      const PolicyParams::Key& key) {
  return softmax(params.logits(key));
}

TokenDistribution distribution(const PolicyParams& params,
                               std::span<const TokenId> context) {
  return distribution_at_key(params, params.key_for(context));
}

namespace {

TokenId draw(const TokenDistribution& d, Rng& rng) {
  const double u = rng.uniform();
  double acc = 0.0;
  for (std::size_t v = 0; v < d.probs.size(); ++v) {
    acc += d.probs[v];
    if (u < acc) return static_cast<TokenId>(v);
  }
  // u landed in the rounding slack above the accumulated sum.
  for (std::size_t v = d.probs.size(); v > 0; --v) {
    if (d.probs[v - 1] > 0.0) return static_cast<TokenId>(v - 1);
  }
  return 0;
}

}  // namespace

double token_logprob(std::span<const double> logits, TokenId token) {
  const double zmax = *std::max_element(logits.begin(), logits.end());
  double total = 0.0;
  for (double z : logits) total += std::exp(z - zmax);
  return logits[static_cast<std::size_t>(token)] - zmax - std::log(total);
}

TokenSeq sample_response(const PolicyParams& params,
                         std::span<const TokenId> prompt, int max_len,
                         std::uint64_t rng_seed) {
  if (max_len < 1) {
    throw Error(ErrorCode::kInvalidParameter, "max_len must be >= 1");
  }
  Rng rng(rng_seed);
  TokenSeq response;
  response.reserve(static_cast<std::size_t>(max_len));
  while (static_cast<int>(response.size()) < max_len) {
    const auto key = params.key_at(prompt, response, response.size());
    const TokenId t = draw(distribution_at_key(params, key), rng);
    response.push_back(t);
    if (t == params.vocab().eos) break;
  }
  return response;
}

std::vector<double> sequence_logprob(const PolicyParams& params,
                                     std::span<const TokenId> prompt,
                                     std::span<const TokenId> response) {
  if (response.empty()) {
    throw Error(ErrorCode::kEmptySequence, "response is empty");
  }
  for (TokenId t : response) {
    if (!params.vocab().contains(t)) {
      throw Error(ErrorCode::kInvalidToken, "response token outside vocab");
    }
  }
  std::vector<double> out(response.size());
  for (std::size_t t = 0; t < response.size(); ++t) {
    const auto key = params.key_at(prompt, response, t);
    out[t] = token_logprob(params.logits(key), response[t]);
  }
  return out;
}

double token_entropy(const PolicyParams& params,
                     std::span<const TokenId> context) {
  return distribution(params, context).entropy();
}

double response_entropy(const PolicyParams& params,
                        std::span<const TokenId> prompt,
                        std::span<const TokenId> response) {
  if (response.empty()) {
    throw Error(ErrorCode::kEmptySequence, "response is empty");
  }
  double total = 0.0;
  for (std::size_t t = 0; t < response.size(); ++t) {
    total += distribution_at_key(params, params.key_at(prompt, response, t))
                 .entropy();
  }
  return total / static_cast<double>(response.size());
}

std::vector<double> objective_grad_wrt_logits(const TokenDistribution& dist,
                                              TokenId sampled,
                                              double advantage) {
  std::vector<double> g(dist.probs.size());
  for (std::size_t v = 0; v < g.size(); ++v) {
    const double indicator = static_cast<TokenId>(v) == sampled ? 1.0 : 0.0;
    g[v] = (indicator - dist.probs[v]) * advantage;
  }
  return g;
}

std::vector<double> objective_grad_wrt_logits(const PolicyParams& params,
                                              std::span<const TokenId> context,
                                              TokenId sampled,
                                              double advantage) {
  if (!params.vocab().contains(sampled)) {
    throw Error(ErrorCode::kInvalidToken, "sampled token outside vocab");
  }
  return objective_grad_wrt_logits(distribution(params, context), sampled,
                                   advantage);
}

std::vector<double> entropy_grad_wrt_logits(const TokenDistribution& dist) {
  const double h = dist.entropy();
  std::vector<double> g(dist.probs.size());
  for (std::size_t v = 0; v < g.size(); ++v) {
    const double p = dist.probs[v];
    g[v] = p > 0.0 ? -p * (std::log(p) + h) : 0.0;
  }
  return g;
}

std::vector<double> entropy_grad_wrt_logits(const PolicyParams& params,
                                            std::span<const TokenId> context) {
  return entropy_grad_wrt_logits(distribution(params, context));
}

std::string format_double(double x) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  return buf;
}

void write_policy(std::ostream& out, const PolicyParams& params) {
  const Vocab& v = params.vocab();
  out << "entlab-policy 1\n"
      << "vocab " << v.size << ' ' << v.bos << ' ' << v.eos << '\n'
      << "order " << params.context_order() << '\n'
      << "contexts " << params.table().size() << '\n';
  for (const auto& [key, logits] : params.table()) {
    for (std::size_t i = 0; i < key.size(); ++i) {
      if (i) out << ' ';
      out << key[i];
    }
    out << '\t';
    for (std::size_t i = 0; i < logits.size(); ++i) {
      if (i) out << ' ';
      out << format_double(logits[i]);
    }
    out << '\n';
  }
}

namespace {

[[noreturn]] void parse_fail(const std::string& what) {
  throw Error(ErrorCode::kParse, "policy checkpoint: " + what);
}

}  // namespace

PolicyParams read_policy(std::istream& in) {
  std::string tag;
  int version = 0;
  if (!(in >> tag >> version) || tag != "entlab-policy" || version != 1) {
    parse_fail("bad header");
  }
  Vocab v;
  int order = 0;
  std::size_t count = 0;
  if (!(in >> tag >> v.size >> v.bos >> v.eos) || tag != "vocab") {
    parse_fail("bad vocab line");
  }
  if (!(in >> tag >> order) || tag != "order") parse_fail("bad order line");
  if (!(in >> tag >> count) || tag != "contexts") parse_fail("bad contexts line");
  PolicyParams params(v, order);
  std::string line;
  std::getline(in, line);
  for (std::size_t n = 0; n < count; ++n) {
    if (!std::getline(in, line)) parse_fail("truncated context list");
    const auto tab = line.find('\t');
    if (tab == std::string::npos) parse_fail("missing tab in context line");
    std::istringstream ks(line.substr(0, tab));
    PolicyParams::Key key;
    for (TokenId t; ks >> t;) key.push_back(t);
    if (key.size() != static_cast<std::size_t>(order)) {
      parse_fail("key length does not match order");
    }
    std::istringstream ls(line.substr(tab + 1));
    std::vector<double> logits;
    for (std::string field; ls >> field;) {
      char* end = nullptr;
      const double z = std::strtod(field.c_str(), &end);
      if (end != field.c_str() + field.size()) parse_fail("bad logit " + field);
      logits.push_back(z);
    }
    params.set_logits(key, std::move(logits));
  }
  return params;
}

}  // namespace entlab
