#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "entlab/diagnostics.hpp"
#include "entlab/policy.hpp"
#include "entlab/tasks.hpp"

namespace entlab {

enum class ClipMode { kDefault, kClipHigher, kClipLower, kClipTighter, kClipFree };
enum class EntRegMode { kNone, kFixed, kAdaptive };
enum class Variant {
  kNone,
  kAdvNonnegOnly,
  kAdvNonposOnly,
  kRandPosClip,
  kClipCov,
  kKlCov,
  kProgAdvReweight1,
  kProgAdvReweight2,
};

std::string to_string(ClipMode m);
std::string to_string(EntRegMode m);
std::string to_string(Variant v);
ClipMode parse_clip_mode(const std::string& s);
EntRegMode parse_ent_reg(const std::string& s);
Variant parse_variant(const std::string& s);

struct TrainerConfig {
  int group_size = 8;
  int rollout_batch = 32;
  int n_update = 1;
  double eps_low = 0.2;
  double eps_high = 0.2;
  ClipMode clip_mode = ClipMode::kDefault;
  double learning_rate = 1e-2;
  int epochs = 1;
  // 0 means floor(|pool| / rollout_batch), at least 1.
  int steps_per_epoch = 0;
  int max_response_len = 8;
  int context_order = 1;

  EntRegMode ent_reg = EntRegMode::kNone;
  double alpha = 0.0;  // fixed mode
  double delta = 0.2;  // adaptive mode
  double beta = 0.005;
  double c0 = 0.0;

  Variant variant = Variant::kNone;
  double fraction = 0.002;  // rand_pos_clip, clip_cov, kl_cov
  double kl_coef = 1.0;

  double ema_phi = 0.6;
  int diversity_interval = 10;  // 0 disables diversity metrics
  int ngram_order = 5;
  int threads = 1;
  std::uint64_t seed = 0;

  void validate() const;
  bool operator==(const TrainerConfig&) const = default;
};

struct ClipBounds {
  double eps_low;
  double eps_high;
};

// default uses the configured eps; clip_higher raises eps_high to 0.28,
// clip_lower raises eps_low to 0.28, clip_tighter lowers eps_low to 0.12.
ClipBounds resolve_clip_bounds(const TrainerConfig& config);

struct RolloutGroup {
  Prompt prompt;
  std::vector<TokenSeq> responses;
  std::vector<double> rewards;
  std::vector<std::vector<double>> old_logprobs;
  std::vector<double> advantages;
  std::vector<double> entropies;  // response_entropy under the rollout policy
};

struct ControllerState {
  double c = 0.0;
  double alpha_active = 0.0;
  double delta = 0.2;
  double beta = 0.005;
};

struct TokenLossTerm {
  double ratio = 1.0;
  double advantage = 0.0;
  double mask_weight = 1.0;
  bool clipped = false;
  double logprob = 0.0;    // current-policy ln pi of the token
  bool penalized = false;  // selected for the KL-Cov penalty
};

struct VariantSpec {
  Variant kind = Variant::kNone;
  double fraction = 0.002;
  double kl_coef = 1.0;
};

// Population-std normalization; zero-variance groups map to exact zeros.
std::vector<double> compute_advantages(std::span<const double> rewards);

// Clipped surrogate min(r A, clip(r, 1-eps_low, 1+eps_high) A); clip_free
// returns r A.
double token_objective(const TokenLossTerm& term, double eps_low,
                       double eps_high, ClipMode mode);

// True when the clipped branch is the active one in the min.
bool is_clipped(double ratio, double advantage, double eps_low, double eps_high,
                ClipMode mode);

// Only mask_weight and penalized change. Zero-advantage tokens count as
// non-negative, except that adv_nonpos_only keeps them.
std::vector<TokenLossTerm> apply_variant_mask(std::vector<TokenLossTerm> terms,
                                              const VariantSpec& variant,
                                              double lambda,
                                              std::uint64_t rng_seed);

// (lnpi - mean lnpi)(A - mean A), ranked descending; returns indices of the
// top floor(fraction * n) tokens, ties broken by index.
std::vector<std::size_t> top_covariance_tokens(
    const std::vector<TokenLossTerm>& terms, double fraction);

// Steps and epochs are 1-based.
double lambda_schedule(Variant variant, std::int64_t step,
                       std::int64_t total_steps, int epoch, int total_epochs);

// Returns (alpha_k, next state).
std::pair<double, ControllerState> entropy_reg_coefficient(
    const ControllerState& state, double measured_entropy);

// Sum over penalized tokens of coefficient * (new - old) log-prob.
double kl_cov_penalty(std::span<const TokenLossTerm> terms,
                      std::span<const double> old_logprobs, double coefficient);

struct ShardGradient {
  std::map<PolicyParams::Key, std::vector<double>> grads;  // d objective / dz
  double objective = 0.0;
  std::size_t tokens = 0;
  std::size_t clipped = 0;
};

// Token-level objective of one shard and its gradient w.r.t. every touched
// logit vector: (1/N) sum [w * surrogate + alpha * H - kl_coef * [penalized]
// (lnpi - lnpi_old)], N = all tokens in the shard.
ShardGradient shard_gradient(const PolicyParams& params,
                             std::span<const RolloutGroup> shard,
                             const TrainerConfig& config, double alpha,
                             double lambda, std::uint64_t mask_seed);

struct StepContext {
  std::int64_t step = 1;
  std::int64_t total_steps = 1;
  int epoch = 1;
  int total_epochs = 1;
};

// One GRPO step: n_update sequential gradient-ascent updates, one per shard
// of batch.size() / n_update consecutive groups. Fills step, mean_reward,
// mean_entropy, alpha_k, lambda and clip_fraction.
MetricRecord train_step(PolicyParams& params, std::span<const RolloutGroup> batch,
                        const TrainerConfig& config, ControllerState& controller,
                        const StepContext& ctx);

// Samples the group for one prompt with seeds derived from prompt_seed.
RolloutGroup rollout_group(const PolicyParams& params, const Prompt& prompt,
                           const TrainerConfig& config, std::uint64_t prompt_seed);

// Per-prompt seed: derive_seed(master_seed, step, prompt_index).
std::uint64_t prompt_seed(std::uint64_t master_seed, std::int64_t step,
                          std::size_t prompt_index);

struct TrainResult {
  std::vector<MetricRecord> records;
  PolicyParams initial;
  PolicyParams final_params;
};

// Called once per step after the update, with the rollouts that fed it.
using StepObserver =
    std::function<void(const MetricRecord&, std::span<const RolloutGroup>)>;

TrainResult train_run(const TrainerConfig& config, const std::vector<Prompt>& pool,
                      std::uint64_t seed, const StepObserver& observer = {});

ControllerState initial_controller(const TrainerConfig& config);

}  // namespace entlab
