#include "entlab/grpo.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <thread>

#include "entlab/error.hpp"
#include "entlab/random.hpp"

namespace entlab {

std::string to_string(ClipMode m) {
  switch (m) {
    case ClipMode::kDefault: return "default";
    case ClipMode::kClipHigher: return "clip_higher";
    case ClipMode::kClipLower: return "clip_lower";
    case ClipMode::kClipTighter: return "clip_tighter";
    case ClipMode::kClipFree: return "clip_free";
  }
  return "?";
}

std::string to_string(EntRegMode m) {
  switch (m) {
    case EntRegMode::kNone: return "none";
    case EntRegMode::kFixed: return "fixed";
    case EntRegMode::kAdaptive: return "adaptive";
  }
  return "?";
}

std::string to_string(Variant v) {
  switch (v) {
    case Variant::kNone: return "none";
    case Variant::kAdvNonnegOnly: return "adv_nonneg_only";
    case Variant::kAdvNonposOnly: return "adv_nonpos_only";
    case Variant::kRandPosClip: return "rand_pos_clip";
    case Variant::kClipCov: return "clip_cov";
    case Variant::kKlCov: return "kl_cov";
    case Variant::kProgAdvReweight1: return "prog_adv_reweight_1";
    case Variant::kProgAdvReweight2: return "prog_adv_reweight_2";
  }
  return "?";
}

ClipMode parse_clip_mode(const std::string& s) {
  for (auto m : {ClipMode::kDefault, ClipMode::kClipHigher, ClipMode::kClipLower,
                 ClipMode::kClipTighter, ClipMode::kClipFree}) {
    if (to_string(m) == s) return m;
  }
  throw Error(ErrorCode::kConfiguration, "unknown clip_mode '" + s + "'");
}

EntRegMode parse_ent_reg(const std::string& s) {
  for (auto m : {EntRegMode::kNone, EntRegMode::kFixed, EntRegMode::kAdaptive}) {
    if (to_string(m) == s) return m;
  }
  throw Error(ErrorCode::kConfiguration, "unknown ent_reg '" + s + "'");
}

Variant parse_variant(const std::string& s) {
  for (auto v : {Variant::kNone, Variant::kAdvNonnegOnly, Variant::kAdvNonposOnly,
                 Variant::kRandPosClip, Variant::kClipCov, Variant::kKlCov,
                 Variant::kProgAdvReweight1, Variant::kProgAdvReweight2}) {
    if (to_string(v) == s) return v;
  }
  throw Error(ErrorCode::kConfiguration, "unknown variant '" + s + "'");
}

namespace {

[[noreturn]] void bad_config(const std::string& field, const std::string& why) {
  throw Error(ErrorCode::kConfiguration, field + ": " + why);
}

}  // namespace

void TrainerConfig::validate() const {
  if (group_size < 2) bad_config("group_size", "must be >= 2");
  if (rollout_batch < 1) bad_config("rollout_batch", "must be >= 1");
  if (n_update < 1) bad_config("n_update", "must be >= 1");
  if (rollout_batch % n_update != 0) {
    bad_config("rollout_batch", "must be divisible by n_update");
  }
  if (!(eps_low >= 0.0 && eps_low < 1.0)) bad_config("eps_low", "must be in [0, 1)");
  if (!(eps_high >= 0.0)) bad_config("eps_high", "must be >= 0");
  if (!(learning_rate > 0.0)) bad_config("learning_rate", "must be > 0");
  if (epochs < 1) bad_config("epochs", "must be >= 1");
  if (steps_per_epoch < 0) bad_config("steps_per_epoch", "must be >= 0");
  if (max_response_len < 1) bad_config("max_response_len", "must be >= 1");
  if (context_order < 0) bad_config("context_order", "must be >= 0");
  if (ent_reg == EntRegMode::kAdaptive && !(beta > 0.0)) {
    bad_config("beta", "must be > 0 for adaptive entropy regularization");
  }
  if (!(c0 >= 0.0)) bad_config("c0", "must be >= 0");
  const bool uses_fraction = variant == Variant::kRandPosClip ||
                             variant == Variant::kClipCov ||
                             variant == Variant::kKlCov;
  if (uses_fraction && !(fraction > 0.0 && fraction < 1.0)) {
    bad_config("fraction", "must be in (0, 1)");
  }
  if (variant == Variant::kProgAdvReweight2 && epochs < 2) {
    bad_config("epochs", "prog_adv_reweight_2 needs at least 2 epochs");
  }
  if (!(ema_phi >= 0.0 && ema_phi < 1.0)) bad_config("ema_phi", "must be in [0, 1)");
  if (diversity_interval < 0) bad_config("diversity_interval", "must be >= 0");
  if (ngram_order < 1) bad_config("ngram_order", "must be >= 1");
  if (threads < 1) bad_config("threads", "must be >= 1");
}

ClipBounds resolve_clip_bounds(const TrainerConfig& config) {
  ClipBounds b{config.eps_low, config.eps_high};
  switch (config.clip_mode) {
    case ClipMode::kClipHigher: b.eps_high = 0.28; break;
    case ClipMode::kClipLower: b.eps_low = 0.28; break;
    case ClipMode::kClipTighter: b.eps_low = 0.12; break;
    case ClipMode::kDefault:
    case ClipMode::kClipFree: break;
  }
  return b;
}

std::vector<double> compute_advantages(std::span<const double> rewards) {
  if (rewards.size() < 2) {
    throw Error(ErrorCode::kGroupTooSmall, "advantage group needs G >= 2");
  }
  std::vector<double> adv(rewards.size(), 0.0);
  // Compared exactly: a rounded mean would leave tiny residuals to divide.
  if (std::all_of(rewards.begin(), rewards.end(),
                  [&](double r) { return r == rewards.front(); })) {
    return adv;
  }
  const auto g = static_cast<double>(rewards.size());
  const double mean = std::accumulate(rewards.begin(), rewards.end(), 0.0) / g;
  double var = 0.0;
  for (double r : rewards) var += (r - mean) * (r - mean);
  const double std = std::sqrt(var / g);
  for (std::size_t i = 0; i < rewards.size(); ++i) {
    adv[i] = (rewards[i] - mean) / std;
  }
  return adv;
}

bool is_clipped(double ratio, double advantage, double eps_low, double eps_high,
                ClipMode mode) {
  if (mode == ClipMode::kClipFree) return false;
  if (advantage > 0.0) return ratio > 1.0 + eps_high;
  if (advantage < 0.0) return ratio < 1.0 - eps_low;
  return false;
}

double token_objective(const TokenLossTerm& term, double eps_low,
                       double eps_high, ClipMode mode) {
  if (!(term.ratio > 0.0)) {
    throw Error(ErrorCode::kNumericalDomain, "importance ratio must be > 0");
  }
  const double unclipped = term.ratio * term.advantage;
  if (mode == ClipMode::kClipFree) return unclipped;
  const double r = std::clamp(term.ratio, 1.0 - eps_low, 1.0 + eps_high);
  return std::min(unclipped, r * term.advantage);
}

std::vector<std::size_t> top_covariance_tokens(
    const std::vector<TokenLossTerm>& terms, double fraction) {
  const std::size_t n = terms.size();
  const auto count = static_cast<std::size_t>(
      std::floor(fraction * static_cast<double>(n)));
  if (count == 0) return {};
  double mean_lp = 0.0, mean_adv = 0.0;
  for (const auto& t : terms) {
    mean_lp += t.logprob;
    mean_adv += t.advantage;
  }
  mean_lp /= static_cast<double>(n);
  mean_adv /= static_cast<double>(n);
  std::vector<double> cov(n);
  for (std::size_t i = 0; i < n; ++i) {
    cov[i] = (terms[i].logprob - mean_lp) * (terms[i].advantage - mean_adv);
  }
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::stable_sort(idx.begin(), idx.end(),
                   [&](std::size_t a, std::size_t b) { return cov[a] > cov[b]; });
  idx.resize(count);
  std::sort(idx.begin(), idx.end());
  return idx;
}

std::vector<TokenLossTerm> apply_variant_mask(std::vector<TokenLossTerm> terms,
                                              const VariantSpec& variant,
                                              double lambda,
                                              std::uint64_t rng_seed) {
  if (!(lambda >= 0.0 && lambda <= 1.0)) {
    throw Error(ErrorCode::kInvalidParameter, "lambda must be in [0, 1]");
  }
  switch (variant.kind) {
    case Variant::kNone:
      break;
    case Variant::kAdvNonnegOnly:
      for (auto& t : terms) {
        if (t.advantage < 0.0) t.mask_weight = 0.0;
      }
      break;
    case Variant::kAdvNonposOnly:
      for (auto& t : terms) {
        if (t.advantage > 0.0) t.mask_weight = 0.0;
      }
      break;
    case Variant::kRandPosClip: {
      std::vector<std::size_t> positive;
      for (std::size_t i = 0; i < terms.size(); ++i) {
        if (terms[i].advantage > 0.0) positive.push_back(i);
      }
      const auto count = static_cast<std::size_t>(
          std::floor(variant.fraction * static_cast<double>(positive.size())));
      Rng rng(rng_seed);
      // Partial Fisher-Yates: the first `count` slots are a uniform sample.
      for (std::size_t i = 0; i < count; ++i) {
        const std::size_t j = i + rng.below(positive.size() - i);
        std::swap(positive[i], positive[j]);
        terms[positive[i]].mask_weight = 0.0;
      }
      break;
    }
    case Variant::kClipCov:
      for (std::size_t i : top_covariance_tokens(terms, variant.fraction)) {
        terms[i].mask_weight = 0.0;
      }
      break;
    case Variant::kKlCov:
      for (std::size_t i : top_covariance_tokens(terms, variant.fraction)) {
        terms[i].penalized = true;
      }
      break;
    case Variant::kProgAdvReweight1:
    case Variant::kProgAdvReweight2:
      for (auto& t : terms) {
        if (t.advantage >= 0.0) t.mask_weight = lambda;
      }
      break;
    default:
      throw Error(ErrorCode::kConfiguration, "unknown variant");
  }
  return terms;
}

double lambda_schedule(Variant variant, std::int64_t step,
                       std::int64_t total_steps, int epoch, int total_epochs) {
  switch (variant) {
    case Variant::kProgAdvReweight1: {
      if (total_steps < 2) {
        throw Error(ErrorCode::kConfiguration,
                    "prog_adv_reweight_1 needs at least 2 training steps");
      }
      const double half = static_cast<double>(total_steps) / 2.0;
      const auto s = static_cast<double>(step);
      if (s <= half) return 0.0;
      return std::min(1.0, (s - half) / (static_cast<double>(total_steps) - half));
    }
    case Variant::kProgAdvReweight2:
      if (total_epochs < 2) {
        throw Error(ErrorCode::kConfiguration,
                    "prog_adv_reweight_2 needs at least 2 epochs");
      }
      return static_cast<double>(epoch - 1) / static_cast<double>(total_epochs - 1);
    default:
      return 1.0;
  }
}

std::pair<double, ControllerState> entropy_reg_coefficient(
    const ControllerState& state, double measured_entropy) {
  ControllerState next = state;
  const bool below = measured_entropy < state.delta;
  const double alpha = below ? state.c : 0.0;
  next.alpha_active = alpha;
  next.c = std::max(0.0, below ? state.c + state.beta : state.c - state.beta);
  return {alpha, next};
}

double kl_cov_penalty(std::span<const TokenLossTerm> terms,
                      std::span<const double> old_logprobs, double coefficient) {
  if (terms.size() != old_logprobs.size()) {
    throw Error(ErrorCode::kInvalidParameter,
                "kl_cov_penalty: terms and old log-probs differ in length");
  }
  double total = 0.0;
  for (std::size_t i = 0; i < terms.size(); ++i) {
    if (terms[i].penalized) total += coefficient * (terms[i].logprob - old_logprobs[i]);
  }
  return total;
}

ControllerState initial_controller(const TrainerConfig& config) {
  ControllerState s;
  s.c = config.c0;
  s.delta = config.delta;
  s.beta = config.beta;
  return s;
}

ShardGradient shard_gradient(const PolicyParams& params,
                             std::span<const RolloutGroup> shard,
                             const TrainerConfig& config, double alpha,
                             double lambda, std::uint64_t mask_seed) {
  const ClipBounds bounds = resolve_clip_bounds(config);
  std::vector<TokenId> sampled;
  std::vector<PolicyParams::Key> keys;
  std::vector<TokenDistribution> dists;
  std::vector<TokenLossTerm> terms;
  std::vector<double> old_lp;

  for (const RolloutGroup& group : shard) {
    for (std::size_t i = 0; i < group.responses.size(); ++i) {
      const TokenSeq& resp = group.responses[i];
      for (std::size_t t = 0; t < resp.size(); ++t) {
        auto key = params.key_at(group.prompt.tokens, resp, t);
        const auto logits = params.logits(key);
        TokenLossTerm term;
        term.logprob = token_logprob(logits, resp[t]);
        term.ratio = std::exp(term.logprob - group.old_logprobs[i][t]);
        term.advantage = group.advantages[i];
        term.clipped = is_clipped(term.ratio, term.advantage, bounds.eps_low,
                                  bounds.eps_high, config.clip_mode);
        sampled.push_back(resp[t]);
        dists.push_back(softmax(logits));
        keys.push_back(std::move(key));
        terms.push_back(term);
        old_lp.push_back(group.old_logprobs[i][t]);
      }
    }
  }

  ShardGradient out;
  out.tokens = terms.size();
  if (terms.empty()) return out;

  terms = apply_variant_mask(
      std::move(terms),
      VariantSpec{config.variant, config.fraction, config.kl_coef}, lambda,
      mask_seed);

  const double norm = 1.0 / static_cast<double>(terms.size());
  const auto vsize = static_cast<std::size_t>(params.vocab().size);
  double surrogate = 0.0, entropy = 0.0;
  for (std::size_t n = 0; n < terms.size(); ++n) {
    const TokenLossTerm& term = terms[n];
    if (term.clipped) ++out.clipped;
    const TokenDistribution& dist = dists[n];
    surrogate += term.mask_weight *
                 token_objective(term, bounds.eps_low, bounds.eps_high, config.clip_mode);
    // d/dz of the surrogate is A * r * (onehot - pi) while the unclipped
    // branch is active and zero once clipped.
    double coeff = 0.0;
    if (term.mask_weight != 0.0 && !term.clipped) {
      coeff += term.mask_weight * term.advantage * term.ratio;
    }
    if (term.penalized) coeff -= config.kl_coef;
    if (alpha != 0.0) entropy += dist.entropy();
    if (coeff == 0.0 && alpha == 0.0) continue;

    auto [it, inserted] = out.grads.try_emplace(keys[n], vsize, 0.0);
    std::vector<double>& g = it->second;
    if (coeff != 0.0) {
      for (std::size_t v = 0; v < vsize; ++v) {
        const double onehot = static_cast<TokenId>(v) == sampled[n] ? 1.0 : 0.0;
        g[v] += norm * coeff * (onehot - dist.probs[v]);
      }
    }
    if (alpha != 0.0) {
      const auto eg = entropy_grad_wrt_logits(dist);
      for (std::size_t v = 0; v < vsize; ++v) g[v] += norm * alpha * eg[v];
    }
  }
  out.objective = norm * (surrogate + alpha * entropy) -
                  norm * kl_cov_penalty(terms, old_lp, config.kl_coef);
  return out;
}

namespace {

void apply_gradient(PolicyParams& params, const ShardGradient& sg,
                    double learning_rate, std::size_t shard_index) {
  for (const auto& [key, g] : sg.grads) {
    for (double x : g) {
      if (!std::isfinite(x)) {
        throw Error(ErrorCode::kNonFiniteGradient,
                    "non-finite gradient in shard " + std::to_string(shard_index));
      }
    }
  }
  for (const auto& [key, g] : sg.grads) {
    std::vector<double>& z = params.mutable_logits(key);
    for (std::size_t v = 0; v < z.size(); ++v) {
      z[v] += learning_rate * g[v];
      if (!std::isfinite(z[v])) {
        throw Error(ErrorCode::kNonFiniteGradient,
                    "non-finite logit after update in shard " +
                        std::to_string(shard_index));
      }
    }
  }
}

}  // namespace

MetricRecord train_step(PolicyParams& params, std::span<const RolloutGroup> batch,
                        const TrainerConfig& config, ControllerState& controller,
                        const StepContext& ctx) {
  if (batch.empty() || batch.size() % static_cast<std::size_t>(config.n_update) != 0) {
    throw Error(ErrorCode::kConfiguration,
                "batch size must be a positive multiple of n_update");
  }
  MetricRecord rec;
  rec.step = ctx.step;

  double reward_sum = 0.0, entropy_sum = 0.0;
  std::size_t responses = 0;
  for (const auto& group : batch) {
    for (std::size_t i = 0; i < group.responses.size(); ++i) {
      reward_sum += group.rewards[i];
      entropy_sum += group.entropies[i];
      ++responses;
    }
  }
  rec.mean_reward = responses ? reward_sum / static_cast<double>(responses) : 0.0;
  rec.mean_entropy = responses ? entropy_sum / static_cast<double>(responses) : 0.0;

  double alpha = 0.0;
  switch (config.ent_reg) {
    case EntRegMode::kNone: break;
    case EntRegMode::kFixed: alpha = config.alpha; break;
    case EntRegMode::kAdaptive: {
      auto [a, next] = entropy_reg_coefficient(controller, rec.mean_entropy);
      alpha = a;
      controller = next;
      break;
    }
  }
  rec.alpha_k = alpha;
  rec.lambda = lambda_schedule(config.variant, ctx.step, ctx.total_steps,
                               ctx.epoch, ctx.total_epochs);

  const std::size_t shard_size = batch.size() / static_cast<std::size_t>(config.n_update);
  std::size_t tokens = 0, clipped = 0;
  for (std::size_t s = 0; s < static_cast<std::size_t>(config.n_update); ++s) {
    const auto shard = batch.subspan(s * shard_size, shard_size);
    const auto mask_seed = derive_seed(config.seed, static_cast<std::uint64_t>(ctx.step),
                                       0x5AA5D000ULL + s);
    const auto sg = shard_gradient(params, shard, config, alpha, rec.lambda, mask_seed);
    apply_gradient(params, sg, config.learning_rate, s);
    tokens += sg.tokens;
    clipped += sg.clipped;
  }
  rec.clip_fraction =
      tokens ? static_cast<double>(clipped) / static_cast<double>(tokens) : 0.0;
  return rec;
}

std::uint64_t prompt_seed(std::uint64_t master_seed, std::int64_t step,
                          std::size_t prompt_index) {
  return derive_seed(master_seed, static_cast<std::uint64_t>(step), prompt_index);
}

RolloutGroup rollout_group(const PolicyParams& params, const Prompt& prompt,
                           const TrainerConfig& config, std::uint64_t seed) {
  RolloutGroup g;
  g.prompt = prompt;
  const auto G = static_cast<std::size_t>(config.group_size);
  g.responses.reserve(G);
  for (std::size_t j = 0; j < G; ++j) {
    g.responses.push_back(sample_response(params, prompt.tokens,
                                          config.max_response_len,
                                          derive_seed(seed, j)));
    const TokenSeq& r = g.responses.back();
    g.rewards.push_back(verify(prompt, r).value);
    g.old_logprobs.push_back(sequence_logprob(params, prompt.tokens, r));
    g.entropies.push_back(response_entropy(params, prompt.tokens, r));
  }
  g.advantages = compute_advantages(g.rewards);
  return g;
}

namespace {

std::vector<RolloutGroup> collect_rollouts(const PolicyParams& params,
                                           const std::vector<const Prompt*>& prompts,
                                           const TrainerConfig& config,
                                           std::uint64_t seed, std::int64_t step) {
  std::vector<RolloutGroup> groups(prompts.size());
  auto work = [&](std::size_t begin, std::size_t stride) {
    for (std::size_t i = begin; i < prompts.size(); i += stride) {
      groups[i] = rollout_group(params, *prompts[i], config, prompt_seed(seed, step, i));
    }
  };
  const auto workers = std::min<std::size_t>(static_cast<std::size_t>(config.threads),
                                             prompts.size());
  if (workers <= 1) {
    work(0, 1);
    return groups;
  }
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(workers);
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&, w] {
      try {
        work(w, workers);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
  return groups;
}

void add_diversity(MetricRecord& rec, const std::vector<RolloutGroup>& groups,
                   int ngram_order) {
  double ngram = 0.0, bleu = 0.0;
  for (const auto& g : groups) {
    ngram += ngram_diversity(g.responses, ngram_order);
    bleu += self_bleu(g.responses);
  }
  const auto n = static_cast<double>(groups.size());
  rec.ngram_diversity = ngram / n;
  rec.self_bleu = bleu / n;
}

}  // namespace

TrainResult train_run(const TrainerConfig& config, const std::vector<Prompt>& pool,
                      std::uint64_t seed, const StepObserver& observer) {
  config.validate();
  if (pool.empty()) throw Error(ErrorCode::kEmptyPool, "training pool is empty");
  const Vocab vocab = pool.front().task.vocab;
  PolicyParams params(vocab, config.context_order);
  TrainResult result{{}, params, params};

  const auto batch = static_cast<std::size_t>(config.rollout_batch);
  const std::int64_t steps_per_epoch =
      config.steps_per_epoch > 0
          ? config.steps_per_epoch
          : std::max<std::int64_t>(1, static_cast<std::int64_t>(pool.size() / batch));
  const std::int64_t total_steps = steps_per_epoch * config.epochs;
  ControllerState controller = initial_controller(config);
  EmaTracker ema(config.ema_phi);

  TrainerConfig step_config = config;
  step_config.seed = seed;

  std::int64_t step = 0;
  std::vector<std::size_t> order(pool.size());
  for (int epoch = 1; epoch <= config.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng shuffler(derive_seed(seed, 0xE90C4ULL, static_cast<std::uint64_t>(epoch)));
    shuffler.shuffle(order);
    std::size_t cursor = 0;
    for (std::int64_t s = 0; s < steps_per_epoch; ++s) {
      ++step;
      std::vector<const Prompt*> prompts;
      prompts.reserve(batch);
      for (std::size_t i = 0; i < batch; ++i) {
        prompts.push_back(&pool[order[cursor % order.size()]]);
        ++cursor;
      }
      const auto groups = collect_rollouts(params, prompts, config, seed, step);
      MetricRecord rec = train_step(params, groups, step_config, controller,
                                    {step, total_steps, epoch, config.epochs});
      rec.ema_entropy = ema.push(rec.mean_entropy);
      if (config.diversity_interval > 0 &&
          (step == 1 || step % config.diversity_interval == 0)) {
        add_diversity(rec, groups, config.ngram_order);
      }
      if (observer) observer(rec, groups);
      result.records.push_back(rec);
    }
  }
  result.final_params = std::move(params);
  return result;
}

}  // namespace entlab
