#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include <gtest/gtest.h>

#include "entlab/error.hpp"
#include "entlab/grpo.hpp"
#include "entlab/random.hpp"

using namespace entlab;

namespace {

TaskSpec copy_spec(int V = 4, int lo = 1, int hi = 2) {
  return TaskSpec{TaskKind::kCopy, lo, hi, Vocab::standard(V)};
}

TrainerConfig small_config() {
  TrainerConfig c;
  c.group_size = 4;
  c.rollout_batch = 8;
  c.learning_rate = 1.0;
  c.context_order = 4;
  c.max_response_len = 4;
  c.steps_per_epoch = 10;
  c.diversity_interval = 5;
  return c;
}

// A policy with random logits on every context the rollouts can reach.
PolicyParams random_policy(const TaskSpec& spec, int order, std::uint64_t seed,
                           const std::vector<Prompt>& prompts, int max_len) {
  PolicyParams p(spec.vocab, order);
  Rng rng(seed);
  for (const auto& pr : prompts) {
    for (std::uint64_t s = 0; s < 8; ++s) {
      const auto r = sample_response(p, pr.tokens, max_len, derive_seed(seed, s));
      for (std::size_t t = 0; t <= r.size(); ++t) {
        const auto key = p.key_at(pr.tokens, r, std::min(t, r.size()));
        if (p.table().count(key)) continue;
        std::vector<double> z(static_cast<std::size_t>(spec.vocab.size));
        for (double& x : z) x = 2.0 * rng.uniform() - 1.0;
        p.set_logits(key, z);
      }
    }
  }
  return p;
}

std::vector<RolloutGroup> make_batch(const PolicyParams& p, const std::vector<Prompt>& prompts,
                                     const TrainerConfig& c, std::uint64_t seed) {
  std::vector<RolloutGroup> batch;
  for (std::size_t i = 0; i < prompts.size(); ++i) {
    batch.push_back(rollout_group(p, prompts[i], c, prompt_seed(seed, 1, i)));
  }
  return batch;
}

}  // namespace

TEST(Advantages, Examples) {
  const std::vector<double> a{1, 1, 0, 0};
  EXPECT_EQ(compute_advantages(a), (std::vector<double>{1, 1, -1, -1}));
  const std::vector<double> b{1, 1, 1, 1};
  EXPECT_EQ(compute_advantages(b), (std::vector<double>{0, 0, 0, 0}));
  const std::vector<double> c{1, 0, 0, 0};
  const auto adv = compute_advantages(c);
  // mean 0.25, population std sqrt(3)/4.
  EXPECT_NEAR(adv[0], 0.75 / (std::sqrt(3.0) / 4.0), 1e-12);
  EXPECT_NEAR(adv[0], 1.732051, 1e-6);
  for (int i = 1; i < 4; ++i) EXPECT_NEAR(adv[static_cast<std::size_t>(i)], -0.577350, 1e-6);
}

TEST(Advantages, GroupTooSmall) {
  const std::vector<double> one{1.0};
  try {
    compute_advantages(one);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kGroupTooSmall);
  }
}

TEST(Advantages, NormalizedMoments) {
  Rng rng(31);
  for (int t = 0; t < 1000; ++t) {
    const auto G = 2 + rng.below(15);
    std::vector<double> r(G);
    for (double& x : r) x = rng.uniform() < 0.5 ? 0.0 : 1.0 + rng.uniform();
    r[0] = 0.0;
    r[1] = 2.5;
    const auto a = compute_advantages(r);
    const double mean = std::accumulate(a.begin(), a.end(), 0.0) / static_cast<double>(G);
    double var = 0.0;
    for (double x : a) var += (x - mean) * (x - mean);
    EXPECT_LT(std::abs(mean), 1e-9);
    EXPECT_LT(std::abs(std::sqrt(var / static_cast<double>(G)) - 1.0), 1e-6);
  }
}

TEST(TokenObjective, Examples) {
  TokenLossTerm t;
  t.ratio = 1.35;
  t.advantage = 1.0;
  EXPECT_DOUBLE_EQ(token_objective(t, 0.2, 0.28, ClipMode::kDefault), 1.28);
  t.ratio = 0.7;
  t.advantage = -1.0;
  EXPECT_DOUBLE_EQ(token_objective(t, 0.2, 0.2, ClipMode::kDefault), -0.8);
  t.ratio = 3.0;
  t.advantage = -2.0;
  EXPECT_DOUBLE_EQ(token_objective(t, 0.2, 0.2, ClipMode::kClipFree), -6.0);
  t.ratio = 0.0;
  try {
    token_objective(t, 0.2, 0.2, ClipMode::kDefault);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kNumericalDomain);
  }
}

TEST(TokenObjective, MonotoneAndFlatAboveUpperBound) {
  for (double adv : {0.3, 1.0, 2.5}) {
    double prev = -1e300;
    for (double r = 0.05; r < 3.0; r += 0.01) {
      TokenLossTerm t;
      t.ratio = r;
      t.advantage = adv;
      const double v = token_objective(t, 0.2, 0.28, ClipMode::kDefault);
      EXPECT_GE(v, prev);
      if (r >= 1.28) EXPECT_DOUBLE_EQ(v, 1.28 * adv);
      prev = v;
      EXPECT_DOUBLE_EQ(token_objective(t, 0.2, 0.28, ClipMode::kClipFree), r * adv);
    }
  }
}

TEST(ClipBounds, Modes) {
  TrainerConfig c;
  auto b = resolve_clip_bounds(c);
  EXPECT_EQ(b.eps_low, 0.2);
  EXPECT_EQ(b.eps_high, 0.2);
  c.clip_mode = ClipMode::kClipHigher;
  EXPECT_EQ(resolve_clip_bounds(c).eps_high, 0.28);
  c.clip_mode = ClipMode::kClipLower;
  EXPECT_EQ(resolve_clip_bounds(c).eps_low, 0.28);
  c.clip_mode = ClipMode::kClipTighter;
  EXPECT_EQ(resolve_clip_bounds(c).eps_low, 0.12);
  EXPECT_TRUE(is_clipped(1.3, 1.0, 0.2, 0.28, ClipMode::kDefault));
  EXPECT_FALSE(is_clipped(1.3, -1.0, 0.2, 0.28, ClipMode::kDefault));
  EXPECT_TRUE(is_clipped(0.7, -1.0, 0.2, 0.28, ClipMode::kDefault));
  EXPECT_FALSE(is_clipped(0.7, -1.0, 0.2, 0.28, ClipMode::kClipFree));
}

TEST(VariantMask, SignMasks) {
  std::vector<TokenLossTerm> terms(3);
  terms[0].advantage = 1.0;
  terms[1].advantage = -1.0;
  terms[2].advantage = 0.0;
  auto weights = [](const std::vector<TokenLossTerm>& ts) {
    std::vector<double> w;
    for (const auto& t : ts) w.push_back(t.mask_weight);
    return w;
  };
  EXPECT_EQ(weights(apply_variant_mask(terms, {Variant::kAdvNonposOnly}, 1.0, 0)),
            (std::vector<double>{0, 1, 1}));
  EXPECT_EQ(weights(apply_variant_mask(terms, {Variant::kAdvNonnegOnly}, 1.0, 0)),
            (std::vector<double>{1, 0, 1}));
  EXPECT_EQ(weights(apply_variant_mask(terms, {Variant::kNone}, 1.0, 0)),
            (std::vector<double>{1, 1, 1}));
  std::vector<TokenLossTerm> two(2);
  two[0].advantage = 2.0;
  two[1].advantage = -2.0;
  EXPECT_EQ(weights(apply_variant_mask(two, {Variant::kProgAdvReweight1}, 0.5, 0)),
            (std::vector<double>{0.5, 1}));
  EXPECT_EQ(weights(apply_variant_mask(two, {Variant::kProgAdvReweight2}, 0.5, 0)),
            (std::vector<double>{0.5, 1}));
}

TEST(VariantMask, RandPosClipExactCount) {
  std::vector<TokenLossTerm> terms(1000);
  for (auto& t : terms) t.advantage = 1.0;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto out = apply_variant_mask(terms, {Variant::kRandPosClip, 0.5}, 1.0, seed);
    const auto zeroed = std::count_if(out.begin(), out.end(),
                                      [](const auto& t) { return t.mask_weight == 0.0; });
    EXPECT_EQ(zeroed, 500);
  }
  // Only positive-advantage tokens are eligible; floor of fraction * count.
  std::vector<TokenLossTerm> mixed(10);
  for (std::size_t i = 0; i < 10; ++i) mixed[i].advantage = i < 7 ? 1.0 : -1.0;
  const auto out = apply_variant_mask(mixed, {Variant::kRandPosClip, 0.5}, 1.0, 3);
  int zeroed = 0;
  for (std::size_t i = 0; i < 10; ++i) {
    if (out[i].mask_weight == 0.0) {
      ++zeroed;
      EXPECT_LT(i, 7u);
    }
  }
  EXPECT_EQ(zeroed, 3);
  EXPECT_EQ(apply_variant_mask(mixed, {Variant::kRandPosClip, 0.5}, 1.0, 3)[0].mask_weight,
            out[0].mask_weight);
}

TEST(VariantMask, CovarianceSelection) {
  Rng rng(5);
  std::vector<TokenLossTerm> terms(200);
  for (auto& t : terms) {
    t.logprob = -3.0 * rng.uniform();
    t.advantage = 2.0 * rng.uniform() - 1.0;
    t.ratio = 0.5 + rng.uniform();
  }
  // Brute-force oracle for the top-4 centered products.
  double ml = 0, ma = 0;
  for (const auto& t : terms) {
    ml += t.logprob / 200.0;
    ma += t.advantage / 200.0;
  }
  std::vector<std::pair<double, std::size_t>> cov;
  for (std::size_t i = 0; i < terms.size(); ++i) {
    cov.emplace_back((terms[i].logprob - ml) * (terms[i].advantage - ma), i);
  }
  std::sort(cov.begin(), cov.end(), [](auto& a, auto& b) { return a.first > b.first; });
  std::vector<std::size_t> expected;
  for (int i = 0; i < 4; ++i) expected.push_back(cov[static_cast<std::size_t>(i)].second);
  std::sort(expected.begin(), expected.end());
  EXPECT_EQ(top_covariance_tokens(terms, 0.02), expected);

  const auto clipped = apply_variant_mask(terms, {Variant::kClipCov, 0.02}, 1.0, 0);
  const auto kl = apply_variant_mask(terms, {Variant::kKlCov, 0.02}, 1.0, 0);
  for (std::size_t i = 0; i < terms.size(); ++i) {
    const bool sel = std::binary_search(expected.begin(), expected.end(), i);
    EXPECT_EQ(clipped[i].mask_weight, sel ? 0.0 : 1.0);
    EXPECT_EQ(kl[i].penalized, sel);
    EXPECT_EQ(kl[i].mask_weight, 1.0);
    EXPECT_EQ(clipped[i].ratio, terms[i].ratio);
    EXPECT_EQ(clipped[i].advantage, terms[i].advantage);
  }
  EXPECT_TRUE(top_covariance_tokens(terms, 0.002).empty());
}

TEST(LambdaSchedule, Examples) {
  EXPECT_DOUBLE_EQ(lambda_schedule(Variant::kProgAdvReweight2, 7, 100, 3, 5), 0.5);
  EXPECT_EQ(lambda_schedule(Variant::kProgAdvReweight1, 25, 100, 1, 1), 0.0);
  EXPECT_EQ(lambda_schedule(Variant::kProgAdvReweight1, 50, 100, 1, 1), 0.0);
  EXPECT_DOUBLE_EQ(lambda_schedule(Variant::kProgAdvReweight1, 75, 100, 1, 1), 0.5);
  EXPECT_EQ(lambda_schedule(Variant::kProgAdvReweight1, 100, 100, 1, 1), 1.0);
  EXPECT_EQ(lambda_schedule(Variant::kNone, 3, 100, 1, 1), 1.0);
  try {
    lambda_schedule(Variant::kProgAdvReweight2, 1, 10, 1, 1);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kConfiguration);
  }
}

TEST(Controller, Examples) {
  ControllerState s{0.01, 0.0, 0.2, 0.005};
  auto [a1, n1] = entropy_reg_coefficient(s, 0.15);
  EXPECT_DOUBLE_EQ(a1, 0.01);
  EXPECT_DOUBLE_EQ(n1.c, 0.015);
  auto [a2, n2] = entropy_reg_coefficient(s, 0.5);
  EXPECT_EQ(a2, 0.0);
  EXPECT_DOUBLE_EQ(n2.c, 0.005);
  ControllerState small{0.002, 0.0, 0.2, 0.005};
  EXPECT_EQ(entropy_reg_coefficient(small, 0.5).second.c, 0.0);
}

TEST(Controller, BoundedUnderOscillation) {
  const double c0 = 0.01, beta = 0.005;
  ControllerState s{c0, 0.0, 0.2, beta};
  Rng rng(9);
  // c never exceeds c0 plus beta times the largest surplus of below-target
  // steps over any window (max-subarray of the +-1 sequence).
  double best = 0.0, cur = 0.0, max_c = 0.0;
  for (int k = 0; k < 2000; ++k) {
    const double h = 0.2 + 0.05 * std::sin(0.3 * k) + 0.02 * (rng.uniform() - 0.5);
    cur = std::max(0.0, cur + (h < 0.2 ? 1.0 : -1.0));
    best = std::max(best, cur);
    s = entropy_reg_coefficient(s, h).second;
    max_c = std::max(max_c, s.c);
    EXPECT_GE(s.c, 0.0);
  }
  EXPECT_LE(max_c, c0 + beta * best + 1e-12);
  EXPECT_LT(max_c, 0.25);
}

TEST(KlCovPenalty, Examples) {
  std::vector<TokenLossTerm> terms(2);
  terms[0].logprob = -1.0;
  terms[1].logprob = -0.7;
  terms[1].penalized = true;
  const std::vector<double> same{-1.0, -0.7};
  EXPECT_EQ(kl_cov_penalty(terms, same, 1.0), 0.0);
  const std::vector<double> old{-1.0, -1.0};
  EXPECT_NEAR(kl_cov_penalty(terms, old, 1.0), 0.3, 1e-12);
  terms[1].penalized = false;
  EXPECT_EQ(kl_cov_penalty(terms, old, 1.0), 0.0);
}

TEST(Config, Validation) {
  TrainerConfig c;
  EXPECT_NO_THROW(c.validate());
  auto expect_field = [](TrainerConfig bad, const std::string& field) {
    try {
      bad.validate();
      FAIL() << field;
    } catch (const Error& e) {
      EXPECT_EQ(e.code(), ErrorCode::kConfiguration);
      EXPECT_EQ(std::string(e.what()).rfind(field, 0), 0u) << e.what();
    }
  };
  auto b = c;
  b.group_size = 1;
  expect_field(b, "group_size");
  b = c;
  b.eps_low = 1.0;
  expect_field(b, "eps_low");
  b = c;
  b.n_update = 3;
  expect_field(b, "rollout_batch");
  b = c;
  b.variant = Variant::kClipCov;
  b.fraction = 0.0;
  expect_field(b, "fraction");
  b = c;
  b.variant = Variant::kProgAdvReweight2;
  expect_field(b, "epochs");
  EXPECT_EQ(parse_variant(to_string(Variant::kKlCov)), Variant::kKlCov);
  EXPECT_EQ(parse_clip_mode("clip_free"), ClipMode::kClipFree);
  EXPECT_EQ(parse_ent_reg("adaptive"), EntRegMode::kAdaptive);
  EXPECT_THROW(parse_variant("adv_positive"), Error);
}

TEST(Rollout, GroupContents) {
  const auto spec = copy_spec(5, 1, 3);
  const auto prompts = generate_pool(spec, 4, 1);
  auto c = small_config();
  const auto p = random_policy(spec, c.context_order, 3, prompts, c.max_response_len);
  const auto g = rollout_group(p, prompts[0], c, 77);
  ASSERT_EQ(g.responses.size(), 4u);
  for (std::size_t i = 0; i < 4; ++i) {
    EXPECT_EQ(g.old_logprobs[i], sequence_logprob(p, prompts[0].tokens, g.responses[i]));
    EXPECT_DOUBLE_EQ(g.entropies[i], response_entropy(p, prompts[0].tokens, g.responses[i]));
    EXPECT_EQ(g.rewards[i], verify(prompts[0], g.responses[i]).value);
    EXPECT_EQ(g.responses[i], sample_response(p, prompts[0].tokens, c.max_response_len,
                                              derive_seed(77, i)));
  }
  EXPECT_EQ(g.advantages, compute_advantages(g.rewards));
}

TEST(ShardGradient, FirstShardRatiosAreOne) {
  const auto spec = copy_spec(5, 1, 3);
  const auto prompts = generate_pool(spec, 8, 2);
  auto c = small_config();
  const auto p = random_policy(spec, c.context_order, 4, prompts, c.max_response_len);
  const auto batch = make_batch(p, prompts, c, 5);
  const auto sg = shard_gradient(p, batch, c, 0.0, 1.0, 0);
  EXPECT_EQ(sg.clipped, 0u);
  // On-policy, the objective is the mean of A over tokens.
  double sum = 0.0;
  std::size_t n = 0;
  for (const auto& g : batch) {
    for (std::size_t i = 0; i < g.responses.size(); ++i) {
      for (std::size_t t = 0; t < g.responses[i].size(); ++t) {
        const auto key = p.key_at(g.prompt.tokens, g.responses[i], t);
        const double ratio = std::exp(token_logprob(p.logits(key), g.responses[i][t]) -
                                      g.old_logprobs[i][t]);
        EXPECT_NEAR(ratio, 1.0, 1e-12);
        sum += g.advantages[i];
        ++n;
      }
    }
  }
  EXPECT_EQ(sg.tokens, n);
  EXPECT_NEAR(sg.objective, sum / static_cast<double>(n), 1e-12);
}

TEST(ShardGradient, MatchesFiniteDifferencesOffPolicy) {
  const auto spec = copy_spec(5, 1, 3);
  const auto prompts = generate_pool(spec, 4, 3);
  for (auto variant : {Variant::kNone, Variant::kKlCov, Variant::kProgAdvReweight1}) {
    for (auto mode : {ClipMode::kDefault, ClipMode::kClipFree}) {
      auto c = small_config();
      c.rollout_batch = 4;
      c.variant = variant;
      c.clip_mode = mode;
      c.fraction = 0.2;
      const auto old = random_policy(spec, c.context_order, 6, prompts, c.max_response_len);
      const auto batch = make_batch(old, prompts, c, 8);
      // Move the current policy away from the rollout policy so ratios and
      // clipping are exercised.
      PolicyParams cur = old;
      Rng rng(10);
      for (const auto& [key, z] : old.table()) {
        auto moved = z;
        for (double& x : moved) x += 0.6 * (rng.uniform() - 0.5);
        cur.set_logits(key, moved);
      }
      const double alpha = 0.3, lambda = 0.4;
      const auto sg = shard_gradient(cur, batch, c, alpha, lambda, 1);
      ASSERT_FALSE(sg.grads.empty());
      const double h = 1e-6;
      for (const auto& [key, g] : sg.grads) {
        for (std::size_t v = 0; v < g.size(); ++v) {
          PolicyParams up = cur, down = cur;
          up.mutable_logits(key)[v] += h;
          down.mutable_logits(key)[v] -= h;
          const double fd = (shard_gradient(up, batch, c, alpha, lambda, 1).objective -
                             shard_gradient(down, batch, c, alpha, lambda, 1).objective) /
                            (2 * h);
          const double scale = std::max({std::abs(fd), std::abs(g[v]), 1e-6});
          EXPECT_LE(std::abs(fd - g[v]) / scale, 1e-4)
              << to_string(variant) << ' ' << to_string(mode) << " v " << v;
        }
      }
    }
  }
}

TEST(TrainStep, ZeroVarianceLeavesParamsUnchanged) {
  const auto spec = copy_spec(4, 1, 2);
  const auto prompts = generate_pool(spec, 8, 4);
  auto c = small_config();
  PolicyParams p(spec.vocab, c.context_order);
  auto batch = make_batch(p, prompts, c, 2);
  for (auto& g : batch) {
    std::fill(g.rewards.begin(), g.rewards.end(), 1.0);
    g.advantages = compute_advantages(g.rewards);
  }
  const PolicyParams before = p;
  ControllerState ctl = initial_controller(c);
  const auto rec = train_step(p, batch, c, ctl, {1, 10, 1, 1});
  EXPECT_EQ(p, before);
  EXPECT_EQ(rec.mean_reward, 1.0);
}

TEST(TrainStep, PositiveAdvantageRaisesProbability) {
  const auto spec = copy_spec(4, 1, 1);
  Prompt pr;
  pr.task = spec;
  pr.tokens = {0, spec.separator()};
  auto c = small_config();
  c.group_size = 2;
  c.rollout_batch = 1;
  c.learning_rate = 1e-3;
  PolicyParams p(spec.vocab, c.context_order);
  RolloutGroup g;
  g.prompt = pr;
  g.responses = {TokenSeq{0}, TokenSeq{1}};
  g.rewards = {1.0, 0.0};
  g.advantages = compute_advantages(g.rewards);
  for (const auto& r : g.responses) {
    g.old_logprobs.push_back(sequence_logprob(p, pr.tokens, r));
    g.entropies.push_back(response_entropy(p, pr.tokens, r));
  }
  const double before = distribution(p, pr.tokens).probs[0];
  ControllerState ctl = initial_controller(c);
  std::vector<RolloutGroup> batch{g};
  train_step(p, batch, c, ctl, {1, 1, 1, 1});
  EXPECT_GT(distribution(p, pr.tokens).probs[0], before);
  EXPECT_LT(distribution(p, pr.tokens).probs[1], 0.25);
}

TEST(TrainStep, ShardsAreSequentialUpdates) {
  const auto spec = copy_spec(5, 1, 2);
  const auto prompts = generate_pool(spec, 256, 9);
  auto c = small_config();
  c.group_size = 2;
  c.rollout_batch = 256;
  c.n_update = 4;
  c.learning_rate = 3.0;
  c.variant = Variant::kRandPosClip;
  c.fraction = 0.3;
  c.seed = 4;
  PolicyParams p(spec.vocab, c.context_order);
  const auto batch = make_batch(p, prompts, c, 3);

  // Oracle: four manual updates on consecutive 64-prompt shards.
  PolicyParams manual = p;
  for (std::size_t s = 0; s < 4; ++s) {
    const auto shard = std::span<const RolloutGroup>(batch).subspan(s * 64, 64);
    const auto sg = shard_gradient(manual, shard, c, 0.0, 1.0,
                                   derive_seed(c.seed, 1, 0x5AA5D000ULL + s));
    for (const auto& [key, g] : sg.grads) {
      auto& z = manual.mutable_logits(key);
      for (std::size_t v = 0; v < z.size(); ++v) z[v] += c.learning_rate * g[v];
    }
  }
  ControllerState ctl = initial_controller(c);
  const auto rec = train_step(p, batch, c, ctl, {1, 1, 1, 1});
  EXPECT_EQ(p, manual);
  EXPECT_GE(rec.clip_fraction, 0.0);

  // A single-shard step is a different update.
  PolicyParams one(spec.vocab, c.context_order);
  auto c1 = c;
  c1.n_update = 1;
  ControllerState ctl1 = initial_controller(c1);
  train_step(one, batch, c1, ctl1, {1, 1, 1, 1});
  EXPECT_NE(one, manual);
}

TEST(TrainStep, NonFiniteAbortNamesShard) {
  const auto spec = copy_spec(4, 1, 2);
  const auto prompts = generate_pool(spec, 8, 1);
  auto c = small_config();
  c.n_update = 2;
  PolicyParams p(spec.vocab, c.context_order);
  auto batch = make_batch(p, prompts, c, 1);
  batch[5].advantages[0] = std::numeric_limits<double>::quiet_NaN();
  const PolicyParams before = p;
  ControllerState ctl = initial_controller(c);
  try {
    train_step(p, batch, c, ctl, {1, 1, 1, 1});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kNonFiniteGradient);
    EXPECT_NE(std::string(e.what()).find("shard 1"), std::string::npos) << e.what();
  }
}

TEST(TrainStep, AdaptiveControllerUsesBatchEntropy) {
  const auto spec = copy_spec(4, 1, 2);
  const auto prompts = generate_pool(spec, 8, 1);
  auto c = small_config();
  c.ent_reg = EntRegMode::kAdaptive;
  c.delta = 2.0;  // above ln 4, so the regularizer is active
  c.c0 = 0.1;
  c.beta = 0.05;
  PolicyParams p(spec.vocab, c.context_order);
  const auto batch = make_batch(p, prompts, c, 1);
  ControllerState ctl = initial_controller(c);
  const auto rec = train_step(p, batch, c, ctl, {1, 1, 1, 1});
  EXPECT_DOUBLE_EQ(rec.alpha_k, 0.1);
  EXPECT_DOUBLE_EQ(ctl.c, 0.15);
  EXPECT_NEAR(rec.mean_entropy, std::log(4.0), 1e-12);
}

TEST(TrainRun, BookkeepingAndDeterminism) {
  const auto spec = copy_spec(4, 1, 2);
  const auto pool = generate_pool(spec, 40, 1);
  auto c = small_config();
  c.epochs = 2;
  const auto a = train_run(c, pool, 11);
  ASSERT_EQ(a.records.size(), 20u);
  for (std::size_t i = 0; i < a.records.size(); ++i) {
    EXPECT_EQ(a.records[i].step, static_cast<std::int64_t>(i + 1));
    EXPECT_EQ(a.records[i].ngram_diversity.has_value(), i == 0 || (i + 1) % 5 == 0);
  }
  const auto b = train_run(c, pool, 11);
  EXPECT_EQ(a.records, b.records);
  EXPECT_EQ(a.final_params, b.final_params);
  auto threaded = c;
  threaded.threads = 4;
  const auto t = train_run(threaded, pool, 11);
  EXPECT_EQ(a.records, t.records);
  EXPECT_EQ(a.final_params, t.final_params);
  EXPECT_NE(train_run(c, pool, 12).records, a.records);
}

TEST(TrainRun, EmaTracksMeanEntropy) {
  const auto spec = copy_spec(4, 1, 2);
  const auto pool = generate_pool(spec, 40, 2);
  auto c = small_config();
  const auto r = train_run(c, pool, 3);
  EXPECT_EQ(r.records[0].ema_entropy, r.records[0].mean_entropy);
  for (std::size_t i = 1; i < r.records.size(); ++i) {
    EXPECT_DOUBLE_EQ(r.records[i].ema_entropy,
                     0.6 * r.records[i - 1].ema_entropy + 0.4 * r.records[i].mean_entropy);
  }
}

TEST(TrainRun, ProgAdvReweight2LambdaPerEpoch) {
  const auto spec = copy_spec(4, 1, 2);
  const auto pool = generate_pool(spec, 40, 3);
  auto c = small_config();
  c.variant = Variant::kProgAdvReweight2;
  c.epochs = 3;
  c.steps_per_epoch = 4;
  const auto r = train_run(c, pool, 1);
  ASSERT_EQ(r.records.size(), 12u);
  for (std::size_t i = 0; i < 12; ++i) {
    EXPECT_EQ(r.records[i].lambda, 0.5 * static_cast<double>(i / 4));
  }
}

TEST(TrainRun, EmptyPool) {
  try {
    train_run(small_config(), {}, 1);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kEmptyPool);
  }
}

TEST(Advantages, EqualRewardsAreExactlyZero) {
  for (double v : {0.37, 0.1, 1e-300, -2.5}) {
    const std::vector<double> r(8, v);
    for (double a : compute_advantages(r)) EXPECT_EQ(a, 0.0) << v;
  }
}
