#include "entlab/harness.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <istream>
#include <map>
#include <ostream>
#include <sstream>

#include <json.hpp>

#include "entlab/error.hpp"
#include "entlab/random.hpp"

namespace entlab {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::ofstream open_out(const fs::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorCode::kIo, "cannot write " + path.string());
  return out;
}

std::string fmt(double x, int digits = 4) {
  std::ostringstream ss;
  ss.setf(std::ios::fixed);
  ss.precision(digits);
  ss << x;
  return ss.str();
}

}  // namespace

std::string rollout_record(std::int64_t step, const RolloutGroup& group,
                           std::size_t index) {
  json j = {
      {"step", step},
      {"prompt_id", group.prompt.id},
      {"response", group.responses.at(index)},
      {"reward", group.rewards.at(index)},
      {"logprobs", group.old_logprobs.at(index)},
  };
  return j.dump();
}

RolloutRecord parse_rollout_record(const std::string& line) {
  try {
    const json j = json::parse(line);
    RolloutRecord r;
    r.step = j.at("step").get<std::int64_t>();
    r.prompt_id = j.at("prompt_id").get<std::int64_t>();
    r.response = j.at("response").get<TokenSeq>();
    r.reward = j.at("reward").get<double>();
    r.logprobs = j.at("logprobs").get<std::vector<double>>();
    if (r.logprobs.size() != r.response.size()) {
      throw Error(ErrorCode::kParse, "rollout record: logprobs/response length mismatch");
    }
    return r;
  } catch (const json::exception& e) {
    throw Error(ErrorCode::kParse, std::string("rollout record: ") + e.what());
  }
}

RunOutput run_experiment(const ExperimentConfig& config, const std::string& out_dir,
                         bool dump_rollouts) {
  config.validate();
  const fs::path dir(out_dir);
  fs::create_directories(dir);

  {
    auto snapshot = open_out(dir / "config.snapshot");
    snapshot << config_snapshot(config);
  }

  std::vector<Prompt> pool = config.build_pool();
  auto metrics = open_out(dir / "metrics.jsonl");
  std::ofstream rollouts;
  if (dump_rollouts) rollouts = open_out(dir / "rollouts.jsonl");

  auto observer = [&](const MetricRecord& rec, std::span<const RolloutGroup> groups) {
    metrics << to_jsonl(rec) << '\n';
    metrics.flush();
    if (dump_rollouts) {
      for (const auto& g : groups) {
        for (std::size_t i = 0; i < g.responses.size(); ++i) {
          rollouts << rollout_record(rec.step, g, i) << '\n';
        }
      }
      rollouts.flush();
    }
  };
  RunOutput out{train_run(config.trainer, pool, config.trainer.seed, observer),
                std::move(pool)};
  metrics.close();

  auto summary = open_out(dir / "summary.csv");
  write_summary_csv(summary, out.result.records);
  auto ckpt = open_out(dir / "policy.ckpt");
  write_policy(ckpt, out.result.final_params);

  auto report = open_out(dir / "report.txt");
  const auto& recs = out.result.records;
  report << "steps " << recs.size() << '\n'
         << "pool " << out.pool.size() << '\n'
         << "variant " << to_string(config.trainer.variant) << '\n'
         << "clip_mode " << to_string(config.trainer.clip_mode) << '\n'
         << "ent_reg " << to_string(config.trainer.ent_reg) << '\n'
         << "n_update " << config.trainer.n_update << '\n'
         << "seed " << config.trainer.seed << '\n';
  if (!recs.empty()) {
    report << "initial_entropy " << format_double(recs.front().mean_entropy) << '\n'
           << "final_entropy " << format_double(recs.back().mean_entropy) << '\n'
           << "final_ema_entropy " << format_double(recs.back().ema_entropy) << '\n'
           << "final_reward " << format_double(recs.back().mean_reward) << '\n';
  }
  report << "prompt_entropy_ratio "
         << format_double(prompt_entropy_ratio(out.result.final_params,
                                               out.result.initial, out.pool))
         << '\n';
  return out;
}

void rollout_metrics_csv(std::istream& rollouts, std::ostream& csv, int ngram_order) {
  // step -> prompt_id -> responses, plus per-step calibration input.
  std::map<std::int64_t, std::map<std::int64_t, std::vector<TokenSeq>>> groups;
  std::map<std::int64_t, std::vector<std::pair<double, double>>> calib;
  std::string line;
  while (std::getline(rollouts, line)) {
    if (line.empty()) continue;
    RolloutRecord r = parse_rollout_record(line);
    double lp = 0.0;
    for (double x : r.logprobs) lp += x;
    if (!r.logprobs.empty()) lp /= static_cast<double>(r.logprobs.size());
    calib[r.step].emplace_back(lp, r.reward);
    groups[r.step][r.prompt_id].push_back(std::move(r.response));
  }
  auto opt = [](const std::optional<double>& v) {
    return v ? format_double(*v) : std::string();
  };
  csv << "step,ngram_diversity,self_bleu,mean_logprob_correct,"
         "mean_logprob_incorrect,calibration_gap\n";
  for (const auto& [step, by_prompt] : groups) {
    double div = 0.0, bleu = 0.0;
    std::size_t n_div = 0, n_bleu = 0;
    for (const auto& [id, responses] : by_prompt) {
      div += ngram_diversity(responses, ngram_order);
      ++n_div;
      if (responses.size() >= 2) {
        bleu += self_bleu(responses);
        ++n_bleu;
      }
    }
    const auto cs = calibration_summary(calib.at(step));
    csv << step << ',' << format_double(div / static_cast<double>(n_div)) << ','
        << (n_bleu ? format_double(bleu / static_cast<double>(n_bleu)) : std::string())
        << ',' << opt(cs.mean_logprob_correct) << ',' << opt(cs.mean_logprob_incorrect)
        << ',' << opt(cs.gap) << '\n';
  }
}

namespace {

double rel_err(double analytic, double numeric) {
  const double scale = std::max({std::abs(analytic), std::abs(numeric), 1e-6});
  return std::abs(analytic - numeric) / scale;
}

double objective_value(const std::vector<double>& z, TokenId token, double adv) {
  return adv * token_logprob(z, token);
}

double entropy_value(const std::vector<double>& z) { return softmax(z).entropy(); }

}  // namespace

GradcheckReport gradcheck(std::uint64_t seed, int trials, bool corrupt_sign) {
  if (trials < 1) {
    throw Error(ErrorCode::kInvalidParameter, "gradcheck needs trials >= 1");
  }
  GradcheckReport rep;
  rep.trials = trials;
  const double h = kGradcheckStep;
  for (int t = 0; t < trials; ++t) {
    Rng rng(derive_seed(seed, static_cast<std::uint64_t>(t)));
    const auto V = static_cast<std::size_t>(2 + rng.below(11));
    std::vector<double> z(V);
    for (double& x : z) x = -3.0 + 6.0 * rng.uniform();
    const auto token = static_cast<TokenId>(rng.below(V));
    const double adv = -2.0 + 4.0 * rng.uniform();

    const TokenDistribution dist = softmax(z);
    auto g_obj = objective_grad_wrt_logits(dist, token, adv);
    if (corrupt_sign) {
      for (double& g : g_obj) g = -g;
    }
    const auto g_ent = entropy_grad_wrt_logits(dist);

    for (std::size_t v = 0; v < V; ++v) {
      auto zp = z, zm = z;
      zp[v] += h;
      zm[v] -= h;
      const double fd_obj =
          (objective_value(zp, token, adv) - objective_value(zm, token, adv)) / (2 * h);
      const double fd_ent = (entropy_value(zp) - entropy_value(zm)) / (2 * h);
      rep.max_rel_err_objective =
          std::max(rep.max_rel_err_objective, rel_err(g_obj[v], fd_obj));
      rep.max_rel_err_entropy =
          std::max(rep.max_rel_err_entropy, rel_err(g_ent[v], fd_ent));
    }
  }
  rep.passed = rep.max_rel_err_objective <= kGradcheckTolerance &&
               rep.max_rel_err_entropy <= kGradcheckTolerance;
  return rep;
}

ExperimentConfig preset_base_config(std::uint64_t seed) {
  ExperimentConfig c;
  c.task_kind = TaskKind::kCopy;
  c.vocab_size = 4;
  c.min_len = 1;
  c.max_len = 2;
  c.pool_size = 960;
  c.pool_seed = 42;
  TrainerConfig& t = c.trainer;
  t.group_size = 8;
  t.rollout_batch = 32;
  t.n_update = 1;
  t.learning_rate = 5.0;
  t.epochs = 1;
  t.steps_per_epoch = 300;
  t.max_response_len = 4;
  t.context_order = 8;
  t.diversity_interval = 10;
  t.seed = seed;
  return c;
}

double initial_batch_entropy(const ExperimentConfig& config) {
  const auto pool = config.build_pool();
  const PolicyParams params(config.task_spec().vocab, config.trainer.context_order);
  const auto n = std::min(pool.size(), static_cast<std::size_t>(config.trainer.rollout_batch));
  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const auto g = rollout_group(params, pool[i], config.trainer,
                                 prompt_seed(config.trainer.seed, 0, i));
    for (double h : g.entropies) {
      total += h;
      ++count;
    }
  }
  return total / static_cast<double>(count);
}

namespace {

constexpr std::uint64_t kPresetSeeds[] = {1, 2, 3};

double final_ema(const std::vector<MetricRecord>& rs) { return rs.back().ema_entropy; }

std::string seed_label(const std::string& stem, std::uint64_t seed) {
  return stem + "-s" + std::to_string(seed);
}

ExperimentPreset entropy_diversity_preset() {
  ExperimentPreset p;
  p.name = "fig1-entropy-diversity";
  p.figure_ref = "Fig. 1";
  p.expected_property = "pearson(entropy, ngram_diversity) >= 0.5 over logged steps";
  p.runs.push_back({seed_label("baseline", 1), preset_base_config(1)});
  p.check = [](const std::vector<PresetRun>&, const RunResults& res) {
    std::vector<double> h, d;
    for (const auto& r : res.at(0)) {
      if (r.ngram_diversity) {
        h.push_back(r.mean_entropy);
        d.push_back(*r.ngram_diversity);
      }
    }
    const double rho = pearson(h, d);
    return PropertyCheck{rho >= 0.5, "pearson=" + fmt(rho) + " over " +
                                         std::to_string(h.size()) + " points"};
  };
  return p;
}

ExperimentPreset adaptive_preset() {
  ExperimentPreset p;
  p.name = "fig5-adaptive";
  p.figure_ref = "Fig. 5";
  p.expected_property =
      "mean entropy over steps 100..300 within +-20% of delta; unregularized twin "
      "final EMA entropy < 0.5 delta";
  ExperimentConfig adaptive = preset_base_config(1);
  const double delta = initial_batch_entropy(adaptive);
  adaptive.trainer.ent_reg = EntRegMode::kAdaptive;
  adaptive.trainer.delta = delta;
  adaptive.trainer.beta = 0.02;
  adaptive.trainer.c0 = 0.0;
  p.runs.push_back({"adaptive-s1", adaptive});
  p.runs.push_back({"unregularized-s1", preset_base_config(1)});
  p.check = [](const std::vector<PresetRun>& runs, const RunResults& res) {
    const double delta = runs.at(0).config.trainer.delta;
    double sum = 0.0;
    int n = 0;
    for (const auto& r : res.at(0)) {
      if (r.step >= 100 && r.step <= 300) {
        sum += r.mean_entropy;
        ++n;
      }
    }
    const double mean = sum / n;
    const double twin = final_ema(res.at(1));
    const bool ok = std::abs(mean - delta) <= 0.2 * delta && twin < 0.5 * delta;
    return PropertyCheck{ok, "delta=" + fmt(delta) + " post-warmup mean=" + fmt(mean) +
                                 " twin final ema=" + fmt(twin)};
  };
  return p;
}

ExperimentPreset off_policy_preset() {
  ExperimentPreset p;
  p.name = "fig7-off-policy";
  p.figure_ref = "Fig. 7";
  p.expected_property =
      "per seed: n_update=4 final EMA entropy < n_update=1 and final reward >=";
  for (auto s : kPresetSeeds) {
    for (int n : {1, 4}) {
      auto c = preset_base_config(s);
      c.trainer.n_update = n;
      p.runs.push_back({seed_label("n" + std::to_string(n), s), c});
    }
  }
  p.check = [](const std::vector<PresetRun>&, const RunResults& res) {
    bool ok = true;
    std::string detail;
    for (std::size_t i = 0; i + 1 < res.size(); i += 2) {
      const auto& one = res[i].back();
      const auto& four = res[i + 1].back();
      ok = ok && four.ema_entropy < one.ema_entropy &&
           four.mean_reward >= one.mean_reward;
      detail += (detail.empty() ? "" : "; ") + std::string("H ") +
                fmt(one.ema_entropy) + "->" + fmt(four.ema_entropy) + " R " +
                fmt(one.mean_reward, 3) + "->" + fmt(four.mean_reward, 3);
    }
    return PropertyCheck{ok, detail};
  };
  return p;
}

ExperimentPreset clip_modes_preset() {
  ExperimentPreset p;
  p.name = "fig8-clip-modes";
  p.figure_ref = "Fig. 8";
  p.expected_property =
      "final EMA entropy clip_higher > default > clip_lower on a majority of seeds; "
      "clip_free completes";
  const ClipMode modes[] = {ClipMode::kClipHigher, ClipMode::kDefault,
                            ClipMode::kClipLower, ClipMode::kClipFree};
  for (auto s : kPresetSeeds) {
    for (auto m : modes) {
      auto c = preset_base_config(s);
      c.trainer.n_update = 4;
      c.trainer.clip_mode = m;
      p.runs.push_back({seed_label(to_string(m), s), c});
    }
  }
  p.check = [](const std::vector<PresetRun>&, const RunResults& res) {
    int ordered = 0, seeds = 0;
    bool free_ok = true;
    std::string detail;
    for (std::size_t i = 0; i + 3 < res.size(); i += 4, ++seeds) {
      const double hi = final_ema(res[i]), def = final_ema(res[i + 1]),
                   lo = final_ema(res[i + 2]);
      if (hi > def && def > lo) ++ordered;
      free_ok = free_ok && res[i + 3].size() == res[i].size() &&
                std::isfinite(final_ema(res[i + 3]));
      detail += (detail.empty() ? "" : "; ") + fmt(hi) + "/" + fmt(def) + "/" + fmt(lo);
    }
    detail += " ordered " + std::to_string(ordered) + "/" + std::to_string(seeds);
    return PropertyCheck{free_ok && 2 * ordered > seeds, detail};
  };
  return p;
}

ExperimentPreset advantage_sign_preset() {
  ExperimentPreset p;
  p.name = "fig9-advantage-sign";
  p.figure_ref = "Table 2 / Fig. 9";
  p.expected_property =
      "per seed final EMA entropy adv_nonpos_only >= 2x none and adv_nonneg_only "
      "<= 0.8x none";
  const Variant variants[] = {Variant::kNone, Variant::kAdvNonnegOnly,
                              Variant::kAdvNonposOnly};
  for (auto s : kPresetSeeds) {
    for (auto v : variants) {
      auto c = preset_base_config(s);
      c.trainer.variant = v;
      p.runs.push_back({seed_label(to_string(v), s), c});
    }
  }
  p.check = [](const std::vector<PresetRun>&, const RunResults& res) {
    bool ok = true;
    std::string detail;
    for (std::size_t i = 0; i + 2 < res.size(); i += 3) {
      const double none = final_ema(res[i]), nonneg = final_ema(res[i + 1]),
                   nonpos = final_ema(res[i + 2]);
      ok = ok && nonpos > none && none > nonneg && nonpos >= 2.0 * none &&
           nonneg <= 0.8 * none;
      detail += (detail.empty() ? "" : "; ") + std::string("none ") + fmt(none) +
                " nonneg " + fmt(nonneg) + " nonpos " + fmt(nonpos);
    }
    return PropertyCheck{ok, detail};
  };
  return p;
}

ExperimentPreset prog_adv_preset() {
  ExperimentPreset p;
  p.name = "fig9-prog-adv-reweight";
  p.figure_ref = "Fig. 9";
  p.expected_property =
      "entropy peaks in the first half and ends below the peak; lambda follows "
      "its schedule";
  auto v1 = preset_base_config(1);
  v1.trainer.variant = Variant::kProgAdvReweight1;
  auto v2 = preset_base_config(1);
  v2.trainer.variant = Variant::kProgAdvReweight2;
  v2.trainer.epochs = 5;
  v2.trainer.steps_per_epoch = 60;
  p.runs.push_back({"prog_adv_reweight_1-s1", v1});
  p.runs.push_back({"prog_adv_reweight_2-s1", v2});
  p.check = [](const std::vector<PresetRun>& runs, const RunResults& res) {
    bool ok = true;
    std::string detail;
    for (std::size_t i = 0; i < res.size(); ++i) {
      const auto& rs = res[i];
      const auto& t = runs[i].config.trainer;
      const auto total = static_cast<std::int64_t>(rs.size());
      const auto peak = std::max_element(rs.begin(), rs.end(), [](auto& a, auto& b) {
        return a.mean_entropy < b.mean_entropy;
      });
      const auto peak_step = peak->step;
      const bool shape = 2 * peak_step <= total && rs.back().mean_entropy < peak->mean_entropy;
      bool lambdas = true;
      for (const auto& r : rs) {
        const int epoch = static_cast<int>((r.step - 1) / t.steps_per_epoch) + 1;
        lambdas = lambdas && r.lambda == lambda_schedule(t.variant, r.step, total,
                                                         epoch, t.epochs);
      }
      ok = ok && shape && lambdas;
      detail += (detail.empty() ? "" : "; ") + to_string(t.variant) + " peak step " +
                std::to_string(peak_step) + " H " + fmt(peak->mean_entropy) + "->" +
                fmt(rs.back().mean_entropy) + (lambdas ? "" : " lambda mismatch");
    }
    return PropertyCheck{ok, detail};
  };
  return p;
}

}  // namespace

std::vector<ExperimentPreset> all_presets() {
  std::vector<ExperimentPreset> out;
  out.push_back(entropy_diversity_preset());
  out.push_back(adaptive_preset());
  out.push_back(off_policy_preset());
  out.push_back(clip_modes_preset());
  out.push_back(advantage_sign_preset());
  out.push_back(prog_adv_preset());
  return out;
}

const ExperimentPreset& find_preset(const std::string& name) {
  static const std::vector<ExperimentPreset> presets = all_presets();
  for (const auto& p : presets) {
    if (p.name == name) return p;
  }
  throw Error(ErrorCode::kConfiguration, "unknown preset '" + name + "'");
}

PresetOutcome run_preset(const ExperimentPreset& preset, const std::string& out_dir,
                         int threads) {
  PresetOutcome o{preset.name, preset.figure_ref, preset.expected_property, {}, {}};
  for (const auto& run : preset.runs) {
    ExperimentConfig c = run.config;
    c.trainer.threads = threads;
    if (out_dir.empty()) {
      const auto pool = c.build_pool();
      o.results.push_back(train_run(c.trainer, pool, c.trainer.seed).records);
    } else {
      const auto dir = fs::path(out_dir) / preset.name / run.label;
      o.results.push_back(run_experiment(c, dir.string()).result.records);
    }
  }
  o.check = preset.check(preset.runs, o.results);
  return o;
}

void write_preset_table(std::ostream& out, const std::vector<PresetOutcome>& outcomes) {
  out << "preset\tfigure\tresult\tproperty\tdetail\n";
  for (const auto& o : outcomes) {
    out << o.name << '\t' << o.figure_ref << '\t' << (o.check.passed ? "PASS" : "FAIL")
        << '\t' << o.expected_property << '\t' << o.check.detail << '\n';
  }
}

}  // namespace entlab
