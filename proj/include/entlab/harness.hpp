#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <string>
#include <vector>

#include "entlab/config.hpp"
#include "entlab/diagnostics.hpp"
#include "entlab/grpo.hpp"

namespace entlab {

constexpr int kExitOk = 0;
constexpr int kExitFailure = 1;
constexpr int kExitConfig = 2;
constexpr int kExitNonFinite = 3;

struct RunOutput {
  TrainResult result;
  std::vector<Prompt> pool;
};

// Trains and writes out_dir/{config.snapshot, metrics.jsonl, summary.csv,
// policy.ckpt, report.txt}, plus rollouts.jsonl when dump_rollouts is set.
// metrics.jsonl is flushed after every step. Throws on failure.
RunOutput run_experiment(const ExperimentConfig& config, const std::string& out_dir,
                         bool dump_rollouts = false);

// Rollout dump: one JSON object per response,
//   {"step", "prompt_id", "response": [ids], "reward", "logprobs": [..]}
// with logprobs taken under the policy that sampled the response.
std::string rollout_record(std::int64_t step, const RolloutGroup& group,
                           std::size_t index);

struct RolloutRecord {
  std::int64_t step = 0;
  std::int64_t prompt_id = 0;
  TokenSeq response;
  double reward = 0.0;
  std::vector<double> logprobs;
};

RolloutRecord parse_rollout_record(const std::string& line);

// Per-step diagnostics recomputed from a rollout dump: CSV with columns
// step, ngram_diversity, self_bleu, mean_logprob_correct,
// mean_logprob_incorrect, calibration_gap. Diversity metrics are pooled per
// (step, prompt_id) group and averaged over groups.
void rollout_metrics_csv(std::istream& rollouts, std::ostream& csv, int ngram_order);

struct GradcheckReport {
  int trials = 0;
  double max_rel_err_objective = 0.0;
  double max_rel_err_entropy = 0.0;
  bool passed = false;
};

constexpr double kGradcheckStep = 1e-5;
constexpr double kGradcheckTolerance = 1e-4;

// Central differences of A * ln pi(token) and H(pi) against the analytic
// logit gradients on random softmax instances. corrupt_sign flips the
// analytic objective gradient, which must then fail.
GradcheckReport gradcheck(std::uint64_t seed, int trials, bool corrupt_sign = false);

struct PresetRun {
  std::string label;
  ExperimentConfig config;
};

struct PropertyCheck {
  bool passed = false;
  std::string detail;
};

using RunResults = std::vector<std::vector<MetricRecord>>;

struct ExperimentPreset {
  std::string name;
  std::string figure_ref;
  std::string expected_property;
  std::vector<PresetRun> runs;
  std::function<PropertyCheck(const std::vector<PresetRun>&, const RunResults&)>
      check;
};

// Shared base for the presets: copy task over a 4-token vocab, prompts of
// 1..2 payload tokens, full-history context, 300 steps of batch 32, G=8.
ExperimentConfig preset_base_config(std::uint64_t seed);

std::vector<ExperimentPreset> all_presets();
const ExperimentPreset& find_preset(const std::string& name);

// Mean response entropy of a batch sampled from the untrained policy, as in
// step 1 of train_run.
double initial_batch_entropy(const ExperimentConfig& config);

struct PresetOutcome {
  std::string name;
  std::string figure_ref;
  std::string expected_property;
  PropertyCheck check;
  RunResults results;
};

// Runs every run of the preset (writing under out_dir/<name>/<label> when
// out_dir is non-empty) and evaluates its property.
PresetOutcome run_preset(const ExperimentPreset& preset, const std::string& out_dir,
                         int threads = 1);

void write_preset_table(std::ostream& out, const std::vector<PresetOutcome>& outcomes);

}  // namespace entlab
