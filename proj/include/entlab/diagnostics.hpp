#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "entlab/policy.hpp"
#include "entlab/tasks.hpp"

namespace entlab {

struct MetricRecord {
  std::int64_t step = 0;
  double mean_reward = 0.0;
  double mean_entropy = 0.0;
  double ema_entropy = 0.0;
  double alpha_k = 0.0;
  double lambda = 1.0;
  double clip_fraction = 0.0;
  std::optional<double> ngram_diversity;
  std::optional<double> self_bleu;

  bool operator==(const MetricRecord&) const = default;
};

// One JSON object per line; optional fields are written as null.
std::string to_jsonl(const MetricRecord& r);
MetricRecord metric_from_jsonl(const std::string& line);

void write_summary_csv(std::ostream& out, const std::vector<MetricRecord>& rs);

// phi * prev + (1 - phi) * current.
double ema_update(double prev_ema, double current_entropy, double phi);

// EMA whose first value is the first observation.
class EmaTracker {
 public:
  explicit EmaTracker(double phi);
  double push(double value);
  std::optional<double> value() const { return ema_; }

 private:
  double phi_;
  std::optional<double> ema_;
};

// Product over orders 1..N of unique/total n-grams pooled across all
// responses. Orders with no n-grams contribute a factor of 1.
double ngram_diversity(const std::vector<TokenSeq>& responses, int max_order);

// Mean over responses of BLEU-4 (multi-reference, max-count clipping) of each
// response against all the others. A zero modified precision p = 0/t is
// replaced by 1/(t+1); orders the hypothesis is too short for are skipped.
double self_bleu(const std::vector<TokenSeq>& responses);

// Sentence BLEU-4 of one hypothesis against a reference set, same smoothing.
double sentence_bleu(const TokenSeq& hypothesis,
                     const std::vector<const TokenSeq*>& references);

double pearson(const std::vector<double>& xs, const std::vector<double>& ys);

struct CalibrationSummary {
  std::optional<double> mean_logprob_correct;
  std::optional<double> mean_logprob_incorrect;
  std::optional<double> gap;
  std::size_t count_correct = 0;
  std::size_t count_incorrect = 0;
};

// Each entry is (average per-token log-prob, reward); reward >= 0.5 counts as
// correct.
CalibrationSummary calibration_summary(
    const std::vector<std::pair<double, double>>& logprob_means);

// Mean token entropy over prompt positions (teacher-forced) under params_now,
// divided by the same quantity under params_init.
double prompt_entropy_ratio(const PolicyParams& params_now,
                            const PolicyParams& params_init,
                            const std::vector<Prompt>& prompts);

double mean_prompt_entropy(const PolicyParams& params,
                           const std::vector<Prompt>& prompts);

}  // namespace entlab
