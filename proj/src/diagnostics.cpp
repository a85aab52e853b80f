#include "entlab/diagnostics.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <ostream>
#include <set>

#include <json.hpp>

#include "entlab/error.hpp"

namespace entlab {

using nlohmann::json;

namespace {

json opt(const std::optional<double>& v) {
  return v ? json(*v) : json(nullptr);
}

std::optional<double> opt_from(const json& j, const char* key) {
  if (!j.contains(key) || j.at(key).is_null()) return std::nullopt;
  return j.at(key).get<double>();
}

}  // namespace

std::string to_jsonl(const MetricRecord& r) {
  json j = json::object();
  j["step"] = r.step;
  j["mean_reward"] = r.mean_reward;
  j["mean_entropy"] = r.mean_entropy;
  j["ema_entropy"] = r.ema_entropy;
  j["alpha_k"] = r.alpha_k;
  j["lambda"] = r.lambda;
  j["clip_fraction"] = r.clip_fraction;
  j["ngram_diversity"] = opt(r.ngram_diversity);
  j["self_bleu"] = opt(r.self_bleu);
  return j.dump();
}

MetricRecord metric_from_jsonl(const std::string& line) {
  json j;
  try {
    j = json::parse(line);
    MetricRecord r;
    r.step = j.at("step").get<std::int64_t>();
    r.mean_reward = j.at("mean_reward").get<double>();
    r.mean_entropy = j.at("mean_entropy").get<double>();
    r.ema_entropy = j.at("ema_entropy").get<double>();
    r.alpha_k = j.at("alpha_k").get<double>();
    r.lambda = j.at("lambda").get<double>();
    r.clip_fraction = j.at("clip_fraction").get<double>();
    r.ngram_diversity = opt_from(j, "ngram_diversity");
    r.self_bleu = opt_from(j, "self_bleu");
    return r;
  } catch (const json::exception& e) {
    throw Error(ErrorCode::kParse, std::string("metric record: ") + e.what());
  }
}

void write_summary_csv(std::ostream& out, const std::vector<MetricRecord>& rs) {
  out << "step,mean_reward,mean_entropy,ema_entropy,alpha_k,lambda,"
         "clip_fraction,ngram_diversity,self_bleu\n";
  auto o = [](const std::optional<double>& v) {
    return v ? format_double(*v) : std::string();
  };
  for (const auto& r : rs) {
    out << r.step << ',' << format_double(r.mean_reward) << ','
        << format_double(r.mean_entropy) << ',' << format_double(r.ema_entropy)
        << ',' << format_double(r.alpha_k) << ',' << format_double(r.lambda)
        << ',' << format_double(r.clip_fraction) << ',' << o(r.ngram_diversity)
        << ',' << o(r.self_bleu) << '\n';
  }
}

double ema_update(double prev_ema, double current_entropy, double phi) {
  if (!(phi >= 0.0 && phi < 1.0)) {
    throw Error(ErrorCode::kInvalidParameter, "EMA coefficient must be in [0, 1)");
  }
  return current_entropy * (1.0 - phi) + phi * prev_ema;
}

EmaTracker::EmaTracker(double phi) : phi_(phi) {
  if (!(phi >= 0.0 && phi < 1.0)) {
    throw Error(ErrorCode::kInvalidParameter, "EMA coefficient must be in [0, 1)");
  }
}

double EmaTracker::push(double value) {
  ema_ = ema_ ? ema_update(*ema_, value, phi_) : value;
  return *ema_;
}

double ngram_diversity(const std::vector<TokenSeq>& responses, int max_order) {
  if (responses.empty()) {
    throw Error(ErrorCode::kEmptySequence, "ngram_diversity needs responses");
  }
  if (max_order < 1) {
    throw Error(ErrorCode::kInvalidParameter, "n-gram order must be >= 1");
  }
  double product = 1.0;
  for (int n = 1; n <= max_order; ++n) {
    std::set<TokenSeq> unique;
    std::size_t total = 0;
    const auto len = static_cast<std::size_t>(n);
    for (const auto& r : responses) {
      for (std::size_t i = 0; i + len <= r.size(); ++i) {
        unique.emplace(r.begin() + static_cast<std::ptrdiff_t>(i),
                       r.begin() + static_cast<std::ptrdiff_t>(i + len));
        ++total;
      }
    }
    if (total == 0) continue;
    product *= static_cast<double>(unique.size()) / static_cast<double>(total);
  }
  return product;
}

namespace {

constexpr int kBleuOrder = 4;

using NgramCounts = std::map<TokenSeq, int>;

NgramCounts count_ngrams(const TokenSeq& s, std::size_t n) {
  NgramCounts c;
  for (std::size_t i = 0; i + n <= s.size(); ++i) {
    ++c[TokenSeq(s.begin() + static_cast<std::ptrdiff_t>(i),
                 s.begin() + static_cast<std::ptrdiff_t>(i + n))];
  }
  return c;
}

}  // namespace

double sentence_bleu(const TokenSeq& hypothesis,
                     const std::vector<const TokenSeq*>& references) {
  if (hypothesis.empty()) return 0.0;
  double log_sum = 0.0;
  int orders = 0;
  for (std::size_t n = 1; n <= kBleuOrder; ++n) {
    const auto hyp = count_ngrams(hypothesis, n);
    if (hyp.empty()) continue;
    NgramCounts max_ref;
    for (const TokenSeq* ref : references) {
      for (const auto& [g, c] : count_ngrams(*ref, n)) {
        int& m = max_ref[g];
        m = std::max(m, c);
      }
    }
    int matched = 0;
    int total = 0;
    for (const auto& [g, c] : hyp) {
      total += c;
      const auto it = max_ref.find(g);
      if (it != max_ref.end()) matched += std::min(c, it->second);
    }
    const double p = matched > 0 ? static_cast<double>(matched) / total
                                 : 1.0 / (static_cast<double>(total) + 1.0);
    log_sum += std::log(p);
    ++orders;
  }
  const double precision = std::exp(log_sum / orders);

  // Closest reference length; ties go to the shorter reference.
  const auto c = static_cast<double>(hypothesis.size());
  double r = -1.0;
  for (const TokenSeq* ref : references) {
    const auto len = static_cast<double>(ref->size());
    if (r < 0.0 || std::abs(len - c) < std::abs(r - c) ||
        (std::abs(len - c) == std::abs(r - c) && len < r)) {
      r = len;
    }
  }
  const double bp = (r < 0.0 || c > r) ? 1.0 : std::exp(1.0 - r / c);
  return bp * precision;
}

double self_bleu(const std::vector<TokenSeq>& responses) {
  if (responses.size() < 2) {
    throw Error(ErrorCode::kInvalidParameter, "self_bleu needs >= 2 responses");
  }
  double total = 0.0;
  std::vector<const TokenSeq*> refs;
  for (std::size_t i = 0; i < responses.size(); ++i) {
    refs.clear();
    for (std::size_t j = 0; j < responses.size(); ++j) {
      if (j != i) refs.push_back(&responses[j]);
    }
    total += sentence_bleu(responses[i], refs);
  }
  return total / static_cast<double>(responses.size());
}

double pearson(const std::vector<double>& xs, const std::vector<double>& ys) {
  if (xs.size() != ys.size() || xs.size() < 2) {
    throw Error(ErrorCode::kInvalidParameter,
                "pearson needs two equal-length vectors of length >= 2");
  }
  const auto n = static_cast<double>(xs.size());
  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    mx += xs[i];
    my += ys[i];
  }
  mx /= n;
  my /= n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    const double dx = xs[i] - mx;
    const double dy = ys[i] - my;
    sxy += dx * dy;
    sxx += dx * dx;
    syy += dy * dy;
  }
  if (sxx == 0.0 || syy == 0.0) {
    throw Error(ErrorCode::kUndefinedCorrelation,
                "pearson undefined: an input has zero variance");
  }
  return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

CalibrationSummary calibration_summary(
    const std::vector<std::pair<double, double>>& logprob_means) {
  if (logprob_means.empty()) {
    throw Error(ErrorCode::kEmptySequence, "calibration_summary needs input");
  }
  CalibrationSummary s;
  double sum_correct = 0.0, sum_incorrect = 0.0;
  for (const auto& [lp, reward] : logprob_means) {
    if (reward >= 0.5) {
      sum_correct += lp;
      ++s.count_correct;
    } else {
      sum_incorrect += lp;
      ++s.count_incorrect;
    }
  }
  if (s.count_correct) {
    s.mean_logprob_correct = sum_correct / static_cast<double>(s.count_correct);
  }
  if (s.count_incorrect) {
    s.mean_logprob_incorrect =
        sum_incorrect / static_cast<double>(s.count_incorrect);
  }
  if (s.mean_logprob_correct && s.mean_logprob_incorrect) {
    s.gap = *s.mean_logprob_correct - *s.mean_logprob_incorrect;
  }
  return s;
}

double mean_prompt_entropy(const PolicyParams& params,
                           const std::vector<Prompt>& prompts) {
  double total = 0.0;
  std::size_t positions = 0;
  for (const auto& p : prompts) {
    const std::span<const TokenId> tokens(p.tokens);
    for (std::size_t t = 0; t < tokens.size(); ++t) {
      total += token_entropy(params, tokens.first(t));
      ++positions;
    }
  }
  if (positions == 0) {
    throw Error(ErrorCode::kEmptySequence, "no prompt positions");
  }
  return total / static_cast<double>(positions);
}

double prompt_entropy_ratio(const PolicyParams& params_now,
                            const PolicyParams& params_init,
                            const std::vector<Prompt>& prompts) {
  if (params_now.vocab() != params_init.vocab()) {
    throw Error(ErrorCode::kInvalidParameter, "policies use different vocabs");
  }
  const double init = mean_prompt_entropy(params_init, prompts);
  if (init == 0.0) {
    throw Error(ErrorCode::kDegenerateRatio, "initial prompt entropy is zero");
  }
  return mean_prompt_entropy(params_now, prompts) / init;
}

}  // namespace entlab
