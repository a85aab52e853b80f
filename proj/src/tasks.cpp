#include "entlab/tasks.hpp"

#include <algorithm>
#include <istream>
#include <limits>
#include <numeric>
#include <ostream>
#include <sstream>

#include "entlab/error.hpp"
#include "entlab/random.hpp"

namespace entlab {

std::string to_string(TaskKind kind) {
  switch (kind) {
    case TaskKind::kCopy: return "copy";
    case TaskKind::kReverse: return "reverse";
    case TaskKind::kModSum: return "mod_sum";
  }
  return "?";
}

TaskKind parse_task_kind(const std::string& name) {
  if (name == "copy") return TaskKind::kCopy;
  if (name == "reverse") return TaskKind::kReverse;
  if (name == "mod_sum") return TaskKind::kModSum;
  throw Error(ErrorCode::kConfiguration, "unknown task kind '" + name + "'");
}

void TaskSpec::validate() const {
  vocab.validate();
  if (min_len < 1 || max_len < min_len) {
    throw Error(ErrorCode::kInvalidParameter,
                "prompt length range must satisfy 1 <= min <= max");
  }
  if (vocab.size < 3) {
    throw Error(ErrorCode::kInvalidParameter,
                "vocab must leave at least one payload token");
  }
}

std::vector<TokenId> TaskSpec::alphabet() const {
  std::vector<TokenId> out;
  for (TokenId t = 0; t < vocab.size; ++t) {
    if (t != vocab.bos && t != vocab.eos) out.push_back(t);
  }
  return out;
}

std::vector<Prompt> generate_pool(const TaskSpec& spec, int count,
                                  std::uint64_t seed) {
  if (count < 1) throw Error(ErrorCode::kEmptyPool, "pool count must be >= 1");
  spec.validate();
  const auto alpha = spec.alphabet();
  Rng rng(seed);
  std::vector<Prompt> pool;
  pool.reserve(static_cast<std::size_t>(count));
  const auto span = static_cast<std::uint64_t>(spec.max_len - spec.min_len + 1);
  for (int i = 0; i < count; ++i) {
    Prompt p;
    p.id = i;
    p.task = spec;
    const int len = spec.min_len + static_cast<int>(rng.below(span));
    for (int j = 0; j < len; ++j) {
      p.tokens.push_back(alpha[rng.below(alpha.size())]);
    }
    p.tokens.push_back(spec.separator());
    pool.push_back(std::move(p));
  }
  return pool;
}

TokenSeq expected_output(const Prompt& prompt) {
  const auto payload = prompt.payload();
  switch (prompt.task.kind) {
    case TaskKind::kCopy:
      return TokenSeq(payload.begin(), payload.end());
    case TaskKind::kReverse:
      return TokenSeq(payload.rbegin(), payload.rend());
    case TaskKind::kModSum: {
      const auto alpha = prompt.task.alphabet();
      const std::int64_t sum =
          std::accumulate(payload.begin(), payload.end(), std::int64_t{0});
      const auto a = static_cast<std::int64_t>(alpha.size());
      return {alpha[static_cast<std::size_t>(sum % a)]};
    }
  }
  return {};
}

RewardOutcome verify(const Prompt& prompt, std::span<const TokenId> response) {
  TokenSeq want = expected_output(prompt);
  want.push_back(prompt.task.vocab.eos);
  const bool ok = std::equal(want.begin(), want.end(), response.begin(),
                             response.end());
  return {ok ? 1.0 : 0.0};
}

std::vector<double> prompt_features(const Prompt& prompt) {
  const auto alpha = prompt.task.alphabet();
  std::vector<double> f(alpha.size() + 1, 0.0);
  const auto payload = prompt.payload();
  for (TokenId t : payload) {
    const auto it = std::find(alpha.begin(), alpha.end(), t);
    if (it != alpha.end()) f[static_cast<std::size_t>(it - alpha.begin())] += 1.0;
  }
  if (!payload.empty()) {
    for (std::size_t i = 0; i < alpha.size(); ++i) {
      f[i] /= static_cast<double>(payload.size());
    }
  }
  f.back() = static_cast<double>(payload.size()) /
             static_cast<double>(std::max(prompt.task.max_len, 1));
  return f;
}

namespace {

double sq_dist(const std::vector<double>& a, const std::vector<double>& b) {
  double d = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double x = a[i] - b[i];
    d += x * x;
  }
  return d;
}

constexpr int kMaxIterations = 100;
constexpr double kTolerance = 1e-9;

}  // namespace

KMeansResult kmeans(const std::vector<std::vector<double>>& points, int k,
                    std::uint64_t seed) {
  const auto n = points.size();
  if (k < 1 || static_cast<std::size_t>(k) > n) {
    throw Error(ErrorCode::kInvalidParameter, "k-means needs 1 <= K <= |pool|");
  }
  KMeansResult r;
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(seed);
  rng.shuffle(order);
  for (int c = 0; c < k; ++c) r.centers.push_back(points[order[c]]);
  r.assignment.assign(n, 0);

  const std::size_t dim = points.front().size();
  for (r.iterations = 1; r.iterations <= kMaxIterations; ++r.iterations) {
    for (std::size_t i = 0; i < n; ++i) {
      int best = 0;
      double best_d = std::numeric_limits<double>::infinity();
      for (int c = 0; c < k; ++c) {
        const double d = sq_dist(points[i], r.centers[c]);
        if (d < best_d) {
          best_d = d;
          best = c;
        }
      }
      r.assignment[i] = best;
    }
    std::vector<std::vector<double>> next(static_cast<std::size_t>(k),
                                          std::vector<double>(dim, 0.0));
    std::vector<std::size_t> sizes(static_cast<std::size_t>(k), 0);
    for (std::size_t i = 0; i < n; ++i) {
      const auto c = static_cast<std::size_t>(r.assignment[i]);
      ++sizes[c];
      for (std::size_t j = 0; j < dim; ++j) next[c][j] += points[i][j];
    }
    for (std::size_t c = 0; c < next.size(); ++c) {
      if (sizes[c] == 0) continue;
      for (double& x : next[c]) x /= static_cast<double>(sizes[c]);
    }
    for (std::size_t c = 0; c < next.size(); ++c) {
      if (sizes[c] != 0) continue;
      // Steal the point farthest from its own center, from a cluster that
      // can spare it.
      std::size_t far = n;
      double far_d = -1.0;
      for (std::size_t i = 0; i < n; ++i) {
        const auto owner = static_cast<std::size_t>(r.assignment[i]);
        if (sizes[owner] < 2) continue;
        const double d = sq_dist(points[i], next[owner]);
        if (d > far_d) {
          far_d = d;
          far = i;
        }
      }
      if (far == n) break;
      --sizes[static_cast<std::size_t>(r.assignment[far])];
      r.assignment[far] = static_cast<int>(c);
      sizes[c] = 1;
      next[c] = points[far];
    }
    double moved = 0.0;
    for (int c = 0; c < k; ++c) {
      moved = std::max(moved, sq_dist(next[c], r.centers[c]));
    }
    r.centers = std::move(next);
    if (moved <= kTolerance * kTolerance) break;
  }
  r.iterations = std::min(r.iterations, kMaxIterations);
  return r;
}

std::vector<Prompt> kmeans_subset(const std::vector<Prompt>& pool, int k, int m,
                                  std::uint64_t seed) {
  if (m < 1 || m > k || static_cast<std::size_t>(k) > pool.size()) {
    throw Error(ErrorCode::kInvalidParameter,
                "kmeans_subset requires 1 <= M <= K <= |pool|");
  }
  std::vector<std::vector<double>> features;
  features.reserve(pool.size());
  for (const auto& p : pool) features.push_back(prompt_features(p));
  const auto result = kmeans(features, k, seed);

  std::vector<std::size_t> sizes(static_cast<std::size_t>(k), 0);
  for (int c : result.assignment) ++sizes[static_cast<std::size_t>(c)];
  std::vector<int> ranked(static_cast<std::size_t>(k));
  std::iota(ranked.begin(), ranked.end(), 0);
  std::stable_sort(ranked.begin(), ranked.end(), [&](int a, int b) {
    return sizes[static_cast<std::size_t>(a)] > sizes[static_cast<std::size_t>(b)];
  });
  std::vector<char> keep(static_cast<std::size_t>(k), 0);
  for (int i = 0; i < m; ++i) keep[static_cast<std::size_t>(ranked[i])] = 1;

  std::vector<Prompt> out;
  for (std::size_t i = 0; i < pool.size(); ++i) {
    if (keep[static_cast<std::size_t>(result.assignment[i])]) out.push_back(pool[i]);
  }
  return out;
}

void write_pool(std::ostream& out, const std::vector<Prompt>& pool) {
  for (const auto& p : pool) {
    out << p.id << '\t' << to_string(p.task.kind) << '\t';
    for (std::size_t i = 0; i < p.tokens.size(); ++i) {
      if (i) out << ' ';
      out << p.tokens[i];
    }
    out << '\n';
  }
}

std::vector<Prompt> read_pool(std::istream& in, const Vocab& vocab) {
  std::vector<Prompt> pool;
  std::string line;
  int lineno = 0;
  int min_len = std::numeric_limits<int>::max();
  int max_len = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto t1 = line.find('\t');
    const auto t2 = t1 == std::string::npos ? t1 : line.find('\t', t1 + 1);
    if (t2 == std::string::npos) {
      throw Error(ErrorCode::kParse,
                  "pool line " + std::to_string(lineno) + ": expected 3 fields");
    }
    Prompt p;
    p.id = std::stoll(line.substr(0, t1));
    p.task.kind = parse_task_kind(line.substr(t1 + 1, t2 - t1 - 1));
    p.task.vocab = vocab;
    std::istringstream ts(line.substr(t2 + 1));
    for (TokenId t; ts >> t;) {
      if (!vocab.contains(t)) {
        throw Error(ErrorCode::kInvalidToken,
                    "pool line " + std::to_string(lineno) + ": token out of range");
      }
      p.tokens.push_back(t);
    }
    if (p.tokens.size() < 2 || p.tokens.back() != vocab.bos) {
      throw Error(ErrorCode::kParse, "pool line " + std::to_string(lineno) +
                                         ": prompt must be payload + separator");
    }
    const int len = static_cast<int>(p.tokens.size()) - 1;
    min_len = std::min(min_len, len);
    max_len = std::max(max_len, len);
    pool.push_back(std::move(p));
  }
  if (pool.empty()) throw Error(ErrorCode::kEmptyPool, "pool file has no prompts");
  for (auto& p : pool) {
    p.task.min_len = min_len;
    p.task.max_len = max_len;
  }
  return pool;
}

}  // namespace entlab
