#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "entlab/policy.hpp"

namespace entlab {

enum class TaskKind { kCopy, kReverse, kModSum };

std::string to_string(TaskKind kind);
TaskKind parse_task_kind(const std::string& name);

// Payload lengths are drawn uniformly from [min_len, max_len]. Payload
// tokens are every vocab id except bos and eos; bos doubles as the
// separator that ends each prompt.
struct TaskSpec {
  TaskKind kind = TaskKind::kCopy;
  int min_len = 1;
  int max_len = 1;
  Vocab vocab;

  void validate() const;
  std::vector<TokenId> alphabet() const;
  TokenId separator() const { return vocab.bos; }

  bool operator==(const TaskSpec&) const = default;
};

struct Prompt {
  std::int64_t id = 0;
  TaskSpec task;
  TokenSeq tokens;  // payload followed by the separator

  std::span<const TokenId> payload() const {
    return std::span<const TokenId>(tokens).first(tokens.size() - 1);
  }

  bool operator==(const Prompt&) const = default;
};

// Always exactly 0.0 or 1.0.
struct RewardOutcome {
  double value = 0.0;
};

std::vector<Prompt> generate_pool(const TaskSpec& spec, int count,
                                  std::uint64_t seed);

// The unique correct response body, without the trailing eos.
TokenSeq expected_output(const Prompt& prompt);

RewardOutcome verify(const Prompt& prompt, std::span<const TokenId> response);

// Normalized payload histogram over the alphabet, then payload length divided
// by the task's max_len.
std::vector<double> prompt_features(const Prompt& prompt);

struct KMeansResult {
  std::vector<int> assignment;
  std::vector<std::vector<double>> centers;
  int iterations = 0;
};

// Lloyd's algorithm; seeded distinct-point initialization, 100 iteration cap,
// 1e-9 center-movement tolerance; empty clusters re-seeded with the point
// farthest from its assigned center.
KMeansResult kmeans(const std::vector<std::vector<double>>& points, int k,
                    std::uint64_t seed);

// Union of the m most populous clusters (ties: lower cluster index), in
// original pool order.
std::vector<Prompt> kmeans_subset(const std::vector<Prompt>& pool, int k, int m,
                                  std::uint64_t seed);

// Line format: id<TAB>kind<TAB>space-separated token ids (separator included).
void write_pool(std::ostream& out, const std::vector<Prompt>& pool);
std::vector<Prompt> read_pool(std::istream& in, const Vocab& vocab);

}  // namespace entlab
