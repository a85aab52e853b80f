#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "entlab/grpo.hpp"
#include "entlab/tasks.hpp"

namespace entlab {

struct KMeansSelection {
  int clusters = 8;
  int keep = 2;
  std::uint64_t seed = 0;

  bool operator==(const KMeansSelection&) const = default;
};

// Experiment file schema (JSON):
//
//   {
//     "task":    {"kind": "copy", "vocab_size": 4, "min_len": 1, "max_len": 2,
//                 "pool_size": 960, "pool_seed": 42, "pool_file": "",
//                 "kmeans": {"clusters": 8, "keep": 2, "seed": 0}},
//     "trainer": {<every TrainerConfig field by name>}
//   }
//
// task.kind is the only required key. Unknown keys are rejected. Enum
// fields take their string names (clip_mode, ent_reg, variant).
struct ExperimentConfig {
  TaskKind task_kind = TaskKind::kCopy;
  int vocab_size = 4;
  int min_len = 1;
  int max_len = 2;
  int pool_size = 960;
  std::uint64_t pool_seed = 42;
  std::string pool_file;  // when set, prompts are read from this file
  std::optional<KMeansSelection> kmeans;
  TrainerConfig trainer;

  TaskSpec task_spec() const;
  // Generated (or loaded) pool, reduced by the k-means selection if any.
  std::vector<Prompt> build_pool() const;
  void validate() const;

  bool operator==(const ExperimentConfig&) const = default;
};

nlohmann::json to_json(const ExperimentConfig& config);
ExperimentConfig config_from_json(const nlohmann::json& j);

ExperimentConfig parse_config(const std::string& text);
ExperimentConfig load_config(const std::string& path);

// Pretty-printed JSON holding every field, loadable by parse_config.
std::string config_snapshot(const ExperimentConfig& config);

// Sets a dotted key ("trainer.eps_high") to a value given as text. The text
// is read as JSON when it parses, otherwise as a string.
void apply_override(nlohmann::json& j, const std::string& dotted_key,
                    const std::string& value);

}  // namespace entlab
