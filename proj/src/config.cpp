#include "entlab/config.hpp"

#include <fstream>
#include <functional>
#include <sstream>

#include "entlab/error.hpp"

namespace entlab {

using nlohmann::json;

namespace {

[[noreturn]] void bad_field(const std::string& field, const std::string& why) {
  throw Error(ErrorCode::kConfiguration, field + ": " + why);
}

template <typename T>
T read_as(const json& j, const std::string& field) {
  try {
    return j.get<T>();
  } catch (const json::exception&) {
    bad_field(field, "wrong type (" + std::string(j.type_name()) + ")");
  }
}

template <>
int read_as<int>(const json& j, const std::string& field) {
  if (!j.is_number_integer()) bad_field(field, "expected an integer");
  return j.get<int>();
}

template <>
std::uint64_t read_as<std::uint64_t>(const json& j, const std::string& field) {
  if (!j.is_number_unsigned() &&
      !(j.is_number_integer() && j.get<std::int64_t>() >= 0)) {
    bad_field(field, "expected a non-negative integer");
  }
  return j.get<std::uint64_t>();
}

template <>
double read_as<double>(const json& j, const std::string& field) {
  if (!j.is_number()) bad_field(field, "expected a number");
  return j.get<double>();
}

struct Field {
  const char* name;
  std::function<json(const TrainerConfig&)> get;
  std::function<void(TrainerConfig&, const json&, const std::string&)> set;
};

template <typename T>
Field plain(const char* name, T TrainerConfig::*member) {
  return {name, [member](const TrainerConfig& c) { return json(c.*member); },
          [member](TrainerConfig& c, const json& j, const std::string& path) {
            c.*member = read_as<T>(j, path);
          }};
}

template <typename E>
Field named(const char* name, E TrainerConfig::*member,
            E (*parse)(const std::string&)) {
  return {name,
          [member](const TrainerConfig& c) { return json(to_string(c.*member)); },
          [member, parse](TrainerConfig& c, const json& j, const std::string& path) {
            const auto s = read_as<std::string>(j, path);
            try {
              c.*member = parse(s);
            } catch (const Error&) {
              bad_field(path, "unknown value '" + s + "'");
            }
          }};
}

const std::vector<Field>& trainer_fields() {
  static const std::vector<Field> fields = {
      plain("group_size", &TrainerConfig::group_size),
      plain("rollout_batch", &TrainerConfig::rollout_batch),
      plain("n_update", &TrainerConfig::n_update),
      plain("eps_low", &TrainerConfig::eps_low),
      plain("eps_high", &TrainerConfig::eps_high),
      named("clip_mode", &TrainerConfig::clip_mode, &parse_clip_mode),
      plain("learning_rate", &TrainerConfig::learning_rate),
      plain("epochs", &TrainerConfig::epochs),
      plain("steps_per_epoch", &TrainerConfig::steps_per_epoch),
      plain("max_response_len", &TrainerConfig::max_response_len),
      plain("context_order", &TrainerConfig::context_order),
      named("ent_reg", &TrainerConfig::ent_reg, &parse_ent_reg),
      plain("alpha", &TrainerConfig::alpha),
      plain("delta", &TrainerConfig::delta),
      plain("beta", &TrainerConfig::beta),
      plain("c0", &TrainerConfig::c0),
      named("variant", &TrainerConfig::variant, &parse_variant),
      plain("fraction", &TrainerConfig::fraction),
      plain("kl_coef", &TrainerConfig::kl_coef),
      plain("ema_phi", &TrainerConfig::ema_phi),
      plain("diversity_interval", &TrainerConfig::diversity_interval),
      plain("ngram_order", &TrainerConfig::ngram_order),
      plain("threads", &TrainerConfig::threads),
      plain("seed", &TrainerConfig::seed),
  };
  return fields;
}

void expect_object(const json& j, const std::string& path) {
  if (!j.is_object()) bad_field(path, "expected an object");
}

}  // namespace

TaskSpec ExperimentConfig::task_spec() const {
  return TaskSpec{task_kind, min_len, max_len, Vocab::standard(vocab_size)};
}

void ExperimentConfig::validate() const {
  if (vocab_size < 3) bad_field("task.vocab_size", "must be >= 3");
  try {
    task_spec().validate();
  } catch (const Error& e) {
    bad_field("task", e.what());
  }
  if (pool_file.empty() && pool_size < 1) bad_field("task.pool_size", "must be >= 1");
  if (kmeans) {
    if (kmeans->clusters < 1) bad_field("task.kmeans.clusters", "must be >= 1");
    if (kmeans->keep < 1 || kmeans->keep > kmeans->clusters) {
      bad_field("task.kmeans.keep", "must be in [1, clusters]");
    }
  }
  trainer.validate();
}

std::vector<Prompt> ExperimentConfig::build_pool() const {
  const TaskSpec spec = task_spec();
  std::vector<Prompt> pool;
  if (!pool_file.empty()) {
    std::ifstream in(pool_file);
    if (!in) throw Error(ErrorCode::kIo, "cannot open pool file " + pool_file);
    pool = read_pool(in, spec.vocab);
  } else {
    pool = generate_pool(spec, pool_size, pool_seed);
  }
  if (kmeans) pool = kmeans_subset(pool, kmeans->clusters, kmeans->keep, kmeans->seed);
  return pool;
}

json to_json(const ExperimentConfig& c) {
  json task = {
      {"kind", to_string(c.task_kind)},
      {"vocab_size", c.vocab_size},
      {"min_len", c.min_len},
      {"max_len", c.max_len},
      {"pool_size", c.pool_size},
      {"pool_seed", c.pool_seed},
      {"pool_file", c.pool_file},
  };
  task["kmeans"] = c.kmeans ? json{{"clusters", c.kmeans->clusters},
                                   {"keep", c.kmeans->keep},
                                   {"seed", c.kmeans->seed}}
                            : json(nullptr);
  json trainer = json::object();
  for (const auto& f : trainer_fields()) trainer[f.name] = f.get(c.trainer);
  return json{{"task", task}, {"trainer", trainer}};
}

ExperimentConfig config_from_json(const json& j) {
  expect_object(j, "<root>");
  for (const auto& [key, _] : j.items()) {
    if (key != "task" && key != "trainer") bad_field(key, "unknown key");
  }
  if (!j.contains("task")) bad_field("task.kind", "required field is missing");
  const json& task = j.at("task");
  expect_object(task, "task");
  if (!task.contains("kind")) bad_field("task.kind", "required field is missing");

  ExperimentConfig c;
  for (const auto& [key, value] : task.items()) {
    const std::string path = "task." + key;
    if (key == "kind") {
      const auto s = read_as<std::string>(value, path);
      try {
        c.task_kind = parse_task_kind(s);
      } catch (const Error&) {
        bad_field(path, "unknown value '" + s + "'");
      }
    } else if (key == "vocab_size") {
      c.vocab_size = read_as<int>(value, path);
    } else if (key == "min_len") {
      c.min_len = read_as<int>(value, path);
    } else if (key == "max_len") {
      c.max_len = read_as<int>(value, path);
    } else if (key == "pool_size") {
      c.pool_size = read_as<int>(value, path);
    } else if (key == "pool_seed") {
      c.pool_seed = read_as<std::uint64_t>(value, path);
    } else if (key == "pool_file") {
      c.pool_file = read_as<std::string>(value, path);
    } else if (key == "kmeans") {
      if (value.is_null()) continue;
      expect_object(value, path);
      KMeansSelection km;
      for (const auto& [k2, v2] : value.items()) {
        const std::string p2 = path + "." + k2;
        if (k2 == "clusters") km.clusters = read_as<int>(v2, p2);
        else if (k2 == "keep") km.keep = read_as<int>(v2, p2);
        else if (k2 == "seed") km.seed = read_as<std::uint64_t>(v2, p2);
        else bad_field(p2, "unknown key");
      }
      c.kmeans = km;
    } else {
      bad_field(path, "unknown key");
    }
  }

  if (j.contains("trainer")) {
    const json& trainer = j.at("trainer");
    expect_object(trainer, "trainer");
    for (const auto& [key, value] : trainer.items()) {
      const std::string path = "trainer." + key;
      bool known = false;
      for (const auto& f : trainer_fields()) {
        if (key == f.name) {
          f.set(c.trainer, value, path);
          known = true;
          break;
        }
      }
      if (!known) bad_field(path, "unknown key");
    }
  }
  c.validate();
  return c;
}

ExperimentConfig parse_config(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw Error(ErrorCode::kConfiguration, std::string("config: ") + e.what());
  }
  return config_from_json(j);
}

ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::kConfiguration, "config: cannot open " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

std::string config_snapshot(const ExperimentConfig& config) {
  return to_json(config).dump(2) + "\n";
}

void apply_override(json& j, const std::string& dotted_key,
                    const std::string& value) {
  if (dotted_key.empty()) bad_field("<override>", "empty key");
  json parsed;
  try {
    parsed = json::parse(value);
  } catch (const json::parse_error&) {
    parsed = value;
  }
  json* node = &j;
  std::size_t start = 0;
  while (true) {
    const auto dot = dotted_key.find('.', start);
    const std::string part = dotted_key.substr(start, dot - start);
    if (part.empty()) bad_field(dotted_key, "malformed key");
    if (!node->is_object()) {
      if (!node->is_null()) bad_field(dotted_key, "parent is not an object");
      *node = json::object();
    }
    node = &(*node)[part];
    if (dot == std::string::npos) break;
    start = dot + 1;
  }
  *node = std::move(parsed);
}

}  // namespace entlab
