#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "entlab/config.hpp"
#include "entlab/error.hpp"
#include "entlab/harness.hpp"

namespace {

using entlab::Error;
using entlab::ErrorCode;
using nlohmann::json;

struct RunArgs {
  std::string config_path;
  std::string out_dir;
  std::vector<std::string> sets;
  bool dump_rollouts = false;
  // Each flag maps onto one dotted config key.
  std::vector<std::pair<std::string, std::string>> flags;
};

json read_config_json(const std::string& path) {
  if (path.empty()) return json::object();
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::kConfiguration, "config: cannot open " + path);
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw Error(ErrorCode::kConfiguration, std::string("config: ") + e.what());
  }
}

int do_run(const RunArgs& args) {
  entlab::ExperimentConfig config;
  try {
    json j = read_config_json(args.config_path);
    for (const auto& [key, value] : args.flags) entlab::apply_override(j, key, value);
    for (const auto& s : args.sets) {
      const auto eq = s.find('=');
      if (eq == std::string::npos) {
        throw Error(ErrorCode::kConfiguration, "--set expects key=value, got '" + s + "'");
      }
      entlab::apply_override(j, s.substr(0, eq), s.substr(eq + 1));
    }
    config = entlab::config_from_json(j);
  } catch (const Error& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return entlab::kExitConfig;
  }

  try {
    const auto out = entlab::run_experiment(config, args.out_dir, args.dump_rollouts);
    const auto& last = out.result.records.back();
    std::cout << "steps " << out.result.records.size() << " final_ema_entropy "
              << entlab::format_double(last.ema_entropy) << " final_reward "
              << entlab::format_double(last.mean_reward) << '\n';
  } catch (const Error& e) {
    std::cerr << "run failed: " << e.what() << '\n';
    if (e.code() == ErrorCode::kNonFiniteGradient ||
        e.code() == ErrorCode::kNumericalDomain) {
      return entlab::kExitNonFinite;
    }
    if (e.code() == ErrorCode::kConfiguration) return entlab::kExitConfig;
    return entlab::kExitFailure;
  }
  return entlab::kExitOk;
}

int do_gradcheck(std::uint64_t seed, int trials, bool corrupt) {
  if (trials < 1) {
    std::cerr << "gradcheck: --trials must be >= 1\n";
    return entlab::kExitConfig;
  }
  const auto rep = entlab::gradcheck(seed, trials, corrupt);
  std::cout << "trials " << rep.trials << '\n'
            << "max_rel_err_objective " << entlab::format_double(rep.max_rel_err_objective)
            << '\n'
            << "max_rel_err_entropy " << entlab::format_double(rep.max_rel_err_entropy)
            << '\n'
            << "tolerance " << entlab::kGradcheckTolerance << '\n'
            << (rep.passed ? "PASS" : "FAIL") << '\n';
  return rep.passed ? entlab::kExitOk : entlab::kExitFailure;
}

int do_presets(std::vector<std::string> names, const std::string& out_dir, int threads) {
  std::vector<entlab::ExperimentPreset> selected;
  try {
    if (names.empty() || (names.size() == 1 && names[0] == "all")) {
      selected = entlab::all_presets();
    } else {
      for (const auto& n : names) selected.push_back(entlab::find_preset(n));
    }
  } catch (const Error& e) {
    std::cerr << e.what() << '\n';
    return entlab::kExitConfig;
  }

  std::vector<entlab::PresetOutcome> outcomes;
  for (const auto& p : selected) {
    std::cerr << "running " << p.name << " (" << p.runs.size() << " runs)\n";
    outcomes.push_back(entlab::run_preset(p, out_dir, threads));
  }
  entlab::write_preset_table(std::cout, outcomes);
  if (!out_dir.empty()) {
    std::filesystem::create_directories(out_dir);
    std::ofstream table(std::filesystem::path(out_dir) / "preset_summary.tsv");
    entlab::write_preset_table(table, outcomes);
  }
  std::vector<std::string> failed;
  for (const auto& o : outcomes) {
    if (!o.check.passed) failed.push_back(o.name);
  }
  if (!failed.empty()) {
    std::cerr << "failed presets:";
    for (const auto& f : failed) std::cerr << ' ' << f;
    std::cerr << '\n';
    return entlab::kExitFailure;
  }
  return entlab::kExitOk;
}

int do_metrics(const std::string& rollouts, const std::string& out, int ngram_order) {
  std::ifstream in(rollouts);
  if (!in) {
    std::cerr << "cannot open " << rollouts << '\n';
    return entlab::kExitFailure;
  }
  try {
    if (out.empty()) {
      entlab::rollout_metrics_csv(in, std::cout, ngram_order);
    } else {
      std::ofstream csv(out);
      if (!csv) {
        std::cerr << "cannot write " << out << '\n';
        return entlab::kExitFailure;
      }
      entlab::rollout_metrics_csv(in, csv, ngram_order);
    }
  } catch (const Error& e) {
    std::cerr << e.what() << '\n';
    return entlab::kExitFailure;
  }
  return entlab::kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"entropy-control GRPO laboratory"};
  app.require_subcommand(1);

  RunArgs run;
  auto* run_cmd = app.add_subcommand("run", "train one experiment from a config file");
  run_cmd->add_option("--config", run.config_path, "experiment JSON file");
  run_cmd->add_option("--out", run.out_dir, "output directory")->required();
  run_cmd->add_option("--set", run.sets, "override any field: dotted.key=value");
  run_cmd->add_flag("--dump-rollouts", run.dump_rollouts, "also write rollouts.jsonl");

  struct FlagSpec {
    const char* flag;
    const char* key;
    const char* help;
  };
  const FlagSpec flag_specs[] = {
      {"--task", "task.kind", "copy | reverse | mod_sum"},
      {"--vocab-size", "task.vocab_size", "vocabulary size"},
      {"--group-size", "trainer.group_size", "responses per prompt"},
      {"--rollout-batch", "trainer.rollout_batch", "prompts per step"},
      {"--eps-high", "trainer.eps_high", "upper clip range"},
      {"--eps-low", "trainer.eps_low", "lower clip range"},
      {"--clip-mode", "trainer.clip_mode",
       "default | clip_higher | clip_lower | clip_tighter | clip_free"},
      {"--n-update", "trainer.n_update", "updates per rollout batch"},
      {"--lr", "trainer.learning_rate", "learning rate"},
      {"--epochs", "trainer.epochs", "epochs"},
      {"--steps-per-epoch", "trainer.steps_per_epoch", "steps per epoch (0 = pool/batch)"},
      {"--variant", "trainer.variant", "loss variant"},
      {"--fraction", "trainer.fraction", "token fraction for clip/KL variants"},
      {"--kl-coef", "trainer.kl_coef", "KL-Cov penalty coefficient"},
      {"--ent-reg", "trainer.ent_reg", "none | fixed | adaptive"},
      {"--alpha", "trainer.alpha", "fixed entropy coefficient"},
      {"--delta", "trainer.delta", "adaptive entropy target"},
      {"--beta", "trainer.beta", "adaptive step size"},
      {"--c0", "trainer.c0", "adaptive initial coefficient"},
      {"--seed", "trainer.seed", "master seed"},
      {"--threads", "trainer.threads", "rollout worker threads"},
  };
  std::vector<std::string> flag_values(std::size(flag_specs));
  for (std::size_t i = 0; i < std::size(flag_specs); ++i) {
    run_cmd->add_option(flag_specs[i].flag, flag_values[i], flag_specs[i].help);
  }
  std::string lambda_schedule;
  run_cmd->add_option("--lambda-schedule", lambda_schedule,
                      "1 or 2: selects prog_adv_reweight_1 / _2")
      ->check(CLI::IsMember({"1", "2"}));

  std::uint64_t gc_seed = 0;
  int gc_trials = 200;
  bool gc_corrupt = false;
  auto* gc_cmd = app.add_subcommand("gradcheck", "finite-difference gradient check");
  gc_cmd->add_option("--seed", gc_seed, "seed");
  gc_cmd->add_option("--trials", gc_trials, "random instances");
  gc_cmd->add_flag("--corrupt-sign", gc_corrupt, "flip the analytic gradient (self-test)");

  std::vector<std::string> preset_names;
  std::string preset_out;
  int preset_threads = 1;
  auto* ps_cmd = app.add_subcommand("preset-suite", "run named presets or 'all'");
  ps_cmd->add_option("names", preset_names, "preset names");
  ps_cmd->add_option("--out", preset_out, "output directory");
  ps_cmd->add_option("--threads", preset_threads, "rollout worker threads");

  std::string metrics_in, metrics_out;
  int metrics_order = 5;
  auto* m_cmd = app.add_subcommand("metrics", "diagnostics from a rollout dump");
  m_cmd->add_option("--rollouts", metrics_in, "rollouts.jsonl")->required();
  m_cmd->add_option("--out", metrics_out, "CSV path (stdout if omitted)");
  m_cmd->add_option("--ngram-order", metrics_order, "n-gram diversity order");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return entlab::kExitConfig;
  }

  if (*run_cmd) {
    for (std::size_t i = 0; i < std::size(flag_specs); ++i) {
      if (run_cmd->count(flag_specs[i].flag) > 0) {
        run.flags.emplace_back(flag_specs[i].key, flag_values[i]);
      }
    }
    if (!lambda_schedule.empty()) {
      run.flags.emplace_back("trainer.variant", "prog_adv_reweight_" + lambda_schedule);
    }
    return do_run(run);
  }
  if (*gc_cmd) return do_gradcheck(gc_seed, gc_trials, gc_corrupt);
  if (*ps_cmd) return do_presets(preset_names, preset_out, preset_threads);
  if (*m_cmd) return do_metrics(metrics_in, metrics_out, metrics_order);
  return entlab::kExitConfig;
}
