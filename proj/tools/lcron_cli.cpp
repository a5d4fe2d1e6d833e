// lcron: command-line experiment runner.
//
//   lcron generate --out data.jsonl [--config run.cfg] [--n_days 3 ...]
//   lcron train    [--config run.cfg] [--method bce ...]
//   lcron eval     --checkpoint model.ckpt [--dataset data.jsonl]
//   lcron stream   [--incremental true]
//   lcron diagnose
//   lcron sweep    --methods lcron,bce --taus 1,20 --seeds 5
//
// Settings are applied in order: defaults, then --config, then flags.
// Outputs land in --output_dir, else $LCRON_OUTPUT_DIR, else ./lcron_out.

#include <iostream>
#include <map>
#include <string>
#include <vector>

#include "../vendor/CLI11.hpp"
#include "lcron/harness.hpp"

namespace {

struct Settings {
  std::string config_path;
  std::map<std::string, std::string> flags;
};

void add_settings(CLI::App* cmd, Settings& s) {
  cmd->add_option("--config", s.config_path, "key = value configuration file");
  for (const std::string& key : lcron::config_keys()) {
    cmd->add_option_function<std::string>(
        "--" + key, [&s, key](const std::string& v) { s.flags[key] = v; }, "override " + key);
  }
}

lcron::ExperimentConfig resolve(const Settings& s) {
  lcron::ExperimentConfig cfg;
  if (!s.config_path.empty()) lcron::load_config(s.config_path, cfg);
  for (const auto& [key, value] : s.flags) lcron::apply_setting(cfg, key, value);
  cfg.validate();
  return cfg;
}

void print_gap(const char* label, const lcron::GapSummary& g) {
  std::cout << label << ": impressions " << g.impressions << "  mean delta' " << g.mean_delta_prime
            << "  max delta' " << g.max_delta_prime;
  if (g.enumerated > 0) std::cout << "  mean delta " << g.mean_delta << "  max delta " << g.max_delta;
  std::cout << "\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"End-to-end cascade ranking experiments"};
  app.require_subcommand(1);

  Settings settings;
  std::string out_path;
  std::string checkpoint;
  std::string methods_arg = "lcron,lcron_fixed_weights,bce,ranknet,e2e_only,single_only";
  std::string taus_arg;
  std::size_t seeds = 5;

  auto* gen = app.add_subcommand("generate", "write a synthetic dataset");
  gen->add_option("--out", out_path, "dataset file")->required();
  auto* train = app.add_subcommand("train", "train, evaluate on the last day, save a checkpoint");
  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on the last day");
  eval->add_option("--checkpoint", checkpoint, "checkpoint file")->required();
  auto* stream = app.add_subcommand("stream", "day-by-day streaming evaluation");
  auto* diag = app.add_subcommand("diagnose", "bound-gap statistics before and after training");
  auto* sweep = app.add_subcommand("sweep", "methods x tau grid over several seeds");
  sweep->add_option("--methods", methods_arg, "comma-separated methods");
  sweep->add_option("--taus", taus_arg, "comma-separated temperatures (default: --tau)");
  sweep->add_option("--seeds", seeds, "seeds per configuration");
  for (auto* cmd : {gen, train, eval, stream, diag, sweep}) add_settings(cmd, settings);

  CLI11_PARSE(app, argc, argv);

  try {
    const lcron::ExperimentConfig cfg = resolve(settings);
    const std::string dir = lcron::output_dir(cfg);

    if (gen->parsed()) {
      lcron::write_dataset(out_path, lcron::generate_dataset(cfg.synth));
      std::cout << "wrote " << out_path << "\n";
      return 0;
    }

    const lcron::Dataset ds = lcron::load_or_generate(cfg);

    if (train->parsed() || stream->parsed()) {
      lcron::ExperimentConfig c = cfg;
      if (stream->parsed()) c.mode = lcron::EvalMode::kStreaming;
      const lcron::RunReport r = lcron::run(c, ds);
      lcron::write_run_outputs(dir, {r});
      lcron::save_checkpoint(dir + "/model.ckpt", r.models);
      lcron::write_day_summary(std::cout, r);
      return 0;
    }

    if (eval->parsed()) {
      const int days = ds.day_count();
      const auto models =
          lcron::load_checkpoint(checkpoint, lcron::stage_specs(cfg.cascade.stages(), ds.feature_dim));
      lcron::RunReport r;
      r.method = cfg.method;
      r.op = cfg.op;
      r.temperature = cfg.temperature;
      r.seed = cfg.seed;
      r.days.push_back(lcron::evaluate(cfg, models, ds.days(days - 1, days)));
      lcron::write_run_outputs(dir, {r});
      lcron::write_day_summary(std::cout, r);
      return 0;
    }

    if (diag->parsed()) {
      const lcron::DiagnosticsReport r = lcron::diagnostics_run(cfg, ds);
      print_gap("before", r.before);
      print_gap("after ", r.after);
      return 0;
    }

    if (sweep->parsed()) {
      std::vector<lcron::Method> methods;
      std::stringstream in(methods_arg);
      for (std::string m; std::getline(in, m, ',');) methods.push_back(lcron::parse_method(lcron::detail::trim(m)));
      const lcron::Vector taus =
          taus_arg.empty() ? lcron::Vector{cfg.temperature} : lcron::detail::parse_list<double>("taus", taus_arg);
      const auto rows = lcron::sweep(cfg, ds, methods, taus, seeds);
      std::vector<lcron::RunReport> all;
      for (const auto& row : rows) all.insert(all.end(), row.runs.begin(), row.runs.end());
      lcron::write_run_outputs(dir, all);
      std::filesystem::create_directories(dir);
      std::ofstream summary(dir + "/sweep_summary.txt");
      lcron::write_sweep_summary(summary, rows);
      lcron::write_sweep_summary(std::cout, rows);
      return 0;
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
