#include "mbll/commands.hpp"
#include "mbll/demos.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <iostream>

namespace {

// Error envelope on stderr plus, when an output directory is known, an
// error.json machine-readable copy.
void report_error(const std::string& kind, const std::string& what,
                  const std::string& out_dir) {
  mbll::json err;
  err["error"]["kind"] = kind;
  err["error"]["message"] = what;
  std::cerr << err.dump() << "\n";
  if (!out_dir.empty()) {
    try {
      std::filesystem::create_directories(out_dir);
      mbll::write_json_file(out_dir + "/error.json", err);
    } catch (...) {
    }
  }
}

mbll::RunConfig load_config(const std::string& path, const std::string& out_override,
                            std::optional<std::uint64_t> seed_override) {
  mbll::json j;
  try {
    j = mbll::read_json_file(path);
  } catch (const std::exception& e) {
    throw mbll::ConfigError(std::string("cannot read config: ") + e.what());
  }
  mbll::RunConfig rc = mbll::parse_run_config(j);
  if (!out_override.empty()) rc.out = out_override;
  if (seed_override) rc.seed = *seed_override;
  return rc;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multivariate Bayesian last layer regression"};
  app.require_subcommand(1);

  std::string config_path, model_path, data_path, out_path;
  std::optional<std::uint64_t> seed_override;
  std::uint64_t demo_seed = 0;
  int n_seeds = 1;
  int jobs = static_cast<int>(std::thread::hardware_concurrency());
  if (jobs < 1) jobs = 1;

  auto* fit = app.add_subcommand("fit", "fit a model from a JSON config");
  fit->add_option("--config", config_path, "config JSON")->required();
  fit->add_option("--out", out_path, "output directory (overrides config)");
  std::uint64_t seed_val = 0;
  bool seed_set = false;
  fit->add_option("--seed", seed_val, "seed (overrides config)")
      ->each([&](const std::string&) { seed_set = true; });

  auto* predict = app.add_subcommand("predict", "predict from a fitted model");
  predict->add_option("--model", model_path, "model.json")->required();
  predict->add_option("--data", data_path, "input CSV")->required();
  std::string pred_out = "predictions.csv";
  predict->add_option("--out", pred_out, "output CSV");

  auto* eval = app.add_subcommand("eval", "evaluate a model or a config over seeds");
  eval->add_option("--model", model_path, "model.json (single-model mode)");
  eval->add_option("--data", data_path, "test CSV (single-model mode)");
  eval->add_option("--config", config_path, "config JSON (seed-sweep mode)");
  eval->add_option("--seeds", n_seeds, "number of seeds in sweep mode");
  eval->add_option("--jobs", jobs, "parallel fits in sweep mode");
  eval->add_option("--out", out_path, "output directory");
  eval->add_option("--seed", seed_val, "base seed (overrides config)")
      ->each([&](const std::string&) { seed_set = true; });

  auto* demo = app.add_subcommand("demo", "reproduce a figure pipeline");
  std::string demo_name;
  demo->add_option("name", demo_name, "interp | degenerate_em | varx_beijing | transfer")
      ->required();
  demo->add_option("--data", data_path, "input CSV (varx_beijing)");
  demo->add_option("--out", out_path, "output directory");
  demo->add_option("--seed", demo_seed, "seed");

  CLI11_PARSE(app, argc, argv);
  if (seed_set) seed_override = seed_val;

  try {
    if (*fit) {
      const mbll::RunConfig rc = load_config(config_path, out_path, seed_override);
      return mbll::cmd_fit(rc);
    }
    if (*predict) {
      return mbll::cmd_predict(model_path, data_path, pred_out);
    }
    if (*eval) {
      if (!config_path.empty()) {
        mbll::RunConfig rc = load_config(config_path, out_path, seed_override);
        return mbll::cmd_eval_seeds(rc, n_seeds, jobs);
      }
      if (model_path.empty() || data_path.empty()) {
        throw mbll::ConfigError("eval: need --model and --data, or --config");
      }
      return mbll::cmd_eval(model_path, data_path,
                            out_path.empty() ? "." : out_path);
    }
    if (*demo) {
      const std::string out = out_path.empty() ? "demo_" + demo_name : out_path;
      if (demo_name == "interp") return mbll::cmd_demo_interp(demo_seed, out);
      if (demo_name == "degenerate_em") return mbll::cmd_demo_degenerate(demo_seed, out);
      if (demo_name == "transfer") return mbll::cmd_demo_transfer(demo_seed, out);
      if (demo_name == "varx_beijing") {
        return mbll::cmd_demo_varx(data_path, demo_seed, out);
      }
      throw mbll::ConfigError("demo: unknown name '" + demo_name + "'");
    }
  } catch (const mbll::ConfigError& e) {
    report_error("config", e.what(), out_path);
    return 2;
  } catch (const std::invalid_argument& e) {
    report_error("config", e.what(), out_path);
    return 2;
  } catch (const std::exception& e) {
    report_error("numeric", e.what(), out_path);
    return 3;
  }
  return 0;
}
