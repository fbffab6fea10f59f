#include "mbll/commands.hpp"
#include "mbll/demos.hpp"

#include <catch2/catch_amalgamated.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

using namespace mbll;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string slurp(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

json tiny_interp_config(const std::string& out) {
  json j;
  j["version"] = 1;
  j["model_kind"] = "normal";
  j["seed"] = 5;
  j["out"] = out;
  j["data"] = {{"generator", "interp1d"}, {"n", 160}};
  j["features"] = {{"kind", "mlp"},
                   {"hidden", json::array({16, 16})},
                   {"activation", "softplus"}};
  j["em"] = {{"mode", "fixed_M_only"},
             {"k_constraint", "isotropic"},
             {"sigma_mode", "head"},
             {"max_iter", 10},
             {"rel_tol", 1e-4},
             {"train_features", true},
             {"sgd", {{"epochs", 2}, {"batch_size", 32}, {"lr", 1e-3}}}};
  return j;
}

int run_cli(const std::string& args) {
#ifdef MBLL_BIN
  const std::string cmd = std::string(MBLL_BIN) + " " + args + " > /dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WEXITSTATUS(status);
#else
  (void)args;
  return -1;
#endif
}

}  // namespace

TEST_CASE("config schema rejects unknown keys and bad values") {
  json j = tiny_interp_config("x");
  REQUIRE_NOTHROW(parse_run_config(j));

  json bad = j;
  bad["extra_key"] = 1;
  REQUIRE_THROWS_AS(parse_run_config(bad), ConfigError);

  bad = j;
  bad["em"]["surprise"] = true;
  REQUIRE_THROWS_AS(parse_run_config(bad), ConfigError);

  bad = j;
  bad["data"]["csv"] = "also.csv";  // two data sources
  REQUIRE_THROWS_AS(parse_run_config(bad), ConfigError);

  bad = j;
  bad["model_kind"] = "student";
  REQUIRE_THROWS_AS(parse_run_config(bad), ConfigError);

  bad = j;
  bad["em"]["mode"] = "nonsense";
  REQUIRE_THROWS_AS(parse_run_config(bad), ConfigError);

  bad = j;
  bad["features"]["kind"] = "pretrained";  // missing weights
  REQUIRE_THROWS_AS(parse_run_config(bad), ConfigError);
}

TEST_CASE("fit writes artifacts with a monotone log-MAP trace") {
  const fs::path dir = temp_dir("mbll_cli_fit");
  const RunConfig rc = parse_run_config(tiny_interp_config(dir.string()));
  REQUIRE(cmd_fit(rc) == 0);
  REQUIRE(fs::exists(dir / "model.json"));
  REQUIRE(fs::exists(dir / "trace.csv"));
  REQUIRE(fs::exists(dir / "summary.json"));

  std::ifstream trace(dir / "trace.csv");
  std::string line;
  std::getline(trace, line);  // header
  double prev = -1e300;
  int rows = 0;
  while (std::getline(trace, line)) {
    std::stringstream ss(line);
    std::string cell;
    std::getline(ss, cell, ',');  // iter
    std::getline(ss, cell, ',');  // log_evidence
    std::getline(ss, cell, ',');  // log_map
    const double log_map = std::stod(cell);
    REQUIRE(log_map >= prev - 1e-8);
    prev = log_map;
    ++rows;
  }
  REQUIRE(rows >= 2);
}

TEST_CASE("identical config and seed produce a byte-identical model artifact") {
  const fs::path d1 = temp_dir("mbll_cli_repro1");
  const fs::path d2 = temp_dir("mbll_cli_repro2");
  RunConfig rc = parse_run_config(tiny_interp_config(d1.string()));
  REQUIRE(cmd_fit(rc) == 0);
  rc.out = d2.string();
  REQUIRE(cmd_fit(rc) == 0);
  REQUIRE(slurp(d1 / "model.json") == slurp(d2 / "model.json"));
}

TEST_CASE("predict: decomposition adds up per row; empty input yields a header") {
  const fs::path dir = temp_dir("mbll_cli_predict");
  const RunConfig rc = parse_run_config(tiny_interp_config(dir.string()));
  REQUIRE(cmd_fit(rc) == 0);

  // prediction inputs spanning data and extrapolation regions
  const fs::path in_csv = dir / "inputs.csv";
  {
    std::ofstream out(in_csv);
    out << "x\n";
    for (int i = 0; i < 40; ++i) out << (-10.0 + 0.5 * i) << "\n";
  }
  const fs::path out_csv = dir / "pred.csv";
  REQUIRE(cmd_predict((dir / "model.json").string(), in_csv.string(),
                      out_csv.string()) == 0);
  std::ifstream in(out_csv);
  std::string line;
  std::getline(in, line);
  REQUIRE(line == "mean_y,aleatoric,epistemic,total");
  int rows = 0;
  while (std::getline(in, line)) {
    std::stringstream ss(line);
    std::string cell;
    std::vector<double> vals;
    while (std::getline(ss, cell, ',')) vals.push_back(std::stod(cell));
    REQUIRE(vals.size() == 4);
    REQUIRE(std::abs(vals[3] - (vals[1] + vals[2])) < 1e-10);
    ++rows;
  }
  REQUIRE(rows == 40);

  const fs::path empty_csv = dir / "empty.csv";
  {
    std::ofstream out(empty_csv);
    out << "x\n";
  }
  const fs::path empty_out = dir / "empty_pred.csv";
  REQUIRE(cmd_predict((dir / "model.json").string(), empty_csv.string(),
                      empty_out.string()) == 0);
  REQUIRE(slurp(empty_out) == "mean_y,aleatoric,epistemic,total\n");
}

TEST_CASE("eval emits a complete finite report with a calibration curve") {
  const fs::path dir = temp_dir("mbll_cli_eval");
  const RunConfig rc = parse_run_config(tiny_interp_config(dir.string()));
  REQUIRE(cmd_fit(rc) == 0);
  const Dataset test = gen_interp1d(200, 99);
  const fs::path test_csv = dir / "test.csv";
  {
    std::ofstream out(test_csv);
    out << "x,y\n";
    for (Eigen::Index i = 0; i < test.n(); ++i) {
      out << test.X(0, i) << ',' << test.Y(0, i) << "\n";
    }
  }
  REQUIRE(cmd_eval((dir / "model.json").string(), test_csv.string(),
                   dir.string()) == 0);
  const json rep = read_json_file((dir / "report.json").string());
  for (const char* key : {"rmse", "nll", "nlev", "ece"}) {
    REQUIRE(rep.contains(key));
    REQUIRE(std::isfinite(rep.at(key).get<double>()));
  }
  REQUIRE(rep.at("ece").get<double>() >= 0.0);
  REQUIRE(rep.at("ece").get<double>() <= 1.0);
  REQUIRE(fs::exists(dir / "calibration.csv"));
}

TEST_CASE("degenerate demo emits both traces and the 1/n law") {
  const fs::path dir = temp_dir("mbll_cli_demo_deg");
  REQUIRE(cmd_demo_degenerate(3, dir.string()) == 0);
  REQUIRE(fs::exists(dir / "degenerate_trace.csv"));
  REQUIRE(fs::exists(dir / "hyperprior_trace.csv"));
  REQUIRE(fs::exists(dir / "trace_k.svg"));

  // trace(K_n) * n stabilizes after n = 20
  std::ifstream in(dir / "degenerate_trace.csv");
  std::string line;
  std::getline(in, line);
  std::vector<double> trace_k;
  while (std::getline(in, line)) {
    std::stringstream ss(line);
    std::string cell;
    for (int c = 0; c < 4; ++c) std::getline(ss, cell, ',');
    trace_k.push_back(std::stod(cell));
  }
  REQUIRE(trace_k.size() >= 100);
  const double ref = trace_k[39] * 40.0;
  for (int n : {20, 60, 100}) {
    REQUIRE(std::abs(trace_k[n - 1] * n - ref) / ref < 0.05);
  }
}

TEST_CASE("varx demo on a synthetic Beijing-schema series reports dim 17") {
  const fs::path dir = temp_dir("mbll_cli_varx");
  const fs::path csv = dir / "beijing_like.csv";
  {
    std::ofstream out(csv);
    out << "No,year,month,day,hour,PM2.5,PM10,SO2,NO2,CO,O3,TEMP,PRES,DEWP,RAIN,wd,"
           "WSPM,station\n";
    Rng rng(1);
    for (int t = 0; t < 420; ++t) {
      const double s = std::sin(0.07 * t);
      out << t << ",2013,3,1," << (t % 24);
      for (int k = 0; k < 6; ++k) {
        out << ',' << (s * (k + 1) + 0.05 * rng.normal());
      }
      for (int k = 0; k < 4; ++k) {
        out << ',' << (std::cos(0.05 * t + k) + 0.05 * rng.normal());
      }
      out << ",N," << (1.0 + 0.2 * std::abs(rng.normal())) << ",Site\n";
    }
  }
  REQUIRE(cmd_demo_varx(csv.string(), 1, dir.string()) == 0);
  const json summary = read_json_file((dir / "summary.json").string());
  REQUIRE(summary.at("embedded_dim").get<int>() == 17);
  REQUIRE(fs::exists(dir / "predictions.csv"));
  REQUIRE(fs::exists(dir / "model.json"));
}

#ifdef MBLL_BIN
TEST_CASE("CLI exit codes: 2 for config errors") {
  const fs::path dir = temp_dir("mbll_cli_exit");
  const fs::path bad = dir / "bad.json";
  {
    std::ofstream out(bad);
    out << "{\"version\": 1, \"bogus\": true}";
  }
  REQUIRE(run_cli("fit --config " + bad.string()) == 2);
  REQUIRE(run_cli("fit --config /nonexistent.json") == 2);
  REQUIRE(run_cli("demo nosuchdemo") == 2);
  REQUIRE(run_cli("eval") == 2);

  // a healthy tiny fit through the binary returns 0
  const fs::path good = dir / "good.json";
  {
    std::ofstream out(good);
    out << tiny_interp_config((dir / "run").string()).dump();
  }
  REQUIRE(run_cli("fit --config " + good.string()) == 0);
}
#endif
