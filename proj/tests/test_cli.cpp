// End-to-end tests of the apc binary: exit codes, file contracts, config
// precedence, and byte-identical reruns. The binary path comes from the
// build via APC_CLI_PATH.

#include <catch2/catch_amalgamated.hpp>

#include <sys/wait.h>
#include <unistd.h>

#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "apc/csv.hpp"
#include "apc/dataset.hpp"
#include "apc/fit_result.hpp"
#include "apc/rng.hpp"

namespace fs = std::filesystem;

namespace {

struct RunResult {
  int exit_code = -1;
  std::string output;  // stdout + stderr
};

RunResult run_cli(const std::string& args) {
  const std::string cmd = std::string(APC_CLI_PATH) + " " + args + " 2>&1";
  RunResult r;
  FILE* pipe = popen(cmd.c_str(), "r");
  REQUIRE(pipe != nullptr);
  char buf[4096];
  while (std::fgets(buf, sizeof(buf), pipe) != nullptr) r.output += buf;
  const int status = pclose(pipe);
  r.exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  REQUIRE(in.good());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// Fresh scratch dir per test run; contents are left behind for debugging.
fs::path scratch_dir() {
  static int counter = 0;
  const fs::path p = fs::temp_directory_path() /
                     ("apc_cli_test_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
  fs::create_directories(p);
  return p;
}

// Small synthetic dataset: 8 bands from age 30, years 2004-2015, smooth
// surface plus Poisson noise so both engines have something to do.
std::string write_dataset(const fs::path& dir) {
  const fs::path path = dir / "data.csv";
  std::ofstream out(path);
  out << "age_group,period,deaths,population\n";
  for (int a = 0; a < 8; ++a) {
    const int lo = 30 + 5 * a;
    const double mid = lo + 2.5;
    for (int j = 0; j < 12; ++j) {
      const long long year = 2004 + j;
      const double eta = -8.2 + 0.025 * (mid - 50.0) - 0.01 * j + 0.15 * std::sin(0.4 * mid + 0.3 * j);
      const double N = 80000.0 + 900.0 * a + 250.0 * j;
      apc::CounterRng rng(99u, static_cast<std::uint64_t>(a), static_cast<std::uint64_t>(j));
      out << lo << "-" << lo + 4 << "," << year << ","
          << rng.poisson(N * std::exp(eta)) << "," << static_cast<long long>(N) << "\n";
    }
  }
  out.close();
  return path.string();
}

}  // namespace

TEST_CASE("fit: spline outputs, reruns byte-identical, stable config hash") {
  const fs::path dir = scratch_dir();
  const std::string data = write_dataset(dir);
  const std::string base = "fit --data " + data + " --engine spline --basis crs --knots 5,5,6 --train-through 2011 --dump-design";

  const RunResult r1 = run_cli(base + " --out " + (dir / "f1").string());
  CAPTURE(r1.output);
  REQUIRE(r1.exit_code == 0);
  REQUIRE(fs::exists(dir / "f1" / "fit.csv"));
  REQUIRE(fs::exists(dir / "f1" / "manifest.json"));
  REQUIRE(fs::exists(dir / "f1" / "design.csv"));

  // One manifest per output directory.
  int manifests = 0;
  for (const auto& e : fs::directory_iterator(dir / "f1"))
    if (e.path().filename() == "manifest.json") ++manifests;
  REQUIRE(manifests == 1);

  const apc::FitResultTable t = apc::FitResultTable::load_csv((dir / "f1" / "fit.csv").string());
  REQUIRE(t.cells.size() == 8u * 12u);
  int n_pred = 0;
  for (const auto& c : t.cells) {
    REQUIRE(c.lower <= c.eta);
    REQUIRE(c.eta <= c.upper);
    REQUIRE(c.prediction == (c.period > 2011));
    n_pred += c.prediction;
  }
  REQUIRE(n_pred == 8 * 4);

  const RunResult r2 = run_cli(base + " --out " + (dir / "f2").string());
  REQUIRE(r2.exit_code == 0);
  CHECK(slurp(dir / "f1" / "fit.csv") == slurp(dir / "f2" / "fit.csv"));
  CHECK(slurp(dir / "f1" / "design.csv") == slurp(dir / "f2" / "design.csv"));

  // The manifest differs in wall time and paths but the config hash must
  // identify identical modelling inputs.
  const std::string m1 = slurp(dir / "f1" / "manifest.json");
  const std::string m2 = slurp(dir / "f2" / "manifest.json");
  auto hash_of = [](const std::string& m) {
    const auto pos = m.find("config_hash");
    REQUIRE(pos != std::string::npos);
    return m.substr(pos, 40);
  };
  CHECK(hash_of(m1) == hash_of(m2));
}

TEST_CASE("fit: rw2 outputs hyper summary; engine flag conflicts exit 2") {
  const fs::path dir = scratch_dir();
  const std::string data = write_dataset(dir);

  const RunResult ok = run_cli("fit --data " + data + " --engine rw2 --pc-u 1 --train-through 2011 --out " + (dir / "r").string());
  CAPTURE(ok.output);
  REQUIRE(ok.exit_code == 0);
  REQUIRE(fs::exists(dir / "r" / "fit.csv"));
  REQUIRE(fs::exists(dir / "r" / "hyper.json"));
  REQUIRE(fs::exists(dir / "r" / "manifest.json"));
  // Same schema as the spline engine.
  const apc::CsvTable tab = apc::read_csv((dir / "r" / "fit.csv").string());
  REQUIRE(tab.header == std::vector<std::string>{"age", "period", "eta_hat", "lower", "upper", "window"});

  const RunResult bad1 = run_cli("fit --data " + data + " --engine rw2 --basis crs --out " + (dir / "x").string());
  CHECK(bad1.exit_code == 2);
  CHECK(bad1.output.find("--basis") != std::string::npos);

  const RunResult bad2 = run_cli("fit --data " + data + " --engine rw2 --knots 4,4,5 --out " + (dir / "x").string());
  CHECK(bad2.exit_code == 2);
  CHECK(bad2.output.find("--knots") != std::string::npos);

  const RunResult bad3 = run_cli("fit --data " + data + " --engine spline --pc-u 3 --out " + (dir / "x").string());
  CHECK(bad3.exit_code == 2);
  CHECK(bad3.output.find("--pc-u") != std::string::npos);

  const RunResult bad4 = run_cli("fit --data " + data + " --engine nonsense --out " + (dir / "x").string());
  CHECK(bad4.exit_code == 2);

  const RunResult bad5 = run_cli("fit --data " + (dir / "missing.csv").string() + " --out " + (dir / "x").string());
  CHECK(bad5.exit_code == 2);
}

TEST_CASE("fit: config file fills unset flags, flags win on conflict") {
  const fs::path dir = scratch_dir();
  const std::string data = write_dataset(dir);
  const fs::path cfg = dir / "cfg.json";
  {
    std::ofstream out(cfg);
    out << R"({"engine": "spline", "basis": "bs", "knots": [4,4,5], "train_through": 2010})";
  }

  const RunResult r1 = run_cli("fit --data " + data + " --config " + cfg.string() + " --out " + (dir / "c1").string());
  CAPTURE(r1.output);
  REQUIRE(r1.exit_code == 0);
  const std::string m1 = slurp(dir / "c1" / "manifest.json");
  CHECK(m1.find("\"basis\": \"bs\"") != std::string::npos);
  CHECK(m1.find("\"train_through\": 2010") != std::string::npos);

  const RunResult r2 = run_cli("fit --data " + data + " --config " + cfg.string() + " --basis tprs --out " + (dir / "c2").string());
  REQUIRE(r2.exit_code == 0);
  const std::string m2 = slurp(dir / "c2" / "manifest.json");
  CHECK(m2.find("\"basis\": \"tprs\"") != std::string::npos);

  const RunResult bad = run_cli("fit --data " + data + " --config " + (dir / "nope.json").string() + " --out " + (dir / "c3").string());
  CHECK(bad.exit_code == 2);
}

TEST_CASE("forecast: emits requested horizon only, rejects over-horizon") {
  const fs::path dir = scratch_dir();
  const std::string data = write_dataset(dir);

  const RunResult r = run_cli("forecast --data " + data + " --knots 6,6,8 --train-through 2011 --horizon 2 --out " + (dir / "fc").string());
  CAPTURE(r.output);
  REQUIRE(r.exit_code == 0);
  const apc::FitResultTable t = apc::FitResultTable::load_csv((dir / "fc" / "forecast.csv").string());
  REQUIRE(t.cells.size() == 8u * 2u);
  for (const auto& c : t.cells) {
    CHECK(c.prediction);
    CHECK(c.period >= 2012);
    CHECK(c.period <= 2013);
  }

  // Only 4 periods beyond 2011 exist in the file.
  const RunResult over = run_cli("forecast --data " + data + " --knots 6,6,8 --train-through 2011 --horizon 5 --out " + (dir / "fx").string());
  CHECK(over.exit_code == 2);
  CHECK(over.output.find("missing_exposure") != std::string::npos);

  const RunResult rw = run_cli("forecast --data " + data + " --engine rw2 --train-through 2011 --horizon 2 --out " + (dir / "fr").string());
  CAPTURE(rw.output);
  REQUIRE(rw.exit_code == 0);
  const apc::FitResultTable tr = apc::FitResultTable::load_csv((dir / "fr" / "forecast.csv").string());
  REQUIRE(tr.cells.size() == 8u * 2u);
}

TEST_CASE("score: windows, split-year override, x100 only in summary") {
  const fs::path dir = scratch_dir();
  const std::string data = write_dataset(dir);
  REQUIRE(run_cli("fit --data " + data + " --knots 6,6,8 --train-through 2011 --out " + (dir / "f").string()).exit_code == 0);
  const std::string fit_csv = (dir / "f" / "fit.csv").string();

  const RunResult r = run_cli("score --fit " + fit_csv + " --data " + data + " --out " + (dir / "s").string());
  CAPTURE(r.output);
  REQUIRE(r.exit_code == 0);
  CHECK(r.output.find("estimation") != std::string::npos);
  CHECK(r.output.find("prediction") != std::string::npos);
  CHECK(r.output.find("x10^-2") != std::string::npos);
  REQUIRE(fs::exists(dir / "s" / "score.json"));
  const std::string sj = slurp(dir / "s" / "score.json");
  CHECK(sj.find("interval_score") != std::string::npos);
  CHECK(sj.find("x10") == std::string::npos);  // machine output stays raw

  // Re-tagging the split moves cells between windows.
  const RunResult r2 = run_cli("score --fit " + fit_csv + " --data " + data + " --split-year 2010 --out " + (dir / "s2").string());
  REQUIRE(r2.exit_code == 0);
  const std::string sj2 = slurp(dir / "s2" / "score.json");
  const auto ncells = [](const std::string& s, const char* window) {
    const auto w = s.find(window);
    REQUIRE(w != std::string::npos);
    const auto n = s.find("\"n_cells\": ", w);
    REQUIRE(n != std::string::npos);
    return std::atoi(s.c_str() + n + 11);
  };
  CHECK(ncells(sj2, "\"estimation\"") == 8 * 6);
  CHECK(ncells(sj2, "\"prediction\"") == 8 * 6);

  // Either --truth or --data, not both, not neither.
  CHECK(run_cli("score --fit " + fit_csv).exit_code == 2);
  CHECK(run_cli("score --fit " + fit_csv + " --data " + data + " --truth " + data).exit_code == 2);
}

TEST_CASE("compare: self-compare exact, mismatched grids rejected") {
  const fs::path dir = scratch_dir();
  const std::string data = write_dataset(dir);
  REQUIRE(run_cli("fit --data " + data + " --knots 6,6,8 --train-through 2011 --out " + (dir / "a").string()).exit_code == 0);
  REQUIRE(run_cli("fit --data " + data + " --engine rw2 --train-through 2011 --out " + (dir / "b").string()).exit_code == 0);
  const std::string fa = (dir / "a" / "fit.csv").string();
  const std::string fb = (dir / "b" / "fit.csv").string();

  const RunResult self = run_cli("compare --fit-a " + fa + " --fit-b " + fa + " --out " + (dir / "cs").string());
  CAPTURE(self.output);
  REQUIRE(self.exit_code == 0);
  CHECK(self.output.find("correlation=1.000000") != std::string::npos);
  CHECK(self.output.find("max|delta|=0") != std::string::npos);

  const RunResult cross = run_cli("compare --fit-a " + fa + " --fit-b " + fb + " --out " + (dir / "cc").string());
  REQUIRE(cross.exit_code == 0);
  REQUIRE(fs::exists(dir / "cc" / "compare.csv"));
  const apc::CsvTable tab = apc::read_csv((dir / "cc" / "compare.csv").string());
  REQUIRE(tab.rows.size() == 8u * 12u);

  // Point estimates of the two engines agree closely on the same data.
  const int cd = tab.require_column("delta", "compare.csv");
  double max_abs = 0.0;
  for (const auto& row : tab.rows)
    max_abs = std::max(max_abs, std::abs(std::stod(row[static_cast<std::size_t>(cd)])));
  CHECK(max_abs < 0.5);

  // Truncated grid: drop the last period's rows from one file.
  {
    apc::FitResultTable t = apc::FitResultTable::load_csv(fb);
    t.cells.resize(t.cells.size() - 8);
    t.save_csv((dir / "short.csv").string());
  }
  const RunResult bad = run_cli("compare --fit-a " + fa + " --fit-b " + (dir / "short.csv").string());
  CHECK(bad.exit_code == 2);
  CHECK(bad.output.find("grid_mismatch") != std::string::npos);
}

TEST_CASE("plot-data: heatmap is I x J, lineplot carries both engines") {
  const fs::path dir = scratch_dir();
  const std::string data = write_dataset(dir);
  REQUIRE(run_cli("fit --data " + data + " --knots 6,6,8 --train-through 2011 --out " + (dir / "a").string()).exit_code == 0);
  REQUIRE(run_cli("fit --data " + data + " --engine rw2 --train-through 2011 --out " + (dir / "b").string()).exit_code == 0);
  fs::copy_file(dir / "b" / "fit.csv", dir / "rw2_fit.csv");

  const RunResult r = run_cli("plot-data --data " + data + " --fit " + (dir / "a" / "fit.csv").string() +
                              " --fit-b " + (dir / "rw2_fit.csv").string() + " --out " + (dir / "p").string());
  CAPTURE(r.output);
  REQUIRE(r.exit_code == 0);

  const apc::CsvTable heat = apc::read_csv((dir / "p" / "heatmap.csv").string());
  REQUIRE(heat.rows.size() == 8u * 12u);
  REQUIRE(heat.header == std::vector<std::string>{"age", "period", "observed_log_rate"});

  const apc::CsvTable line = apc::read_csv((dir / "p" / "lineplot.csv").string());
  REQUIRE(line.rows.size() == 2u * 8u * 12u);
  const int ce = line.require_column("engine", "lineplot.csv");
  int n_a = 0, n_b = 0;
  for (const auto& row : line.rows) {
    if (row[static_cast<std::size_t>(ce)] == "fit") ++n_a;
    if (row[static_cast<std::size_t>(ce)] == "rw2_fit") ++n_b;
  }
  CHECK(n_a == 8 * 12);
  CHECK(n_b == 8 * 12);

  // Observed column matches the half-corrected log rate of the data file.
  const apc::ApcDataset d = apc::load_csv(data);
  const Eigen::MatrixXd lr = d.log_rates(0.5);
  const int co = line.require_column("observed_log_rate", "lineplot.csv");
  CHECK(std::stod(line.rows[0][static_cast<std::size_t>(co)]) == Catch::Approx(lr(0, 0)).margin(1e-12));
}

TEST_CASE("simulate: tiny run writes results, summary, truth, manifest") {
  const fs::path dir = scratch_dir();
  const fs::path cfg = dir / "sim.json";
  {
    std::ofstream out(cfg);
    out << R"({"age_min": 10, "age_max": 39, "period_min": 2000, "period_max": 2009,
               "exposure": 400000})";
  }
  const RunResult r = run_cli("simulate --replicates 2 --seed 7 --train-through 2007 --threads 1 "
                              "--engines rw2-u1 --config " + cfg.string() + " --out " + (dir / "sim").string());
  CAPTURE(r.output);
  REQUIRE(r.exit_code == 0);
  REQUIRE(fs::exists(dir / "sim" / "results.csv"));
  REQUIRE(fs::exists(dir / "sim" / "summary.csv"));
  REQUIRE(fs::exists(dir / "sim" / "truth.json"));
  REQUIRE(fs::exists(dir / "sim" / "manifest.json"));

  const apc::CsvTable res = apc::read_csv((dir / "sim" / "results.csv").string());
  REQUIRE(res.rows.size() == 4u);  // 2 replicates x 1 engine x 2 windows

  // Determinism: same seed, same files.
  const RunResult r2 = run_cli("simulate --replicates 2 --seed 7 --train-through 2007 --threads 1 "
                               "--engines rw2-u1 --config " + cfg.string() + " --out " + (dir / "sim2").string());
  REQUIRE(r2.exit_code == 0);
  CHECK(slurp(dir / "sim" / "results.csv") == slurp(dir / "sim2" / "results.csv"));
  CHECK(slurp(dir / "sim" / "summary.csv") == slurp(dir / "sim2" / "summary.csv"));

  const RunResult bad = run_cli("simulate --replicates 2 --engines no-such-engine --out " + (dir / "sx").string());
  CHECK(bad.exit_code == 2);
  CHECK(bad.output.find("--engines") != std::string::npos);
}

TEST_CASE("help and version exit 0; unknown subcommand exits 2") {
  CHECK(run_cli("--help").exit_code == 0);
  CHECK(run_cli("--version").exit_code == 0);
  CHECK(run_cli("frobnicate").exit_code == 2);
  CHECK(run_cli("").exit_code == 2);  // a subcommand is required
}
