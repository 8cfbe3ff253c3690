// apc: command-line front end for the smoothing library.
//
// Subcommands: fit, forecast, score, simulate, compare, plot-data.
// Exit codes: 0 success, 2 validation error, 3 numerical failure.
// Config precedence: explicit flags > --config JSON file > built-in defaults.
// Every output directory receives exactly one manifest.json.

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "apc/assessment.hpp"
#include "apc/bayes_fitter.hpp"
#include "apc/common.hpp"
#include "apc/csv.hpp"
#include "apc/dataset.hpp"
#include "apc/design.hpp"
#include "apc/fit_result.hpp"
#include "apc/freq_fitter.hpp"
#include "apc/sim_study.hpp"

#ifndef APC_VERSION
#define APC_VERSION "0.0.0"
#endif

namespace {

using nlohmann::json;

// Numerical failures exit 3; everything else a caller can fix exits 2.
int exit_for(apc::errc c) {
  switch (c) {
    case apc::errc::diverged:
    case apc::errc::singular_system:
    case apc::errc::optim_failed:
    case apc::errc::rank_loss:
      return 3;
    default:
      return 2;
  }
}

// FNV-1a over the canonical (sorted-key) JSON dump; stable across runs.
// The output directory is recorded but not hashed: the hash identifies the
// inputs that determine the results, not where they land.
std::string config_hash(const json& cfg) {
  json keyed = cfg;
  keyed.erase("out");
  const std::string s = keyed.dump();
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 1099511628211ull;
  }
  char buf[20];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

// Fills option values from the config file for flags the user did not pass.
class ConfigOverlay {
 public:
  ConfigOverlay(const CLI::App* cmd, const std::string& path) : cmd_(cmd) {
    if (path.empty()) return;
    std::ifstream in(path);
    apc::require(in.good(), apc::errc::bad_input, "cannot open config file " + path);
    try {
      in >> doc_;
    } catch (const json::exception& e) {
      apc::fail(apc::errc::bad_input, path + ": " + e.what());
    }
    apc::require(doc_.is_object(), apc::errc::bad_input, path + ": config root must be a JSON object");
  }

  template <class T>
  void get(const std::string& flag, const std::string& key, T& value) const {
    if (!doc_.contains(key) || cmd_->count(flag) > 0) return;
    try {
      value = doc_.at(key).get<T>();
    } catch (const json::exception&) {
      apc::fail(apc::errc::bad_input, "config key '" + key + "' has the wrong type");
    }
  }

  const json& doc() const { return doc_; }

 private:
  const CLI::App* cmd_;
  json doc_;
};

std::array<int, 3> parse_knots(const std::string& raw) {
  std::array<int, 3> k{};
  std::stringstream ss(raw);
  std::string piece;
  int i = 0;
  while (std::getline(ss, piece, ',')) {
    apc::require(i < 3, apc::errc::bad_input, "--knots needs exactly three comma-separated integers");
    try {
      std::size_t pos = 0;
      k[static_cast<std::size_t>(i)] = std::stoi(piece, &pos);
      apc::require(pos == piece.size(), apc::errc::bad_input, "--knots: '" + piece + "' is not an integer");
    } catch (const std::exception&) {
      apc::fail(apc::errc::bad_input, "--knots: '" + piece + "' is not an integer");
    }
    ++i;
  }
  apc::require(i == 3, apc::errc::bad_input, "--knots needs exactly three comma-separated integers");
  return k;
}

apc::SplineFamily parse_family(const std::string& s) {
  if (s == "crs") return apc::SplineFamily::crs;
  if (s == "bs") return apc::SplineFamily::bs;
  if (s == "tprs") return apc::SplineFamily::tprs;
  apc::fail(apc::errc::bad_input, "--basis must be crs, bs, or tprs, got '" + s + "'");
}

apc::SlopeDrop parse_drop(const std::string& s) {
  if (s == "cohort") return apc::SlopeDrop::cohort;
  if (s == "age") return apc::SlopeDrop::age;
  if (s == "period") return apc::SlopeDrop::period;
  apc::fail(apc::errc::bad_input, "--drop must be cohort, age, or period, got '" + s + "'");
}

std::string join_argv(int argc, char** argv) {
  std::string s;
  for (int i = 0; i < argc; ++i) {
    if (i) s += ' ';
    s += argv[i];
  }
  return s;
}

void write_json(const std::filesystem::path& path, const json& j) {
  std::ofstream out(path);
  apc::require(out.good(), apc::errc::bad_input, "cannot open " + path.string() + " for writing");
  out << j.dump(2) << '\n';
}

// Shared manifest skeleton; each command adds its convergence block.
json manifest_base(const std::string& command, const std::string& invocation,
                   const json& resolved, std::uint64_t seed, const std::string& engine,
                   double wall_ms) {
  json m;
  m["command"] = command;
  m["invocation"] = invocation;
  m["config"] = resolved;
  m["config_hash"] = config_hash(resolved);
  m["seed"] = seed;
  m["engine"] = engine;
  m["versions"] = {{"apc", APC_VERSION},
                   {"eigen", std::to_string(EIGEN_WORLD_VERSION) + "." +
                                 std::to_string(EIGEN_MAJOR_VERSION) + "." +
                                 std::to_string(EIGEN_MINOR_VERSION)}};
  m["wall_ms"] = wall_ms;
  return m;
}

std::filesystem::path prepare_out_dir(const std::string& out) {
  apc::require(!out.empty(), apc::errc::bad_input, "--out directory is required");
  std::filesystem::path p(out);
  std::error_code ec;
  std::filesystem::create_directories(p, ec);
  apc::require(!ec && std::filesystem::is_directory(p), apc::errc::bad_input,
               "cannot create output directory " + out);
  return p;
}

double elapsed_ms(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
}

// Options shared by fit and forecast.
struct FitArgs {
  std::string data, out, config;
  std::string engine = "spline";
  std::string basis = "tprs";
  std::string knots_raw = "10,10,12";
  double pc_u = 1.0;
  double pc_alpha = 0.01;
  long long train_through = std::numeric_limits<long long>::min();  // min = last period
  std::string drop = "cohort";
  bool dump_design = false;
  int horizon = 0;  // forecast only
};

void add_fit_flags(CLI::App* cmd, FitArgs& a, bool forecast) {
  cmd->add_option("--data", a.data, "input CSV (age_group,period,deaths,population)");
  cmd->add_option("--out", a.out, "output directory");
  cmd->add_option("--config", a.config, "JSON config file (flags take precedence)");
  cmd->add_option("--engine", a.engine, "spline or rw2 (default spline)");
  cmd->add_option("--basis", a.basis, "spline basis: crs, bs, or tprs (spline engine only)");
  cmd->add_option("--knots", a.knots_raw, "age,period,cohort basis dimensions (spline engine only)");
  cmd->add_option("--pc-u", a.pc_u, "PC prior scale U (rw2 engine only)");
  cmd->add_option("--pc-alpha", a.pc_alpha, "PC prior tail probability (rw2 engine only)");
  cmd->add_option("--train-through", a.train_through, "last period used for estimation (default: last in data)");
  cmd->add_option("--drop", a.drop, "which slope the identification drops: cohort, age, or period");
  cmd->add_flag("--dump-design", a.dump_design, "also write the design matrix CSV");
  if (forecast) cmd->add_option("--horizon", a.horizon, "number of future periods")->required();
}

// Resolves flag/config/default precedence and checks engine-flag consistency.
json resolve_fit_args(const CLI::App* cmd, FitArgs& a) {
  ConfigOverlay cfg(cmd, a.config);
  cfg.get("--data", "data", a.data);
  cfg.get("--out", "out", a.out);
  cfg.get("--engine", "engine", a.engine);
  cfg.get("--basis", "basis", a.basis);
  if (cfg.doc().contains("knots") && cmd->count("--knots") == 0) {
    const json& k = cfg.doc().at("knots");
    if (k.is_array()) {
      apc::require(k.size() == 3, apc::errc::bad_input, "config key 'knots' needs three integers");
      a.knots_raw = std::to_string(k[0].get<int>()) + "," + std::to_string(k[1].get<int>()) + "," +
                    std::to_string(k[2].get<int>());
    } else {
      cfg.get("--knots", "knots", a.knots_raw);
    }
  }
  cfg.get("--pc-u", "pc_u", a.pc_u);
  cfg.get("--pc-alpha", "pc_alpha", a.pc_alpha);
  cfg.get("--train-through", "train_through", a.train_through);
  cfg.get("--drop", "drop", a.drop);
  if (cmd->get_option_no_throw("--horizon")) cfg.get("--horizon", "horizon", a.horizon);

  apc::require(a.engine == "spline" || a.engine == "rw2", apc::errc::bad_input,
               "--engine must be spline or rw2, got '" + a.engine + "'");
  if (a.engine == "rw2") {
    apc::require(cmd->count("--basis") == 0, apc::errc::bad_input,
                 "--basis applies to --engine spline only");
    apc::require(cmd->count("--knots") == 0, apc::errc::bad_input,
                 "--knots applies to --engine spline only");
  } else {
    apc::require(cmd->count("--pc-u") == 0, apc::errc::bad_input,
                 "--pc-u applies to --engine rw2 only");
    apc::require(cmd->count("--pc-alpha") == 0, apc::errc::bad_input,
                 "--pc-alpha applies to --engine rw2 only");
  }
  apc::require(!a.data.empty(), apc::errc::bad_input, "--data is required");

  json resolved;
  resolved["data"] = a.data;
  resolved["out"] = a.out;
  resolved["engine"] = a.engine;
  resolved["basis"] = a.basis;
  resolved["knots"] = a.knots_raw;
  resolved["pc_u"] = a.pc_u;
  resolved["pc_alpha"] = a.pc_alpha;
  resolved["train_through"] = a.train_through;
  resolved["drop"] = a.drop;
  resolved["dump_design"] = a.dump_design;
  if (a.horizon) resolved["horizon"] = a.horizon;
  return resolved;
}

std::vector<std::string> spline_col_names(const apc::ApcDesign& d) {
  std::vector<std::string> names{"intercept",
                                 std::string("slope_") + apc::time_scale_name(d.coding.scales[0]),
                                 std::string("slope_") + apc::time_scale_name(d.coding.scales[1])};
  for (const auto& b : d.blocks) {
    const std::string tag = apc::time_scale_name(b.scale);
    for (int j = 0; j < b.n_cols(); ++j) names.push_back("f_" + tag + "_" + std::to_string(j + 1));
  }
  return names;
}

void dump_matrix_csv(const std::filesystem::path& path, const Eigen::MatrixXd& M,
                     const std::vector<std::string>& names) {
  std::vector<std::vector<std::string>> rows(static_cast<std::size_t>(M.rows()));
  for (Eigen::Index i = 0; i < M.rows(); ++i) {
    rows[static_cast<std::size_t>(i)].reserve(static_cast<std::size_t>(M.cols()));
    for (Eigen::Index j = 0; j < M.cols(); ++j)
      rows[static_cast<std::size_t>(i)].push_back(apc::format_sig17(M(i, j)));
  }
  apc::write_csv(path.string(), names, rows);
}

json hyper_summary_json(const apc::HyperPosterior& hp) {
  json h;
  h["mode_log_tau"] = {hp.mode_log_tau[0], hp.mode_log_tau[1], hp.mode_log_tau[2]};
  h["mode_sigma"] = {std::exp(-0.5 * hp.mode_log_tau[0]), std::exp(-0.5 * hp.mode_log_tau[1]),
                     std::exp(-0.5 * hp.mode_log_tau[2])};
  h["mode_converged"] = hp.mode_converged;
  h["mode_evals"] = hp.mode_evals;
  json pts = json::array();
  for (const auto& p : hp.points)
    pts.push_back({{"log_tau", {p.log_tau[0], p.log_tau[1], p.log_tau[2]}},
                   {"log_post", p.log_post},
                   {"weight", p.weight}});
  h["points"] = pts;
  return h;
}

// fit: estimate on the training window, predict the held-out periods already
// present in the data file, write fit.csv plus the manifest.
int cmd_fit(const CLI::App* cmd, FitArgs& a, const std::string& invocation, bool forecast) {
  const auto t0 = std::chrono::steady_clock::now();
  json resolved = resolve_fit_args(cmd, a);
  const apc::ApcDataset data = apc::load_csv(a.data);
  const long long tt = a.train_through == std::numeric_limits<long long>::min()
                           ? data.periods.back()
                           : a.train_through;
  resolved["train_through"] = tt;
  const apc::SlopeDrop drop = parse_drop(a.drop);
  const std::filesystem::path out = prepare_out_dir(a.out);

  json convergence;
  apc::FitResultTable table;
  std::string engine_label;
  if (a.engine == "spline") {
    apc::BasisSpec spec;
    spec.family = parse_family(a.basis);
    spec.knots = parse_knots(a.knots_raw);
    const apc::SplineFitModel m = apc::fit_spline_model(data, tt, spec, drop);
    engine_label = std::string("spline-") + apc::family_name(spec.family);
    if (forecast) {
      apc::FitResultTable f;
      f.cells = apc::forecast_spline(m, data, a.horizon);
      f.save_csv((out / "forecast.csv").string());
    } else {
      table.cells = m.cells;
      table.save_csv((out / "fit.csv").string());
      if (a.dump_design)
        dump_matrix_csv(out / "design.csv", m.design.model_matrix, spline_col_names(m.design));
    }
    convergence["lambda"] = {m.fit.lambda[0], m.fit.lambda[1], m.fit.lambda[2]};
    convergence["edf"] = m.fit.edf;
    convergence["deviance"] = m.fit.deviance;
    convergence["gcv"] = m.fit.gcv;
    convergence["iterations"] = m.fit.iterations;
    convergence["converged"] = m.fit.converged;
  } else {
    apc::PCPrior prior;
    prior.U = a.pc_u;
    prior.alpha = a.pc_alpha;
    const apc::Rw2FitModel m = apc::fit_rw2_model(data, tt, prior, drop);
    engine_label = "rw2";
    if (forecast) {
      const long long step = data.periods.size() > 1 ? data.periods[1] - data.periods[0] : 1;
      long long avail = 0;
      for (long long p : data.periods)
        if (p > m.train_through) ++avail;
      apc::require(a.horizon >= 1, apc::errc::bad_input, "forecast horizon must be >= 1");
      apc::require(a.horizon <= avail, apc::errc::missing_exposure,
                   "forecast horizon " + std::to_string(a.horizon) + " exceeds the " +
                       std::to_string(avail) + " periods with exposures beyond " +
                       std::to_string(m.train_through));
      apc::FitResultTable f;
      const long long last = m.train_through + a.horizon * step;
      for (const auto& c : m.cells)
        if (c.prediction && c.period <= last) f.cells.push_back(c);
      f.save_csv((out / "forecast.csv").string());
    } else {
      table.cells = m.cells;
      table.save_csv((out / "fit.csv").string());
      if (a.dump_design) {
        std::vector<std::string> names{
            "intercept", std::string("slope_") + apc::time_scale_name(m.model.coding.scales[0]),
            std::string("slope_") + apc::time_scale_name(m.model.coding.scales[1])};
        const char* tags[3] = {"age", "period", "cohort"};
        for (int b = 0; b < 3; ++b)
          for (int j = 0; j < m.model.field_size(b); ++j)
            names.push_back(std::string("f_") + tags[b] + "_" + std::to_string(j + 1));
        dump_matrix_csv(out / "design.csv", m.model.A, names);
      }
    }
    write_json(out / "hyper.json", hyper_summary_json(m.hyper));
    convergence["mode_log_tau"] = {m.hyper.mode_log_tau[0], m.hyper.mode_log_tau[1],
                                   m.hyper.mode_log_tau[2]};
    convergence["mode_converged"] = m.hyper.mode_converged;
    convergence["mode_evals"] = m.hyper.mode_evals;
    convergence["grid_points"] = m.hyper.points.size();
    convergence["approximation"] = "gaussian (laplace) with empirical-bayes grid over log tau";
  }

  json manifest = manifest_base(forecast ? "forecast" : "fit", invocation, resolved, 0,
                                engine_label, elapsed_ms(t0));
  manifest["convergence"] = convergence;
  write_json(out / "manifest.json", manifest);
  std::cout << (forecast ? "forecast" : "fit") << " written to " << out.string() << "\n";
  return 0;
}

json report_json(const apc::ScoreReport& r) {
  return json{{"window", r.window},     {"n_cells", r.n_cells},
              {"mae", r.mae},           {"mse", r.mse},
              {"interval_score", r.interval_score}, {"mean_width", r.mean_width},
              {"coverage", r.coverage}};
}

// Console scale: x100 on score columns, percent coverage. Human output
// only; machine files carry raw values.
void print_report_x100(const apc::ScoreReport& r) {
  std::printf("%-11s n=%-4d mae=%8.2f mse=%8.2f is=%8.2f width=%8.2f coverage=%6.2f%%  (x10^-2)\n",
              r.window.c_str(), r.n_cells, 100.0 * r.mae, 100.0 * r.mse,
              100.0 * r.interval_score, 100.0 * r.mean_width, 100.0 * r.coverage);
}

struct ScoreArgs {
  std::string fit, truth, data, out, config, scale = "log";
  long long split_year = std::numeric_limits<long long>::min();
  double alpha = 0.05;
  double half = 0.5;
};

int cmd_score(const CLI::App* cmd, ScoreArgs& a, const std::string& invocation) {
  const auto t0 = std::chrono::steady_clock::now();
  ConfigOverlay cfg(cmd, a.config);
  cfg.get("--fit", "fit", a.fit);
  cfg.get("--truth", "truth", a.truth);
  cfg.get("--data", "data", a.data);
  cfg.get("--out", "out", a.out);
  cfg.get("--split-year", "split_year", a.split_year);
  cfg.get("--alpha", "alpha", a.alpha);
  cfg.get("--half-count", "half_count", a.half);
  cfg.get("--scale", "scale", a.scale);
  apc::require(!a.fit.empty(), apc::errc::bad_input, "--fit is required");
  apc::require(a.truth.empty() != a.data.empty(), apc::errc::bad_input,
               "exactly one of --truth (eta_true CSV) or --data (observations CSV) is required");
  apc::require(a.scale == "log" || a.scale == "rate", apc::errc::bad_input,
               "--scale must be log or rate, got '" + a.scale + "'");

  apc::FitResultTable table = apc::FitResultTable::load_csv(a.fit);
  apc::TruthSurface truth = a.truth.empty()
                                ? apc::TruthSurface::from_dataset(apc::load_csv(a.data), a.half)
                                : apc::TruthSurface::from_csv(a.truth);
  if (a.split_year != std::numeric_limits<long long>::min())
    for (auto& c : table.cells) c.prediction = c.period >= a.split_year;
  if (a.scale == "rate") {
    for (auto& c : table.cells) {
      c.eta = std::exp(c.eta);
      c.lower = std::exp(c.lower);
      c.upper = std::exp(c.upper);
    }
    for (auto& kv : truth.eta) kv.second = std::exp(kv.second);
  }
  const apc::FitScores scores = apc::score_fit(table.cells, truth, a.alpha);

  json out_json;
  out_json["fit"] = a.fit;
  out_json["truth"] = a.truth.empty() ? a.data + " (observed, half=" + apc::format_sig17(a.half) + ")"
                                      : a.truth;
  out_json["alpha"] = a.alpha;
  out_json["scale"] = a.scale;
  if (scores.estimation) {
    out_json["estimation"] = report_json(*scores.estimation);
    print_report_x100(*scores.estimation);
  }
  if (scores.prediction) {
    out_json["prediction"] = report_json(*scores.prediction);
    print_report_x100(*scores.prediction);
  }

  if (!a.out.empty()) {
    const std::filesystem::path out = prepare_out_dir(a.out);
    write_json(out / "score.json", out_json);
    json resolved{{"fit", a.fit},       {"truth", a.truth},         {"data", a.data},
                  {"alpha", a.alpha},   {"half_count", a.half},     {"scale", a.scale},
                  {"split_year", a.split_year}, {"out", a.out}};
    json manifest = manifest_base("score", invocation, resolved, 0, "", elapsed_ms(t0));
    manifest["convergence"] = json::object();
    write_json(out / "manifest.json", manifest);
  }
  return 0;
}

struct SimArgs {
  std::string out, config, engines_raw;
  int replicates = 20;
  std::uint64_t seed = 1;
  long long train_through = 2017;
  int threads = 0;
};

apc::SmoothSpec::Kind parse_kind(const std::string& s) {
  if (s == "bump") return apc::SmoothSpec::Kind::bump;
  if (s == "sigmoid") return apc::SmoothSpec::Kind::sigmoid;
  if (s == "sine") return apc::SmoothSpec::Kind::sine;
  if (s == "ramp") return apc::SmoothSpec::Kind::ramp;
  if (s == "kink") return apc::SmoothSpec::Kind::kink;
  if (s == "zero") return apc::SmoothSpec::Kind::zero;
  apc::fail(apc::errc::bad_input,
            "truth curve kind must be bump, sigmoid, sine, ramp, kink, or zero");
}

const char* kind_name(apc::SmoothSpec::Kind k) {
  switch (k) {
    case apc::SmoothSpec::Kind::bump: return "bump";
    case apc::SmoothSpec::Kind::sigmoid: return "sigmoid";
    case apc::SmoothSpec::Kind::sine: return "sine";
    case apc::SmoothSpec::Kind::ramp: return "ramp";
    case apc::SmoothSpec::Kind::kink: return "kink";
    case apc::SmoothSpec::Kind::zero: return "zero";
  }
  return "zero";
}

void overlay_curve(const json& doc, const std::string& key, apc::SmoothSpec& c) {
  if (!doc.contains(key)) return;
  const json& j = doc.at(key);
  if (j.contains("kind")) c.kind = parse_kind(j.at("kind").get<std::string>());
  if (j.contains("amplitude")) c.amplitude = j.at("amplitude").get<double>();
  if (j.contains("p1")) c.p1 = j.at("p1").get<double>();
  if (j.contains("p2")) c.p2 = j.at("p2").get<double>();
}

json curve_json(const apc::SmoothSpec& c) {
  return json{{"kind", kind_name(c.kind)}, {"amplitude", c.amplitude}, {"p1", c.p1}, {"p2", c.p2}};
}

int cmd_simulate(const CLI::App* cmd, SimArgs& a, const std::string& invocation) {
  const auto t0 = std::chrono::steady_clock::now();
  ConfigOverlay cfg(cmd, a.config);
  cfg.get("--out", "out", a.out);
  cfg.get("--replicates", "replicates", a.replicates);
  cfg.get("--seed", "seed", a.seed);
  cfg.get("--train-through", "train_through", a.train_through);
  cfg.get("--threads", "threads", a.threads);
  cfg.get("--engines", "engines", a.engines_raw);

  apc::SimConfig sc;
  const json& doc = cfg.doc();
  if (doc.contains("age_min")) sc.age_min = doc.at("age_min").get<int>();
  if (doc.contains("age_max")) sc.age_max = doc.at("age_max").get<int>();
  if (doc.contains("period_min")) sc.period_min = doc.at("period_min").get<long long>();
  if (doc.contains("period_max")) sc.period_max = doc.at("period_max").get<long long>();
  if (doc.contains("exposure")) sc.exposure = doc.at("exposure").get<double>();
  if (doc.contains("agg_width")) sc.agg_width = doc.at("agg_width").get<int>();
  sc.train_through = a.train_through;
  sc.seed = a.seed;
  sc.replicates = a.replicates;
  apc::require(sc.replicates >= 1, apc::errc::bad_input, "--replicates must be >= 1");
  apc::require(sc.train_through < sc.period_max, apc::errc::bad_input,
               "--train-through must leave at least one period to predict");

  apc::TruthSpec truth;
  if (doc.contains("intercept")) truth.intercept = doc.at("intercept").get<double>();
  if (doc.contains("age_slope")) truth.age_slope = doc.at("age_slope").get<double>();
  if (doc.contains("period_slope")) truth.period_slope = doc.at("period_slope").get<double>();
  overlay_curve(doc, "age_curve", truth.age_curve);
  overlay_curve(doc, "period_curve", truth.period_curve);
  overlay_curve(doc, "period_kink", truth.period_kink);
  overlay_curve(doc, "period_break", truth.period_break);
  overlay_curve(doc, "cohort_curve", truth.cohort_curve);

  std::vector<apc::EngineConfig> engines = apc::default_engines();
  if (!a.engines_raw.empty()) {
    std::vector<apc::EngineConfig> picked;
    std::stringstream ss(a.engines_raw);
    std::string name;
    while (std::getline(ss, name, ',')) {
      auto it = std::find_if(engines.begin(), engines.end(),
                             [&](const apc::EngineConfig& e) { return e.name == name; });
      apc::require(it != engines.end(), apc::errc::bad_input,
                   "--engines: unknown engine '" + name + "'");
      picked.push_back(*it);
    }
    apc::require(!picked.empty(), apc::errc::bad_input, "--engines selected nothing");
    engines = picked;
  }

  const std::filesystem::path out = prepare_out_dir(a.out);
  const apc::StudyResult res = apc::run_study(truth, sc, engines, a.threads);
  const std::vector<apc::EngineSummary> summaries = res.summarize(engines);

  // Per-replicate scores, one row per (replicate, engine, window).
  std::vector<std::vector<std::string>> rows;
  for (const auto& r : res.rows) {
    if (r.failed || !r.scores.estimation || !r.scores.prediction) {
      rows.push_back({std::to_string(r.replicate), r.engine, "", "0", "", "", "", "", "", "1", r.error});
      continue;
    }
    for (const apc::ScoreReport* rep : {&*r.scores.estimation, &*r.scores.prediction})
      rows.push_back({std::to_string(r.replicate), r.engine, rep->window,
                      std::to_string(rep->n_cells), apc::format_sig17(rep->mae),
                      apc::format_sig17(rep->mse), apc::format_sig17(rep->interval_score),
                      apc::format_sig17(rep->mean_width), apc::format_sig17(rep->coverage), "0", ""});
  }
  apc::write_csv((out / "results.csv").string(),
                 {"replicate", "engine", "window", "n_cells", "mae", "mse", "interval_score",
                  "mean_width", "coverage", "failed", "error"},
                 rows);

  std::vector<std::vector<std::string>> srows;
  for (const auto& s : summaries)
    for (const apc::ScoreReport* rep : {&s.estimation, &s.prediction})
      srows.push_back({s.engine, rep->window, std::to_string(s.n_ok), std::to_string(s.n_failed),
                       apc::format_sig17(rep->mae), apc::format_sig17(rep->mse),
                       apc::format_sig17(rep->interval_score), apc::format_sig17(rep->mean_width),
                       apc::format_sig17(rep->coverage)});
  apc::write_csv((out / "summary.csv").string(),
                 {"engine", "window", "n_ok", "n_failed", "mae", "mse", "interval_score",
                  "mean_width", "coverage"},
                 srows);

  json tj;
  tj["intercept"] = truth.intercept;
  tj["age_slope"] = truth.age_slope;
  tj["period_slope"] = truth.period_slope;
  tj["age_curve"] = curve_json(truth.age_curve);
  tj["period_curve"] = curve_json(truth.period_curve);
  tj["period_kink"] = curve_json(truth.period_kink);
  tj["period_break"] = curve_json(truth.period_break);
  tj["cohort_curve"] = curve_json(truth.cohort_curve);
  tj["sim"] = {{"age_min", sc.age_min},       {"age_max", sc.age_max},
               {"period_min", sc.period_min}, {"period_max", sc.period_max},
               {"exposure", sc.exposure},     {"agg_width", sc.agg_width},
               {"train_through", sc.train_through}, {"seed", sc.seed},
               {"replicates", sc.replicates}};
  write_json(out / "truth.json", tj);

  for (const auto& s : summaries) {
    std::printf("%-12s ok=%-3d failed=%-3d\n", s.engine.c_str(), s.n_ok, s.n_failed);
    print_report_x100(s.estimation);
    print_report_x100(s.prediction);
  }

  json resolved{{"out", a.out},
                {"replicates", sc.replicates},
                {"seed", sc.seed},
                {"train_through", sc.train_through},
                {"threads", a.threads},
                {"engines", a.engines_raw},
                {"truth", tj}};
  json manifest = manifest_base("simulate", invocation, resolved, sc.seed, "", elapsed_ms(t0));
  int n_failed = 0;
  for (const auto& s : summaries) n_failed += s.n_failed;
  manifest["convergence"] = {{"n_failed_runs", n_failed}};
  write_json(out / "manifest.json", manifest);
  return 0;
}

struct CompareArgs {
  std::string fit_a, fit_b, out, config;
};

int cmd_compare(const CLI::App* cmd, CompareArgs& a, const std::string& invocation) {
  const auto t0 = std::chrono::steady_clock::now();
  ConfigOverlay cfg(cmd, a.config);
  cfg.get("--fit-a", "fit_a", a.fit_a);
  cfg.get("--fit-b", "fit_b", a.fit_b);
  cfg.get("--out", "out", a.out);
  apc::require(!a.fit_a.empty() && !a.fit_b.empty(), apc::errc::bad_input,
               "--fit-a and --fit-b are required");

  const apc::FitResultTable ta = apc::FitResultTable::load_csv(a.fit_a);
  const apc::FitResultTable tb = apc::FitResultTable::load_csv(a.fit_b);
  std::map<std::pair<std::string, long long>, const apc::FitCell*> bm;
  for (const auto& c : tb.cells) bm[{c.age_label, c.period}] = &c;
  apc::require(ta.cells.size() == tb.cells.size(), apc::errc::grid_mismatch,
               "fit files cover different numbers of cells");

  std::vector<std::vector<std::string>> rows;
  double max_abs = 0.0;
  double sa = 0.0, sb = 0.0, saa = 0.0, sbb = 0.0, sab = 0.0;
  const double n = static_cast<double>(ta.cells.size());
  for (const auto& c : ta.cells) {
    auto it = bm.find({c.age_label, c.period});
    apc::require(it != bm.end(), apc::errc::grid_mismatch,
                 "cell (" + c.age_label + ", " + std::to_string(c.period) +
                     ") is missing from " + a.fit_b);
    const apc::FitCell& d = *it->second;
    apc::require(c.prediction == d.prediction, apc::errc::grid_mismatch,
                 "window tags disagree at (" + c.age_label + ", " + std::to_string(c.period) + ")");
    const double delta = c.eta - d.eta;
    max_abs = std::max(max_abs, std::abs(delta));
    sa += c.eta;
    sb += d.eta;
    saa += c.eta * c.eta;
    sbb += d.eta * d.eta;
    sab += c.eta * d.eta;
    rows.push_back({c.age_label, std::to_string(c.period),
                    c.prediction ? "prediction" : "estimation", apc::format_sig17(c.eta),
                    apc::format_sig17(d.eta), apc::format_sig17(delta)});
  }
  const double cov = sab / n - (sa / n) * (sb / n);
  const double va = saa / n - (sa / n) * (sa / n);
  const double vb = sbb / n - (sb / n) * (sb / n);
  // Degenerate (constant) surfaces: identical ones still compare as equal.
  const double corr = va > 0.0 && vb > 0.0 ? cov / std::sqrt(va * vb)
                                           : (max_abs == 0.0 ? 1.0 : 0.0);

  std::printf("n=%d correlation=%.6f max|delta|=%.6g\n", static_cast<int>(n), corr, max_abs);

  if (!a.out.empty()) {
    const std::filesystem::path out = prepare_out_dir(a.out);
    apc::write_csv((out / "compare.csv").string(),
                   {"age", "period", "window", "eta_a", "eta_b", "delta"}, rows);
    write_json(out / "compare.json", json{{"fit_a", a.fit_a},
                                          {"fit_b", a.fit_b},
                                          {"n_cells", static_cast<int>(n)},
                                          {"correlation", corr},
                                          {"max_abs_delta", max_abs}});
    json resolved{{"fit_a", a.fit_a}, {"fit_b", a.fit_b}, {"out", a.out}};
    json manifest = manifest_base("compare", invocation, resolved, 0, "", elapsed_ms(t0));
    manifest["convergence"] = json::object();
    write_json(out / "manifest.json", manifest);
  }
  return 0;
}

struct PlotArgs {
  std::string data, fit, fit_b, out, config;
  double half = 0.5;
};

std::string file_stem(const std::string& path) {
  return std::filesystem::path(path).stem().string();
}

int cmd_plot_data(const CLI::App* cmd, PlotArgs& a, const std::string& invocation) {
  const auto t0 = std::chrono::steady_clock::now();
  ConfigOverlay cfg(cmd, a.config);
  cfg.get("--data", "data", a.data);
  cfg.get("--fit", "fit", a.fit);
  cfg.get("--fit-b", "fit_b", a.fit_b);
  cfg.get("--out", "out", a.out);
  cfg.get("--half-count", "half_count", a.half);
  apc::require(!a.data.empty(), apc::errc::bad_input, "--data is required");
  apc::require(!a.fit.empty(), apc::errc::bad_input, "--fit is required");

  const apc::ApcDataset data = apc::load_csv(a.data);
  const Eigen::MatrixXd lr = data.log_rates(a.half);
  const std::filesystem::path out = prepare_out_dir(a.out);

  // Heatmap table: one row per grid cell, I x J rows.
  std::vector<std::vector<std::string>> hrows;
  for (int i = 0; i < data.n_ages(); ++i)
    for (int j = 0; j < data.n_periods(); ++j)
      hrows.push_back({data.ages[static_cast<std::size_t>(i)].label,
                       std::to_string(data.periods[static_cast<std::size_t>(j)]),
                       apc::format_sig17(lr(i, j))});
  apc::write_csv((out / "heatmap.csv").string(), {"age", "period", "observed_log_rate"}, hrows);

  std::map<std::pair<std::string, long long>, double> observed;
  for (int i = 0; i < data.n_ages(); ++i)
    for (int j = 0; j < data.n_periods(); ++j)
      observed[{data.ages[static_cast<std::size_t>(i)].label,
                data.periods[static_cast<std::size_t>(j)]}] = lr(i, j);

  // Lineplot table: per-age series with observations and one or two engines.
  std::vector<std::vector<std::string>> lrows;
  auto add_fit = [&](const std::string& path) {
    const apc::FitResultTable t = apc::FitResultTable::load_csv(path);
    const std::string label = file_stem(path);
    for (const auto& c : t.cells) {
      auto it = observed.find({c.age_label, c.period});
      apc::require(it != observed.end(), apc::errc::grid_mismatch,
                   "fit cell (" + c.age_label + ", " + std::to_string(c.period) +
                       ") is not in the data grid");
      lrows.push_back({c.age_label, std::to_string(c.period), label,
                       apc::format_sig17(it->second), apc::format_sig17(c.eta),
                       apc::format_sig17(c.lower), apc::format_sig17(c.upper),
                       c.prediction ? "prediction" : "estimation"});
    }
  };
  add_fit(a.fit);
  if (!a.fit_b.empty()) add_fit(a.fit_b);
  apc::write_csv((out / "lineplot.csv").string(),
                 {"age", "period", "engine", "observed_log_rate", "eta_hat", "lower", "upper",
                  "window"},
                 lrows);

  json resolved{{"data", a.data}, {"fit", a.fit}, {"fit_b", a.fit_b},
                {"half_count", a.half}, {"out", a.out}};
  json manifest = manifest_base("plot-data", invocation, resolved, 0, "", elapsed_ms(t0));
  manifest["convergence"] = json::object();
  write_json(out / "manifest.json", manifest);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"apc: identifiable age-period-cohort smoothing of count data"};
  app.set_version_flag("--version", APC_VERSION);
  app.require_subcommand(1);

  FitArgs fit_args, fc_args;
  CLI::App* fit = app.add_subcommand("fit", "fit one engine and predict held-out periods");
  add_fit_flags(fit, fit_args, false);
  CLI::App* forecast = app.add_subcommand("forecast", "write only the forecast window");
  add_fit_flags(forecast, fc_args, true);

  ScoreArgs score_args;
  CLI::App* score = app.add_subcommand("score", "score a fit against a truth surface");
  score->add_option("--fit", score_args.fit, "fit.csv to score");
  score->add_option("--truth", score_args.truth, "truth CSV (age,period,eta_true)");
  score->add_option("--data", score_args.data, "observations CSV; truth = half-corrected log rate");
  score->add_option("--split-year", score_args.split_year,
                    "re-tag windows: periods >= this year score as prediction");
  score->add_option("--alpha", score_args.alpha, "interval level (default 0.05 for 95%)");
  score->add_option("--half-count", score_args.half, "half-count correction for --data truth");
  score->add_option("--scale", score_args.scale, "log (default) or rate");
  score->add_option("--out", score_args.out, "optional output directory for score.json");
  score->add_option("--config", score_args.config, "JSON config file");

  SimArgs sim_args;
  CLI::App* simulate = app.add_subcommand("simulate", "run the replicated simulation study");
  simulate->add_option("--out", sim_args.out, "output directory");
  simulate->add_option("--replicates", sim_args.replicates, "number of replicates (default 20)");
  simulate->add_option("--seed", sim_args.seed, "RNG seed (default 1)");
  simulate->add_option("--train-through", sim_args.train_through,
                       "last estimation period (default 2017)");
  simulate->add_option("--threads", sim_args.threads, "worker threads, 0 = hardware");
  simulate->add_option("--engines", sim_args.engines_raw,
                       "comma list from: spline-crs,spline-bs,spline-tprs,rw2-u1,rw2-u3,rw2-u6");
  simulate->add_option("--config", sim_args.config, "JSON config file (grid, exposure, truth)");

  CompareArgs cmp_args;
  CLI::App* compare = app.add_subcommand("compare", "pair two fits cell by cell");
  compare->add_option("--fit-a", cmp_args.fit_a, "first fit.csv");
  compare->add_option("--fit-b", cmp_args.fit_b, "second fit.csv");
  compare->add_option("--out", cmp_args.out, "optional output directory");
  compare->add_option("--config", cmp_args.config, "JSON config file");

  PlotArgs plot_args;
  CLI::App* plot = app.add_subcommand("plot-data", "export tidy tables for plotting");
  plot->add_option("--data", plot_args.data, "observations CSV");
  plot->add_option("--fit", plot_args.fit, "fit.csv");
  plot->add_option("--fit-b", plot_args.fit_b, "optional second fit.csv");
  plot->add_option("--half-count", plot_args.half, "half-count correction (default 0.5)");
  plot->add_option("--out", plot_args.out, "output directory");
  plot->add_option("--config", plot_args.config, "JSON config file");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  const std::string invocation = join_argv(argc, argv);
  try {
    if (fit->parsed()) return cmd_fit(fit, fit_args, invocation, false);
    if (forecast->parsed()) return cmd_fit(forecast, fc_args, invocation, true);
    if (score->parsed()) return cmd_score(score, score_args, invocation);
    if (simulate->parsed()) return cmd_simulate(simulate, sim_args, invocation);
    if (compare->parsed()) return cmd_compare(compare, cmp_args, invocation);
    if (plot->parsed()) return cmd_plot_data(plot, plot_args, invocation);
  } catch (const apc::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return exit_for(e.code());
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  }
  return 0;
}
