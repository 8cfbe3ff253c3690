#pragma once

#include <string>
#include <vector>

#include "apc/common.hpp"
#include "apc/csv.hpp"
#include "apc/dataset.hpp"

namespace apc {

// One fitted grid cell on the log-rate scale. Cells in the training window
// are "estimation", cells beyond it "prediction".
struct FitCell {
  std::string age_label;
  double age_mid = 0.0;
  long long period = 0;
  double eta = 0.0, lower = 0.0, upper = 0.0;
  bool prediction = false;
};

struct FitResultTable {
  std::vector<FitCell> cells;

  void save_csv(const std::string& path) const {
    std::vector<std::vector<std::string>> rows;
    rows.reserve(cells.size());
    for (const auto& c : cells) {
      require(c.lower <= c.eta && c.eta <= c.upper, errc::inverted_interval,
              "interval does not bracket the estimate at (" + c.age_label + ", " +
                  std::to_string(c.period) + ")");
      rows.push_back({c.age_label, std::to_string(c.period), format_sig17(c.eta),
                      format_sig17(c.lower), format_sig17(c.upper),
                      c.prediction ? "prediction" : "estimation"});
    }
    write_csv(path, {"age", "period", "eta_hat", "lower", "upper", "window"}, rows);
  }

  static FitResultTable load_csv(const std::string& path) {
    const CsvTable t = read_csv(path);
    const int ca = t.require_column("age", path);
    const int cp = t.require_column("period", path);
    const int ce = t.require_column("eta_hat", path);
    const int cl = t.require_column("lower", path);
    const int cu = t.require_column("upper", path);
    const int cw = t.require_column("window", path);
    FitResultTable out;
    for (std::size_t i = 0; i < t.rows.size(); ++i) {
      const auto& r = t.rows[i];
      FitCell c;
      const AgeGroup g = parse_age_group(r[static_cast<std::size_t>(ca)]);
      c.age_label = g.label;
      c.age_mid = g.midpoint();
      c.period = parse_int(r[static_cast<std::size_t>(cp)], path + ": period");
      c.eta = parse_double(r[static_cast<std::size_t>(ce)], path + ": eta_hat");
      c.lower = parse_double(r[static_cast<std::size_t>(cl)], path + ": lower");
      c.upper = parse_double(r[static_cast<std::size_t>(cu)], path + ": upper");
      const std::string& w = r[static_cast<std::size_t>(cw)];
      require(w == "estimation" || w == "prediction", errc::bad_input,
              path + ": window must be 'estimation' or 'prediction', got '" + w + "'");
      c.prediction = w == "prediction";
      require(c.lower <= c.eta && c.eta <= c.upper, errc::inverted_interval,
              path + ": interval does not bracket the estimate at (" + c.age_label +
                  ", " + std::to_string(c.period) + ")");
      out.cells.push_back(c);
    }
    return out;
  }
};

}  // namespace apc
