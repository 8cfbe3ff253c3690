#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "apc/common.hpp"
#include "apc/csv.hpp"

namespace apc {

// One age bin. Bounds are inclusive years, so "10-14" has lower 10, upper 14,
// width 5 and midpoint 12.5.
struct AgeGroup {
  std::string label;
  long long lower = 0;
  long long upper = 0;

  double width() const { return static_cast<double>(upper - lower + 1); }
  double midpoint() const { return static_cast<double>(lower + upper + 1) / 2.0; }
};

inline AgeGroup parse_age_group(const std::string& raw) {
  std::string s;
  for (char c : raw)
    if (c != ' ' && c != '\t') s += c;
  require(!s.empty(), errc::bad_input, "empty age_group label");
  // Accept "10-14" and the en-dash spelling "10–14"; a bare "10" is a
  // single-year bin.
  std::string::size_type cut = std::string::npos;
  std::size_t cutlen = 1;
  for (std::size_t i = 1; i < s.size(); ++i) {
    if (s[i] == '-') {
      cut = i;
      break;
    }
    if (static_cast<unsigned char>(s[i]) == 0xe2 && i + 2 < s.size() &&
        static_cast<unsigned char>(s[i + 1]) == 0x80 &&
        static_cast<unsigned char>(s[i + 2]) == 0x93) {
      cut = i;
      cutlen = 3;
      break;
    }
  }
  AgeGroup g;
  if (cut == std::string::npos) {
    g.lower = g.upper = parse_int(s, "age_group '" + raw + "'");
    g.label = s;
  } else {
    g.lower = parse_int(s.substr(0, cut), "age_group '" + raw + "'");
    g.upper = parse_int(s.substr(cut + cutlen), "age_group '" + raw + "'");
    require(g.upper >= g.lower, errc::bad_input,
            "age_group '" + raw + "' has upper bound below lower bound");
    g.label = std::to_string(g.lower) + "-" + std::to_string(g.upper);
  }
  require(g.lower >= 0, errc::bad_input, "age_group '" + raw + "' is negative");
  return g;
}

// Complete I x J grid of event counts and exposures over uniform age bins and
// equally spaced periods. The ratio R = (age bin width) / (period step) ties
// the two time scales together; cohort indices are derived from it.
class ApcDataset {
 public:
  std::vector<AgeGroup> ages;   // ascending, contiguous, equal width
  std::vector<long long> periods;  // ascending, constant step
  Eigen::MatrixXd counts;       // I x J, non-negative integers
  Eigen::MatrixXd exposures;    // I x J, strictly positive

  int n_ages() const { return static_cast<int>(ages.size()); }
  int n_periods() const { return static_cast<int>(periods.size()); }
  long long period_step() const {
    return periods.size() > 1 ? periods[1] - periods[0] : 1;
  }
  double age_width() const { return ages.front().width(); }

  // R: how many period steps one age bin spans.
  int ratio() const {
    return static_cast<int>(std::llround(age_width() / static_cast<double>(period_step())));
  }

  // Number of distinct diagonal (cohort) levels, R*(I-1) + J.
  int n_cohorts() const { return ratio() * (n_ages() - 1) + n_periods(); }

  static ApcDataset from_parts(std::vector<AgeGroup> ages, std::vector<long long> periods,
                               Eigen::MatrixXd counts, Eigen::MatrixXd exposures) {
    ApcDataset d;
    d.ages = std::move(ages);
    d.periods = std::move(periods);
    d.counts = std::move(counts);
    d.exposures = std::move(exposures);
    d.validate();
    return d;
  }

  void validate() const {
    const int I = n_ages(), J = n_periods();
    require(I >= 1 && J >= 1, errc::bad_input, "empty grid");
    require(counts.rows() == I && counts.cols() == J && exposures.rows() == I &&
                exposures.cols() == J,
            errc::shape_mismatch, "count/exposure matrices do not match the grid");
    const double w = ages.front().width();
    for (int a = 0; a < I; ++a) {
      require(ages[a].width() == w, errc::ragged_bins,
              "age bins have unequal widths (" + ages[a].label + ")");
      if (a > 0)
        require(ages[a].lower == ages[a - 1].upper + 1, errc::bad_input,
                "age bins not contiguous ascending at " + ages[a].label);
    }
    if (J > 1) {
      const long long step = periods[1] - periods[0];
      require(step >= 1, errc::bad_input, "periods must be strictly increasing");
      for (int p = 1; p < J; ++p)
        require(periods[p] - periods[p - 1] == step, errc::bad_input,
                "periods must be equally spaced");
      const double r = w / static_cast<double>(step);
      require(std::abs(r - std::round(r)) < 1e-12 && r >= 1.0, errc::ragged_bins,
              "age bin width is not a whole multiple of the period step");
    }
    for (int a = 0; a < I; ++a) {
      for (int p = 0; p < J; ++p) {
        const std::string cell =
            "cell (" + ages[a].label + ", " + std::to_string(periods[p]) + ")";
        const double y = counts(a, p);
        require(y >= 0.0, errc::negative_count, cell + " has a negative count");
        require(std::abs(y - std::round(y)) < 1e-9, errc::bad_input,
                cell + " has a non-integer count");
        require(exposures(a, p) > 0.0, errc::nonpositive_exposure,
                cell + " has non-positive exposure");
      }
    }
  }

  // log((y + half) / N). half = 0 demands strictly positive counts.
  Eigen::MatrixXd log_rates(double half = 0.5) const {
    require(half >= 0.0, errc::bad_input, "half-count correction must be >= 0");
    Eigen::MatrixXd out(n_ages(), n_periods());
    for (int a = 0; a < n_ages(); ++a)
      for (int p = 0; p < n_periods(); ++p) {
        const double y = counts(a, p);
        require(y + half > 0.0, errc::log_of_zero,
                "zero count at (" + ages[a].label + ", " + std::to_string(periods[p]) +
                    ") with no half-count correction");
        out(a, p) = std::log((y + half) / exposures(a, p));
      }
    return out;
  }

  // Collapse single-year ages into bins of `width` years, summing counts and
  // exposures. The age span must divide evenly.
  ApcDataset aggregate_ages(int width) const {
    require(width >= 1, errc::bad_input, "aggregation width must be >= 1");
    require(age_width() == 1.0, errc::bad_input,
            "age aggregation requires single-year input bins");
    if (width == 1) return *this;
    const int I = n_ages();
    require(I % width == 0, errc::indivisible_span,
            "aggregation width " + std::to_string(width) + " does not divide " +
                std::to_string(I) + " single-year ages");
    const int Inew = I / width;
    std::vector<AgeGroup> groups(Inew);
    Eigen::MatrixXd c = Eigen::MatrixXd::Zero(Inew, n_periods());
    Eigen::MatrixXd e = Eigen::MatrixXd::Zero(Inew, n_periods());
    for (int g = 0; g < Inew; ++g) {
      groups[g].lower = ages[g * width].lower;
      groups[g].upper = ages[g * width + width - 1].upper;
      groups[g].label = std::to_string(groups[g].lower) + "-" + std::to_string(groups[g].upper);
      for (int k = 0; k < width; ++k) {
        c.row(g) += counts.row(g * width + k);
        e.row(g) += exposures.row(g * width + k);
      }
    }
    return from_parts(std::move(groups), periods, std::move(c), std::move(e));
  }

  // Periods in [from, through], bounds inclusive.
  ApcDataset subset_periods(long long from, long long through) const {
    int lo = -1, hi = -1;
    for (int p = 0; p < n_periods(); ++p) {
      if (periods[p] >= from && lo < 0) lo = p;
      if (periods[p] <= through) hi = p;
    }
    require(lo >= 0 && hi >= lo, errc::bad_input,
            "no periods in [" + std::to_string(from) + ", " + std::to_string(through) + "]");
    ApcDataset d;
    d.ages = ages;
    d.periods.assign(periods.begin() + lo, periods.begin() + hi + 1);
    d.counts = counts.middleCols(lo, hi - lo + 1);
    d.exposures = exposures.middleCols(lo, hi - lo + 1);
    d.validate();
    return d;
  }

  void to_csv(const std::string& path) const {
    std::vector<std::vector<std::string>> rows;
    rows.reserve(static_cast<std::size_t>(n_ages()) * n_periods());
    for (int a = 0; a < n_ages(); ++a)
      for (int p = 0; p < n_periods(); ++p)
        rows.push_back({ages[a].label, std::to_string(periods[p]),
                        format_sig17(counts(a, p)), format_sig17(exposures(a, p))});
    write_csv(path, {"age_group", "period", "deaths", "population"}, rows);
  }
};

// Reads the age_group/period/deaths/population format, requiring a complete
// grid: every (age, period) combination exactly once.
inline ApcDataset load_csv(const std::string& path) {
  const CsvTable t = read_csv(path);
  const int ca = t.require_column("age_group", path);
  const int cp = t.require_column("period", path);
  const int cd = t.require_column("deaths", path);
  const int cn = t.require_column("population", path);

  std::map<long long, AgeGroup> age_by_lower;
  std::map<long long, int> period_set;
  std::vector<AgeGroup> row_age(t.rows.size());
  std::vector<long long> row_period(t.rows.size());
  for (std::size_t i = 0; i < t.rows.size(); ++i) {
    row_age[i] = parse_age_group(t.rows[i][ca]);
    row_period[i] = parse_int(t.rows[i][cp], path + ": period");
    auto it = age_by_lower.find(row_age[i].lower);
    if (it == age_by_lower.end()) {
      age_by_lower.emplace(row_age[i].lower, row_age[i]);
    } else {
      require(it->second.upper == row_age[i].upper, errc::bad_input,
              path + ": overlapping age bins at " + row_age[i].label);
    }
    period_set.emplace(row_period[i], 0);
  }
  std::vector<AgeGroup> ages;
  std::map<long long, int> age_index;
  for (auto& [lo, g] : age_by_lower) {
    age_index[lo] = static_cast<int>(ages.size());
    ages.push_back(g);
  }
  std::vector<long long> periods;
  for (auto& [yr, idx] : period_set) {
    idx = static_cast<int>(periods.size());
    periods.push_back(yr);
  }

  const int I = static_cast<int>(ages.size()), J = static_cast<int>(periods.size());
  Eigen::MatrixXd counts(I, J), exposures(I, J);
  Eigen::Matrix<bool, Eigen::Dynamic, Eigen::Dynamic> seen(I, J);
  seen.setConstant(false);
  for (std::size_t i = 0; i < t.rows.size(); ++i) {
    const int a = age_index.at(row_age[i].lower);
    const int p = period_set.at(row_period[i]);
    require(!seen(a, p), errc::duplicate_cell,
            path + ": duplicate cell (" + row_age[i].label + ", " +
                std::to_string(row_period[i]) + ")");
    seen(a, p) = true;
    counts(a, p) = parse_double(t.rows[i][cd], path + ": deaths");
    exposures(a, p) = parse_double(t.rows[i][cn], path + ": population");
  }
  for (int a = 0; a < I; ++a)
    for (int p = 0; p < J; ++p)
      require(seen(a, p), errc::missing_cell,
              path + ": missing cell (" + ages[a].label + ", " +
                  std::to_string(periods[p]) + ")");
  return ApcDataset::from_parts(std::move(ages), std::move(periods), std::move(counts),
                                std::move(exposures));
}

}  // namespace apc
