#pragma once

#include <Eigen/Dense>
#include <Eigen/Sparse>
#include <array>
#include <optional>
#include <string>
#include <vector>

#include "apc/dataset.hpp"
#include "apc/gmrf.hpp"
#include "apc/linalg.hpp"
#include "apc/spline_basis.hpp"

namespace apc {

enum class TimeScale { age, period, cohort };
enum class SmoothingMode { spline, gmrf };

// Which of the three collinear slopes is dropped from the fixed part. The
// remaining two are kept, and all three curvature fields are constrained to
// carry no level and no trend.
enum class SlopeDrop { cohort, age, period };

inline const char* time_scale_name(TimeScale s) {
  switch (s) {
    case TimeScale::age: return "age";
    case TimeScale::period: return "period";
    case TimeScale::cohort: return "cohort";
  }
  return "?";
}

// 1-based diagonal index of the cohort observed at age index a and period
// index p on a grid of I age bins with age/period width ratio R. The oldest
// age at the first period is cohort 1; values reach R*(I-1) + J.
inline int cohort_of(int a, int p, int I, int R) {
  require(I >= 1 && R >= 1, errc::bad_input, "cohort_of needs I >= 1 and R >= 1");
  require(a >= 1 && a <= I, errc::out_of_range,
          "age index " + std::to_string(a) + " outside 1.." + std::to_string(I));
  require(p >= 1, errc::out_of_range, "period index must be >= 1");
  return R * (I - a) + p;
}

struct BasisSpec {
  SplineFamily family = SplineFamily::tprs;
  std::array<int, 3> knots = {10, 10, 12};  // age, period, cohort
};

// One smoothed time scale: its distinct levels, the level-and-trend
// constraint, and either a constrained spline basis (spline mode) or an RW2
// structure matrix (gmrf mode).
struct CurvatureBlock {
  TimeScale scale = TimeScale::age;
  Eigen::VectorXd levels;  // ascending level values (midpoints, years, cohort index)
  Eigen::MatrixXd C;       // 2 x m: rows 1' and (1..m)'
  bool constrained = false;

  // spline mode
  std::optional<SplineBasis> basis;
  Eigen::MatrixXd Z;   // basis-to-constrained reparameterisation, T x (T-2)
  Eigen::MatrixXd Xc;  // constrained basis at the levels, m x (T-2)
  Eigen::MatrixXd Sc;  // constrained penalty, (T-2) x (T-2)

  // gmrf mode
  Eigen::SparseMatrix<double> R;  // RW2 structure, m x m

  int m() const { return static_cast<int>(levels.size()); }
  int n_cols() const { return static_cast<int>(Xc.cols()); }
};

// Absorbs the two constraints (zero sum, zero trend over the levels) into a
// spline block: Z spans the null space of C * basis(levels), and the basis
// and penalty are reparameterised accordingly. Already-constrained blocks
// pass through unchanged, so the operation is idempotent.
inline CurvatureBlock apply_constraints(CurvatureBlock block) {
  if (block.constrained) return block;
  require(block.basis.has_value(), errc::bad_input,
          "apply_constraints needs a spline basis block");
  const Eigen::MatrixXd Cgamma = block.C * block.basis->X;  // 2 x T
  block.Z = constraint_null_space(Cgamma);
  block.Xc = block.basis->X * block.Z;
  Eigen::MatrixXd Sc = block.Z.transpose() * block.basis->S * block.Z;
  const Eigen::MatrixXd Sct = Sc.transpose();
  block.Sc = 0.5 * (Sc + Sct);
  block.constrained = true;
  return block;
}

// Fixed-effect coding shared by both engines: an intercept and the two
// retained slopes, each centred at its training mean and scaled to one unit
// per level step.
struct SlopeCoding {
  std::array<TimeScale, 2> scales = {TimeScale::age, TimeScale::period};
  std::array<double, 2> center = {0.0, 0.0};
  std::array<double, 2> step = {1.0, 1.0};
};

// Everything the fitters need about the identifiable model: cell bookkeeping,
// the fixed columns, and one curvature block per time scale.
class ApcDesign {
 public:
  SmoothingMode mode = SmoothingMode::spline;
  SlopeDrop drop = SlopeDrop::cohort;
  int I = 0, J = 0, R = 1, K = 0;
  std::vector<double> age_mids;        // I
  std::vector<long long> period_years; // J
  Eigen::MatrixXi cohort_index;        // I x J, 1-based
  SlopeCoding coding;
  std::array<CurvatureBlock, 3> blocks;  // age, period, cohort

  struct CellKey {
    int a = 0, p = 0;       // 0-based grid position (forecast cells: p >= J)
    double age_mid = 0.0;
    double period = 0.0;    // calendar value
    double cohort = 0.0;    // 1-based diagonal index, may exceed K for forecasts
  };
  std::vector<CellKey> cells;  // row-major, age outer, period inner

  // spline mode only
  Eigen::MatrixXd model_matrix;     // n x n_cols
  std::array<int, 3> block_offset = {0, 0, 0};

  int n_rows() const { return static_cast<int>(cells.size()); }
  int n_cols() const {
    return 3 + blocks[0].n_cols() + blocks[1].n_cols() + blocks[2].n_cols();
  }

  double slope_value(TimeScale s, const CellKey& c) const {
    switch (s) {
      case TimeScale::age: return c.age_mid;
      case TimeScale::period: return c.period;
      case TimeScale::cohort: return c.cohort;
    }
    return 0.0;
  }

  Eigen::RowVector3d fixed_row(const CellKey& c) const {
    Eigen::RowVector3d r;
    r[0] = 1.0;
    for (int k = 0; k < 2; ++k)
      r[k + 1] = (slope_value(coding.scales[static_cast<std::size_t>(k)], c) -
                  coding.center[static_cast<std::size_t>(k)]) /
                 coding.step[static_cast<std::size_t>(k)];
    return r;
  }

  // Design rows for arbitrary cells (spline mode). Basis evaluation handles
  // values beyond the training levels, which is how forecasts extend the
  // period and cohort scales.
  Eigen::MatrixXd rows_for(const std::vector<CellKey>& keys) const {
    require(mode == SmoothingMode::spline, errc::bad_input,
            "rows_for is only defined for the spline design");
    const int n = static_cast<int>(keys.size());
    Eigen::MatrixXd X(n, n_cols());
    std::array<Eigen::VectorXd, 3> vals;
    for (int b = 0; b < 3; ++b) vals[static_cast<std::size_t>(b)].resize(n);
    for (int i = 0; i < n; ++i) {
      const CellKey& c = keys[static_cast<std::size_t>(i)];
      X.block(i, 0, 1, 3) = fixed_row(c);
      vals[0][i] = c.age_mid;
      vals[1][i] = c.period;
      vals[2][i] = c.cohort;
    }
    for (int b = 0; b < 3; ++b) {
      const CurvatureBlock& blk = blocks[static_cast<std::size_t>(b)];
      const BasisEval ev = blk.basis->evaluate(vals[static_cast<std::size_t>(b)]);
      X.block(0, block_offset[static_cast<std::size_t>(b)], n, blk.n_cols()) =
          ev.X * blk.Z;
    }
    return X;
  }

  std::vector<std::string> column_names() const {
    std::vector<std::string> names = {"intercept"};
    for (int k = 0; k < 2; ++k)
      names.push_back(std::string("slope_") +
                      time_scale_name(coding.scales[static_cast<std::size_t>(k)]));
    for (int b = 0; b < 3; ++b) {
      const CurvatureBlock& blk = blocks[static_cast<std::size_t>(b)];
      for (int j = 0; j < blk.n_cols(); ++j)
        names.push_back(std::string(time_scale_name(blk.scale)) + "_c" +
                        std::to_string(j + 1));
    }
    return names;
  }
};

// Assembles the identifiable design for a complete dataset: cohort indices
// from the diagonal rule, two centred slopes (the third is dropped), and one
// constrained curvature block per time scale.
inline ApcDesign build_design(const ApcDataset& data, SmoothingMode mode,
                              const BasisSpec& spec = {},
                              SlopeDrop drop = SlopeDrop::cohort) {
  ApcDesign d;
  d.mode = mode;
  d.drop = drop;
  d.I = data.n_ages();
  d.J = data.n_periods();
  d.R = data.ratio();
  d.K = data.n_cohorts();

  const int min_levels = mode == SmoothingMode::spline ? 4 : 3;
  require(d.I >= min_levels, errc::too_few_levels, "too few age levels to smooth");
  require(d.J >= min_levels, errc::too_few_levels, "too few period levels to smooth");
  require(d.K >= min_levels, errc::too_few_levels, "too few cohort levels to smooth");

  d.age_mids.resize(static_cast<std::size_t>(d.I));
  for (int a = 0; a < d.I; ++a)
    d.age_mids[static_cast<std::size_t>(a)] = data.ages[static_cast<std::size_t>(a)].midpoint();
  d.period_years = data.periods;

  d.cohort_index.resize(d.I, d.J);
  for (int a = 0; a < d.I; ++a)
    for (int p = 0; p < d.J; ++p)
      d.cohort_index(a, p) = cohort_of(a + 1, p + 1, d.I, d.R);

  d.cells.reserve(static_cast<std::size_t>(d.I) * d.J);
  for (int a = 0; a < d.I; ++a)
    for (int p = 0; p < d.J; ++p) {
      ApcDesign::CellKey c;
      c.a = a;
      c.p = p;
      c.age_mid = d.age_mids[static_cast<std::size_t>(a)];
      c.period = static_cast<double>(data.periods[static_cast<std::size_t>(p)]);
      c.cohort = static_cast<double>(d.cohort_index(a, p));
      d.cells.push_back(c);
    }

  // Slope coding: the dropped scale fixes which two survive; centres are the
  // cell means so the intercept estimates the grand mean, steps are one level.
  switch (drop) {
    case SlopeDrop::cohort:
      d.coding.scales = {TimeScale::age, TimeScale::period};
      break;
    case SlopeDrop::age:
      d.coding.scales = {TimeScale::period, TimeScale::cohort};
      break;
    case SlopeDrop::period:
      d.coding.scales = {TimeScale::age, TimeScale::cohort};
      break;
  }
  for (int k = 0; k < 2; ++k) {
    const TimeScale s = d.coding.scales[static_cast<std::size_t>(k)];
    double mean = 0.0;
    for (const auto& c : d.cells) mean += d.slope_value(s, c);
    mean /= static_cast<double>(d.cells.size());
    d.coding.center[static_cast<std::size_t>(k)] = mean;
    double step = 1.0;
    if (s == TimeScale::age) step = data.age_width();
    if (s == TimeScale::period) step = static_cast<double>(data.period_step());
    d.coding.step[static_cast<std::size_t>(k)] = step;
  }

  // Curvature blocks. Cohort levels run over the full 1..K index range so the
  // random walk (and the spline knots) see a contiguous axis.
  for (int b = 0; b < 3; ++b) {
    CurvatureBlock& blk = d.blocks[static_cast<std::size_t>(b)];
    blk.scale = static_cast<TimeScale>(b);
    int m = 0;
    if (blk.scale == TimeScale::age) {
      blk.levels = Eigen::Map<const Eigen::VectorXd>(d.age_mids.data(), d.I);
      m = d.I;
    } else if (blk.scale == TimeScale::period) {
      blk.levels.resize(d.J);
      for (int p = 0; p < d.J; ++p)
        blk.levels[p] = static_cast<double>(data.periods[static_cast<std::size_t>(p)]);
      m = d.J;
    } else {
      blk.levels.resize(d.K);
      for (int c = 0; c < d.K; ++c) blk.levels[c] = static_cast<double>(c + 1);
      m = d.K;
    }
    blk.C.resize(2, m);
    blk.C.row(0).setOnes();
    for (int i = 0; i < m; ++i) blk.C(1, i) = static_cast<double>(i + 1);

    if (mode == SmoothingMode::spline) {
      blk.basis = make_basis(spec.family, blk.levels,
                             spec.knots[static_cast<std::size_t>(b)]);
      blk = apply_constraints(std::move(blk));
    } else {
      blk.R = structure_matrix(2, m);
    }
  }

  if (mode == SmoothingMode::spline) {
    d.block_offset[0] = 3;
    d.block_offset[1] = d.block_offset[0] + d.blocks[0].n_cols();
    d.block_offset[2] = d.block_offset[1] + d.blocks[1].n_cols();
    d.model_matrix = d.rows_for(d.cells);
  }
  return d;
}

}  // namespace apc
