#pragma once

#include <cstdio>
#include <stdexcept>
#include <string>

namespace apc {

// Failure modes of the public operations. Every thrown apc::Error carries one
// of these so callers (and the CLI exit-code mapping) can react without
// parsing message text.
enum class errc {
  bad_input,             // malformed file, unparsable field, inconsistent flags
  missing_cell,          // incomplete age x period grid
  duplicate_cell,        // same (age_group, period) appears twice
  negative_count,        // event count < 0 or non-integral
  nonpositive_exposure,  // exposure <= 0
  ragged_bins,           // age bins of unequal width, or width not a multiple
                         // of the period step
  indivisible_span,      // aggregation width does not divide the age span
  log_of_zero,           // log rate requested with zero count and no offset
  out_of_range,          // index outside the grid
  too_few_levels,        // a time scale has too few distinct levels to smooth
  too_few_knots,         // basis dimension below the family minimum, or above
                         // the number of distinct values
  duplicate_values,      // basis construction needs strictly increasing values
  too_small,             // random-walk field shorter than its difference order
  nonpositive_precision, // tau or a variance parameter <= 0
  rank_loss,             // constraint matrix loses rank, unusable null space
  missing_exposure,      // forecast horizon reaches cells with no exposure
  shape_mismatch,        // vector/matrix sizes disagree
  inverted_interval,     // lower bound above upper bound
  grid_mismatch,         // two fit results cover different cells
  diverged,              // iterative fit left the feasible region
  singular_system,       // normal equations not solvable
  optim_failed,          // every optimizer start failed to produce a finite
                         // objective
};

inline const char* errc_name(errc c) {
  switch (c) {
    case errc::bad_input: return "bad_input";
    case errc::missing_cell: return "missing_cell";
    case errc::duplicate_cell: return "duplicate_cell";
    case errc::negative_count: return "negative_count";
    case errc::nonpositive_exposure: return "nonpositive_exposure";
    case errc::ragged_bins: return "ragged_bins";
    case errc::indivisible_span: return "indivisible_span";
    case errc::log_of_zero: return "log_of_zero";
    case errc::out_of_range: return "out_of_range";
    case errc::too_few_levels: return "too_few_levels";
    case errc::too_few_knots: return "too_few_knots";
    case errc::duplicate_values: return "duplicate_values";
    case errc::too_small: return "too_small";
    case errc::nonpositive_precision: return "nonpositive_precision";
    case errc::rank_loss: return "rank_loss";
    case errc::missing_exposure: return "missing_exposure";
    case errc::shape_mismatch: return "shape_mismatch";
    case errc::inverted_interval: return "inverted_interval";
    case errc::grid_mismatch: return "grid_mismatch";
    case errc::diverged: return "diverged";
    case errc::singular_system: return "singular_system";
    case errc::optim_failed: return "optim_failed";
  }
  return "unknown";
}

class Error : public std::runtime_error {
 public:
  Error(errc code, const std::string& what)
      : std::runtime_error(std::string(errc_name(code)) + ": " + what),
        code_(code) {}
  errc code() const noexcept { return code_; }

 private:
  errc code_;
};

[[noreturn]] inline void fail(errc code, const std::string& msg) {
  throw Error(code, msg);
}

inline void require(bool ok, errc code, const std::string& msg) {
  if (!ok) fail(code, msg);
}

// Shortest decimal form that round-trips a double (17 significant digits).
// All numeric file output goes through this so reruns are byte-identical.
inline std::string format_sig17(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace apc
