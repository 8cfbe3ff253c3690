// Regenerates the bundled example datasets: deterministic Poisson draws from
// fixed additive age-period-cohort surfaces in the England-and-Wales death
// count format (5-year age bands 25-84, calendar years 2006-2021).
//
//   make_example_data [--out DIR] [--check]
//
// --check refits both standard engines on the files just written and prints
// the estimation/prediction score table against the observed log rates.

#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <string>
#include <vector>

#include "apc/assessment.hpp"
#include "apc/bayes_fitter.hpp"
#include "apc/dataset.hpp"
#include "apc/freq_fitter.hpp"
#include "apc/rng.hpp"

namespace {

constexpr int kBands = 12;        // 25-29 .. 80-84
constexpr long long kYear0 = 2006;
constexpr int kYears = 16;        // 2006..2021
constexpr long long kTrainThrough = 2017;

// Mid-2010s England-and-Wales population by 5-year band, persons.
constexpr double kPop[kBands] = {3.85e6, 3.95e6, 3.80e6, 3.55e6, 3.50e6, 3.75e6,
                                 3.90e6, 3.55e6, 2.95e6, 2.45e6, 1.95e6, 1.40e6};

struct SurfaceSpec {
  const char* file;
  double mean_count;        // calibration target for the expected cell mean
  std::uint64_t seed;
  double age_quad, age_center, age_cube;   // log-rate age profile
  double period_slope, period_sin_amp;     // gentle trend over the full window
  double period_break;                     // quadratic ramp after the training window
  double cohort_amp, cohort_period;        // sinusoid in cohort birth year
};

double surface_eta(const SurfaceSpec& s, double age_mid, long long year) {
  const double u = (age_mid - 27.5) / 55.0;                 // 0..1 across bands
  const double t = static_cast<double>(year - kYear0);      // 0..15
  const double cy = static_cast<double>(year) - age_mid;    // cohort birth year
  double eta = s.age_quad * (u - s.age_center) * (u - s.age_center) + s.age_cube * u * u * u;
  eta += s.period_slope * t + s.period_sin_amp * std::sin(2.0 * M_PI * t / 11.0);
  const double over = t - static_cast<double>(kTrainThrough - kYear0) - 0.5;
  if (over > 0.0) eta += s.period_break * over * over;
  eta += s.cohort_amp * std::sin(2.0 * M_PI * (cy - 1940.0) / s.cohort_period);
  return eta;
}

apc::ApcDataset build_dataset(const SurfaceSpec& s) {
  std::vector<apc::AgeGroup> ages(kBands);
  std::vector<long long> periods(kYears);
  Eigen::MatrixXd counts(kBands, kYears), expos(kBands, kYears);
  for (int a = 0; a < kBands; ++a) {
    ages[a].lower = 25 + 5 * a;
    ages[a].upper = ages[a].lower + 4;
    ages[a].label = std::to_string(ages[a].lower) + "-" + std::to_string(ages[a].upper);
  }
  for (int j = 0; j < kYears; ++j) periods[j] = kYear0 + j;

  // Slow population growth; exposures rounded so the files carry integers.
  for (int a = 0; a < kBands; ++a)
    for (int j = 0; j < kYears; ++j)
      expos(a, j) = std::round(kPop[a] * (1.0 + 0.004 * j));

  // Shift the surface so the expected count per cell averages the target.
  double total = 0.0;
  for (int a = 0; a < kBands; ++a)
    for (int j = 0; j < kYears; ++j)
      total += expos(a, j) * std::exp(surface_eta(s, ages[a].midpoint(), periods[j]));
  const double intercept = std::log(s.mean_count * kBands * kYears / total);

  for (int a = 0; a < kBands; ++a)
    for (int j = 0; j < kYears; ++j) {
      const double mean =
          expos(a, j) * std::exp(intercept + surface_eta(s, ages[a].midpoint(), periods[j]));
      apc::CounterRng rng(s.seed, static_cast<std::uint64_t>(a),
                          static_cast<std::uint64_t>(j));
      counts(a, j) = static_cast<double>(rng.poisson(mean));
    }
  return apc::ApcDataset::from_parts(std::move(ages), std::move(periods), std::move(counts),
                                     std::move(expos));
}

void check_dataset(const char* name, const apc::ApcDataset& data) {
  apc::BasisSpec spec;  // tprs 10,10,12: the standard spline contender
  const auto spline = apc::fit_spline_model(data, kTrainThrough, spec);
  apc::PCPrior prior;   // U = 1, alpha = 0.01: the standard RW2 contender
  const auto rw2 = apc::fit_rw2_model(data, kTrainThrough, prior);
  const auto truth = apc::TruthSurface::from_dataset(data, 0.5);
  const auto ss = apc::score_fit(spline.cells, truth);
  const auto rs = apc::score_fit(rw2.cells, truth);

  std::printf("%s  (mean count %.2f)\n", name,
              data.counts.mean());
  auto line = [](const char* eng, const apc::ScoreReport& r) {
    std::printf("  %-7s %-11s is=%8.2f width=%8.2f cov=%6.1f%%  (x10^-2)\n", eng,
                r.window.c_str(), 100.0 * r.interval_score, 100.0 * r.mean_width,
                100.0 * r.coverage);
  };
  line("spline", *ss.estimation);
  line("spline", *ss.prediction);
  line("rw2", *rs.estimation);
  line("rw2", *rs.prediction);
  std::printf("  pred width ratio rw2/spline = %.3f\n",
              rs.prediction->mean_width / ss.prediction->mean_width);
  std::printf("  est  width ratio rw2/spline = %.3f\n",
              rs.estimation->mean_width / ss.estimation->mean_width);
}

}  // namespace

int main(int argc, char** argv) {
  std::string out = "data";
  bool check = false;
  for (int i = 1; i < argc; ++i) {
    if (std::strcmp(argv[i], "--out") == 0 && i + 1 < argc) {
      out = argv[++i];
    } else if (std::strcmp(argv[i], "--check") == 0) {
      check = true;
    } else {
      std::fprintf(stderr, "usage: make_example_data [--out DIR] [--check]\n");
      return 2;
    }
  }

  // Alcohol-specific deaths: middle-age peak, mild rise then a sharp
  // post-2017 increase; sparse counts (~47 per cell).
  const SurfaceSpec alcohol{"alcohol.csv", 46.63, 20260u,
                            -4.2, 0.55, -0.8,
                            0.006, 0.12, 0.014,
                            0.28, 14.0};
  // Self-harm deaths: younger peak, shallow decline then a post-2017 rise;
  // denser counts (~299 per cell).
  const SurfaceSpec self_harm{"self_harm.csv", 299.13, 20261u,
                              -3.6, 0.38, -1.1,
                              -0.004, 0.09, 0.011,
                              0.20, 16.0};

  try {
    std::filesystem::create_directories(out);
    for (const SurfaceSpec* s : {&alcohol, &self_harm}) {
      const apc::ApcDataset d = build_dataset(*s);
      const std::string path = out + "/" + s->file;
      d.to_csv(path);
      std::printf("wrote %s\n", path.c_str());
      if (check) check_dataset(s->file, d);
    }
  } catch (const apc::Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }
  return 0;
}
