#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <vector>

#include "mbf/cnn.hpp"
#include "mbf/kinetics.hpp"
#include "mbf/maps.hpp"
#include "mbf/phantom.hpp"

namespace mbf::testing {

inline double rel_l2(std::span<const double> a, std::span<const double> b) {
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    num += (a[i] - b[i]) * (a[i] - b[i]);
    den += b[i] * b[i];
  }
  return std::sqrt(num / den);
}

inline double rel_l2(const Curve& a, const Curve& b) { return rel_l2(a.values, b.values); }

inline double uniform(std::mt19937_64& rng, double lo, double hi) {
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

// Physiologically plausible draw; ps may be forced to zero.
inline KineticParams random_params(std::mt19937_64& rng, bool no_exchange = false) {
  KineticParams p;
  p.fp = uniform(rng, 0.3, 5.0);
  p.ps = no_exchange ? 0.0 : uniform(rng, 0.05, 2.5);
  p.vp = uniform(rng, 0.02, 0.2);
  p.ve = uniform(rng, 0.05, 0.45);
  p.delay = uniform(rng, 0.0, 0.1);
  return p;
}

// Simpson's rule for f on [a, b] with an even number of panels.
template <class F>
double simpson(F f, double a, double b, int panels) {
  const double h = (b - a) / panels;
  double s = f(a) + f(b);
  for (int i = 1; i < panels; ++i) s += f(a + i * h) * (i % 2 ? 4.0 : 2.0);
  return s * h / 3.0;
}

// Integral of the closed-form impulse response, sampled through
// impulse_response, over a horizon long enough for both exponentials.
inline double impulse_integral(const KineticParams& p) {
  const ResidueRates r = residue_rates(p);
  const double horizon = std::max(50.0 * (p.vp + p.ve) / p.fp, r.beta > 0 ? 10.0 / r.beta : 0.0);
  // Second sample of a two-point grid with spacing t is h(t).
  auto h = [&](double t) {
    return t > 0.0 ? impulse_response(p, TimeGrid{0.0, t, 2})[1] : p.fp;
  };
  const double knee = std::min(horizon, 20.0 / r.alpha);
  return simpson(h, 0.0, knee, 4000) + simpson(h, knee, horizon, 40000);
}

inline Curve default_aif(const TimeGrid& grid = TimeGrid{}) {
  return gamma_variate_aif(AifSpec{}, grid);
}

// Standard error of a chain statistic from non-overlapping batch statistics.
template <class Stat>
inline double batch_se(const std::vector<double>& x, int batches, Stat stat) {
  const std::size_t len = x.size() / batches;
  std::vector<double> s;
  for (int b = 0; b < batches; ++b)
    s.push_back(stat(std::vector<double>(x.begin() + b * len, x.begin() + (b + 1) * len)));
  double mean = 0;
  for (double v : s) mean += v;
  mean /= s.size();
  double ss = 0;
  for (double v : s) ss += (v - mean) * (v - mean);
  return std::sqrt(ss / (s.size() - 1) / s.size());
}

inline double median_of(const std::vector<double>& v) { return quantile(v, 0.5); }

// Small dual-branch net for gradient checks.
inline NetworkConfig small_config(int length = 16) {
  NetworkConfig c;
  c.input_length = length;
  c.aif_branch = {{3, 3}, {2, 3}};
  c.tissue_branch = {{4, 3}, {2, 5}};
  c.pool = 2;
  c.dense = {5, 4};
  c.seed = 7;
  return c;
}

inline Sample random_sample(std::mt19937_64& rng, int length, double target) {
  Sample s;
  s.aif_input = Tensor({1, static_cast<std::size_t>(length)});
  s.tissue_input = Tensor({kNeighbourhood, static_cast<std::size_t>(length)});
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  for (double& v : s.aif_input.values) v = u(rng);
  for (double& v : s.tissue_input.values) v = u(rng);
  s.target_mbf = target;
  return s;
}

// Random weights and biases so that no unit sits exactly on a ReLU kink.
inline NetworkWeights random_weights(const NetworkConfig& cfg, std::uint64_t seed) {
  NetworkWeights w = init_weights(cfg);
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-0.3, 0.3);
  for (std::size_t i = 0; i < w.tensors.size(); ++i)
    if (w.tensors[i].shape.size() == 1)
      for (double& v : w.tensors[i].values) v = u(rng) + 0.1;
  return w;
}

}  // namespace mbf::testing
