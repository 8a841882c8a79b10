#pragma once

// Adaptive component-wise random-walk Metropolis for the per-voxel posterior
// of the exchange-model parameters and the noise level.

#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "mbf/bounds.hpp"
#include "mbf/error.hpp"
#include "mbf/kinetics.hpp"
#include "mbf/maps.hpp"
#include "mbf/phantom.hpp"

namespace mbf {

// fp and ps are log-uniform on their bounds; vp, ve and delay uniform;
// log(sigma) uniform on [log 1e-4, log 1].
struct Prior {
  ParamBounds bounds{};
  Interval log_sigma{std::log(1e-4), std::log(1.0)};

  bool in_support(const KineticParams& p) const { return bounds.contains(p); }
  bool in_support(const KineticParams& p, double log_sigma_value) const {
    return in_support(p) && log_sigma.contains(log_sigma_value);
  }
  // Unnormalized log density; -infinity outside the support.
  double log_density(const KineticParams& p, double log_sigma_value) const;
  void validate() const;
};

struct McmcConfig {
  int n_iter = 20000;
  int burn_in = 10000;
  int thin = 10;
  double target_accept = 0.234;
  int adapt_window = 200;
  std::uint64_t seed = 1;
  // Holds log(sigma) fixed instead of sampling it.
  std::optional<double> fixed_log_sigma;
  // Start the chain at the least-squares estimate rather than the prior centre.
  bool init_from_nlls = true;

  int kept() const { return thin > 0 ? (n_iter - burn_in + thin - 1) / thin : 0; }
  void validate() const;
};

inline constexpr int kSampleColumns = 6;  // fp, ps, vp, ve, delay, log_sigma
using Sample6 = std::array<double, kSampleColumns>;

struct ParamSummary {
  double median = 0.0;
  double p25 = 0.0;
  double p75 = 0.0;
  double mean = 0.0;
  double std = 0.0;
};

struct Posterior {
  std::vector<Sample6> samples;
  std::array<ParamSummary, kSampleColumns> summary{};
  double accept_rate = 0.0;

  const ParamSummary& fp() const { return summary[0]; }
  std::vector<double> column(int j) const;
};

ParamSummary summarize(const std::vector<double>& column);

// Gaussian likelihood plus log prior:
//   -n log(sigma) - rss / (2 sigma^2) - log(fp) - log(ps)   inside the support.
double log_posterior(const KineticParams& params, double log_sigma, const Curve& aif,
                     const Curve& tissue, const Prior& prior);

// Generic sampler core. `Target` must provide
//   double propose(const std::vector<double>& z, int j);  // log density at z
//   void accept();                                        // commit last proposal
// and `z` is updated in place. `on_keep(z)` is called for every kept draw.
// Coordinates listed in `frozen` are never updated. Returns the post-burn-in
// acceptance rate.
template <typename Target, typename OnKeep>
double sample_componentwise(Target& target, std::vector<double>& z, double current_log,
                            std::vector<double> scales, const McmcConfig& cfg,
                            const std::vector<bool>& frozen, OnKeep&& on_keep) {
  const auto dim = static_cast<int>(z.size());
  std::mt19937_64 rng(cfg.seed);
  std::normal_distribution<double> step(0.0, 1.0);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::vector<int> window_accepts(dim, 0);
  long proposals = 0, accepts = 0;

  for (int it = 0; it < cfg.n_iter; ++it) {
    for (int j = 0; j < dim; ++j) {
      if (frozen[j]) continue;
      const double old = z[j];
      z[j] = old + scales[j] * step(rng);
      const double proposed = target.propose(z, j);
      const double u = unit(rng);
      const bool ok = std::isfinite(proposed) && std::log(u) < proposed - current_log;
      if (ok) {
        target.accept();
        current_log = proposed;
        ++window_accepts[j];
      } else {
        z[j] = old;
      }
      if (it >= cfg.burn_in) {
        ++proposals;
        accepts += ok;
      }
    }
    if (it < cfg.burn_in && (it + 1) % cfg.adapt_window == 0) {
      for (int j = 0; j < dim; ++j) {
        const double rate = static_cast<double>(window_accepts[j]) / cfg.adapt_window;
        scales[j] *= std::exp(2.0 * (rate - cfg.target_accept));
        window_accepts[j] = 0;
      }
    }
    if (it >= cfg.burn_in && (it - cfg.burn_in) % cfg.thin == 0) on_keep(z);
  }
  return proposals > 0 ? static_cast<double>(accepts) / proposals : 0.0;
}

Posterior run_mcmc(const Curve& aif, const Curve& tissue, const Prior& prior,
                   const McmcConfig& cfg);

struct LabelResult {
  std::vector<MbfMap> maps;  // one per patient, dataset order
  Quartiles pooled;
};

// Posterior-median flow for every masked voxel. Each voxel's chain is seeded
// from (cfg.seed, patient id, x, y) so results do not depend on `workers`.
LabelResult label_dataset(const PhantomDataset& dataset, const Prior& prior,
                          const McmcConfig& cfg, int workers = 1);
MbfMap label_patient(const Patient& patient, const Prior& prior, const McmcConfig& cfg,
                     int workers = 1);

}  // namespace mbf
