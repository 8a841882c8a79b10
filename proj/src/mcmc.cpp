#include "mbf/mcmc.hpp"

#include <algorithm>
#include <limits>

#include "mbf/nlls.hpp"
#include "mbf/parallel.hpp"
#include "mbf/seed.hpp"

namespace mbf {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

enum Coord { kFp = 0, kPs, kVp, kVe, kDelay, kLogSigma };

double sigmoid(double z) { return 1.0 / (1.0 + std::exp(-z)); }

// Log- and logit-to-bounds transforms between the sampler's unconstrained
// coordinates and natural parameters.
struct Transform {
  std::array<Interval, kParamCount> iv;

  static bool is_log(int j) { return j == kFp || j == kPs; }

  // Natural parameters; nullopt when the point leaves the support.
  std::optional<KineticParams> to_params(const std::vector<double>& z) const {
    std::array<double, kParamCount> a{};
    for (int j = 0; j < kParamCount; ++j) {
      if (is_log(j)) {
        a[j] = std::exp(z[j]);
      } else {
        a[j] = iv[j].lo + iv[j].width() * sigmoid(z[j]);
      }
      if (!iv[j].contains(a[j])) return std::nullopt;
    }
    return from_array(a);
  }

  double log_jacobian(const std::vector<double>& z) const {
    double s = 0.0;
    for (int j = 0; j < kParamCount; ++j) {
      if (is_log(j)) {
        s += z[j];
      } else {
        const double u = sigmoid(z[j]);
        s += std::log(iv[j].width() * u * (1.0 - u));
      }
    }
    return s;
  }

  std::vector<double> to_latent(const KineticParams& p, double log_sigma) const {
    const auto a = to_array(p);
    std::vector<double> z(kSampleColumns);
    for (int j = 0; j < kParamCount; ++j) {
      if (is_log(j)) {
        const double lo = std::log(iv[j].lo), hi = std::log(iv[j].hi);
        z[j] = std::clamp(std::log(a[j]), lo + 1e-9 * (hi - lo), hi - 1e-9 * (hi - lo));
      } else {
        const double u = std::clamp((a[j] - iv[j].lo) / iv[j].width(), 1e-6, 1.0 - 1e-6);
        z[j] = std::log(u / (1.0 - u));
      }
    }
    z[kLogSigma] = log_sigma;
    return z;
  }
};

class KineticTarget {
 public:
  KineticTarget(const Curve& aif, const Curve& tissue, const Prior& prior)
      : aif_(aif), tissue_(tissue), prior_(prior), map_{prior.bounds.as_array()} {}

  double start(const std::vector<double>& z) {
    propose(z, kDelay);
    accept();
    return current_log_;
  }

  double propose(const std::vector<double>& z, int j) {
    pending_log_ = kNegInf;
    const auto params = map_.to_params(z);
    const double ls = z[kLogSigma];
    if (!params || !prior_.log_sigma.contains(ls)) return kNegInf;
    pending_params_ = *params;
    pending_rss_ = (j == kLogSigma) ? rss_ : residual_sum_of_squares(*params, aif_, tissue_);
    pending_log_ = log_likelihood(pending_rss_, ls) +
                   prior_.log_density(*params, ls) + map_.log_jacobian(z);
    return pending_log_;
  }

  void accept() {
    params_ = pending_params_;
    rss_ = pending_rss_;
    current_log_ = pending_log_;
  }

  const KineticParams& params() const { return params_; }

 private:
  double log_likelihood(double rss, double ls) const {
    const double n = static_cast<double>(tissue_.size());
    return -n * ls - rss * std::exp(-2.0 * ls) / 2.0;
  }

  const Curve& aif_;
  const Curve& tissue_;
  const Prior& prior_;
  Transform map_;
  KineticParams params_{}, pending_params_{};
  double rss_ = 0.0, pending_rss_ = 0.0;
  double current_log_ = kNegInf, pending_log_ = kNegInf;
};

}  // namespace

void Prior::validate() const {
  bounds.validate();
  require(bounds.ps.lo > 0.0, "log-uniform prior on ps needs a positive lower bound");
  require(std::isfinite(log_sigma.lo) && std::isfinite(log_sigma.hi) &&
              log_sigma.lo < log_sigma.hi,
          "log_sigma prior interval must be finite and nonempty");
}

double Prior::log_density(const KineticParams& p, double log_sigma_value) const {
  if (!in_support(p, log_sigma_value)) return kNegInf;
  return -std::log(p.fp) - std::log(p.ps);
}

void McmcConfig::validate() const {
  require(n_iter >= 1 && burn_in >= 0 && burn_in < n_iter, "burn_in must lie in [0, n_iter)");
  require(thin >= 1, "thin must be >= 1");
  require(target_accept > 0.0 && target_accept < 1.0, "target_accept must lie in (0, 1)");
  require(adapt_window >= 1, "adapt_window must be >= 1");
  require(kept() >= 100, "chain keeps " + std::to_string(kept()) +
                             " samples after burn-in and thinning; at least 100 required");
}

std::vector<double> Posterior::column(int j) const {
  std::vector<double> c;
  c.reserve(samples.size());
  for (const auto& s : samples) c.push_back(s[j]);
  return c;
}

ParamSummary summarize(const std::vector<double>& column) {
  ParamSummary s;
  const Quartiles q = quartiles(column);
  s.median = q.median;
  s.p25 = q.p25;
  s.p75 = q.p75;
  double sum = 0.0;
  for (double v : column) sum += v;
  s.mean = sum / static_cast<double>(column.size());
  double ss = 0.0;
  for (double v : column) ss += (v - s.mean) * (v - s.mean);
  s.std = column.size() > 1 ? std::sqrt(ss / static_cast<double>(column.size() - 1)) : 0.0;
  return s;
}

double log_posterior(const KineticParams& params, double log_sigma, const Curve& aif,
                     const Curve& tissue, const Prior& prior) {
  if (!params.valid() || !prior.in_support(params, log_sigma)) return kNegInf;
  const double rss = residual_sum_of_squares(params, aif, tissue);
  const double n = static_cast<double>(tissue.size());
  return -n * log_sigma - rss * std::exp(-2.0 * log_sigma) / 2.0 +
         prior.log_density(params, log_sigma);
}

Posterior run_mcmc(const Curve& aif, const Curve& tissue, const Prior& prior,
                   const McmcConfig& cfg) {
  prior.validate();
  cfg.validate();
  aif.validate();
  tissue.validate();
  require(aif.grid == tissue.grid, "AIF and tissue curves must share a grid");

  const double n = static_cast<double>(tissue.size());
  KineticParams start;
  double start_rss;
  if (cfg.init_from_nlls) {
    FitConfig fit;
    fit.bounds = prior.bounds;
    const FitResult r = fit_nlls(aif, tissue, fit);
    start = r.params;
    start_rss = r.rss;
  } else {
    const auto iv = prior.bounds.as_array();
    start = prior.bounds.midpoint();
    start.fp = std::sqrt(iv[kFp].lo * iv[kFp].hi);
    start.ps = std::sqrt(iv[kPs].lo * iv[kPs].hi);
    start_rss = residual_sum_of_squares(start, aif, tissue);
  }
  double ls0 = cfg.fixed_log_sigma.value_or(0.5 * std::log(std::max(start_rss / n, 1e-300)));
  if (!cfg.fixed_log_sigma) {
    const double pad = 1e-6 * prior.log_sigma.width();
    ls0 = std::clamp(ls0, prior.log_sigma.lo + pad, prior.log_sigma.hi - pad);
  }

  Prior effective = prior;
  if (cfg.fixed_log_sigma) effective.log_sigma = {*cfg.fixed_log_sigma, *cfg.fixed_log_sigma};

  const Transform map{prior.bounds.as_array()};
  std::vector<double> z = map.to_latent(start, ls0);
  KineticTarget target(aif, tissue, effective);
  const double start_log = target.start(z);
  if (!std::isfinite(start_log)) fail(ErrorKind::Runtime, "chain start has zero posterior density");

  std::vector<double> scales = {0.05, 0.05, 0.3, 0.3, 0.3, 0.1};
  std::vector<bool> frozen(kSampleColumns, false);
  frozen[kLogSigma] = cfg.fixed_log_sigma.has_value();

  Posterior post;
  post.samples.reserve(static_cast<std::size_t>(cfg.kept()));
  post.accept_rate = sample_componentwise(
      target, z, start_log, scales, cfg, frozen, [&](const std::vector<double>&) {
        const KineticParams& p = target.params();
        post.samples.push_back({p.fp, p.ps, p.vp, p.ve, p.delay, z[kLogSigma]});
      });
  for (int j = 0; j < kSampleColumns; ++j) post.summary[j] = summarize(post.column(j));
  return post;
}

MbfMap label_patient(const Patient& patient, const Prior& prior, const McmcConfig& cfg,
                     int workers) {
  MbfMap map(patient.id, patient.width, patient.height);
  const auto voxels = patient.masked_indices();
  parallel_for(voxels.size(), workers, [&](std::size_t slot) {
    const int x = static_cast<int>(voxels[slot] % patient.width);
    const int y = static_cast<int>(voxels[slot] / patient.width);
    McmcConfig local = cfg;
    local.seed = voxel_seed(cfg.seed, patient.id, x, y);
    try {
      const Posterior post = run_mcmc(patient.aif, patient.tissue[slot], prior, local);
      map.at(x, y) = post.fp().median;
    } catch (const Error& e) {
      throw Error(e.kind(), "patient " + patient.id + " voxel (" + std::to_string(x) + ", " +
                                std::to_string(y) + "): " + e.what());
    }
  });
  return map;
}

LabelResult label_dataset(const PhantomDataset& dataset, const Prior& prior,
                          const McmcConfig& cfg, int workers) {
  LabelResult out;
  std::vector<double> pooled;
  for (const Patient& p : dataset.patients) {
    out.maps.push_back(label_patient(p, prior, cfg, workers));
    for (double v : out.maps.back().values)
      if (!std::isnan(v)) pooled.push_back(v);
  }
  if (!pooled.empty()) out.pooled = quartiles(pooled);
  return out;
}

}  // namespace mbf
