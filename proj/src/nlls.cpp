#include "mbf/nlls.hpp"

#include <Eigen/Dense>
#include <cmath>
#include <limits>

#include "mbf/error.hpp"

namespace mbf {

void ParamBounds::validate() const {
  for (const Interval& iv : as_array())
    require(std::isfinite(iv.lo) && std::isfinite(iv.hi) && iv.lo < iv.hi,
            "parameter bounds must be finite, nonempty intervals");
  require(fp.lo > 0.0 && ps.lo >= 0.0 && vp.lo > 0.0 && ve.lo > 0.0 && delay.lo >= 0.0,
          "parameter bounds must respect the kinetic parameter domain");
  require(vp.hi + ve.hi <= 1.0, "vp and ve upper bounds must sum to at most 1");
}

void FitConfig::validate() const {
  bounds.validate();
  require(bounds.contains(initial()), "initial parameters lie outside the fit bounds");
  require(max_iter >= 1, "max_iter must be >= 1");
  require(lambda0 > 0.0 && tol_step > 0.0 && tol_grad > 0.0,
          "damping and tolerances must be > 0");
}

double residual_sum_of_squares(const KineticParams& params, const Curve& aif,
                               const Curve& tissue) {
  params.validate();
  require(params.delay < aif.grid.duration(), "delay exceeds acquisition window");
  thread_local std::vector<double> model, scratch;
  model.resize(aif.size());
  scratch.resize(aif.size());
  detail::simulate_values(params, aif.values, aif.grid.dt, model, scratch);
  double rss = 0.0;
  for (std::size_t i = 0; i < model.size(); ++i) {
    const double r = tissue[i] - model[i];
    rss += r * r;
  }
  return rss;
}

namespace {

using Vec = Eigen::Matrix<double, kParamCount, 1>;
using Mat = Eigen::Matrix<double, kParamCount, kParamCount>;

// theta = lo + (hi - lo) * sigmoid(z)
struct LogitMap {
  std::array<Interval, kParamCount> iv;

  KineticParams to_params(const Vec& z) const {
    std::array<double, kParamCount> a{};
    for (int j = 0; j < kParamCount; ++j) {
      const double s = 1.0 / (1.0 + std::exp(-z[j]));
      a[j] = std::clamp(iv[j].lo + iv[j].width() * s, iv[j].lo, iv[j].hi);
    }
    return from_array(a);
  }

  Vec to_latent(const KineticParams& p) const {
    const auto a = to_array(p);
    Vec z;
    for (int j = 0; j < kParamCount; ++j) {
      double u = (a[j] - iv[j].lo) / iv[j].width();
      u = std::clamp(u, 1e-12, 1.0 - 1e-12);
      z[j] = std::log(u / (1.0 - u));
    }
    return z;
  }
};

class Problem {
 public:
  Problem(const Curve& aif, const Curve& tissue, const FitConfig& cfg)
      : aif_(aif), tissue_(tissue), cfg_(cfg), map_{cfg.bounds.as_array()} {}

  std::vector<double> model(const Vec& z) {
    const KineticParams p = map_.to_params(z);
    if (cfg_.record_trace) visited.push_back(p);
    return simulate_tissue(p, aif_).values;
  }

  double rss(const std::vector<double>& m) const {
    double s = 0.0;
    for (std::size_t i = 0; i < m.size(); ++i) {
      const double r = tissue_[i] - m[i];
      s += r * r;
    }
    return s;
  }

  FitResult solve(const KineticParams& start) {
    FitResult out;
    Vec z = map_.to_latent(start);
    std::vector<double> current = model(z);
    double f = rss(current);
    if (!std::isfinite(f)) fail(ErrorKind::InvalidArgument, "invalid initialization");
    if (cfg_.record_trace) out.rss_trace.push_back(f);

    const std::size_t n = current.size();
    Eigen::MatrixXd jac(n, kParamCount);
    Eigen::VectorXd resid(n);
    double lambda = cfg_.lambda0;

    for (int iter = 1; iter <= cfg_.max_iter; ++iter) {
      out.n_iter = iter;
      for (std::size_t i = 0; i < n; ++i) resid[i] = tissue_[i] - current[i];

      for (int j = 0; j < kParamCount; ++j) {
        const double h = 1e-6 * std::max(1.0, std::abs(z[j]));
        Vec zp = z, zm = z;
        zp[j] += h;
        zm[j] -= h;
        const auto mp = model(zp);
        const auto mm = model(zm);
        for (std::size_t i = 0; i < n; ++i) jac(i, j) = (mp[i] - mm[i]) / (2.0 * h);
      }
      const Vec grad = jac.transpose() * resid;  // -1/2 of d(rss)/dz
      if (grad.cwiseAbs().maxCoeff() <= cfg_.tol_grad) {
        out.converged = true;
        break;
      }
      const Mat jtj = jac.transpose() * jac;
      const double scale = std::max(jtj.diagonal().maxCoeff(), 1e-300);

      bool accepted = false;
      bool small_step = false;
      while (lambda < 1e16) {
        Mat damped = jtj;
        for (int j = 0; j < kParamCount; ++j)
          damped(j, j) += lambda * std::max(jtj(j, j), 1e-12 * scale);
        const Vec step = damped.ldlt().solve(grad);
        const Vec trial = z + step;
        auto trial_model = model(trial);
        const double trial_f = rss(trial_model);
        if (std::isfinite(trial_f) && trial_f < f) {
          z = trial;
          current = std::move(trial_model);
          f = trial_f;
          lambda = std::max(lambda / 10.0, 1e-12);
          accepted = true;
          small_step = step.norm() <= cfg_.tol_step * (z.norm() + cfg_.tol_step);
          if (cfg_.record_trace) out.rss_trace.push_back(f);
          break;
        }
        lambda *= 10.0;
      }
      // No descent direction reduces rss any further: a stationary point
      // to working precision.
      if (!accepted || small_step) {
        out.converged = true;
        break;
      }
    }
    out.params = map_.to_params(z);
    out.rss = f;
    return out;
  }

  std::vector<KineticParams> visited;

 private:
  const Curve& aif_;
  const Curve& tissue_;
  const FitConfig& cfg_;
  LogitMap map_;
};

}  // namespace

FitResult fit_nlls(const Curve& aif, const Curve& tissue, const FitConfig& cfg) {
  cfg.validate();
  aif.validate();
  tissue.validate();
  require(aif.grid == tissue.grid, "AIF and tissue curves must share a grid");

  Problem problem(aif, tissue, cfg);
  FitResult best = problem.solve(cfg.initial());
  if (cfg.multi_start) {
    const auto iv = cfg.bounds.as_array();
    for (double ffp : {0.25, 0.75}) {
      for (double fvp : {0.25, 0.75}) {
        std::array<double, kParamCount> a = to_array(cfg.initial());
        a[0] = iv[0].lo + ffp * iv[0].width();
        a[2] = iv[2].lo + fvp * iv[2].width();
        FitResult r = problem.solve(from_array(a));
        if (r.rss < best.rss) best = std::move(r);
      }
    }
  }
  best.visited = std::move(problem.visited);
  return best;
}

}  // namespace mbf
