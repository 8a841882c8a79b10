#pragma once

// Bounded Levenberg-Marquardt fit of the exchange model to one voxel.

#include <optional>
#include <vector>

#include "mbf/bounds.hpp"
#include "mbf/kinetics.hpp"

namespace mbf {

struct FitConfig {
  ParamBounds bounds{};
  std::optional<KineticParams> init;  // defaults to the bounds midpoint
  int max_iter = 200;
  double lambda0 = 1e-3;
  double tol_step = 1e-10;
  double tol_grad = 1e-14;
  bool multi_start = false;
  bool record_trace = false;

  KineticParams initial() const { return init.value_or(bounds.midpoint()); }
  void validate() const;
};

struct FitResult {
  KineticParams params;
  double rss = 0.0;
  int n_iter = 0;
  bool converged = false;
  // With record_trace: rss at the start and after every accepted step, and
  // every parameter vector the objective was evaluated at.
  std::vector<double> rss_trace;
  std::vector<KineticParams> visited;
};

double residual_sum_of_squares(const KineticParams& params, const Curve& aif,
                               const Curve& tissue);

FitResult fit_nlls(const Curve& aif, const Curve& tissue, const FitConfig& cfg = {});

}  // namespace mbf
