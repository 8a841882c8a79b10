#pragma once

// Forward tracer-kinetic model for myocardial perfusion.
//
// The tissue is described by the two-compartment exchange model: a plasma
// compartment fed by the arterial input function (AIF) at flow fp, exchanging
// with an interstitial compartment at rate ps.
//
//   vp dCp/dt = fp (Ca - Cp) + ps (Ce - Cp)
//   ve dCe/dt = ps (Cp - Ce)
//   Ct        = vp Cp + ve Ce
//
// Units: minutes, mM, mL/min/mL.

#include <cstddef>
#include <span>
#include <vector>

namespace mbf {

struct TimeGrid {
  double t0 = 0.0;
  double dt = 1.0 / 60.0;
  std::size_t n = 240;

  double time(std::size_t i) const { return t0 + static_cast<double>(i) * dt; }
  double duration() const { return static_cast<double>(n - 1) * dt; }
  bool valid() const;
  void validate() const;

  friend bool operator==(const TimeGrid&, const TimeGrid&) = default;
};

struct Curve {
  TimeGrid grid;
  std::vector<double> values;

  Curve() = default;
  Curve(TimeGrid g, std::vector<double> v);
  static Curve zeros(TimeGrid g) { return Curve(g, std::vector<double>(g.n, 0.0)); }

  std::size_t size() const { return values.size(); }
  double operator[](std::size_t i) const { return values[i]; }
  double peak() const;

  // Throws if the length does not match the grid or a value is not finite.
  void validate() const;
  void validate_aif() const;  // additionally nonnegative

  friend bool operator==(const Curve&, const Curve&) = default;
};

struct KineticParams {
  double fp = 0.0;     // plasma flow (MBF), mL/min/mL
  double ps = 0.0;     // permeability-surface area product, mL/min/mL
  double vp = 0.0;     // plasma volume fraction
  double ve = 0.0;     // interstitial volume fraction
  double delay = 0.0;  // bolus arrival delay, minutes

  bool valid() const;
  void validate() const;

  friend bool operator==(const KineticParams&, const KineticParams&) = default;
};

// Rates of the biexponential residue R(t) = A e^{-alpha t} + (1-A) e^{-beta t}.
// alpha >= beta >= 0 are the negated eigenvalues of the 2x2 system matrix.
struct ResidueRates {
  double alpha = 0.0;
  double beta = 0.0;
  double amplitude = 1.0;  // A; meaningless when confluent
  double plasma_rate = 0.0;  // fp / vp
  bool confluent = false;
};

ResidueRates residue_rates(const KineticParams& params);

// h(t) = fp R(t) on the grid's relative times (t - t0). Delay is ignored.
Curve impulse_response(const KineticParams& params, const TimeGrid& grid);

// Shift a curve later by `delay` minutes using linear interpolation between
// samples. Values before the first sample are taken as zero.
Curve shift_curve(const Curve& curve, double delay);

// Tissue concentration produced by `aif` with bolus delay params.delay.
// The delayed AIF is treated as piecewise linear between samples and convolved
// exactly with the impulse response.
Curve simulate_tissue(const KineticParams& params, const Curve& aif);

// Fourth-order Runge-Kutta integration of the state equations, `substeps`
// steps per sample interval. Verification path only.
Curve solve_ode_oracle(const KineticParams& params, const Curve& aif, int substeps);

// Impulse response recovered from an RK4 unit-step response S(t):
// h = dS/dt = fp (1 - Cp_step(t)).
Curve impulse_response_oracle(const KineticParams& params, const TimeGrid& grid,
                              int substeps);

namespace detail {

// y_i = integral_{t0}^{t_i} u(s) e^{-rate (t_i - s)} ds for piecewise-linear u
// with samples `input` at spacing dt. y_0 = 0.
void convolve_exponential(std::span<const double> input, double dt, double rate,
                          std::span<double> out);

// Same with kernel (t) e^{-rate t}; the confluent limit of two equal rates.
void convolve_t_exponential(std::span<const double> input, double dt, double rate,
                            std::span<double> out);

// Allocation-free core of simulate_tissue. `scratch` holds the delayed
// input and must be as long as `aif`. No validation.
void simulate_values(const KineticParams& params, std::span<const double> aif, double dt,
                     std::span<double> out, std::span<double> scratch);

}  // namespace detail

}  // namespace mbf
