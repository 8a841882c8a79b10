#include "mbf/kinetics.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "mbf/error.hpp"

namespace mbf {

bool TimeGrid::valid() const {
  return std::isfinite(t0) && std::isfinite(dt) && dt > 0.0 && n >= 2;
}

void TimeGrid::validate() const {
  require(valid(), "time grid requires dt > 0 and n >= 2");
}

Curve::Curve(TimeGrid g, std::vector<double> v) : grid(g), values(std::move(v)) {
  require(values.size() == grid.n, "curve length " + std::to_string(values.size()) +
                                       " does not match grid length " +
                                       std::to_string(grid.n));
}

double Curve::peak() const {
  return values.empty() ? 0.0 : *std::max_element(values.begin(), values.end());
}

void Curve::validate() const {
  grid.validate();
  require(values.size() == grid.n, "curve length does not match its grid");
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (!std::isfinite(values[i]))
      fail(ErrorKind::NonFinite, "curve value " + std::to_string(i) + " is not finite");
  }
}

void Curve::validate_aif() const {
  validate();
  for (double v : values) require(v >= 0.0, "AIF values must be nonnegative");
}

bool KineticParams::valid() const {
  return std::isfinite(fp) && std::isfinite(ps) && std::isfinite(vp) &&
         std::isfinite(ve) && std::isfinite(delay) && fp > 0.0 && ps >= 0.0 &&
         vp > 0.0 && ve > 0.0 && vp + ve <= 1.0 && delay >= 0.0;
}

void KineticParams::validate() const {
  require(valid(), "kinetic parameters violate fp > 0, ps >= 0, vp > 0, ve > 0, "
                   "vp + ve <= 1, delay >= 0");
}

ResidueRates residue_rates(const KineticParams& p) {
  p.validate();
  // Negated trace and determinant of
  //   [ -(fp+ps)/vp   ps/vp ]
  //   [   ps/ve      -ps/ve ]
  const double trace = (p.fp + p.ps) / p.vp + p.ps / p.ve;
  const double det = p.fp * p.ps / (p.vp * p.ve);
  const double disc = std::sqrt(std::max(trace * trace - 4.0 * det, 0.0));

  ResidueRates r;
  r.plasma_rate = p.fp / p.vp;
  r.alpha = 0.5 * (trace + disc);
  r.beta = r.alpha > 0.0 ? det / r.alpha : 0.0;  // avoids cancellation in (trace - disc)
  r.confluent = std::abs(r.alpha - r.beta) < 1e-12 * std::max(r.alpha, r.beta);
  if (!r.confluent) r.amplitude = (r.beta - r.plasma_rate) / (r.beta - r.alpha);
  return r;
}

Curve impulse_response(const KineticParams& params, const TimeGrid& grid) {
  grid.validate();
  const ResidueRates r = residue_rates(params);
  std::vector<double> h(grid.n);
  for (std::size_t i = 0; i < grid.n; ++i) {
    const double t = static_cast<double>(i) * grid.dt;
    if (r.confluent) {
      h[i] = params.fp * std::exp(-r.alpha * t) * (1.0 + (r.alpha - r.plasma_rate) * t);
    } else {
      h[i] = params.fp * (r.amplitude * std::exp(-r.alpha * t) +
                          (1.0 - r.amplitude) * std::exp(-r.beta * t));
    }
  }
  return Curve(grid, std::move(h));
}

namespace {

// Two-tap interpolation filter for a shift of `delay / dt` samples.
struct ShiftTaps {
  std::size_t whole = 0;
  double frac = 0.0;  // weight of sample i - whole - 1
};

ShiftTaps shift_taps(double delay, double dt) {
  const double offset = delay / dt;
  double whole = std::floor(offset);
  double frac = offset - whole;
  // Snap grid-aligned shifts so integer-sample delays are exact copies.
  if (frac < 1e-9) {
    frac = 0.0;
  } else if (frac > 1.0 - 1e-9) {
    whole += 1.0;
    frac = 0.0;
  }
  return {static_cast<std::size_t>(whole), frac};
}

void shift_values(std::span<const double> in, double delay, double dt, std::span<double> out) {
  const std::size_t n = in.size();
  const ShiftTaps taps = shift_taps(delay, dt);
  for (std::size_t i = 0; i < n; ++i) {
    if (i < taps.whole) {
      out[i] = 0.0;
      continue;
    }
    const std::size_t j = i - taps.whole;
    const double prev = j >= 1 ? in[j - 1] : 0.0;
    out[i] = taps.frac == 0.0 ? in[j] : (1.0 - taps.frac) * in[j] + taps.frac * prev;
  }
}

}  // namespace

Curve shift_curve(const Curve& curve, double delay) {
  require(std::isfinite(delay) && delay >= 0.0, "shift must be finite and >= 0");
  std::vector<double> out(curve.size());
  shift_values(curve.values, delay, curve.grid.dt, out);
  return Curve(curve.grid, std::move(out));
}

namespace {

// g(x) = (1 - e^{-x} - x e^{-x}) / x^2, the weight of the left sample when a
// linear segment is convolved with e^{-rate t}; f(x) = (1 - e^{-x}) / x.
struct SegmentWeights {
  double decay;  // e^{-x}
  double f;
  double g;
  double dg;  // g'(x)
};

SegmentWeights segment_weights(double x) {
  SegmentWeights w;
  w.decay = std::exp(-x);
  if (x < 0.1) {
    // Alternating series; 14 terms are far below double precision at x < 0.1.
    double f = 0.0, g = 0.0, dg = 0.0;
    double p1 = 1.0, p2 = 1.0, p3 = 1.0;  // x^{n-1}, x^{n-2}, x^{n-3}
    double fact = 1.0;                   // n!
    for (int n = 1; n <= 16; ++n) {
      fact *= n;
      const double sign = (n % 2 == 0) ? 1.0 : -1.0;
      f -= sign * p1 / fact;
      p1 *= x;
      if (n >= 2) {
        g += sign * p2 * (n - 1) / fact;
        p2 *= x;
      }
      if (n >= 3) {
        dg += sign * p3 * (n - 2) * (n - 1) / fact;
        p3 *= x;
      }
    }
    w.f = f;
    w.g = g;
    w.dg = dg;
  } else {
    const double one_minus = -std::expm1(-x);
    w.f = one_minus / x;
    w.g = (one_minus - x * w.decay) / (x * x);
    w.dg = (w.decay - 2.0 * w.g) / x;
  }
  return w;
}

}  // namespace

namespace detail {

void convolve_exponential(std::span<const double> input, double dt, double rate,
                          std::span<double> out) {
  const std::size_t n = input.size();
  if (n == 0) return;
  const SegmentWeights w = segment_weights(rate * dt);
  const double left = dt * w.g;
  const double right = dt * (w.f - w.g);
  double y = 0.0;
  out[0] = 0.0;
  for (std::size_t i = 0; i + 1 < n; ++i) {
    y = w.decay * y + left * input[i] + right * input[i + 1];
    out[i + 1] = y;
  }
}

void convolve_t_exponential(std::span<const double> input, double dt, double rate,
                            std::span<double> out) {
  // z = -d/d(rate) of the plain exponential convolution, differentiated
  // through its recursion.
  const std::size_t n = input.size();
  if (n == 0) return;
  const SegmentWeights w = segment_weights(rate * dt);
  const double left = dt * w.g;
  const double right = dt * (w.f - w.g);
  const double dt2 = dt * dt;
  double y = 0.0;
  double z = 0.0;
  out[0] = 0.0;
  for (std::size_t i = 0; i + 1 < n; ++i) {
    z = w.decay * z + dt * w.decay * y - dt2 * w.dg * input[i] +
        dt2 * (w.g + w.dg) * input[i + 1];
    y = w.decay * y + left * input[i] + right * input[i + 1];
    out[i + 1] = z;
  }
}

void simulate_values(const KineticParams& params, std::span<const double> aif, double dt,
                     std::span<double> out, std::span<double> scratch) {
  const ResidueRates r = residue_rates(params);
  const std::size_t n = aif.size();
  std::span<const double> input = aif;
  if (params.delay > 0.0) {
    shift_values(aif, params.delay, dt, scratch);
    input = scratch.first(n);
  }
  if (r.confluent) {
    std::vector<double> slow(n);
    convolve_exponential(input, dt, r.alpha, out);
    convolve_t_exponential(input, dt, r.alpha, slow);
    const double c = r.alpha - r.plasma_rate;
    for (std::size_t i = 0; i < n; ++i) out[i] = params.fp * (out[i] + c * slow[i]);
    return;
  }
  // Both exponential recursions fused into one pass.
  const SegmentWeights fast = segment_weights(r.alpha * dt);
  const SegmentWeights slow = segment_weights(r.beta * dt);
  const double fl = dt * fast.g, fr = dt * (fast.f - fast.g);
  const double sl = dt * slow.g, sr = dt * (slow.f - slow.g);
  const double wa = params.fp * r.amplitude;
  const double wb = params.fp * (1.0 - r.amplitude);
  double ya = 0.0, yb = 0.0;
  out[0] = 0.0;
  for (std::size_t i = 0; i + 1 < n; ++i) {
    ya = fast.decay * ya + fl * input[i] + fr * input[i + 1];
    yb = slow.decay * yb + sl * input[i] + sr * input[i + 1];
    out[i + 1] = wa * ya + wb * yb;
  }
}

}  // namespace detail

Curve simulate_tissue(const KineticParams& params, const Curve& aif) {
  params.validate();
  aif.grid.validate();
  require(aif.size() == aif.grid.n, "AIF length does not match its grid");
  require(params.delay < aif.grid.duration(), "delay exceeds acquisition window");
  std::vector<double> out(aif.size()), scratch(aif.size());
  detail::simulate_values(params, aif.values, aif.grid.dt, out, scratch);
  return Curve(aif.grid, std::move(out));
}

namespace {

struct State {
  double cp = 0.0;
  double ce = 0.0;
};

struct Derivative {
  const KineticParams& p;
  State operator()(const State& s, double ca) const {
    return {(p.fp * (ca - s.cp) + p.ps * (s.ce - s.cp)) / p.vp,
            p.ps * (s.cp - s.ce) / p.ve};
  }
};

// Integrates over one sample interval with linear forcing from ca0 to ca1.
State rk4_interval(const Derivative& rhs, State s, double ca0, double ca1, double dt,
                   int substeps) {
  const double h = dt / substeps;
  for (int m = 0; m < substeps; ++m) {
    const double a0 = ca0 + (ca1 - ca0) * (static_cast<double>(m) / substeps);
    const double ah = ca0 + (ca1 - ca0) * ((m + 0.5) / substeps);
    const double a1 = ca0 + (ca1 - ca0) * (static_cast<double>(m + 1) / substeps);
    const State k1 = rhs(s, a0);
    const State k2 = rhs({s.cp + 0.5 * h * k1.cp, s.ce + 0.5 * h * k1.ce}, ah);
    const State k3 = rhs({s.cp + 0.5 * h * k2.cp, s.ce + 0.5 * h * k2.ce}, ah);
    const State k4 = rhs({s.cp + h * k3.cp, s.ce + h * k3.ce}, a1);
    s.cp += h / 6.0 * (k1.cp + 2.0 * k2.cp + 2.0 * k3.cp + k4.cp);
    s.ce += h / 6.0 * (k1.ce + 2.0 * k2.ce + 2.0 * k3.ce + k4.ce);
  }
  return s;
}

}  // namespace

Curve solve_ode_oracle(const KineticParams& params, const Curve& aif, int substeps) {
  params.validate();
  aif.validate();
  require(substeps >= 1, "substeps must be >= 1");
  require(params.delay < aif.grid.duration(), "delay exceeds acquisition window");

  const Curve input = shift_curve(aif, params.delay);
  const Derivative rhs{params};
  std::vector<double> out(input.size(), 0.0);
  State s;
  for (std::size_t i = 0; i + 1 < input.size(); ++i) {
    s = rk4_interval(rhs, s, input[i], input[i + 1], aif.grid.dt, substeps);
    out[i + 1] = params.vp * s.cp + params.ve * s.ce;
  }
  return Curve(aif.grid, std::move(out));
}

Curve impulse_response_oracle(const KineticParams& params, const TimeGrid& grid,
                              int substeps) {
  params.validate();
  grid.validate();
  require(substeps >= 1, "substeps must be >= 1");
  const Derivative rhs{params};
  std::vector<double> h(grid.n);
  State s;
  h[0] = params.fp;
  for (std::size_t i = 0; i + 1 < grid.n; ++i) {
    s = rk4_interval(rhs, s, 1.0, 1.0, grid.dt, substeps);
    h[i + 1] = params.fp * (1.0 - s.cp);
  }
  return Curve(grid, std::move(h));
}

}  // namespace mbf
