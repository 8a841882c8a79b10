#pragma once

#include <array>

#include "mbf/kinetics.hpp"
#include "mbf/phantom.hpp"

namespace mbf {

inline constexpr int kParamCount = 5;  // fp, ps, vp, ve, delay

// Closed per-parameter intervals shared by the least-squares fit and the
// Bayesian prior.
struct ParamBounds {
  Interval fp{0.1, 6.0};
  Interval ps{0.01, 3.0};
  Interval vp{0.005, 0.2};
  Interval ve{0.01, 0.5};
  Interval delay{0.0, 0.2};

  std::array<Interval, kParamCount> as_array() const { return {fp, ps, vp, ve, delay}; }
  bool contains(const KineticParams& p) const {
    return fp.contains(p.fp) && ps.contains(p.ps) && vp.contains(p.vp) &&
           ve.contains(p.ve) && delay.contains(p.delay);
  }
  KineticParams midpoint() const { return {fp.mid(), ps.mid(), vp.mid(), ve.mid(), delay.mid()}; }
  void validate() const;

  friend bool operator==(const ParamBounds&, const ParamBounds&) = default;
};

inline std::array<double, kParamCount> to_array(const KineticParams& p) {
  return {p.fp, p.ps, p.vp, p.ve, p.delay};
}

inline KineticParams from_array(const std::array<double, kParamCount>& a) {
  return {a[0], a[1], a[2], a[3], a[4]};
}

}  // namespace mbf
