#include "mbf/maps.hpp"

#include <algorithm>
#include <bit>
#include <cstdint>

#include "mbf/error.hpp"

namespace mbf {

bool same_map(const MbfMap& a, const MbfMap& b) {
  if (a.patient_id != b.patient_id || a.width != b.width || a.height != b.height ||
      a.values.size() != b.values.size())
    return false;
  for (std::size_t i = 0; i < a.values.size(); ++i) {
    const bool na = std::isnan(a.values[i]), nb = std::isnan(b.values[i]);
    if (na != nb) return false;
    if (!na && std::bit_cast<std::uint64_t>(a.values[i]) !=
                   std::bit_cast<std::uint64_t>(b.values[i]))
      return false;
  }
  return true;
}

double quantile(std::vector<double> values, double q) {
  require(!values.empty(), "quantile of an empty sample");
  require(q >= 0.0 && q <= 1.0, "quantile level must lie in [0, 1]");
  std::sort(values.begin(), values.end());
  const double pos = q * static_cast<double>(values.size() - 1);
  const auto lo = static_cast<std::size_t>(pos);
  const std::size_t hi = std::min(lo + 1, values.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return values[lo] + frac * (values[hi] - values[lo]);
}

Quartiles quartiles(const std::vector<double>& values) {
  return {quantile(values, 0.5), quantile(values, 0.25), quantile(values, 0.75)};
}

}  // namespace mbf
