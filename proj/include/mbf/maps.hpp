#pragma once

#include <cmath>
#include <cstddef>
#include <limits>
#include <string>
#include <vector>

namespace mbf {

// A per-voxel flow map for one patient slice. Voxels outside the myocardial
// mask hold NaN.
struct MbfMap {
  std::string patient_id;
  int width = 0;
  int height = 0;
  std::vector<double> values;

  MbfMap() = default;
  MbfMap(std::string id, int w, int h)
      : patient_id(std::move(id)),
        width(w),
        height(h),
        values(static_cast<std::size_t>(w) * h, std::numeric_limits<double>::quiet_NaN()) {}

  double& at(int x, int y) { return values[static_cast<std::size_t>(y) * width + x]; }
  double at(int x, int y) const { return values[static_cast<std::size_t>(y) * width + x]; }
  bool present(int x, int y) const { return !std::isnan(at(x, y)); }
  std::size_t present_count() const {
    std::size_t n = 0;
    for (double v : values) n += !std::isnan(v);
    return n;
  }
};

// NaN-aware equality: absent voxels compare equal, present ones bitwise.
bool same_map(const MbfMap& a, const MbfMap& b);

struct Quartiles {
  double median = 0.0;
  double p25 = 0.0;
  double p75 = 0.0;
};

// Linear-interpolation quantile (the common "type 7" definition).
double quantile(std::vector<double> values, double q);
Quartiles quartiles(const std::vector<double>& values);

}  // namespace mbf
