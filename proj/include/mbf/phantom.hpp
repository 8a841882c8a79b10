#pragma once

// Synthetic perfusion phantoms: a population AIF, smooth ground-truth flow
// maps with optional ischaemic defects, and noisy tissue curves.

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "mbf/kinetics.hpp"

namespace mbf {

struct Interval {
  double lo = 0.0;
  double hi = 0.0;

  bool contains(double v) const { return v >= lo && v <= hi; }
  double mid() const { return 0.5 * (lo + hi); }
  double width() const { return hi - lo; }

  friend bool operator==(const Interval&, const Interval&) = default;
};

// Gamma-variate bolus with one recirculation echo.
struct AifSpec {
  double amplitude = 5.0;         // mM
  double shape = 3.0;             // alpha
  double timescale = 0.03;        // beta, minutes
  double onset = 0.25;            // minutes
  double recirc_fraction = 0.3;   // 0 <= r < 1
  double recirc_lag = 0.3;        // minutes

  void validate() const;
  friend bool operator==(const AifSpec&, const AifSpec&) = default;
};

struct Defect {
  double cx = 0.0;  // voxel coordinates of the disc centre
  double cy = 0.0;
  double radius = 1.0;    // voxels
  double severity = 0.5;  // fractional flow reduction in (0, 1]

  bool contains(int x, int y) const {
    const double dx = x - cx, dy = y - cy;
    return dx * dx + dy * dy <= radius * radius;
  }
  friend bool operator==(const Defect&, const Defect&) = default;
};

struct PhantomSpec {
  std::string patient_id = "P01";
  int width = 64;
  int height = 64;
  TimeGrid grid{};
  AifSpec aif{};
  double base_mbf = 2.35;       // mL/min/mL
  double mbf_smoothness = 16;   // lattice spacing of the value noise, voxels
  double mbf_variation = 0.2;   // fractional amplitude of the smooth modulation
  std::optional<Defect> defect;
  Interval ps_range{0.3, 0.8};
  Interval vp_range{0.10, 0.16};
  Interval ve_range{0.15, 0.30};
  Interval delay_jitter{0.0, 0.05};  // minutes
  double noise_sigma = 0.007;        // mM
  double mask_inner = 0.0;  // inner radius fraction; > 0 gives an annulus
  std::uint64_t seed = 1;

  void validate() const;
  friend bool operator==(const PhantomSpec&, const PhantomSpec&) = default;
};

inline constexpr double kMbfFloor = 0.3;
inline constexpr double kMbfCeiling = 6.0;

// One synthetic patient. Tissue curves and ground truth are stored only for
// masked voxels, in row-major mask order.
struct Patient {
  std::string id;
  int width = 0;
  int height = 0;
  Curve aif;
  std::vector<std::uint8_t> mask;  // width * height, row-major
  std::vector<Curve> tissue;
  std::vector<KineticParams> truth;
  std::optional<PhantomSpec> spec;  // generation parameters, when known

  const TimeGrid& grid() const { return aif.grid; }
  std::size_t voxel_count() const { return tissue.size(); }
  bool masked(int x, int y) const {
    return x >= 0 && y >= 0 && x < width && y < height &&
           mask[static_cast<std::size_t>(y) * width + x] != 0;
  }

  // Linear indices (y * width + x) of masked voxels, row-major.
  std::vector<std::size_t> masked_indices() const;
  // Slot of each grid voxel in `tissue`/`truth`, or -1 when unmasked.
  std::vector<int> slot_lookup() const;

  void validate() const;
  friend bool operator==(const Patient&, const Patient&) = default;
};

struct PhantomDataset {
  std::vector<Patient> patients;

  std::size_t voxel_count() const;
  const Patient& find(const std::string& id) const;
  void validate() const;
  friend bool operator==(const PhantomDataset&, const PhantomDataset&) = default;
};

Curve gamma_variate_aif(const AifSpec& spec, const TimeGrid& grid);

std::vector<std::uint8_t> ellipse_mask(int width, int height, double inner_fraction);

// Ground-truth flow before nuisance sampling; exposed for testing the
// defect contrast.
struct FlowField {
  std::vector<double> counterfactual;  // clipped field without the defect
  std::vector<double> mbf;             // with defect, clipped
};
FlowField flow_field(const PhantomSpec& spec);

Patient generate_phantom(const PhantomSpec& spec);

struct SuiteOptions {
  int patients = 9;
  int diseased = 4;
  int width = 64;
  int height = 64;
  TimeGrid grid{};
  double noise_sigma = 0.007;
  Interval base_mbf{1.8, 3.0};
  double mbf_variation = 0.2;
  Interval severity{0.4, 0.7};
  Interval defect_radius{6.0, 12.0};  // at 64 voxels; scaled with the grid
  Interval aif_timescale{0.027, 0.035};  // minutes
  Interval aif_onset{0.2, 0.3};          // minutes
};

SuiteOptions default_suite_options();
// CI-sized suite: three diseased patients on 24x24 grids, narrow base flow,
// wider in-slice variation, defects of 4 to 5 voxels radius, one bolus width
// and bolus onsets within 2.4 samples of each other.
SuiteOptions reduced_suite_options();

std::vector<PhantomSpec> suite_specs(std::uint64_t master_seed, const SuiteOptions& opts);
// Nine patients: five healthy, four with defects. Patients are generated in
// parallel when workers > 1; the result does not depend on the worker count.
PhantomDataset default_suite(std::uint64_t master_seed, int workers = 1);
PhantomDataset make_suite(std::uint64_t master_seed, const SuiteOptions& opts,
                          int workers = 1);

}  // namespace mbf
