#include "mbf/phantom.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numbers>
#include <random>

#include "mbf/error.hpp"
#include "mbf/parallel.hpp"
#include "mbf/seed.hpp"

namespace mbf {

namespace {

enum Stream : std::uint64_t { kFieldStream = 1, kNuisanceStream = 2, kNoiseStream = 3 };

double uniform(std::mt19937_64& rng, const Interval& iv) {
  if (iv.hi == iv.lo) return iv.lo;
  return std::uniform_real_distribution<double>(iv.lo, iv.hi)(rng);
}

double gamma_shape(const AifSpec& s, double t) {
  const double u = (t - s.onset) / s.timescale;
  if (u <= 0.0) return 0.0;
  return s.amplitude * std::pow(u, s.shape) * std::exp(-u);
}

}  // namespace

void AifSpec::validate() const {
  require(amplitude > 0.0 && shape > 0.0 && timescale > 0.0,
          "AIF amplitude, shape and timescale must be > 0");
  require(onset >= 0.0, "AIF onset must be >= 0");
  require(recirc_fraction >= 0.0 && recirc_fraction < 1.0,
          "AIF recirculation fraction must lie in [0, 1)");
  require(recirc_lag >= 0.0, "AIF recirculation lag must be >= 0");
}

void PhantomSpec::validate() const {
  require(width >= 1 && height >= 1, "phantom grid must have at least one voxel");
  grid.validate();
  aif.validate();
  require(base_mbf > 0.0, "base_mbf must be > 0");
  require(mbf_smoothness > 0.0, "mbf_smoothness must be > 0");
  require(mbf_variation >= 0.0 && mbf_variation < 1.0, "mbf_variation must lie in [0, 1)");
  require(noise_sigma >= 0.0, "noise_sigma must be >= 0");
  require(mask_inner >= 0.0 && mask_inner < 1.0, "mask_inner must lie in [0, 1)");
  for (const Interval* iv : {&ps_range, &vp_range, &ve_range, &delay_jitter})
    require(iv->lo <= iv->hi, "nuisance interval has lo > hi");
  require(ps_range.lo >= 0.0, "ps range must be >= 0");
  require(vp_range.lo > 0.0 && ve_range.lo > 0.0, "vp and ve ranges must be > 0");
  require(vp_range.hi + ve_range.hi <= 1.0, "vp + ve must not exceed 1");
  require(delay_jitter.lo >= 0.0 && delay_jitter.hi < grid.duration(),
          "delay jitter must lie within [0, acquisition window)");
  if (defect) {
    require(defect->severity > 0.0 && defect->severity <= 1.0,
            "defect severity must lie in (0, 1]");
    require(defect->radius > 0.0, "defect radius must be > 0");
    require(defect->cx >= 0.0 && defect->cx <= width - 1 && defect->cy >= 0.0 &&
                defect->cy <= height - 1,
            "defect disc outside grid");
  }
}

std::vector<std::size_t> Patient::masked_indices() const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < mask.size(); ++i)
    if (mask[i]) out.push_back(i);
  return out;
}

std::vector<int> Patient::slot_lookup() const {
  std::vector<int> slots(mask.size(), -1);
  int next = 0;
  for (std::size_t i = 0; i < mask.size(); ++i)
    if (mask[i]) slots[i] = next++;
  return slots;
}

void Patient::validate() const {
  require(!id.empty(), "patient id must not be empty");
  require(width >= 1 && height >= 1, "patient " + id + ": empty grid");
  require(mask.size() == static_cast<std::size_t>(width) * height,
          "patient " + id + ": mask size does not match grid");
  aif.validate_aif();
  const auto masked = static_cast<std::size_t>(std::count_if(
      mask.begin(), mask.end(), [](std::uint8_t m) { return m != 0; }));
  if (tissue.size() != masked || truth.size() != masked)
    fail(ErrorKind::CountMismatch, "patient " + id + ": curve count mismatch");
  for (const Curve& c : tissue) {
    require(c.grid == aif.grid, "patient " + id + ": tissue grid differs from AIF grid");
    c.validate();
  }
}

std::size_t PhantomDataset::voxel_count() const {
  std::size_t n = 0;
  for (const auto& p : patients) n += p.voxel_count();
  return n;
}

const Patient& PhantomDataset::find(const std::string& id) const {
  for (const auto& p : patients)
    if (p.id == id) return p;
  fail(ErrorKind::InvalidArgument, "unknown patient id " + id);
}

void PhantomDataset::validate() const {
  for (const auto& p : patients) p.validate();
}

Curve gamma_variate_aif(const AifSpec& spec, const TimeGrid& grid) {
  spec.validate();
  grid.validate();
  std::vector<double> v(grid.n);
  for (std::size_t i = 0; i < grid.n; ++i) {
    const double t = grid.time(i);
    v[i] = gamma_shape(spec, t);
    if (spec.recirc_fraction > 0.0)
      v[i] += spec.recirc_fraction * gamma_shape(spec, t - spec.recirc_lag);
  }
  return Curve(grid, std::move(v));
}

std::vector<std::uint8_t> ellipse_mask(int width, int height, double inner_fraction) {
  std::vector<std::uint8_t> mask(static_cast<std::size_t>(width) * height, 0);
  const double rx = 0.5 * width, ry = 0.5 * height;
  for (int y = 0; y < height; ++y) {
    for (int x = 0; x < width; ++x) {
      const double u = (x + 0.5 - rx) / rx;
      const double v = (y + 0.5 - ry) / ry;
      const double r2 = u * u + v * v;
      if (r2 <= 1.0 && r2 >= inner_fraction * inner_fraction)
        mask[static_cast<std::size_t>(y) * width + x] = 1;
    }
  }
  return mask;
}

FlowField flow_field(const PhantomSpec& spec) {
  spec.validate();
  std::mt19937_64 rng(derive_seed(spec.seed, kFieldStream));
  std::uniform_real_distribution<double> unit(-1.0, 1.0);

  // Value noise: a seeded coarse lattice, bilinearly interpolated.
  const double spacing = spec.mbf_smoothness;
  const int gx = static_cast<int>(std::ceil((spec.width - 1) / spacing)) + 2;
  const int gy = static_cast<int>(std::ceil((spec.height - 1) / spacing)) + 2;
  std::vector<double> lattice(static_cast<std::size_t>(gx) * gy);
  for (double& v : lattice) v = unit(rng);
  auto node = [&](int i, int j) { return lattice[static_cast<std::size_t>(j) * gx + i]; };

  const std::size_t count = static_cast<std::size_t>(spec.width) * spec.height;
  FlowField field;
  field.counterfactual.resize(count);
  field.mbf.resize(count);
  for (int y = 0; y < spec.height; ++y) {
    for (int x = 0; x < spec.width; ++x) {
      const double u = x / spacing, v = y / spacing;
      const int i = static_cast<int>(u), j = static_cast<int>(v);
      const double fu = u - i, fv = v - j;
      const double noise = (1 - fu) * (1 - fv) * node(i, j) + fu * (1 - fv) * node(i + 1, j) +
                           (1 - fu) * fv * node(i, j + 1) + fu * fv * node(i + 1, j + 1);
      const double raw = spec.base_mbf * (1.0 + spec.mbf_variation * noise);
      double affected = raw;
      if (spec.defect && spec.defect->contains(x, y)) affected = raw * (1.0 - spec.defect->severity);
      const std::size_t k = static_cast<std::size_t>(y) * spec.width + x;
      field.counterfactual[k] = std::clamp(raw, kMbfFloor, kMbfCeiling);
      field.mbf[k] = std::clamp(affected, kMbfFloor, kMbfCeiling);
    }
  }
  return field;
}

Patient generate_phantom(const PhantomSpec& spec) {
  spec.validate();
  const FlowField field = flow_field(spec);

  Patient p;
  p.id = spec.patient_id;
  p.width = spec.width;
  p.height = spec.height;
  p.aif = gamma_variate_aif(spec.aif, spec.grid);
  p.mask = ellipse_mask(spec.width, spec.height, spec.mask_inner);
  p.spec = spec;

  std::mt19937_64 nuisance(derive_seed(spec.seed, kNuisanceStream));
  std::mt19937_64 noise_rng(derive_seed(spec.seed, kNoiseStream));
  std::normal_distribution<double> noise(0.0, 1.0);

  for (std::size_t k : p.masked_indices()) {
    KineticParams theta;
    theta.fp = field.mbf[k];
    theta.ps = uniform(nuisance, spec.ps_range);
    theta.vp = uniform(nuisance, spec.vp_range);
    theta.ve = uniform(nuisance, spec.ve_range);
    theta.delay = uniform(nuisance, spec.delay_jitter);
    Curve c = simulate_tissue(theta, p.aif);
    if (spec.noise_sigma > 0.0)
      for (double& v : c.values) v += spec.noise_sigma * noise(noise_rng);
    p.tissue.push_back(std::move(c));
    p.truth.push_back(theta);
  }
  return p;
}

SuiteOptions default_suite_options() { return SuiteOptions{}; }

SuiteOptions reduced_suite_options() {
  SuiteOptions o;
  o.patients = 3;
  o.diseased = 3;
  o.width = 24;
  o.height = 24;
  o.base_mbf = {2.2, 2.5};
  o.mbf_variation = 0.3;
  o.defect_radius = {10.0, 14.0};
  o.aif_timescale = {0.03, 0.03};
  o.aif_onset = {0.23, 0.27};
  return o;
}

std::vector<PhantomSpec> suite_specs(std::uint64_t master_seed, const SuiteOptions& opts) {
  require(opts.patients >= 1 && opts.diseased >= 0 && opts.diseased <= opts.patients,
          "suite needs at least one patient and diseased <= patients");
  require(opts.aif_timescale.lo > 0.0 && opts.aif_timescale.lo <= opts.aif_timescale.hi,
          "suite AIF timescale must be a positive interval");
  require(opts.aif_onset.lo >= 0.0 && opts.aif_onset.lo <= opts.aif_onset.hi,
          "suite AIF onset must be a non-negative interval");
  const double scale = opts.width / 64.0;
  std::vector<PhantomSpec> specs;
  for (int i = 0; i < opts.patients; ++i) {
    std::mt19937_64 rng(derive_seed(master_seed, static_cast<std::uint64_t>(i)));
    PhantomSpec s;
    char id[16];
    std::snprintf(id, sizeof id, "P%02d", i + 1);
    s.patient_id = id;
    s.width = opts.width;
    s.height = opts.height;
    s.grid = opts.grid;
    s.noise_sigma = opts.noise_sigma;
    s.mbf_smoothness = 16.0 * scale;
    s.mbf_variation = opts.mbf_variation;
    s.seed = derive_seed(master_seed, static_cast<std::uint64_t>(i), 0x5eedULL);
    s.base_mbf = uniform(rng, opts.base_mbf);
    s.aif.amplitude = uniform(rng, {4.0, 6.0});
    s.aif.timescale = uniform(rng, opts.aif_timescale);
    s.aif.onset = uniform(rng, opts.aif_onset);
    // The last `diseased` patients carry a defect.
    if (i >= opts.patients - opts.diseased) {
      Defect d;
      d.severity = uniform(rng, opts.severity);
      d.radius = uniform(rng, opts.defect_radius) * scale;
      const double angle = uniform(rng, {0.0, 2.0 * std::numbers::pi});
      const double reach = uniform(rng, {0.25, 0.45});
      d.cx = 0.5 * opts.width - 0.5 + reach * opts.width * std::cos(angle);
      d.cy = 0.5 * opts.height - 0.5 + reach * opts.height * std::sin(angle);
      s.defect = d;
    }
    specs.push_back(s);
  }
  return specs;
}

PhantomDataset make_suite(std::uint64_t master_seed, const SuiteOptions& opts, int workers) {
  const auto specs = suite_specs(master_seed, opts);
  PhantomDataset ds;
  ds.patients.resize(specs.size());
  parallel_for(specs.size(), workers,
               [&](std::size_t i) { ds.patients[i] = generate_phantom(specs[i]); });
  return ds;
}

PhantomDataset default_suite(std::uint64_t master_seed, int workers) {
  return make_suite(master_seed, default_suite_options(), workers);
}

}  // namespace mbf
