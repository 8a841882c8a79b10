#pragma once

// Cross-validated training of the surrogate and its comparison with MCMC.

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mbf/cnn.hpp"
#include "mbf/maps.hpp"
#include "mbf/mcmc.hpp"
#include "mbf/nlls.hpp"
#include "mbf/phantom.hpp"

namespace mbf {

struct SplitRecord {
  std::vector<std::string> train;
  std::vector<std::string> val;
  std::vector<std::string> test;

  friend bool operator==(const SplitRecord&, const SplitRecord&) = default;
};

using SplitPlan = std::vector<SplitRecord>;

struct SplitShape {
  int splits = 10;
  int train = 5;
  int val = 2;
  int test = 2;

  int patients() const { return train + val + test; }
};

// Random partitions of `ids`, redrawn until every id lands in some test set.
// The default shape needs exactly 9 ids.
SplitPlan make_splits(const std::vector<std::string>& ids, std::uint64_t seed);
SplitPlan make_splits(const std::vector<std::string>& ids, std::uint64_t seed,
                      const SplitShape& shape, long max_attempts = 100000);

// Throws unless every record partitions `ids` with the given sizes and the
// test sets jointly cover all ids.
void validate_plan(const SplitPlan& plan, const std::vector<std::string>& ids,
                   const SplitShape& shape);

struct MapMetrics {
  double mse = 0.0;        // (mL/min/mL)^2
  double rel_error = 0.0;  // mean |pred - target| / median(target)
  Quartiles pooled;        // of the predictions
  std::size_t voxels = 0;
};

// Metrics over all voxels present in the targets, pooled across map pairs.
// Prediction and target must agree on which voxels are present.
MapMetrics evaluate_maps(const MbfMap& pred, const MbfMap& target);
MapMetrics evaluate_maps(std::span<const MbfMap> preds, std::span<const MbfMap> targets);

struct SplitResult {
  int index = 0;
  SplitRecord split;
  MapMetrics metrics;
  int best_epoch = 0;
  int epochs = 0;
};

struct Timing {
  std::string patient_id;
  std::size_t voxels = 0;
  bool same_voxels = true;  // both paths saw the identical voxel set
  int workers = 1;
  double mcmc_seconds = 0.0;
  double surrogate_seconds = 0.0;

  double mcmc_per_voxel() const { return mcmc_seconds / static_cast<double>(voxels); }
  double surrogate_per_voxel() const { return surrogate_seconds / static_cast<double>(voxels); }
  double speedup() const { return mcmc_seconds / surrogate_seconds; }
};

struct EvalReport {
  std::vector<SplitResult> splits;
  double mse_mean = 0.0;
  double mse_std = 0.0;  // sample standard deviation over splits
  double rel_error_mean = 0.0;
  std::optional<Timing> timing;

  // Aggregate MSE as "mean (std)" with three decimals.
  std::string summary() const;
};

// Fills the aggregate fields from the per-split entries.
void aggregate(EvalReport& report);

struct CrossvalOutput {
  EvalReport report;
  std::vector<NetworkWeights> weights;             // per split
  std::vector<std::vector<MbfMap>> predictions;    // per split, test-set order
};

// Each split trains with seeds derived from cfg.seed, net.seed and the split's
// membership, so identical records train identically. Targets are matched to
// patients by id.
CrossvalOutput run_crossval(const PhantomDataset& dataset, const std::vector<MbfMap>& targets,
                            const SplitPlan& plan, const NetworkConfig& net,
                            const TrainConfig& cfg);

// Times MCMC labelling and surrogate prediction of every masked voxel of
// one patient, both with `workers` threads.
Timing benchmark(const Patient& patient, const NetworkWeights& weights, const Prior& prior,
                 const McmcConfig& cfg, int workers = 1);

// NLLS flow estimate per masked voxel.
MbfMap fit_patient(const Patient& patient, const FitConfig& cfg, int workers = 1);
std::vector<MbfMap> fit_dataset(const PhantomDataset& dataset, const FitConfig& cfg,
                                int workers = 1);

// Ground-truth flow map of a phantom.
MbfMap truth_map(const Patient& patient);

}  // namespace mbf
