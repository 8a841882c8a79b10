#pragma once

// Dual-branch 1D convolutional regressor mapping (AIF, 3x3 neighbourhood of
// tissue curves) to myocardial blood flow.
//
// Each branch is a stack of [conv (same padding) -> ReLU -> max-pool]
// blocks. The flattened branch features are concatenated (AIF branch first)
// and fed to fully connected ReLU layers and a final linear unit.

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "mbf/maps.hpp"
#include "mbf/phantom.hpp"

namespace mbf {

struct Tensor {
  std::vector<std::size_t> shape;
  std::vector<double> values;  // row-major

  Tensor() = default;
  explicit Tensor(std::vector<std::size_t> s);
  Tensor(std::vector<std::size_t> s, std::vector<double> v);

  std::size_t size() const { return values.size(); }
  double* data() { return values.data(); }
  const double* data() const { return values.data(); }
  void validate() const;

  friend bool operator==(const Tensor&, const Tensor&) = default;
};

inline constexpr int kNeighbourhood = 9;

struct Sample {
  Tensor aif_input;     // (1, T)
  Tensor tissue_input;  // (9, T)
  std::optional<double> target_mbf;
  std::string patient_id;
  int x = 0;
  int y = 0;

  std::size_t length() const { return aif_input.shape.empty() ? 0 : aif_input.shape.back(); }
};

// Builds the network input for voxel (x, y). Neighbours outside the mask or
// grid are replaced by the centre curve; all curves are divided by the
// patient's AIF peak.
Sample build_sample(const Patient& patient, int x, int y);
// Samples for every masked voxel in row-major order; targets taken from
// `targets` when given.
std::vector<Sample> build_samples(const Patient& patient, const MbfMap* targets = nullptr);

// Joint shift of both inputs by `shift` samples (positive = later), zero fill.
Sample shift_sample(const Sample& sample, int shift);

struct ConvSpec {
  int out_channels = 16;
  int kernel = 5;
  friend bool operator==(const ConvSpec&, const ConvSpec&) = default;
};

struct NetworkConfig {
  int input_length = 240;
  std::vector<ConvSpec> aif_branch{{16, 5}, {32, 5}};
  std::vector<ConvSpec> tissue_branch{{16, 5}, {32, 5}};
  int pool = 2;
  std::vector<int> dense{64, 32};
  std::uint64_t seed = 1;

  // Length of the flattened, concatenated branch features.
  std::size_t feature_length() const;
  void validate() const;
  friend bool operator==(const NetworkConfig&, const NetworkConfig&) = default;
};

struct NetworkWeights {
  NetworkConfig config;
  std::vector<std::string> names;
  std::vector<Tensor> tensors;

  const Tensor& get(const std::string& name) const;
  Tensor& get(const std::string& name);
  std::size_t parameter_count() const;
  void validate() const;  // shapes consistent with config, values finite
  friend bool operator==(const NetworkWeights&, const NetworkWeights&) = default;
};

// He-uniform weights from config.seed, zero biases.
NetworkWeights init_weights(const NetworkConfig& config);
// Weights of the right shapes, all zero.
NetworkWeights zero_weights(const NetworkConfig& config);

// Activations kept from a forward pass for backpropagation.
struct BranchCache {
  std::vector<std::vector<double>> inputs;      // input of each conv layer
  std::vector<std::vector<double>> activations; // post-ReLU, pre-pool
  std::vector<std::vector<std::size_t>> argmax; // pooled -> source position
  std::vector<double> output;                   // last pooled map, flattened
};

struct SampleCache {
  BranchCache aif;
  BranchCache tissue;
  std::vector<std::vector<double>> dense_inputs;  // input of each dense layer
  double prediction = 0.0;
};

struct ForwardResult {
  std::vector<double> predictions;
  std::vector<SampleCache> caches;
};

double forward_sample(const NetworkWeights& weights, const Sample& sample,
                      SampleCache* cache = nullptr);
ForwardResult forward(const NetworkWeights& weights, const std::vector<Sample>& batch);

// Accumulates d(loss)/d(weights) for one sample into `grads`, given
// d(loss)/d(prediction).
void backward_sample(const NetworkWeights& weights, const SampleCache& cache,
                     double output_grad, std::vector<Tensor>& grads);

// Exact gradients of the batch mean squared error mean((pred - target)^2).
std::vector<Tensor> backward(const NetworkWeights& weights, const std::vector<Sample>& batch,
                             const ForwardResult& cache);

double mse_loss(const std::vector<double>& predictions, const std::vector<Sample>& batch);

struct TrainConfig {
  double learning_rate = 0.0005;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  int batch_size = 256;
  int max_epochs = 500;
  int patience = 40;
  int delay_augment = 3;  // +/- samples
  std::uint64_t seed = 1;
  int workers = 1;
  bool verbose = false;

  void validate() const;
};

struct AdamState {
  std::vector<Tensor> m;
  std::vector<Tensor> v;

  static AdamState zeros_like(const NetworkWeights& weights);
};

// One Adam update with bias correction; t is the 1-based step count.
void adam_step(NetworkWeights& weights, const std::vector<Tensor>& grads, AdamState& state,
               long t, const TrainConfig& cfg);

struct EpochRecord {
  int epoch = 0;  // 1-based
  double train_mse = 0.0;
  double val_mse = 0.0;
};

struct TrainResult {
  NetworkWeights weights;  // best validation epoch
  std::vector<EpochRecord> history;
  int best_epoch = 0;
};

TrainResult train(const std::vector<Sample>& train_set, const std::vector<Sample>& val_set,
                  const NetworkConfig& net, const TrainConfig& cfg);

// Predictions for a sample set without caching activations.
std::vector<double> predict(const NetworkWeights& weights, const std::vector<Sample>& samples,
                            int workers = 1);

// Flow map for every masked voxel; negative predictions are clamped to 0.
MbfMap predict_map(const NetworkWeights& weights, const Patient& patient, int workers = 1);

}  // namespace mbf
