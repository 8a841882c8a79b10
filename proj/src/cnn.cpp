#include "mbf/cnn.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <numeric>
#include <random>

#include <Eigen/Dense>

#include "mbf/error.hpp"
#include "mbf/parallel.hpp"
#include "mbf/seed.hpp"

namespace mbf {

Tensor::Tensor(std::vector<std::size_t> s) : shape(std::move(s)) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  values.assign(n, 0.0);
}

Tensor::Tensor(std::vector<std::size_t> s, std::vector<double> v)
    : shape(std::move(s)), values(std::move(v)) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  require(n == values.size(), "tensor value count does not match its shape");
}

void Tensor::validate() const {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  require(n == values.size(), "tensor value count does not match its shape");
  for (double v : values)
    if (!std::isfinite(v)) fail(ErrorKind::NonFinite, "tensor holds a non-finite value");
}

// ---------------------------------------------------------------------------
// Samples

Sample build_sample(const Patient& patient, int x, int y) {
  require(patient.masked(x, y), "voxel (" + std::to_string(x) + ", " + std::to_string(y) +
                                    ") of patient " + patient.id + " is not masked");
  const double scale = patient.aif.peak();
  require(scale > 0.0, "patient " + patient.id + " has an all-zero AIF");
  const std::size_t n = patient.grid().n;

  const std::vector<int> slots = patient.slot_lookup();
  auto slot_of = [&](int vx, int vy) {
    if (!patient.masked(vx, vy)) return -1;
    return slots[static_cast<std::size_t>(vy) * patient.width + vx];
  };
  const int centre = slot_of(x, y);

  Sample s;
  s.patient_id = patient.id;
  s.x = x;
  s.y = y;
  s.aif_input = Tensor({1, n});
  for (std::size_t t = 0; t < n; ++t) s.aif_input.values[t] = patient.aif[t] / scale;
  s.tissue_input = Tensor({kNeighbourhood, n});
  int channel = 0;
  for (int dy = -1; dy <= 1; ++dy) {
    for (int dx = -1; dx <= 1; ++dx, ++channel) {
      int slot = slot_of(x + dx, y + dy);
      if (slot < 0) slot = centre;
      const Curve& c = patient.tissue[static_cast<std::size_t>(slot)];
      double* out = s.tissue_input.data() + static_cast<std::size_t>(channel) * n;
      for (std::size_t t = 0; t < n; ++t) out[t] = c[t] / scale;
    }
  }
  return s;
}

std::vector<Sample> build_samples(const Patient& patient, const MbfMap* targets) {
  if (targets)
    require(targets->width == patient.width && targets->height == patient.height,
            "target map shape does not match patient " + patient.id);
  std::vector<Sample> out;
  out.reserve(patient.voxel_count());
  for (std::size_t k : patient.masked_indices()) {
    const int x = static_cast<int>(k % patient.width);
    const int y = static_cast<int>(k / patient.width);
    Sample s = build_sample(patient, x, y);
    if (targets) {
      const double t = targets->at(x, y);
      require(!std::isnan(t), "target map of patient " + patient.id + " lacks voxel (" +
                                  std::to_string(x) + ", " + std::to_string(y) + ")");
      s.target_mbf = t;
    }
    out.push_back(std::move(s));
  }
  return out;
}

namespace {

void shift_channels(const Tensor& in, int shift, Tensor& out) {
  const std::size_t n = in.shape.back();
  const std::size_t channels = in.size() / n;
  out = Tensor(in.shape);
  for (std::size_t c = 0; c < channels; ++c) {
    const double* src = in.data() + c * n;
    double* dst = out.data() + c * n;
    for (std::size_t t = 0; t < n; ++t) {
      const long from = static_cast<long>(t) - shift;
      if (from >= 0 && from < static_cast<long>(n)) dst[t] = src[from];
    }
  }
}

}  // namespace

Sample shift_sample(const Sample& sample, int shift) {
  Sample s;
  s.target_mbf = sample.target_mbf;
  s.patient_id = sample.patient_id;
  s.x = sample.x;
  s.y = sample.y;
  shift_channels(sample.aif_input, shift, s.aif_input);
  shift_channels(sample.tissue_input, shift, s.tissue_input);
  return s;
}

// ---------------------------------------------------------------------------
// Architecture bookkeeping

namespace {

struct ConvLayer {
  std::size_t weight, bias;  // tensor indices
  int in_channels, out_channels, kernel;
  std::size_t length;  // input length == conv output length (same padding)
};

struct DenseLayer {
  std::size_t weight, bias;
  int in, out;
  bool relu;
};

struct Layout {
  std::vector<ConvLayer> aif, tissue;
  std::vector<DenseLayer> dense;  // hidden layers then the output unit
  std::vector<std::string> names;
  std::vector<std::vector<std::size_t>> shapes;
};

std::size_t branch_output(const std::vector<ConvSpec>& specs, int in_channels,
                          std::size_t length, int pool, const std::string& prefix,
                          Layout& layout, std::vector<ConvLayer>& layers) {
  int channels = in_channels;
  for (std::size_t l = 0; l < specs.size(); ++l) {
    const ConvSpec& c = specs[l];
    const std::string name = prefix + ".conv" + std::to_string(l);
    ConvLayer layer{layout.names.size(), layout.names.size() + 1, channels, c.out_channels,
                    c.kernel, length};
    layout.names.push_back(name + ".weight");
    layout.shapes.push_back({static_cast<std::size_t>(c.out_channels),
                             static_cast<std::size_t>(channels),
                             static_cast<std::size_t>(c.kernel)});
    layout.names.push_back(name + ".bias");
    layout.shapes.push_back({static_cast<std::size_t>(c.out_channels)});
    layers.push_back(layer);
    channels = c.out_channels;
    length /= static_cast<std::size_t>(pool);
  }
  return static_cast<std::size_t>(channels) * length;
}

Layout make_layout(const NetworkConfig& cfg) {
  Layout layout;
  const auto n = static_cast<std::size_t>(cfg.input_length);
  std::size_t features =
      branch_output(cfg.aif_branch, 1, n, cfg.pool, "aif", layout, layout.aif);
  features += branch_output(cfg.tissue_branch, kNeighbourhood, n, cfg.pool, "tissue", layout,
                            layout.tissue);
  int in = static_cast<int>(features);
  for (std::size_t l = 0; l <= cfg.dense.size(); ++l) {
    const bool hidden = l < cfg.dense.size();
    const int out = hidden ? cfg.dense[l] : 1;
    const std::string name = hidden ? "dense" + std::to_string(l) : "output";
    layout.dense.push_back({layout.names.size(), layout.names.size() + 1, in, out, hidden});
    layout.names.push_back(name + ".weight");
    layout.shapes.push_back({static_cast<std::size_t>(out), static_cast<std::size_t>(in)});
    layout.names.push_back(name + ".bias");
    layout.shapes.push_back({static_cast<std::size_t>(out)});
    in = out;
  }
  return layout;
}

// One layout per distinct config; rebuilt cheaply when configs differ.
const Layout& layout_for(const NetworkConfig& cfg) {
  thread_local NetworkConfig cached_cfg;
  thread_local Layout cached;
  thread_local bool ready = false;
  if (!ready || !(cached_cfg == cfg)) {
    cached = make_layout(cfg);
    cached_cfg = cfg;
    ready = true;
  }
  return cached;
}

}  // namespace

std::size_t NetworkConfig::feature_length() const {
  std::size_t total = 0;
  auto branch = [&](const std::vector<ConvSpec>& specs, int in_channels) {
    std::size_t length = static_cast<std::size_t>(input_length);
    int channels = in_channels;
    for (const ConvSpec& c : specs) {
      channels = c.out_channels;
      length /= static_cast<std::size_t>(pool);
    }
    return static_cast<std::size_t>(channels) * length;
  };
  total += branch(aif_branch, 1);
  total += branch(tissue_branch, kNeighbourhood);
  return total;
}

void NetworkConfig::validate() const {
  require(input_length >= 1, "network input length must be >= 1");
  require(pool >= 2, "pool width must be >= 2");
  for (const auto* branch : {&aif_branch, &tissue_branch}) {
    require(!branch->empty(), "each branch needs at least one conv layer");
    std::size_t length = static_cast<std::size_t>(input_length);
    for (const ConvSpec& c : *branch) {
      require(c.kernel >= 1 && c.kernel % 2 == 1, "conv kernel width must be odd");
      require(c.out_channels >= 1, "conv layers need at least one output channel");
      length /= static_cast<std::size_t>(pool);
      require(length >= 1, "input too short for the number of pooling layers");
    }
  }
  for (int w : dense) require(w >= 1, "dense layer widths must be >= 1");
}

const Tensor& NetworkWeights::get(const std::string& name) const {
  for (std::size_t i = 0; i < names.size(); ++i)
    if (names[i] == name) return tensors[i];
  fail(ErrorKind::InvalidArgument, "no weight tensor named " + name);
}

Tensor& NetworkWeights::get(const std::string& name) {
  return const_cast<Tensor&>(static_cast<const NetworkWeights&>(*this).get(name));
}

std::size_t NetworkWeights::parameter_count() const {
  std::size_t n = 0;
  for (const Tensor& t : tensors) n += t.size();
  return n;
}

void NetworkWeights::validate() const {
  config.validate();
  const Layout layout = make_layout(config);
  require(names == layout.names && tensors.size() == layout.shapes.size(),
          "weight tensors do not match the network configuration");
  for (std::size_t i = 0; i < tensors.size(); ++i) {
    require(tensors[i].shape == layout.shapes[i],
            "tensor " + names[i] + " has the wrong shape for its layer");
    tensors[i].validate();
  }
}

NetworkWeights zero_weights(const NetworkConfig& config) {
  config.validate();
  const Layout layout = make_layout(config);
  NetworkWeights w;
  w.config = config;
  w.names = layout.names;
  for (const auto& shape : layout.shapes) w.tensors.emplace_back(shape);
  return w;
}

NetworkWeights init_weights(const NetworkConfig& config) {
  NetworkWeights w = zero_weights(config);
  std::mt19937_64 rng(config.seed);
  for (std::size_t i = 0; i < w.tensors.size(); ++i) {
    Tensor& t = w.tensors[i];
    if (t.shape.size() < 2) continue;  // biases stay zero
    std::size_t fan_in = 1;
    for (std::size_t d = 1; d < t.shape.size(); ++d) fan_in *= t.shape[d];
    const double limit = std::sqrt(6.0 / static_cast<double>(fan_in));
    std::uniform_real_distribution<double> dist(-limit, limit);
    for (double& v : t.values) v = dist(rng);
  }
  return w;
}

// ---------------------------------------------------------------------------
// Forward / backward

namespace {

// Eigen peels vectorized loops up to the first aligned address, so products
// are only bit-reproducible on storage it allocated itself. Operands are
// copied into such matrices first.
using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// Fixed summation order: four interleaved partial sums, then the tail.
double dot(const double* a, const double* b, std::size_t n) {
  double s[4] = {0.0, 0.0, 0.0, 0.0};
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4)
    for (std::size_t l = 0; l < 4; ++l) s[l] += a[i + l] * b[i + l];
  double r = (s[0] + s[1]) + (s[2] + s[3]);
  for (; i < n; ++i) r += a[i] * b[i];
  return r;
}

// Rows (ci, k) hold input channel ci shifted by k - pad; entries that fall
// into the padding stay zero.
void im2col(const ConvLayer& layer, const double* in, RowMatrix& cols) {
  const auto len = static_cast<long>(layer.length);
  const int pad = layer.kernel / 2;
  cols.setZero(static_cast<long>(layer.in_channels) * layer.kernel, len);
  for (int ci = 0; ci < layer.in_channels; ++ci) {
    const double* x = in + ci * len;
    for (int k = 0; k < layer.kernel; ++k) {
      const long off = k - pad;
      const long lo = off < 0 ? -off : 0;
      const long hi = off > 0 ? len - off : len;
      double* row = cols.data() + (static_cast<long>(ci) * layer.kernel + k) * len;
      std::copy(x + lo + off, x + hi + off, row + lo);
    }
  }
}

void conv_forward(const ConvLayer& layer, const double* weight, const double* bias,
                  const double* in, double* out) {
  thread_local RowMatrix cols, W, O;
  im2col(layer, in, cols);
  W = Eigen::Map<const RowMatrix>(weight, layer.out_channels, cols.rows());
  O.noalias() = W * cols;
  const auto len = static_cast<std::size_t>(cols.cols());
  for (int co = 0; co < layer.out_channels; ++co) {
    const double* o = O.data() + co * len;
    double* dst = out + co * len;
    for (std::size_t t = 0; t < len; ++t) dst[t] = o[t] + bias[co];
  }
}

// ReLU then max-pool; ties resolve to the lowest index.
void relu_pool(std::vector<double>& act, int channels, std::size_t len, int pool,
               std::vector<double>& pooled, std::vector<std::size_t>& argmax) {
  for (double& v : act) v = v > 0.0 ? v : 0.0;
  const std::size_t out_len = len / static_cast<std::size_t>(pool);
  pooled.resize(static_cast<std::size_t>(channels) * out_len);
  argmax.resize(pooled.size());
  for (int c = 0; c < channels; ++c) {
    const std::size_t base = static_cast<std::size_t>(c) * len;
    for (std::size_t j = 0; j < out_len; ++j) {
      std::size_t best = base + j * static_cast<std::size_t>(pool);
      for (int q = 1; q < pool; ++q) {
        const std::size_t idx = base + j * static_cast<std::size_t>(pool) + q;
        if (act[idx] > act[best]) best = idx;
      }
      pooled[static_cast<std::size_t>(c) * out_len + j] = act[best];
      argmax[static_cast<std::size_t>(c) * out_len + j] = best;
    }
  }
}

void branch_forward(const std::vector<ConvLayer>& layers, const NetworkWeights& w, int pool,
                    const Tensor& input, BranchCache& cache) {
  const std::size_t depth = layers.size();
  cache.inputs.resize(depth);
  cache.activations.resize(depth);
  cache.argmax.resize(depth);
  cache.inputs[0].assign(input.values.begin(), input.values.end());
  for (std::size_t l = 0; l < depth; ++l) {
    const ConvLayer& layer = layers[l];
    std::vector<double>& act = cache.activations[l];
    act.resize(static_cast<std::size_t>(layer.out_channels) * layer.length);
    conv_forward(layer, w.tensors[layer.weight].data(), w.tensors[layer.bias].data(),
                 cache.inputs[l].data(), act.data());
    std::vector<double>& pooled = l + 1 < depth ? cache.inputs[l + 1] : cache.output;
    relu_pool(act, layer.out_channels, layer.length, pool, pooled, cache.argmax[l]);
  }
}

void check_input(const Tensor& t, std::size_t channels, std::size_t length, const char* layer) {
  if (t.shape.size() != 2 || t.shape[0] != channels || t.shape[1] != length)
    fail(ErrorKind::InvalidArgument,
         std::string("layer ") + layer + ": input shape does not match (" +
             std::to_string(channels) + ", " + std::to_string(length) + ")");
}

}  // namespace

double forward_sample(const NetworkWeights& weights, const Sample& sample, SampleCache* cache) {
  thread_local SampleCache scratch;
  SampleCache& c = cache ? *cache : scratch;
  const NetworkConfig& cfg = weights.config;
  const Layout& layout = layout_for(cfg);
  require(weights.tensors.size() == layout.names.size(),
          "weights do not match their network configuration");
  const auto n = static_cast<std::size_t>(cfg.input_length);
  check_input(sample.aif_input, 1, n, "aif.conv0");
  check_input(sample.tissue_input, kNeighbourhood, n, "tissue.conv0");

  branch_forward(layout.aif, weights, cfg.pool, sample.aif_input, c.aif);
  branch_forward(layout.tissue, weights, cfg.pool, sample.tissue_input, c.tissue);

  c.dense_inputs.resize(layout.dense.size());
  std::vector<double>& features = c.dense_inputs[0];
  features.assign(c.aif.output.begin(), c.aif.output.end());
  features.insert(features.end(), c.tissue.output.begin(), c.tissue.output.end());

  double prediction = 0.0;
  for (std::size_t l = 0; l < layout.dense.size(); ++l) {
    const DenseLayer& d = layout.dense[l];
    const double* W = weights.tensors[d.weight].data();
    const double* b = weights.tensors[d.bias].data();
    const std::vector<double>& x = c.dense_inputs[l];
    if (!d.relu) {
      prediction = b[0] + dot(x.data(), W, x.size());
      break;
    }
    std::vector<double>& y = c.dense_inputs[l + 1];
    y.resize(static_cast<std::size_t>(d.out));
    for (int o = 0; o < d.out; ++o) {
      const double v = b[o] + dot(x.data(), W + static_cast<std::size_t>(o) * d.in, x.size());
      y[static_cast<std::size_t>(o)] = v > 0.0 ? v : 0.0;
    }
  }
  c.prediction = prediction;
  return prediction;
}

ForwardResult forward(const NetworkWeights& weights, const std::vector<Sample>& batch) {
  ForwardResult r;
  r.caches.resize(batch.size());
  r.predictions.resize(batch.size());
  for (std::size_t i = 0; i < batch.size(); ++i)
    r.predictions[i] = forward_sample(weights, batch[i], &r.caches[i]);
  return r;
}

namespace {

void branch_backward(const std::vector<ConvLayer>& layers, const NetworkWeights& w,
                     const BranchCache& cache, const double* doutput,
                     std::vector<Tensor>& grads) {
  thread_local std::vector<double> dpooled, dact, dinput;
  const std::size_t depth = layers.size();
  const std::size_t out_size = cache.output.size();
  dpooled.assign(doutput, doutput + out_size);

  for (std::size_t l = depth; l-- > 0;) {
    const ConvLayer& layer = layers[l];
    const std::size_t len = layer.length;
    const std::vector<double>& act = cache.activations[l];
    const std::vector<std::size_t>& argmax = cache.argmax[l];
    dact.assign(act.size(), 0.0);
    for (std::size_t i = 0; i < argmax.size(); ++i) dact[argmax[i]] += dpooled[i];
    for (std::size_t i = 0; i < act.size(); ++i)
      if (!(act[i] > 0.0)) dact[i] = 0.0;

    thread_local RowMatrix cols, dcols, G, W, dW;
    im2col(layer, cache.inputs[l].data(), cols);
    const long rows = cols.rows();
    G = Eigen::Map<const RowMatrix>(dact.data(), layer.out_channels, static_cast<long>(len));
    dW.noalias() = G * cols.transpose();
    double* gw = grads[layer.weight].data();
    for (long i = 0; i < dW.size(); ++i) gw[i] += dW.data()[i];
    double* gb = grads[layer.bias].data();
    for (int co = 0; co < layer.out_channels; ++co) {
      const double* g = dact.data() + static_cast<std::size_t>(co) * len;
      double sum = 0.0;
      for (std::size_t t = 0; t < len; ++t) sum += g[t];
      gb[co] += sum;
    }
    const bool need_input = l > 0;
    if (need_input) {
      W = Eigen::Map<const RowMatrix>(w.tensors[layer.weight].data(), layer.out_channels, rows);
      dcols.noalias() = W.transpose() * G;
      // col2im
      const int pad = layer.kernel / 2;
      dinput.assign(static_cast<std::size_t>(layer.in_channels) * len, 0.0);
      for (int ci = 0; ci < layer.in_channels; ++ci)
        for (int k = 0; k < layer.kernel; ++k) {
          const long off = k - pad;
          const long lo = off < 0 ? -off : 0;
          const long hi = off > 0 ? static_cast<long>(len) - off : static_cast<long>(len);
          const double* row = dcols.data() + (static_cast<long>(ci) * layer.kernel + k) * len;
          double* ds = dinput.data() + static_cast<long>(ci) * len + off;
          for (long t = lo; t < hi; ++t) ds[t] += row[t];
        }
    }
    if (need_input) dpooled.swap(dinput);
  }
}

}  // namespace

void backward_sample(const NetworkWeights& weights, const SampleCache& cache,
                     double output_grad, std::vector<Tensor>& grads) {
  const Layout& layout = layout_for(weights.config);
  require(grads.size() == weights.tensors.size(), "gradient buffers do not match the weights");
  thread_local std::vector<double> dx, dprev;

  // Output unit.
  const DenseLayer& out = layout.dense.back();
  {
    const std::vector<double>& x = cache.dense_inputs.back();
    const double* W = weights.tensors[out.weight].data();
    double* dW = grads[out.weight].data();
    grads[out.bias].values[0] += output_grad;
    dx.resize(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
      dW[i] += output_grad * x[i];
      dx[i] = output_grad * W[i];
    }
  }
  // Hidden layers, last to first; dx holds d(loss)/d(output of layer l).
  for (std::size_t l = layout.dense.size() - 1; l-- > 0;) {
    const DenseLayer& d = layout.dense[l];
    const std::vector<double>& x = cache.dense_inputs[l];
    const std::vector<double>& y = cache.dense_inputs[l + 1];
    const double* W = weights.tensors[d.weight].data();
    double* dW = grads[d.weight].data();
    double* db = grads[d.bias].data();
    dprev.assign(x.size(), 0.0);
    for (int o = 0; o < d.out; ++o) {
      const double g = y[static_cast<std::size_t>(o)] > 0.0 ? dx[static_cast<std::size_t>(o)] : 0.0;
      if (g == 0.0) continue;
      db[o] += g;
      double* dWo = dW + static_cast<std::size_t>(o) * d.in;
      const double* Wo = W + static_cast<std::size_t>(o) * d.in;
      for (std::size_t i = 0; i < x.size(); ++i) {
        dWo[i] += g * x[i];
        dprev[i] += g * Wo[i];
      }
    }
    dx.swap(dprev);
  }
  // dx is now the gradient of the concatenated features.
  const std::size_t aif_len = cache.aif.output.size();
  branch_backward(layout.aif, weights, cache.aif, dx.data(), grads);
  branch_backward(layout.tissue, weights, cache.tissue, dx.data() + aif_len, grads);
}

namespace {

std::vector<Tensor> zeros_like(const NetworkWeights& weights) {
  std::vector<Tensor> g;
  g.reserve(weights.tensors.size());
  for (const Tensor& t : weights.tensors) g.emplace_back(t.shape);
  return g;
}

double target_of(const Sample& s) {
  require(s.target_mbf.has_value(), "sample (" + s.patient_id + ", " + std::to_string(s.x) +
                                        ", " + std::to_string(s.y) + ") has no target");
  return *s.target_mbf;
}

}  // namespace

std::vector<Tensor> backward(const NetworkWeights& weights, const std::vector<Sample>& batch,
                             const ForwardResult& cache) {
  require(cache.caches.size() == batch.size(), "forward cache does not match the batch");
  std::vector<Tensor> grads = zeros_like(weights);
  const double scale = 2.0 / static_cast<double>(batch.size());
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const double og = scale * (cache.predictions[i] - target_of(batch[i]));
    backward_sample(weights, cache.caches[i], og, grads);
  }
  return grads;
}

double mse_loss(const std::vector<double>& predictions, const std::vector<Sample>& batch) {
  require(predictions.size() == batch.size() && !batch.empty(),
          "prediction count does not match the batch");
  double s = 0.0;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const double e = predictions[i] - target_of(batch[i]);
    s += e * e;
  }
  return s / static_cast<double>(batch.size());
}

// ---------------------------------------------------------------------------
// Optimisation

void TrainConfig::validate() const {
  require(learning_rate > 0.0, "learning_rate must be > 0");
  require(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0,
          "Adam betas must lie in [0, 1)");
  require(epsilon > 0.0, "Adam epsilon must be > 0");
  require(batch_size >= 1, "batch_size must be >= 1");
  require(max_epochs >= 1, "max_epochs must be >= 1");
  require(patience >= 1, "patience must be >= 1");
  require(delay_augment >= 0, "delay_augment must be >= 0");
}

AdamState AdamState::zeros_like(const NetworkWeights& weights) {
  AdamState s;
  s.m = mbf::zeros_like(weights);
  s.v = mbf::zeros_like(weights);
  return s;
}

void adam_step(NetworkWeights& weights, const std::vector<Tensor>& grads, AdamState& state,
               long t, const TrainConfig& cfg) {
  require(t >= 1, "Adam step count must be >= 1");
  require(grads.size() == weights.tensors.size() && state.m.size() == grads.size() &&
              state.v.size() == grads.size(),
          "Adam state does not match the weights");
  const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(t));
  const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(t));
  for (std::size_t i = 0; i < grads.size(); ++i) {
    double* w = weights.tensors[i].data();
    double* m = state.m[i].data();
    double* v = state.v[i].data();
    const double* g = grads[i].data();
    for (std::size_t k = 0; k < grads[i].size(); ++k) {
      m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * g[k];
      v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * g[k] * g[k];
      const double mhat = m[k] / c1;
      const double vhat = v[k] / c2;
      w[k] -= cfg.learning_rate * mhat / (std::sqrt(vhat) + cfg.epsilon);
    }
  }
}

std::vector<double> predict(const NetworkWeights& weights, const std::vector<Sample>& samples,
                            int workers) {
  std::vector<double> out(samples.size());
  parallel_for(samples.size(), workers,
               [&](std::size_t i) { out[i] = forward_sample(weights, samples[i]); });
  return out;
}

namespace {

// Per-sample gradients are summed in fixed chunks so the reduced gradient is
// identical for any worker count.
constexpr std::size_t kChunk = 16;

}  // namespace

TrainResult train(const std::vector<Sample>& train_set, const std::vector<Sample>& val_set,
                  const NetworkConfig& net, const TrainConfig& cfg) {
  net.validate();
  cfg.validate();
  require(!train_set.empty() && !val_set.empty(), "training and validation sets must be nonempty");
  for (const auto* set : {&train_set, &val_set})
    for (const Sample& s : *set) target_of(s);

  TrainResult result;
  NetworkWeights weights = init_weights(net);
  AdamState adam = AdamState::zeros_like(weights);
  result.weights = weights;
  double best_val = std::numeric_limits<double>::infinity();
  long step = 0;

  std::vector<std::size_t> order(train_set.size());
  std::vector<std::vector<Tensor>> chunk_grads;

  for (int epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    std::mt19937_64 rng(derive_seed(cfg.seed, static_cast<std::uint64_t>(epoch)));
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    std::uniform_int_distribution<int> shift_dist(-cfg.delay_augment, cfg.delay_augment);

    double epoch_sse = 0.0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
      const std::size_t count = end - start;
      std::vector<int> shifts(count, 0);
      if (cfg.delay_augment > 0)
        for (int& s : shifts) s = shift_dist(rng);

      const std::size_t chunks = (count + kChunk - 1) / kChunk;
      if (chunk_grads.size() < chunks) chunk_grads.resize(chunks);
      std::vector<double> chunk_sse(chunks, 0.0);
      const double scale = 2.0 / static_cast<double>(count);
      parallel_for(chunks, cfg.workers, [&](std::size_t c) {
        std::vector<Tensor>& g = chunk_grads[c];
        if (g.empty()) {
          g = zeros_like(weights);
        } else {
          for (Tensor& t : g) std::fill(t.values.begin(), t.values.end(), 0.0);
        }
        thread_local SampleCache cache;
        const std::size_t lo = c * kChunk, hi = std::min(count, lo + kChunk);
        for (std::size_t i = lo; i < hi; ++i) {
          const Sample& base = train_set[order[start + i]];
          double pred;
          if (shifts[i] != 0) {
            pred = forward_sample(weights, shift_sample(base, shifts[i]), &cache);
          } else {
            pred = forward_sample(weights, base, &cache);
          }
          const double err = pred - *base.target_mbf;
          chunk_sse[c] += err * err;
          backward_sample(weights, cache, scale * err, g);
        }
      });
      std::vector<Tensor>& total = chunk_grads[0];
      for (std::size_t c = 1; c < chunks; ++c)
        for (std::size_t t = 0; t < total.size(); ++t)
          for (std::size_t k = 0; k < total[t].size(); ++k)
            total[t].values[k] += chunk_grads[c][t].values[k];
      for (double s : chunk_sse) epoch_sse += s;
      adam_step(weights, total, adam, ++step, cfg);
    }

    const double train_mse = epoch_sse / static_cast<double>(train_set.size());
    const double val_mse = mse_loss(predict(weights, val_set, cfg.workers), val_set);
    if (!std::isfinite(train_mse) || !std::isfinite(val_mse))
      fail(ErrorKind::Diverged, "training diverged at epoch " + std::to_string(epoch));
    result.history.push_back({epoch, train_mse, val_mse});
    if (cfg.verbose)
      std::fprintf(stderr, "epoch %d train %.5f val %.5f\n", epoch, train_mse, val_mse);

    if (val_mse < best_val) {
      best_val = val_mse;
      result.best_epoch = epoch;
      result.weights = weights;
    } else if (epoch - result.best_epoch >= cfg.patience) {
      break;
    }
  }
  return result;
}

MbfMap predict_map(const NetworkWeights& weights, const Patient& patient, int workers) {
  MbfMap map(patient.id, patient.width, patient.height);
  const std::vector<Sample> samples = build_samples(patient);
  const std::vector<double> preds = predict(weights, samples, workers);
  for (std::size_t i = 0; i < samples.size(); ++i)
    map.at(samples[i].x, samples[i].y) = std::max(preds[i], 0.0);
  return map;
}

}  // namespace mbf
