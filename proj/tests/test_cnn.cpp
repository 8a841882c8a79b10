#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "mbf/cnn.hpp"
#include "mbf/error.hpp"
#include "mbf/pipeline.hpp"
#include "support.hpp"

using namespace mbf;

namespace {

using mbf::testing::random_sample;
using mbf::testing::random_weights;
using mbf::testing::small_config;

// Direct nested-loop forward pass, written independently of the library.
double naive_forward(const NetworkWeights& w, const Sample& s) {
  const NetworkConfig& cfg = w.config;
  auto branch = [&](const std::string& prefix, const std::vector<ConvSpec>& specs,
                    std::vector<std::vector<double>> x) {
    for (std::size_t l = 0; l < specs.size(); ++l) {
      const Tensor& k = w.get(prefix + ".conv" + std::to_string(l) + ".weight");
      const Tensor& b = w.get(prefix + ".conv" + std::to_string(l) + ".bias");
      const int co_n = static_cast<int>(k.shape[0]), ci_n = static_cast<int>(k.shape[1]),
                kw = static_cast<int>(k.shape[2]);
      const int len = static_cast<int>(x[0].size());
      std::vector<std::vector<double>> y(co_n, std::vector<double>(len));
      for (int co = 0; co < co_n; ++co)
        for (int t = 0; t < len; ++t) {
          double acc = b.values[co];
          for (int ci = 0; ci < ci_n; ++ci)
            for (int j = 0; j < kw; ++j) {
              const int src = t + j - kw / 2;
              if (src >= 0 && src < len)
                acc += k.values[(co * ci_n + ci) * kw + j] * x[ci][src];
            }
          y[co][t] = std::max(acc, 0.0);
        }
      std::vector<std::vector<double>> pooled(co_n);
      for (int co = 0; co < co_n; ++co)
        for (int t = 0; t + cfg.pool <= len; t += cfg.pool) {
          double m = y[co][t];
          for (int q = 1; q < cfg.pool; ++q) m = std::max(m, y[co][t + q]);
          pooled[co].push_back(m);
        }
      x = pooled;
    }
    std::vector<double> flat;
    for (auto& row : x) flat.insert(flat.end(), row.begin(), row.end());
    return flat;
  };
  auto rows = [](const Tensor& t) {
    std::vector<std::vector<double>> r(t.shape[0]);
    for (std::size_t c = 0; c < t.shape[0]; ++c)
      r[c].assign(t.values.begin() + c * t.shape[1], t.values.begin() + (c + 1) * t.shape[1]);
    return r;
  };
  std::vector<double> h = branch("aif", cfg.aif_branch, rows(s.aif_input));
  const std::vector<double> tb = branch("tissue", cfg.tissue_branch, rows(s.tissue_input));
  h.insert(h.end(), tb.begin(), tb.end());
  for (std::size_t l = 0; l <= cfg.dense.size(); ++l) {
    const bool hidden = l < cfg.dense.size();
    const std::string name = hidden ? "dense" + std::to_string(l) : "output";
    const Tensor& W = w.get(name + ".weight");
    const Tensor& b = w.get(name + ".bias");
    std::vector<double> y(W.shape[0]);
    for (std::size_t o = 0; o < W.shape[0]; ++o) {
      double acc = b.values[o];
      for (std::size_t i = 0; i < W.shape[1]; ++i) acc += W.values[o * W.shape[1] + i] * h[i];
      y[o] = hidden ? std::max(acc, 0.0) : acc;
    }
    h = y;
  }
  return h[0];
}

Patient small_patient(int w = 5, int h = 4, std::uint64_t seed = 3) {
  PhantomSpec s;
  s.width = w;
  s.height = h;
  s.seed = seed;
  s.grid = TimeGrid{0.0, 1.0 / 60.0, 32};
  s.aif.onset = 0.05;
  s.delay_jitter = {0.0, 0.02};
  return generate_phantom(s);
}

}  // namespace

TEST(Tensor, ShapeInvariant) {
  EXPECT_EQ(Tensor({2, 3}).size(), 6u);
  EXPECT_THROW(Tensor({2, 3}, std::vector<double>(5)), Error);
  Tensor t({2});
  t.values[1] = NAN;
  EXPECT_THROW(t.validate(), Error);
}

TEST(NetworkConfig, Validation) {
  NetworkConfig c;
  EXPECT_NO_THROW(c.validate());
  c.aif_branch[0].kernel = 4;
  EXPECT_THROW(c.validate(), Error);
  c = NetworkConfig{};
  c.pool = 1;
  EXPECT_THROW(c.validate(), Error);
  c = NetworkConfig{};
  c.input_length = 3;
  EXPECT_THROW(c.validate(), Error);
  // 240 -> 120 -> 60 per branch, 32 channels each
  EXPECT_EQ(NetworkConfig{}.feature_length(), 2u * 32u * 60u);
}

TEST(Weights, InitShapesAndNames) {
  const NetworkWeights w = init_weights(NetworkConfig{});
  EXPECT_NO_THROW(w.validate());
  EXPECT_EQ(w.get("aif.conv0.weight").shape, (std::vector<std::size_t>{16, 1, 5}));
  EXPECT_EQ(w.get("tissue.conv0.weight").shape, (std::vector<std::size_t>{16, 9, 5}));
  EXPECT_EQ(w.get("tissue.conv1.weight").shape, (std::vector<std::size_t>{32, 16, 5}));
  EXPECT_EQ(w.get("dense0.weight").shape, (std::vector<std::size_t>{64, 3840}));
  EXPECT_EQ(w.get("output.weight").shape, (std::vector<std::size_t>{1, 32}));
  for (double v : w.get("dense1.bias").values) EXPECT_EQ(v, 0.0);
  EXPECT_EQ(init_weights(NetworkConfig{}), w);
  EXPECT_THROW(w.get("nope"), Error);
}

TEST(BuildSample, InteriorVoxelUsesNineNeighbours) {
  const Patient p = small_patient();
  const auto slots = p.slot_lookup();
  const int x = 2, y = 2;
  ASSERT_TRUE(p.masked(x, y));
  const Sample s = build_sample(p, x, y);
  const double scale = p.aif.peak();
  const std::size_t n = p.grid().n;
  int ch = 0;
  for (int dy = -1; dy <= 1; ++dy)
    for (int dx = -1; dx <= 1; ++dx, ++ch) {
      ASSERT_TRUE(p.masked(x + dx, y + dy));
      const Curve& c = p.tissue[slots[(y + dy) * p.width + x + dx]];
      for (std::size_t t = 0; t < n; ++t)
        EXPECT_EQ(s.tissue_input.values[ch * n + t], c[t] / scale);
    }
  EXPECT_EQ(s.length(), n);
}

TEST(BuildSample, CornerReplicatesCentre) {
  const Patient p = small_patient(6, 6);
  // The first masked voxel in row-major order has unmasked neighbours above.
  const auto idx = p.masked_indices();
  const int x = static_cast<int>(idx[0] % p.width), y = static_cast<int>(idx[0] / p.width);
  const Sample s = build_sample(p, x, y);
  const std::size_t n = p.grid().n;
  int replicated = 0, ch = 0;
  for (int dy = -1; dy <= 1; ++dy)
    for (int dx = -1; dx <= 1; ++dx, ++ch) {
      if (p.masked(x + dx, y + dy)) continue;
      ++replicated;
      for (std::size_t t = 0; t < n; ++t)
        EXPECT_EQ(s.tissue_input.values[ch * n + t], s.tissue_input.values[4 * n + t]);
    }
  EXPECT_GE(replicated, 3);
}

TEST(BuildSample, AifPeakNormalizedToOne) {
  const Patient p = small_patient();
  const Sample s = build_sample(p, 2, 2);
  double peak = 0;
  for (double v : s.aif_input.values) peak = std::max(peak, v);
  EXPECT_EQ(peak, 1.0);
}

TEST(BuildSample, JointScalingCancels) {
  const Patient p = small_patient();
  Patient scaled = p;
  for (double c : {4.0, 3.7}) {
    scaled = p;
    for (double& v : scaled.aif.values) v *= c;
    for (Curve& t : scaled.tissue)
      for (double& v : t.values) v *= c;
    const Sample a = build_sample(p, 2, 1), b = build_sample(scaled, 2, 1);
    for (std::size_t i = 0; i < a.tissue_input.size(); ++i)
      EXPECT_NEAR(b.tissue_input.values[i], a.tissue_input.values[i],
                  c == 4.0 ? 0.0 : 1e-15 * std::abs(a.tissue_input.values[i]));
  }
}

TEST(BuildSample, UnmaskedCentreIsAnError) {
  const Patient p = small_patient(6, 6);
  ASSERT_FALSE(p.masked(0, 0));
  EXPECT_THROW(build_sample(p, 0, 0), Error);
}

TEST(ShiftSample, JointShiftWithZeroFill) {
  std::mt19937_64 rng(1);
  const Sample s = random_sample(rng, 8, 1.0);
  const Sample later = shift_sample(s, 2);
  const Sample earlier = shift_sample(s, -3);
  for (std::size_t t = 0; t < 8; ++t) {
    EXPECT_EQ(later.aif_input.values[t], t < 2 ? 0.0 : s.aif_input.values[t - 2]);
    EXPECT_EQ(earlier.tissue_input.values[8 + t], t + 3 < 8 ? s.tissue_input.values[8 + t + 3] : 0.0);
  }
  EXPECT_EQ(later.target_mbf, s.target_mbf);
}

TEST(Forward, ZeroWeightsPredictZero) {
  std::mt19937_64 rng(2);
  const NetworkWeights w = zero_weights(small_config());
  EXPECT_EQ(forward_sample(w, random_sample(rng, 16, 1.0)), 0.0);
}

TEST(Forward, DeltaKernelIsIdentityAndChannelSum) {
  NetworkConfig cfg = small_config();
  cfg.aif_branch = {{1, 3}};
  cfg.tissue_branch = {{1, 3}};
  NetworkWeights w = zero_weights(cfg);
  w.get("aif.conv0.weight").values = {0, 1, 0};
  auto& tk = w.get("tissue.conv0.weight").values;
  for (int ci = 0; ci < kNeighbourhood; ++ci) tk[ci * 3 + 1] = 1.0;

  std::mt19937_64 rng(5);
  Sample s = random_sample(rng, 16, 1.0);
  for (double& v : s.aif_input.values) v = std::abs(v);
  for (double& v : s.tissue_input.values) v = std::abs(v);
  SampleCache cache;
  forward_sample(w, s, &cache);
  EXPECT_EQ(cache.aif.activations[0], s.aif_input.values);
  for (std::size_t t = 0; t < 16; ++t) {
    double sum = 0;
    for (int ci = 0; ci < kNeighbourhood; ++ci) sum += s.tissue_input.values[ci * 16 + t];
    EXPECT_NEAR(cache.tissue.activations[0][t], sum, 1e-15);
  }
}

TEST(Forward, MatchesNaiveOracle) {
  std::mt19937_64 rng(9);
  for (int k = 0; k < 5; ++k) {
    const NetworkWeights w = random_weights(small_config(), 100 + k);
    const Sample s = random_sample(rng, 16, 0.0);
    const double got = forward_sample(w, s);
    const double want = naive_forward(w, s);
    EXPECT_NEAR(got, want, 1e-12 * std::max(1.0, std::abs(want)));
  }
}

TEST(Forward, ShapeMismatchNamesLayer) {
  std::mt19937_64 rng(2);
  const NetworkWeights w = init_weights(small_config());
  try {
    forward_sample(w, random_sample(rng, 20, 1.0));
    FAIL();
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("aif.conv0"), std::string::npos);
  }
}

TEST(Forward, PoolingShiftsByOneIndexPerPoolWidth) {
  NetworkConfig cfg = small_config();
  cfg.aif_branch = {{2, 3}};
  const NetworkWeights w = random_weights(cfg, 4);
  Sample a;
  a.aif_input = Tensor({1, 16});
  a.tissue_input = Tensor({kNeighbourhood, 16});
  a.aif_input.values[5] = 1.0;  // impulse
  Sample b = a;
  b.aif_input.values.assign(16, 0.0);
  b.aif_input.values[7] = 1.0;  // shifted by the pool width
  SampleCache ca, cb;
  forward_sample(w, a, &ca);
  forward_sample(w, b, &cb);
  const std::size_t len = 8;
  for (std::size_t c = 0; c < 2; ++c)
    for (std::size_t j = 2; j + 1 < len - 1; ++j)
      EXPECT_EQ(cb.aif.output[c * len + j + 1], ca.aif.output[c * len + j]) << c << " " << j;
}

TEST(Backward, ZeroEverythingGivesZeroGradient) {
  std::mt19937_64 rng(3);
  const NetworkWeights w = zero_weights(small_config());
  std::vector<Sample> batch{random_sample(rng, 16, 0.0), random_sample(rng, 16, 0.0)};
  const auto g = backward(w, batch, forward(w, batch));
  for (const Tensor& t : g)
    for (double v : t.values) EXPECT_EQ(v, 0.0);
}

TEST(Backward, FiniteDifferenceCheckOnEveryWeight) {
  std::mt19937_64 rng(12);
  const NetworkWeights w = random_weights(small_config(), 44);
  std::vector<Sample> batch;
  for (int i = 0; i < 3; ++i) batch.push_back(random_sample(rng, 16, 0.5 + i));
  const auto grads = backward(w, batch, forward(w, batch));
  const double h = 1e-5;
  std::size_t checked = 0, passed = 0;
  for (std::size_t t = 0; t < w.tensors.size(); ++t)
    for (std::size_t k = 0; k < w.tensors[t].size(); ++k) {
      NetworkWeights up = w, down = w;
      up.tensors[t].values[k] += h;
      down.tensors[t].values[k] -= h;
      const double fd = (mse_loss(forward(up, batch).predictions, batch) -
                         mse_loss(forward(down, batch).predictions, batch)) /
                        (2 * h);
      const double an = grads[t].values[k];
      const bool ok = std::abs(an) < 1e-3 ? std::abs(an - fd) <= 1e-7
                                          : std::abs(an - fd) <= 1e-4 * std::abs(fd);
      ++checked;
      passed += ok;
      EXPECT_TRUE(ok) << w.names[t] << "[" << k << "] analytic " << an << " fd " << fd;
    }
  EXPECT_EQ(passed, checked);
}

TEST(Backward, DuplicatedSampleLeavesGradientUnchanged) {
  std::mt19937_64 rng(6);
  const NetworkWeights w = random_weights(small_config(), 8);
  const Sample s = random_sample(rng, 16, 1.3);
  const std::vector<Sample> one{s}, two{s, s};
  const auto g1 = backward(w, one, forward(w, one));
  const auto g2 = backward(w, two, forward(w, two));
  for (std::size_t t = 0; t < g1.size(); ++t)
    for (std::size_t k = 0; k < g1[t].size(); ++k)
      EXPECT_NEAR(g2[t].values[k], g1[t].values[k], 1e-14 * std::max(1.0, std::abs(g1[t].values[k])));
}

TEST(Adam, FirstStepMovesByLearningRate) {
  NetworkWeights w = zero_weights(small_config());
  std::vector<Tensor> g;
  for (const Tensor& t : w.tensors) g.emplace_back(t.shape, std::vector<double>(t.size(), -3.0));
  AdamState st = AdamState::zeros_like(w);
  TrainConfig cfg;
  adam_step(w, g, st, 1, cfg);
  const double expected = cfg.learning_rate * 3.0 / (3.0 + cfg.epsilon);
  EXPECT_NEAR(w.tensors[0].values[0], expected, 1e-18);
  EXPECT_NEAR(expected, 0.0005, 1e-11);
}

TEST(Adam, ZeroGradientLeavesWeightsUnchanged) {
  NetworkWeights w = init_weights(small_config());
  const NetworkWeights before = w;
  std::vector<Tensor> g;
  for (const Tensor& t : w.tensors) g.emplace_back(t.shape);
  AdamState st = AdamState::zeros_like(w);
  for (long t = 1; t <= 5; ++t) adam_step(w, g, st, t, TrainConfig{});
  EXPECT_EQ(w, before);
  EXPECT_THROW(adam_step(w, g, st, 0, TrainConfig{}), Error);
}

TEST(Adam, OppositeGradientsMoveBack) {
  NetworkWeights w = zero_weights(small_config());
  std::vector<Tensor> g, neg;
  for (const Tensor& t : w.tensors) {
    g.emplace_back(t.shape, std::vector<double>(t.size(), 2.0));
    neg.emplace_back(t.shape, std::vector<double>(t.size(), -2.0));
  }
  AdamState st = AdamState::zeros_like(w);
  TrainConfig cfg;
  adam_step(w, g, st, 1, cfg);
  const double after_one = w.tensors[0].values[0];
  adam_step(w, neg, st, 2, cfg);
  const double after_two = w.tensors[0].values[0];
  // Direct evaluation of the update formulas.
  const double b1 = cfg.beta1, b2 = cfg.beta2;
  const double m1 = (1 - b1) * 2, v1 = (1 - b2) * 4;
  const double w1 = -cfg.learning_rate * (m1 / (1 - b1)) / (std::sqrt(v1 / (1 - b2)) + cfg.epsilon);
  const double m2 = b1 * m1 - (1 - b1) * 2, v2 = b2 * v1 + (1 - b2) * 4;
  const double w2 = w1 - cfg.learning_rate * (m2 / (1 - b1 * b1)) /
                             (std::sqrt(v2 / (1 - b2 * b2)) + cfg.epsilon);
  EXPECT_DOUBLE_EQ(after_one, w1);
  EXPECT_DOUBLE_EQ(after_two, w2);
  EXPECT_GT(st.v[0].values[0], 0.0);
  EXPECT_GT(after_two, after_one);
}

TEST(Train, ConstantTargetIsLearned) {
  auto constant_samples = [](const Patient& p) {
    MbfMap m(p.id, p.width, p.height);
    for (std::size_t i = 0; i < m.values.size(); ++i)
      if (p.mask[i]) m.values[i] = 2.0;
    return build_samples(p, &m);
  };
  const std::vector<Sample> tr = constant_samples(small_patient(8, 8, 3));
  const std::vector<Sample> va = constant_samples(small_patient(6, 6, 4));
  TrainConfig cfg;
  cfg.learning_rate = 0.003;
  cfg.batch_size = 8;
  cfg.max_epochs = 400;
  cfg.delay_augment = 0;
  const TrainResult r = train(tr, va, small_config(32), cfg);
  for (double p : predict(r.weights, va)) EXPECT_NEAR(p, 2.0, 1e-2);
}

TEST(Train, PatienceStopsFortyEpochsAfterLastImprovement) {
  std::mt19937_64 rng(10);
  std::vector<Sample> tr, va;
  for (int i = 0; i < 4; ++i) tr.push_back(random_sample(rng, 16, 1.0));
  for (int i = 0; i < 2; ++i) va.push_back(random_sample(rng, 16, 1.0));
  TrainConfig cfg;
  cfg.learning_rate = 1e-300;  // updates vanish in rounding: only epoch 1 improves
  cfg.max_epochs = 500;
  const TrainResult r = train(tr, va, small_config(), cfg);
  EXPECT_EQ(r.best_epoch, 1);
  EXPECT_EQ(static_cast<int>(r.history.size()), 1 + 40);
}

TEST(Train, ReturnsBestWeightsAndHistory) {
  std::mt19937_64 rng(13);
  std::vector<Sample> tr, va;
  for (int i = 0; i < 24; ++i) tr.push_back(random_sample(rng, 16, 1.0 + 0.05 * i));
  for (int i = 0; i < 6; ++i) va.push_back(random_sample(rng, 16, 1.2 + 0.1 * i));
  TrainConfig cfg;
  cfg.learning_rate = 0.003;
  cfg.batch_size = 6;
  cfg.max_epochs = 60;
  cfg.patience = 5;
  const TrainResult r = train(tr, va, small_config(), cfg);
  double best = INFINITY;
  for (const EpochRecord& e : r.history) best = std::min(best, e.val_mse);
  EXPECT_EQ(r.history[r.best_epoch - 1].val_mse, best);
  EXPECT_EQ(mse_loss(predict(r.weights, va), va), best);
  if (static_cast<int>(r.history.size()) < cfg.max_epochs) {
    EXPECT_EQ(static_cast<int>(r.history.size()), r.best_epoch + cfg.patience);
  }
}

TEST(Train, DeterministicAcrossRunsAndWorkers) {
  std::mt19937_64 rng(14);
  std::vector<Sample> tr, va;
  for (int i = 0; i < 40; ++i) tr.push_back(random_sample(rng, 16, 1.0 + 0.02 * i));
  for (int i = 0; i < 6; ++i) va.push_back(random_sample(rng, 16, 1.5));
  TrainConfig cfg;
  cfg.batch_size = 20;
  cfg.max_epochs = 5;
  const TrainResult a = train(tr, va, small_config(), cfg);
  const TrainResult b = train(tr, va, small_config(), cfg);
  cfg.workers = 3;
  const TrainResult c = train(tr, va, small_config(), cfg);
  EXPECT_EQ(a.weights, b.weights);
  EXPECT_EQ(a.weights, c.weights);
  ASSERT_EQ(a.history.size(), c.history.size());
  for (std::size_t i = 0; i < a.history.size(); ++i) {
    EXPECT_EQ(a.history[i].train_mse, c.history[i].train_mse);
    EXPECT_EQ(a.history[i].val_mse, c.history[i].val_mse);
  }
}

TEST(Train, NonFiniteLossReportsEpoch) {
  std::mt19937_64 rng(15);
  std::vector<Sample> tr{random_sample(rng, 16, 1.0)}, va{random_sample(rng, 16, 1.0)};
  tr[0].target_mbf = INFINITY;
  try {
    train(tr, va, small_config(), TrainConfig{});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::Diverged);
    EXPECT_NE(std::string(e.what()).find("diverged at epoch 1"), std::string::npos);
  }
}

TEST(Train, MissingTargetIsAnError) {
  std::mt19937_64 rng(15);
  std::vector<Sample> tr{random_sample(rng, 16, 1.0)}, va{random_sample(rng, 16, 1.0)};
  va[0].target_mbf.reset();
  EXPECT_THROW(train(tr, va, small_config(), TrainConfig{}), Error);
  EXPECT_THROW(train({}, va, small_config(), TrainConfig{}), Error);
}

TEST(PredictMap, ShapeAndClamp) {
  const Patient p = small_patient();
  NetworkWeights w = zero_weights(small_config(32));
  w.get("output.bias").values[0] = -1.0;
  const MbfMap m = predict_map(w, p);
  EXPECT_EQ(m.width, p.width);
  EXPECT_EQ(m.height, p.height);
  EXPECT_EQ(m.present_count(), p.voxel_count());
  for (std::size_t i = 0; i < m.values.size(); ++i) {
    if (p.mask[i]) {
      EXPECT_EQ(m.values[i], 0.0);
    } else {
      EXPECT_TRUE(std::isnan(m.values[i]));
    }
  }
}

TEST(PredictMap, SingleVoxelPatient) {
  PhantomSpec s;
  s.width = s.height = 1;
  s.grid = TimeGrid{0.0, 1.0 / 60.0, 32};
  s.aif.onset = 0.05;
  s.delay_jitter = {0.0, 0.0};
  const Patient p = generate_phantom(s);
  const NetworkWeights w = random_weights(small_config(32), 3);
  const MbfMap m = predict_map(w, p);
  EXPECT_EQ(m.at(0, 0), std::max(0.0, forward_sample(w, build_sample(p, 0, 0))));
}
