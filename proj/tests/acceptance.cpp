// End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
// exits non-zero when any criterion fails.
//
//   acceptance            reduced suite (3 patients, 24x24, 3 splits)
//   acceptance --full     nine-patient suite, 10 splits of 5/2/2

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <map>
#include <random>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>

#include "mbf/cnn.hpp"
#include "mbf/error.hpp"
#include "mbf/io.hpp"
#include "mbf/mcmc.hpp"
#include "mbf/nlls.hpp"
#include "mbf/phantom.hpp"
#include "mbf/pipeline.hpp"
#include "mbf/seed.hpp"
#include "support.hpp"

namespace fs = std::filesystem;
using namespace mbf;
using mbf::testing::rel_l2;

namespace {

// Tolerances and budgets.
constexpr double kImpulseTol = 1e-6;
constexpr double kSimulateTol = 1e-4;
constexpr double kVolumeTol = 5e-3;
constexpr double kFdRelative = 1e-4;
constexpr double kFdAbsolute = 1e-7;
constexpr double kNoiselessFitTol = 0.01;
constexpr double kNoisyFitMedian = 0.10;
constexpr double kPriorSeMultiple = 3.0;
constexpr double kMcmcFlowTol = 0.05;
constexpr double kRelErrorMax = 0.10;
constexpr double kSurrogateSeconds = 2.0;
constexpr double kSpeedupMin = 100.0;
constexpr double kDelayChangeMax = 0.10;
constexpr int kDelayShift = 2;
constexpr double kDefectRatioMax = 0.70;
constexpr double kRemoteMargin = 2.0;  // voxels beyond the disc edge
constexpr int kPlans = 1000;

constexpr double kBudgetForward = 10;
constexpr double kBudgetGradient = 30;
constexpr double kBudgetNlls = 120;
constexpr double kBudgetMcmc = 300;
constexpr double kBudgetReduced = 20 * 60;
constexpr double kBudgetFull = 4 * 3600;

const KineticParams kTruth{2.35, 1.0, 0.08, 0.25, 0.02};

struct Options {
  bool full = false;
  std::uint64_t seed = 1;
  int workers = 1;
  int full_epochs = 100;
  std::set<int> only;
  fs::path scratch;
};

class Stopwatch {
 public:
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  }

 private:
  std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

int failures = 0;

// budget <= 0 means no runtime limit.
void verdict(int id, const std::string& name, bool ok, const std::string& detail, double seconds,
             double budget) {
  const bool in_time = budget <= 0 || seconds <= budget;
  const bool pass = ok && in_time;
  failures += !pass;
  std::string time = fmt("%.1f s", seconds);
  if (budget > 0) time += fmt(" of %.0f s", budget);
  std::printf("%s %2d %-22s %s [%s]\n", pass ? "PASS" : "FAIL", id, name.c_str(), detail.c_str(),
              time.c_str());
  std::fflush(stdout);
}

void note(const std::string& line) {
  std::printf("     %s\n", line.c_str());
  std::fflush(stdout);
}

// ---------------------------------------------------------------------------

void forward_model() {
  Stopwatch clock;
  const KineticParams reference{2.35, 1.0, 0.08, 0.25, 0.0};
  const TimeGrid fine{0.0, 1.0 / 300.0, 18000};
  const double impulse =
      rel_l2(impulse_response(reference, fine), impulse_response_oracle(reference, fine, 100));

  std::mt19937_64 rng(21);
  double simulate = rel_l2(simulate_tissue(reference, mbf::testing::default_aif()),
                           solve_ode_oracle(reference, mbf::testing::default_aif(), 100));
  for (int k = 0; k < 20; ++k) {
    AifSpec spec;
    spec.amplitude = mbf::testing::uniform(rng, 3, 7);
    spec.onset = mbf::testing::uniform(rng, 0.1, 0.4);
    const Curve aif = gamma_variate_aif(spec, TimeGrid{});
    const KineticParams p = mbf::testing::random_params(rng);
    simulate = std::max(simulate, rel_l2(simulate_tissue(p, aif), solve_ode_oracle(p, aif, 100)));
  }

  // ps = 0 disconnects the interstitium, leaving vp as the accessible volume.
  double volume = 0.0;
  for (int k = 0; k < 100; ++k) {
    const bool no_exchange = k % 10 == 0;
    const KineticParams p = mbf::testing::random_params(rng, no_exchange);
    const double expected = no_exchange ? p.vp : p.vp + p.ve;
    volume = std::max(volume, std::abs(mbf::testing::impulse_integral(p) / expected - 1.0));
  }
  const bool ok = impulse < kImpulseTol && simulate < kSimulateTol && volume <= kVolumeTol;
  verdict(1, "forward model", ok,
          fmt("impulse %.1e (<%.0e), simulate max %.1e (<%.0e), volume max %.2f%% (<=%.1f%%)",
              impulse, kImpulseTol, simulate, kSimulateTol, 100 * volume, 100 * kVolumeTol),
          clock.seconds(), kBudgetForward);
}

void gradients() {
  Stopwatch clock;
  std::mt19937_64 rng(12);
  const NetworkWeights w = mbf::testing::random_weights(mbf::testing::small_config(), 44);
  std::vector<Sample> batch;
  for (int i = 0; i < 3; ++i) batch.push_back(mbf::testing::random_sample(rng, 16, 0.5 + i));
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
      const double err = std::abs(an - fd);
      passed += err <= kFdAbsolute || err <= kFdRelative * std::abs(fd);
      ++checked;
    }
  verdict(2, "gradient check", passed == checked, fmt("%zu of %zu weights", passed, checked),
          clock.seconds(), kBudgetGradient);
}

void nlls() {
  Stopwatch clock;
  const Curve a = mbf::testing::default_aif();
  const double noiseless = std::abs(fit_nlls(a, simulate_tissue(kTruth, a)).params.fp / kTruth.fp - 1);

  std::mt19937_64 rng(17);
  std::vector<double> errors;
  for (int k = 0; k < 200; ++k) {
    const KineticParams t{mbf::testing::uniform(rng, 1.0, 3.5), mbf::testing::uniform(rng, 0.3, 0.8),
                          mbf::testing::uniform(rng, 0.10, 0.16),
                          mbf::testing::uniform(rng, 0.15, 0.30),
                          mbf::testing::uniform(rng, 0.0, 0.05)};
    Curve tissue = simulate_tissue(t, a);
    std::normal_distribution<double> noise(0.0, 0.02 * tissue.peak());
    for (double& v : tissue.values) v += noise(rng);
    errors.push_back(std::abs(fit_nlls(a, tissue).params.fp - t.fp) / t.fp);
  }
  const double median = quantile(errors, 0.5);
  verdict(3, "NLLS recovery", noiseless <= kNoiselessFitTol && median < kNoisyFitMedian,
          fmt("noiseless %.2e (<=%.2f), median at 2%% noise %.3f (<%.2f)", noiseless,
              kNoiselessFitTol, median, kNoisyFitMedian),
          clock.seconds(), kBudgetNlls);
}

void mcmc() {
  Stopwatch clock;
  const Curve a = mbf::testing::default_aif();
  const Curve t = simulate_tissue(kTruth, a);
  const Prior prior;

  // Overwhelming noise: the chain must reproduce the prior's medians.
  McmcConfig flat;
  flat.n_iter = 60000;
  flat.burn_in = 5000;
  flat.thin = 5;
  flat.seed = 12;
  flat.fixed_log_sigma = std::log(1e3 * t.peak());
  flat.init_from_nlls = false;
  const Posterior post = run_mcmc(a, t, prior, flat);
  std::mt19937_64 rng(77);
  const auto iv = prior.bounds.as_array();
  double worst_z = 0.0;
  for (int j = 0; j < kParamCount; ++j) {
    std::vector<double> iid(200000);
    for (double& v : iid) {
      const double u = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
      v = j <= 1 ? std::exp(std::log(iv[j].lo) + u * (std::log(iv[j].hi) - std::log(iv[j].lo)))
                 : iv[j].lo + u * iv[j].width();
    }
    const std::vector<double> chain = post.column(j);
    const double se = mbf::testing::batch_se(chain, 20, mbf::testing::median_of);
    worst_z = std::max(worst_z, std::abs(mbf::testing::median_of(chain) -
                                         mbf::testing::median_of(iid)) / se);
  }

  McmcConfig long_chain;
  long_chain.n_iter = 50000;
  long_chain.burn_in = 25000;
  long_chain.seed = 5;
  const double flow = std::abs(run_mcmc(a, t, prior, long_chain).fp().median / kTruth.fp - 1);

  Curve noisy = t;
  std::normal_distribution<double> noise(0.0, 0.01 * t.peak());
  for (double& v : noisy.values) v += noise(rng);
  McmcConfig fixed;
  fixed.seed = 9;
  const Posterior x = run_mcmc(a, noisy, prior, fixed);
  const Posterior y = run_mcmc(a, noisy, prior, fixed);
  const bool same = x.samples.size() == y.samples.size() &&
                    std::memcmp(x.samples.data(), y.samples.data(),
                                x.samples.size() * sizeof(Sample6)) == 0 &&
                    x.accept_rate == y.accept_rate;

  verdict(4, "MCMC sanity", worst_z <= kPriorSeMultiple && flow <= kMcmcFlowTol && same,
          fmt("prior medians within %.2f SE (<=%.0f), noiseless fp %.2f%% (<=%.0f%%), %s", worst_z,
              kPriorSeMultiple, 100 * flow, 100 * kMcmcFlowTol,
              same ? "repeat run byte-identical" : "repeat run differs"),
          clock.seconds(), kBudgetMcmc);
}

// ---------------------------------------------------------------------------
// Surrogate criteria share one labelled suite and one cross-validation run.

struct Surrogate {
  PhantomDataset dataset;
  LabelResult labels;
  SplitPlan plan;
  NetworkConfig net;
  TrainConfig train;
  CrossvalOutput cv;
};

Surrogate run_surrogate(const Options& opt) {
  Stopwatch clock;
  Surrogate s;
  const SuiteOptions suite = opt.full ? default_suite_options() : reduced_suite_options();
  s.dataset = make_suite(opt.seed, suite, opt.workers);

  McmcConfig mcmc;
  mcmc.seed = derive_seed(opt.seed, 1);
  s.labels = label_dataset(s.dataset, Prior{}, mcmc, opt.workers);
  note(fmt("labelled %zu voxels in %.0f s", s.dataset.voxel_count(), clock.seconds()));

  std::vector<std::string> ids;
  for (const Patient& p : s.dataset.patients) ids.push_back(p.id);
  const SplitShape shape = opt.full ? SplitShape{} : SplitShape{3, 1, 1, 1};
  s.plan = make_splits(ids, derive_seed(opt.seed, 4), shape);

  s.net.input_length = suite.grid.n;
  s.net.seed = derive_seed(opt.seed, 2);
  s.train.seed = derive_seed(opt.seed, 3);
  s.train.workers = opt.workers;
  if (opt.full) {
    s.train.max_epochs = opt.full_epochs;
  } else {
    s.train.batch_size = 32;
    s.train.max_epochs = 300;
  }
  s.cv = run_crossval(s.dataset, s.labels.maps, s.plan, s.net, s.train);

  const EvalReport& r = s.cv.report;
  for (const SplitResult& sr : r.splits)
    note(fmt("split %d: mse %.4f, relative error %.2f%%, best epoch %d of %d", sr.index,
             sr.metrics.mse, 100 * sr.metrics.rel_error, sr.best_epoch, sr.epochs));
  verdict(5, "surrogate accuracy", r.rel_error_mean <= kRelErrorMax,
          fmt("%s suite, %zu splits, relative error %.2f%% (<=%.0f%%), MSE %s",
              opt.full ? "default" : "reduced", r.splits.size(), 100 * r.rel_error_mean,
              100 * kRelErrorMax, r.summary().c_str()),
          clock.seconds(), opt.full ? kBudgetFull : kBudgetReduced);
  return s;
}

void speedup(const Surrogate& s, const Options& opt) {
  Stopwatch clock;
  const Patient& patient = s.dataset.find(s.plan[0].test[0]);
  McmcConfig mcmc;
  mcmc.seed = derive_seed(opt.seed, 5);
  const Timing timing = benchmark(patient, s.cv.weights[0], Prior{}, mcmc, opt.workers);

  // Surrogate time on a full-size slice, whichever suite was trained.
  const Patient large = generate_phantom(suite_specs(opt.seed, default_suite_options())[0]);
  Stopwatch slice;
  const MbfMap map = predict_map(s.cv.weights[0], large, opt.workers);
  const double large_seconds = slice.seconds();

  const bool ok = timing.same_voxels && timing.surrogate_seconds <= kSurrogateSeconds &&
                  large_seconds <= kSurrogateSeconds && timing.speedup() >= kSpeedupMin;
  verdict(6, "speedup", ok,
          fmt("%s %zu voxels: MCMC %.1f s, surrogate %.3f s, %.0fx (>=%.0fx); %dx%d slice "
              "%zu voxels: %.2f s (<=%.0f s); %d worker(s)",
              timing.patient_id.c_str(), timing.voxels, timing.mcmc_seconds,
              timing.surrogate_seconds, timing.speedup(), kSpeedupMin, large.width, large.height,
              map.present_count(), large_seconds, kSurrogateSeconds, opt.workers),
          clock.seconds(), 0);
}

void delay_invariance(const Surrogate& s, const Options& opt) {
  Stopwatch clock;
  double sum = 0.0;
  std::size_t n = 0;
  for (std::size_t k = 0; k < s.plan.size(); ++k)
    for (const std::string& id : s.plan[k].test) {
      const std::vector<Sample> base = build_samples(s.dataset.find(id));
      const std::vector<double> p0 = predict(s.cv.weights[k], base, opt.workers);
      for (int shift : {-kDelayShift, kDelayShift}) {
        std::vector<Sample> moved;
        moved.reserve(base.size());
        for (const Sample& b : base) moved.push_back(shift_sample(b, shift));
        const std::vector<double> p = predict(s.cv.weights[k], moved, opt.workers);
        // Flow below the physiological floor would only inflate the ratio.
        for (std::size_t i = 0; i < p.size(); ++i, ++n)
          sum += std::abs(p[i] - p0[i]) / std::max(p0[i], kMbfFloor);
      }
    }
  const double change = sum / static_cast<double>(n);
  verdict(7, "delay invariance", change <= kDelayChangeMax,
          fmt("mean relative change under +/-%d samples %.2f%% (<=%.0f%%), %zu predictions",
              kDelayShift, 100 * change, 100 * kDelayChangeMax, n),
          clock.seconds(), 0);
}

void defects(const Surrogate& s, const Options& opt) {
  Stopwatch clock;
  // Each patient's map comes from the first split that holds it out.
  std::map<std::string, const MbfMap*> held_out;
  for (std::size_t k = 0; k < s.plan.size(); ++k)
    for (std::size_t j = 0; j < s.plan[k].test.size(); ++j)
      held_out.emplace(s.plan[k].test[j], &s.cv.predictions[k][j]);

  bool ok = true;
  int diseased = 0;
  std::string detail;
  for (const Patient& p : s.dataset.patients) {
    if (!p.spec || !p.spec->defect) continue;
    ++diseased;
    const Defect& d = *p.spec->defect;
    const MbfMap& m = *held_out.at(p.id);
    double in = 0, remote = 0;
    int n_in = 0, n_remote = 0;
    for (int y = 0; y < m.height; ++y)
      for (int x = 0; x < m.width; ++x) {
        if (!m.present(x, y)) continue;
        const double r = std::hypot(x - d.cx, y - d.cy);
        if (r <= d.radius) {
          in += m.at(x, y);
          ++n_in;
        } else if (r > d.radius + kRemoteMargin) {
          remote += m.at(x, y);
          ++n_remote;
        }
      }
    const double ratio = n_in && n_remote ? (in / n_in) / (remote / n_remote) : 1.0;
    ok = ok && ratio < kDefectRatioMax;
    detail += fmt("%s%s %.2f", detail.empty() ? "" : ", ", p.id.c_str(), ratio);
  }
  const int expected = opt.full ? 4 : reduced_suite_options().diseased;
  ok = ok && diseased == expected;
  verdict(8, "defect detectability", ok,
          fmt("defect/remote mean ratio %s (<%.2f) over %d diseased phantoms", detail.c_str(),
              kDefectRatioMax, diseased),
          clock.seconds(), 0);
}

void split_plans(const Options& opt) {
  Stopwatch clock;
  std::vector<std::string> ids;
  for (int i = 1; i <= 9; ++i) ids.push_back(fmt("P%02d", i));
  int valid = 0;
  for (int k = 0; k < kPlans; ++k) {
    try {
      const SplitPlan plan = make_splits(ids, derive_seed(opt.seed, 1000 + k));
      validate_plan(plan, ids, SplitShape{});
      valid += plan.size() == 10;
    } catch (const Error&) {
    }
  }
  verdict(9, "split plans", valid == kPlans, fmt("%d of %d plans valid (5/2/2, full coverage)", valid, kPlans),
          clock.seconds(), 0);
}

void persistence(const Surrogate& s, const Options& opt) {
  Stopwatch clock;
  fs::remove_all(opt.scratch);
  io::write_dataset(s.dataset, opt.scratch / "dataset");
  const bool dataset = io::read_dataset(opt.scratch / "dataset") == s.dataset;

  io::write_maps(s.labels.maps, opt.scratch / "labels");
  std::vector<std::string> ids;
  for (const MbfMap& m : s.labels.maps) ids.push_back(m.patient_id);
  const std::vector<MbfMap> back = io::read_maps(opt.scratch / "labels", ids);
  bool maps = back.size() == s.labels.maps.size();
  for (std::size_t i = 0; maps && i < back.size(); ++i) maps = same_map(back[i], s.labels.maps[i]);

  io::write_weights(s.cv.weights[0], opt.scratch / "weights.json");
  const NetworkWeights w = io::read_weights(opt.scratch / "weights.json");
  const bool weights = w == s.cv.weights[0];
  const std::vector<Sample> samples = build_samples(s.dataset.find(s.plan[0].test[0]));
  const std::vector<double> a = predict(s.cv.weights[0], samples, opt.workers);
  const std::vector<double> b = predict(w, samples, opt.workers);
  const bool exact = std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0;

  auto mark = [](bool v) { return v ? "identical" : "DIFFERENT"; };
  verdict(10, "persistence", dataset && maps && weights && exact,
          fmt("dataset %s, maps %s, weights %s, %zu reloaded predictions %s", mark(dataset),
              mark(maps), mark(weights), a.size(), exact ? "bit-exact" : "differ"),
          clock.seconds(), 0);
  fs::remove_all(opt.scratch);
}

}  // namespace

int main(int argc, char** argv) {
  Options opt;
  opt.workers = static_cast<int>(std::max(1u, std::thread::hardware_concurrency()));
  opt.scratch = fs::temp_directory_path() / "mbf_acceptance";
  std::vector<int> only;
  CLI::App app{"Acceptance run; one PASS/FAIL line per criterion."};
  app.add_flag("--full", opt.full, "Nine-patient suite with 10 splits (hours)");
  app.add_option("--seed", opt.seed, "Master seed");
  app.add_option("--workers", opt.workers, "Threads for labelling, training and prediction")
      ->check(CLI::PositiveNumber);
  app.add_option("--full-epochs", opt.full_epochs, "Epoch cap per split with --full")
      ->check(CLI::PositiveNumber);
  app.add_option("--only", only, "Criteria to run (default: all)")->check(CLI::Range(1, 10));
  app.add_option("--scratch", opt.scratch, "Directory for persistence round trips");
  CLI11_PARSE(app, argc, argv);
  opt.only.insert(only.begin(), only.end());
  auto wanted = [&](int id) { return opt.only.empty() || opt.only.count(id) > 0; };

  try {
    if (wanted(1)) forward_model();
    if (wanted(2)) gradients();
    if (wanted(3)) nlls();
    if (wanted(4)) mcmc();
    if (wanted(9)) split_plans(opt);
    if (std::any_of(opt.only.begin(), opt.only.end(), [](int id) { return id >= 5 && id != 9; }) ||
        opt.only.empty()) {
      const Surrogate s = run_surrogate(opt);
      if (wanted(6)) speedup(s, opt);
      if (wanted(7)) delay_invariance(s, opt);
      if (wanted(8)) defects(s, opt);
      if (wanted(10)) persistence(s, opt);
    }
  } catch (const std::exception& e) {
    std::printf("FAIL    aborted: %s\n", e.what());
    return 2;
  }
  std::printf("%d criterion(s) failed\n", failures);
  return failures == 0 ? 0 : 1;
}
