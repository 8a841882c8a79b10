#include "mbf/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <map>
#include <random>
#include <set>

#include "mbf/error.hpp"
#include "mbf/parallel.hpp"
#include "mbf/seed.hpp"

namespace mbf {

SplitPlan make_splits(const std::vector<std::string>& ids, std::uint64_t seed) {
  require(ids.size() == 9, "make_splits needs exactly 9 patient ids, got " +
                               std::to_string(ids.size()));
  return make_splits(ids, seed, SplitShape{});
}

SplitPlan make_splits(const std::vector<std::string>& ids, std::uint64_t seed,
                      const SplitShape& shape, long max_attempts) {
  require(shape.splits >= 1 && shape.train >= 1 && shape.val >= 1 && shape.test >= 1,
          "split sizes must be >= 1");
  require(static_cast<int>(ids.size()) == shape.patients(),
          "split shape needs " + std::to_string(shape.patients()) + " ids, got " +
              std::to_string(ids.size()));
  require(std::set<std::string>(ids.begin(), ids.end()).size() == ids.size(),
          "patient ids must be distinct");

  std::mt19937_64 rng(seed);
  std::vector<std::string> order = ids;
  for (long attempt = 0; attempt < max_attempts; ++attempt) {
    SplitPlan plan;
    std::set<std::string> tested;
    for (int s = 0; s < shape.splits; ++s) {
      std::shuffle(order.begin(), order.end(), rng);
      SplitRecord r;
      auto it = order.begin();
      r.train.assign(it, it + shape.train);
      it += shape.train;
      r.val.assign(it, it + shape.val);
      it += shape.val;
      r.test.assign(it, it + shape.test);
      for (auto* part : {&r.train, &r.val, &r.test}) std::sort(part->begin(), part->end());
      tested.insert(r.test.begin(), r.test.end());
      plan.push_back(std::move(r));
    }
    if (tested.size() == ids.size()) return plan;
  }
  fail(ErrorKind::Runtime, "no split plan with full test coverage after " +
                               std::to_string(max_attempts) + " attempts");
}

void validate_plan(const SplitPlan& plan, const std::vector<std::string>& ids,
                   const SplitShape& shape) {
  require(static_cast<int>(plan.size()) == shape.splits, "plan has the wrong number of splits");
  const std::set<std::string> all(ids.begin(), ids.end());
  std::set<std::string> tested;
  for (std::size_t s = 0; s < plan.size(); ++s) {
    const SplitRecord& r = plan[s];
    const std::string where = "split " + std::to_string(s);
    require(static_cast<int>(r.train.size()) == shape.train &&
                static_cast<int>(r.val.size()) == shape.val &&
                static_cast<int>(r.test.size()) == shape.test,
            where + " has the wrong partition sizes");
    std::set<std::string> seen;
    for (const auto* part : {&r.train, &r.val, &r.test})
      for (const std::string& id : *part) {
        require(all.count(id) == 1, where + " names unknown patient " + id);
        require(seen.insert(id).second, where + " repeats patient " + id);
      }
    require(seen == all, where + " does not partition the patients");
    tested.insert(r.test.begin(), r.test.end());
  }
  require(tested == all, "test sets do not cover every patient");
}

MapMetrics evaluate_maps(const MbfMap& pred, const MbfMap& target) {
  return evaluate_maps(std::span<const MbfMap>(&pred, 1), std::span<const MbfMap>(&target, 1));
}

MapMetrics evaluate_maps(std::span<const MbfMap> preds, std::span<const MbfMap> targets) {
  require(preds.size() == targets.size(), "prediction and target map counts differ");
  std::vector<double> p, t;
  for (std::size_t m = 0; m < preds.size(); ++m) {
    const MbfMap& a = preds[m];
    const MbfMap& b = targets[m];
    require(a.width == b.width && a.height == b.height,
            "map shapes differ for patient " + b.patient_id);
    for (std::size_t i = 0; i < b.values.size(); ++i) {
      const bool has_a = !std::isnan(a.values[i]);
      const bool has_b = !std::isnan(b.values[i]);
      require(has_a == has_b, "prediction and target masks differ for patient " + b.patient_id);
      if (has_b) {
        p.push_back(a.values[i]);
        t.push_back(b.values[i]);
      }
    }
  }
  require(!t.empty(), "cannot evaluate maps with an empty mask");
  MapMetrics out;
  double sq = 0.0, abs = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double e = p[i] - t[i];
    sq += e * e;
    abs += std::abs(e);
  }
  const double n = static_cast<double>(p.size());
  out.mse = sq / n;
  const double median = quantile(t, 0.5);
  require(median > 0.0, "target median must be positive");
  out.rel_error = abs / n / median;
  out.pooled = quartiles(p);
  out.voxels = p.size();
  return out;
}

std::string EvalReport::summary() const {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.3f (%.3f)", mse_mean, mse_std);
  return buf;
}

void aggregate(EvalReport& report) {
  require(!report.splits.empty(), "report has no splits");
  const double n = static_cast<double>(report.splits.size());
  double mse = 0.0, rel = 0.0;
  for (const SplitResult& s : report.splits) {
    mse += s.metrics.mse;
    rel += s.metrics.rel_error;
  }
  report.mse_mean = mse / n;
  report.rel_error_mean = rel / n;
  // shifted by the first entry so identical splits give exactly zero
  const double origin = report.splits.front().metrics.mse;
  double sum = 0.0, sq = 0.0;
  for (const SplitResult& s : report.splits) {
    const double d = s.metrics.mse - origin;
    sum += d;
    sq += d * d;
  }
  const double var = std::max(0.0, sq - sum * sum / n);
  report.mse_std = report.splits.size() > 1 ? std::sqrt(var / (n - 1.0)) : 0.0;
}

namespace {

const MbfMap& target_for(const std::vector<MbfMap>& targets, const std::string& id) {
  for (const MbfMap& m : targets)
    if (m.patient_id == id) return m;
  fail(ErrorKind::InvalidArgument, "no target map for patient " + id);
}

}  // namespace

CrossvalOutput run_crossval(const PhantomDataset& dataset, const std::vector<MbfMap>& targets,
                            const SplitPlan& plan, const NetworkConfig& net,
                            const TrainConfig& cfg) {
  require(!plan.empty(), "split plan is empty");
  std::map<std::string, std::vector<Sample>> samples;
  for (const Patient& p : dataset.patients)
    samples.emplace(p.id, build_samples(p, &target_for(targets, p.id)));

  auto gather = [&](const std::vector<std::string>& ids) {
    std::vector<Sample> out;
    for (const std::string& id : ids) {
      auto it = samples.find(id);
      require(it != samples.end(), "split names unknown patient " + id);
      out.insert(out.end(), it->second.begin(), it->second.end());
    }
    return out;
  };

  CrossvalOutput out;
  for (std::size_t s = 0; s < plan.size(); ++s) {
    const SplitRecord& split = plan[s];
    std::string key;
    for (const auto* part : {&split.train, &split.val, &split.test}) {
      for (const std::string& id : *part) key += id + ",";
      key += "|";
    }
    NetworkConfig split_net = net;
    split_net.seed = derive_seed(net.seed, fnv1a(key));
    TrainConfig split_cfg = cfg;
    split_cfg.seed = derive_seed(cfg.seed, fnv1a(key));

    TrainResult trained;
    try {
      trained = train(gather(split.train), gather(split.val), split_net, split_cfg);
    } catch (const Error& e) {
      throw Error(e.kind(), "split " + std::to_string(s) + ": " + e.what());
    }

    std::vector<MbfMap> preds, truth;
    for (const std::string& id : split.test) {
      preds.push_back(predict_map(trained.weights, dataset.find(id), cfg.workers));
      truth.push_back(target_for(targets, id));
    }
    SplitResult r;
    r.index = static_cast<int>(s);
    r.split = split;
    r.metrics = evaluate_maps(preds, truth);
    r.best_epoch = trained.best_epoch;
    r.epochs = static_cast<int>(trained.history.size());
    out.report.splits.push_back(r);
    out.weights.push_back(std::move(trained.weights));
    out.predictions.push_back(std::move(preds));
  }
  aggregate(out.report);
  return out;
}

Timing benchmark(const Patient& patient, const NetworkWeights& weights, const Prior& prior,
                 const McmcConfig& cfg, int workers) {
  using clock = std::chrono::steady_clock;
  Timing t;
  t.patient_id = patient.id;
  t.workers = workers;

  const auto m0 = clock::now();
  const MbfMap labelled = label_patient(patient, prior, cfg, workers);
  const auto m1 = clock::now();
  const MbfMap predicted = predict_map(weights, patient, workers);
  const auto m2 = clock::now();

  t.mcmc_seconds = std::chrono::duration<double>(m1 - m0).count();
  t.surrogate_seconds = std::chrono::duration<double>(m2 - m1).count();
  t.voxels = labelled.present_count();
  for (std::size_t i = 0; i < labelled.values.size(); ++i)
    if (std::isnan(labelled.values[i]) != std::isnan(predicted.values[i])) t.same_voxels = false;
  return t;
}

MbfMap fit_patient(const Patient& patient, const FitConfig& cfg, int workers) {
  MbfMap map(patient.id, patient.width, patient.height);
  const auto voxels = patient.masked_indices();
  parallel_for(voxels.size(), workers, [&](std::size_t slot) {
    try {
      map.values[voxels[slot]] = fit_nlls(patient.aif, patient.tissue[slot], cfg).params.fp;
    } catch (const Error& e) {
      throw Error(e.kind(), "patient " + patient.id + " voxel " + std::to_string(voxels[slot]) +
                                ": " + e.what());
    }
  });
  return map;
}

std::vector<MbfMap> fit_dataset(const PhantomDataset& dataset, const FitConfig& cfg,
                                int workers) {
  std::vector<MbfMap> out;
  for (const Patient& p : dataset.patients) out.push_back(fit_patient(p, cfg, workers));
  return out;
}

MbfMap truth_map(const Patient& patient) {
  MbfMap map(patient.id, patient.width, patient.height);
  const auto voxels = patient.masked_indices();
  for (std::size_t k = 0; k < voxels.size(); ++k) map.values[voxels[k]] = patient.truth[k].fp;
  return map;
}

}  // namespace mbf
