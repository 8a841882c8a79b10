// mbfq: phantom simulation, labelling, surrogate training and evaluation.

#include <CLI11.hpp>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "mbf/config.hpp"
#include "mbf/error.hpp"
#include "mbf/io.hpp"
#include "mbf/render.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace mbf;

namespace {

struct Paths {
  fs::path root;
  fs::path dataset() const { return root / "dataset"; }
  fs::path labels() const { return root / "labels"; }
  fs::path fit() const { return root / "fit"; }
  fs::path model() const { return root / "model"; }
  fs::path weights() const { return model() / "weights.json"; }
  fs::path history() const { return model() / "history.csv"; }
  fs::path split() const { return model() / "split.json"; }
  fs::path predictions() const { return root / "predictions"; }
  fs::path report() const { return root / "crossval" / "report.json"; }
  fs::path timing() const { return root / "benchmark" / "timing.json"; }
  fs::path render() const { return root / "render"; }
};

void progress(const std::string& line) { std::cerr << line << std::endl; }

std::vector<std::string> ids_of(const PhantomDataset& ds) {
  std::vector<std::string> ids;
  for (const Patient& p : ds.patients) ids.push_back(p.id);
  return ids;
}

std::string join(const std::vector<std::string>& v) {
  std::string s;
  for (const std::string& x : v) s += (s.empty() ? "" : " ") + x;
  return s;
}

// "--a.b=v" or "--a.b v" pairs left over after the regular options.
std::vector<Override> parse_overrides(const std::vector<std::string>& args) {
  std::vector<Override> out;
  for (std::size_t i = 0; i < args.size(); ++i) {
    const std::string& a = args[i];
    if (a.rfind("--", 0) != 0 || a.size() < 3) fail(ErrorKind::Config, "unexpected argument '" + a + "'");
    const std::string body = a.substr(2);
    const auto eq = body.find('=');
    if (eq != std::string::npos) {
      out.emplace_back(body.substr(0, eq), body.substr(eq + 1));
    } else if (i + 1 < args.size()) {
      out.emplace_back(body, args[++i]);
    } else {
      fail(ErrorKind::Config, "config key '" + body + "' needs a value");
    }
  }
  return out;
}

json read_json(const fs::path& file) {
  try {
    return json::parse(io::read_text(file));
  } catch (const json::exception& e) {
    fail(ErrorKind::Parse, file.string() + ": " + e.what());
  }
}

SplitRecord read_split(const fs::path& file) {
  const json j = read_json(file);
  try {
    return {j.at("train").get<std::vector<std::string>>(), j.at("val").get<std::vector<std::string>>(),
            j.at("test").get<std::vector<std::string>>()};
  } catch (const json::exception& e) {
    fail(ErrorKind::Parse, file.string() + ": " + e.what());
  }
}

std::vector<Sample> samples_for(const PhantomDataset& ds, const std::vector<MbfMap>& targets,
                                const std::vector<std::string>& ids) {
  std::vector<Sample> out;
  for (const std::string& id : ids) {
    const Patient& p = ds.find(id);
    const MbfMap* target = nullptr;
    for (const MbfMap& m : targets)
      if (m.patient_id == id) target = &m;
    const auto s = build_samples(p, target);
    out.insert(out.end(), s.begin(), s.end());
  }
  return out;
}

void cmd_simulate(const RunConfig& cfg, const Paths& paths) {
  const PhantomDataset ds = make_suite(cfg.seed, cfg.suite, cfg.workers);
  io::write_dataset(ds, paths.dataset());
  std::size_t voxels = 0;
  for (const Patient& p : ds.patients) voxels += p.voxel_count();
  std::printf("simulated %zu patients, %zu masked voxels -> %s\n", ds.patients.size(), voxels,
              paths.dataset().c_str());
}

void cmd_label(const RunConfig& cfg, const Paths& paths) {
  const PhantomDataset ds = io::read_dataset(paths.dataset());
  std::vector<MbfMap> maps;
  if (cfg.label_method == "mcmc") {
    progress("labelling with MCMC (" + std::to_string(cfg.mcmc.n_iter) + " iterations per voxel)");
    maps = label_dataset(ds, cfg.prior, cfg.mcmc_config(), cfg.workers).maps;
  } else {
    progress("labelling with least squares");
    maps = fit_dataset(ds, cfg.fit_config(), cfg.workers);
  }
  io::write_maps(maps, paths.labels());
  std::vector<double> pooled;
  for (const MbfMap& m : maps)
    for (double v : m.values)
      if (!std::isnan(v)) pooled.push_back(v);
  const Quartiles q = quartiles(pooled);
  std::printf("labels (%s): median %.3f (%.3f, %.3f) mL/min/mL -> %s\n", cfg.label_method.c_str(),
              q.median, q.p25, q.p75, paths.labels().c_str());
}

void cmd_fit(const RunConfig& cfg, const Paths& paths) {
  const PhantomDataset ds = io::read_dataset(paths.dataset());
  io::write_maps(fit_dataset(ds, cfg.fit_config(), cfg.workers), paths.fit());
  std::printf("least-squares maps -> %s\n", paths.fit().c_str());
}

SplitPlan plan_for(const RunConfig& cfg, const PhantomDataset& ds) {
  return make_splits(ids_of(ds), cfg.split_seed(), cfg.split);
}

void cmd_train(const RunConfig& cfg, const Paths& paths) {
  const PhantomDataset ds = io::read_dataset(paths.dataset());
  const auto targets = io::read_maps(paths.labels(), ids_of(ds));
  const SplitRecord split = plan_for(cfg, ds).at(static_cast<std::size_t>(cfg.split_index));
  progress("train: " + join(split.train) + "  val: " + join(split.val) + "  test: " + join(split.test));
  TrainConfig tc = cfg.train_config();
  tc.verbose = true;
  const TrainResult r = train(samples_for(ds, targets, split.train),
                              samples_for(ds, targets, split.val), cfg.network_config(), tc);
  io::write_weights(r.weights, paths.weights());
  io::write_history(r.history, paths.history());
  const json j = {{"index", cfg.split_index}, {"train", split.train}, {"val", split.val}, {"test", split.test}};
  io::write_text(paths.split(), j.dump(2) + "\n");
  std::printf("best epoch %d of %zu, val MSE %.4f -> %s\n", r.best_epoch, r.history.size(),
              r.history[static_cast<std::size_t>(r.best_epoch - 1)].val_mse, paths.weights().c_str());
}

void cmd_predict(const RunConfig& cfg, const Paths& paths, bool all) {
  const PhantomDataset ds = io::read_dataset(paths.dataset());
  const NetworkWeights w = io::read_weights(paths.weights());
  if (w.config.input_length != static_cast<int>(ds.patients.front().grid().n))
    fail(ErrorKind::InvalidArgument, "weights expect curves of length " +
                                         std::to_string(w.config.input_length));
  const std::vector<std::string> ids = all ? ids_of(ds) : read_split(paths.split()).test;
  std::vector<MbfMap> preds;
  for (const std::string& id : ids) preds.push_back(predict_map(w, ds.find(id), cfg.workers));
  io::write_maps(preds, paths.predictions());
  std::printf("predicted %s -> %s\n", join(ids).c_str(), paths.predictions().c_str());
  if (fs::exists(paths.labels())) {
    const MapMetrics m = evaluate_maps(preds, io::read_maps(paths.labels(), ids));
    std::printf("vs labels: MSE %.4f, mean relative error %.2f%%\n", m.mse, 100.0 * m.rel_error);
  }
}

void cmd_crossval(const RunConfig& cfg, const Paths& paths) {
  const PhantomDataset ds = io::read_dataset(paths.dataset());
  const auto targets = io::read_maps(paths.labels(), ids_of(ds));
  const SplitPlan plan = plan_for(cfg, ds);
  const CrossvalOutput out =
      run_crossval(ds, targets, plan, cfg.network_config(), cfg.train_config());
  io::write_report(out.report, paths.report());
  for (const SplitResult& s : out.report.splits)
    std::printf("split %d  test %-8s MSE %.4f  rel. error %.2f%%\n", s.index, join(s.split.test).c_str(),
                s.metrics.mse, 100.0 * s.metrics.rel_error);
  std::printf("MSE mean (std): %s  mean relative error %.2f%% -> %s\n", out.report.summary().c_str(),
              100.0 * out.report.rel_error_mean, paths.report().c_str());
}

void cmd_benchmark(const RunConfig& cfg, const Paths& paths, const std::string& patient) {
  const PhantomDataset ds = io::read_dataset(paths.dataset());
  const NetworkWeights w = io::read_weights(paths.weights());
  const std::string id = !patient.empty()              ? patient
                         : fs::exists(paths.split()) ? read_split(paths.split()).test.front()
                                                       : ds.patients.front().id;
  const Timing t = benchmark(ds.find(id), w, cfg.prior, cfg.mcmc_config(), cfg.workers);
  io::write_timing(t, paths.timing());
  std::printf("%s: %zu voxels, MCMC %.1f s, surrogate %.3f s, speedup %.0fx -> %s\n", id.c_str(),
              t.voxels, t.mcmc_seconds, t.surrogate_seconds, t.speedup(), paths.timing().c_str());
}

void cmd_render(const RunConfig& cfg, const Paths& paths) {
  const PhantomDataset ds = io::read_dataset(paths.dataset());
  std::vector<std::string> ids;
  for (const std::string& id : ids_of(ds))
    if (fs::exists(paths.predictions() / io::map_filename(id))) ids.push_back(id);
  if (ids.empty())
    fail(ErrorKind::MissingArtifact, "no prediction maps in " + paths.predictions().string());
  const auto targets = io::read_maps(paths.labels(), ids);
  const auto preds = io::read_maps(paths.predictions(), ids);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    const fs::path file = paths.render() / (ids[i] + ".ppm");
    io::write_image(io::render_pair(targets[i], preds[i], cfg.render), file);
    std::printf("%s: target | prediction -> %s\n", ids[i].c_str(), file.c_str());
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Myocardial blood flow quantification with an MCMC-trained CNN surrogate"};
  app.require_subcommand(1);
  app.fallthrough();
  app.allow_extras();

  std::string config_file;
  std::optional<std::uint64_t> seed;
  std::optional<int> workers;
  std::optional<std::string> out;
  app.add_option("--config", config_file, "JSON run configuration")->check(CLI::ExistingFile);
  app.add_option("--seed", seed, "master seed");
  app.add_option("--workers", workers, "worker threads");
  app.add_option("--out", out, "output directory");

  std::optional<std::string> method;
  bool predict_all = false;
  std::string patient;
  std::vector<CLI::App*> subs;
  auto sub = [&](const char* name, const char* help) {
    CLI::App* s = app.add_subcommand(name, help);
    s->allow_extras();
    subs.push_back(s);
    return s;
  };
  sub("simulate", "generate the phantom suite");
  sub("label", "label every voxel with MCMC (or least squares)")
      ->add_option("--method", method, "mcmc or nlls");
  sub("fit", "least-squares flow maps");
  sub("train", "train the surrogate on one split");
  sub("predict", "surrogate maps for the split's test patients")
      ->add_flag("--all", predict_all, "predict every patient");
  sub("crossval", "cross-validated training and evaluation");
  sub("benchmark", "time MCMC against the surrogate on one patient")
      ->add_option("--patient", patient, "patient id");
  sub("render", "side-by-side target and prediction images");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 1;
  }

  try {
    std::vector<std::string> extras = app.remaining();
    for (CLI::App* s : subs)
      if (s->parsed()) {
        const auto more = s->remaining();
        extras.insert(extras.end(), more.begin(), more.end());
      }
    std::vector<Override> overrides = parse_overrides(extras);
    if (seed) overrides.emplace_back("seed", std::to_string(*seed));
    if (workers) overrides.emplace_back("workers", std::to_string(*workers));
    if (out) overrides.emplace_back("out", *out);
    if (method) overrides.emplace_back("label.method", *method);

    const json file = config_file.empty() ? json() : read_json(config_file);
    const RunConfig cfg = load_config(file, overrides);
    const Paths paths{cfg.out};

    const std::string name = app.get_subcommands().front()->get_name();
    if (name == "simulate") cmd_simulate(cfg, paths);
    if (name == "label") cmd_label(cfg, paths);
    if (name == "fit") cmd_fit(cfg, paths);
    if (name == "train") cmd_train(cfg, paths);
    if (name == "predict") cmd_predict(cfg, paths, predict_all);
    if (name == "crossval") cmd_crossval(cfg, paths);
    if (name == "benchmark") cmd_benchmark(cfg, paths, patient);
    if (name == "render") cmd_render(cfg, paths);
    io::write_text(paths.root / "config.json", to_json(cfg).dump(2) + "\n");
    return 0;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << std::endl;
    return e.is_validation() ? 1 : 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << std::endl;
    return 2;
  }
}
