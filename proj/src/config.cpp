#include "mbf/config.hpp"

#include <cmath>

#include "mbf/error.hpp"
#include "mbf/seed.hpp"

namespace mbf {

using nlohmann::json;

namespace {

[[noreturn]] void config_error(const std::string& what) { fail(ErrorKind::Config, what); }

void apply_preset(RunConfig& c, const std::string& name) {
  c.preset = name;
  if (name == "default") return;
  if (name != "reduced") config_error("unknown suite preset '" + name + "'");
  c.suite = reduced_suite_options();
  c.split = SplitShape{3, 1, 1, 1};
  c.train.batch_size = 32;
  c.train.max_epochs = 300;
}

json interval(const Interval& i) { return json::array({i.lo, i.hi}); }

json branch(const std::vector<ConvSpec>& specs) {
  json a = json::array();
  for (const ConvSpec& s : specs) a.push_back(json::array({s.out_channels, s.kernel}));
  return a;
}

// Typed reads from the merged tree; any mismatch names the dotted key.
class Reader {
 public:
  explicit Reader(const json& root) : root_(root) {}

  template <typename T>
  T get(const std::string& key) const {
    try {
      return node(key).get<T>();
    } catch (const json::exception&) {
      config_error("config key '" + key + "' has the wrong type");
    }
  }

  Interval interval(const std::string& key) const {
    const json& n = node(key);
    if (!n.is_array() || n.size() != 2 || !n[0].is_number() || !n[1].is_number())
      config_error("config key '" + key + "' expects [lo, hi]");
    return {n[0].get<double>(), n[1].get<double>()};
  }

  std::vector<ConvSpec> branch(const std::string& key) const {
    const json& n = node(key);
    if (!n.is_array() || n.empty()) config_error("config key '" + key + "' expects [[channels, kernel], ...]");
    std::vector<ConvSpec> out;
    for (const json& layer : n) {
      if (!layer.is_array() || layer.size() != 2 || !layer[0].is_number_integer() ||
          !layer[1].is_number_integer())
        config_error("config key '" + key + "' expects [[channels, kernel], ...]");
      out.push_back({layer[0].get<int>(), layer[1].get<int>()});
    }
    return out;
  }

 private:
  const json& node(const std::string& key) const {
    const json* n = &root_;
    std::size_t start = 0;
    while (true) {
      const std::size_t dot = key.find('.', start);
      const std::string part = key.substr(start, dot - start);
      if (!n->is_object() || !n->contains(part)) config_error("missing config key '" + key + "'");
      n = &(*n)[part];
      if (dot == std::string::npos) return *n;
      start = dot + 1;
    }
  }

  const json& root_;
};

RunConfig from_tree(const json& t) {
  const Reader r(t);
  RunConfig c;
  c.seed = r.get<std::uint64_t>("seed");
  c.workers = r.get<int>("workers");
  c.out = r.get<std::string>("out");
  apply_preset(c, r.get<std::string>("suite.preset"));

  SuiteOptions& s = c.suite;
  s.patients = r.get<int>("suite.patients");
  s.diseased = r.get<int>("suite.diseased");
  s.width = r.get<int>("suite.width");
  s.height = r.get<int>("suite.height");
  s.noise_sigma = r.get<double>("suite.noise_sigma");
  s.base_mbf = r.interval("suite.base_mbf");
  s.mbf_variation = r.get<double>("suite.mbf_variation");
  s.severity = r.interval("suite.severity");
  s.defect_radius = r.interval("suite.defect_radius");
  s.aif_timescale = r.interval("suite.aif_timescale");
  s.aif_onset = r.interval("suite.aif_onset");
  s.grid.t0 = r.get<double>("suite.grid.t0");
  s.grid.dt = r.get<double>("suite.grid.dt");
  s.grid.n = r.get<std::size_t>("suite.grid.n");

  ParamBounds& b = c.prior.bounds;
  b.fp = r.interval("prior.fp");
  b.ps = r.interval("prior.ps");
  b.vp = r.interval("prior.vp");
  b.ve = r.interval("prior.ve");
  b.delay = r.interval("prior.delay");
  c.prior.log_sigma = r.interval("prior.log_sigma");

  c.mcmc.n_iter = r.get<int>("mcmc.n_iter");
  c.mcmc.burn_in = r.get<int>("mcmc.burn_in");
  c.mcmc.thin = r.get<int>("mcmc.thin");
  c.mcmc.target_accept = r.get<double>("mcmc.target_accept");
  c.mcmc.adapt_window = r.get<int>("mcmc.adapt_window");
  c.mcmc.init_from_nlls = r.get<bool>("mcmc.init_from_nlls");

  c.fit.max_iter = r.get<int>("fit.max_iter");
  c.fit.lambda0 = r.get<double>("fit.lambda0");
  c.fit.tol_step = r.get<double>("fit.tol_step");
  c.fit.tol_grad = r.get<double>("fit.tol_grad");
  c.fit.multi_start = r.get<bool>("fit.multi_start");

  c.network.aif_branch = r.branch("network.aif_branch");
  c.network.tissue_branch = r.branch("network.tissue_branch");
  c.network.pool = r.get<int>("network.pool");
  c.network.dense = r.get<std::vector<int>>("network.dense");

  c.train.learning_rate = r.get<double>("train.learning_rate");
  c.train.beta1 = r.get<double>("train.beta1");
  c.train.beta2 = r.get<double>("train.beta2");
  c.train.epsilon = r.get<double>("train.epsilon");
  c.train.batch_size = r.get<int>("train.batch_size");
  c.train.max_epochs = r.get<int>("train.max_epochs");
  c.train.patience = r.get<int>("train.patience");
  c.train.delay_augment = r.get<int>("train.delay_augment");

  c.split.splits = r.get<int>("split.count");
  c.split.train = r.get<int>("split.train");
  c.split.val = r.get<int>("split.val");
  c.split.test = r.get<int>("split.test");
  c.split_index = r.get<int>("split.index");

  c.label_method = r.get<std::string>("label.method");

  c.render.lo = r.get<double>("render.lo");
  c.render.hi = r.get<double>("render.hi");
  c.render.scale = r.get<int>("render.scale");
  const std::string style = r.get<std::string>("render.style");
  if (style == "colour") {
    c.render.style = io::RenderStyle::Colour;
  } else if (style == "gray") {
    c.render.style = io::RenderStyle::Gray;
  } else {
    config_error("config key 'render.style' must be colour or gray");
  }
  return c;
}

bool compatible(const json& def, const json& v) {
  if (def.is_boolean()) return v.is_boolean();
  if (def.is_number_unsigned())
    return v.is_number_unsigned() || (v.is_number_integer() && v.get<std::int64_t>() >= 0);
  if (def.is_number_integer()) return v.is_number_integer();
  if (def.is_number()) return v.is_number();
  if (def.is_string()) return v.is_string();
  if (def.is_array()) return v.is_array();
  return false;
}

json* find_leaf(json& tree, const std::string& key) {
  json* n = &tree;
  std::size_t start = 0;
  while (true) {
    const std::size_t dot = key.find('.', start);
    const std::string part = key.substr(start, dot - start);
    if (!n->is_object() || !n->contains(part)) config_error("unknown config key '" + key + "'");
    n = &(*n)[part];
    if (dot == std::string::npos) break;
    start = dot + 1;
  }
  if (n->is_object()) config_error("config key '" + key + "' is a section, not a value");
  return n;
}

void set_leaf(json& tree, const std::string& key, const json& value) {
  json* leaf = find_leaf(tree, key);
  if (!compatible(*leaf, value))
    config_error("config key '" + key + "' has the wrong type: " + value.dump());
  *leaf = value;
}

void flatten(const json& node, const std::string& prefix,
             std::vector<std::pair<std::string, json>>& out) {
  if (node.is_object() && !node.empty()) {
    for (auto it = node.begin(); it != node.end(); ++it)
      flatten(it.value(), prefix.empty() ? it.key() : prefix + "." + it.key(), out);
  } else {
    out.emplace_back(prefix, node);
  }
}

json parse_override(json& tree, const Override& o) {
  const json* leaf = find_leaf(tree, o.first);
  if (leaf->is_string()) return json(o.second);
  try {
    return json::parse(o.second);
  } catch (const json::exception&) {
    config_error("config key '" + o.first + "' has an unparsable value '" + o.second + "'");
  }
}

}  // namespace

McmcConfig RunConfig::mcmc_config() const {
  McmcConfig m = mcmc;
  m.seed = derive_seed(seed, 1);
  return m;
}

FitConfig RunConfig::fit_config() const {
  FitConfig f = fit;
  f.bounds = prior.bounds;
  return f;
}

NetworkConfig RunConfig::network_config() const {
  NetworkConfig n = network;
  n.input_length = static_cast<int>(suite.grid.n);
  n.seed = derive_seed(seed, 2);
  return n;
}

TrainConfig RunConfig::train_config() const {
  TrainConfig t = train;
  t.seed = derive_seed(seed, 3);
  t.workers = workers;
  return t;
}

std::uint64_t RunConfig::split_seed() const { return derive_seed(seed, 4); }

void RunConfig::validate() const {
  try {
    if (workers < 1) config_error("workers must be >= 1");
    if (out.empty()) config_error("out must name a directory");
    if (suite.patients < 1 || suite.diseased < 0 || suite.diseased > suite.patients)
      config_error("suite needs patients >= 1 and 0 <= diseased <= patients");
    if (suite.width < 1 || suite.height < 1) config_error("suite grid size must be positive");
    suite.grid.validate();
    prior.validate();
    mcmc_config().validate();
    fit_config().validate();
    network_config().validate();
    train_config().validate();
    if (split.splits < 1 || split.train < 1 || split.val < 1 || split.test < 1)
      config_error("split sizes must be positive");
    if (split.patients() != suite.patients)
      config_error("split sizes must add up to suite.patients");
    if (split_index < 0 || split_index >= split.splits)
      config_error("split.index out of range");
    if (label_method != "mcmc" && label_method != "nlls")
      config_error("label.method must be mcmc or nlls");
    if (!std::isfinite(render.lo) || !std::isfinite(render.hi) || render.lo >= render.hi ||
        render.scale < 1)
      config_error("render needs finite lo < hi and scale >= 1");
  } catch (const Error& e) {
    if (e.kind() == ErrorKind::Config) throw;
    config_error(std::string("invalid configuration: ") + e.what());
  }
}

json default_config_tree(const std::string& preset) {
  RunConfig c;
  apply_preset(c, preset);
  return to_json(c);
}

RunConfig load_config(const json& file, const std::vector<Override>& overrides) {
  if (!file.is_null() && !file.is_object()) config_error("config file must hold a JSON object");

  std::string preset = "default";
  if (file.is_object() && file.contains("suite") && file["suite"].is_object() &&
      file["suite"].contains("preset") && file["suite"]["preset"].is_string())
    preset = file["suite"]["preset"].get<std::string>();
  for (const Override& o : overrides)
    if (o.first == "suite.preset") preset = o.second;

  json tree = default_config_tree(preset);
  if (file.is_object()) {
    std::vector<std::pair<std::string, json>> leaves;
    flatten(file, "", leaves);
    for (const auto& [key, value] : leaves) set_leaf(tree, key, value);
  }
  for (const Override& o : overrides) set_leaf(tree, o.first, parse_override(tree, o));

  RunConfig c = from_tree(tree);
  c.validate();
  return c;
}

json to_json(const RunConfig& c) {
  const SuiteOptions& s = c.suite;
  const ParamBounds& b = c.prior.bounds;
  return {
      {"seed", c.seed},
      {"workers", c.workers},
      {"out", c.out},
      {"suite",
       {{"preset", c.preset},
        {"patients", s.patients},
        {"diseased", s.diseased},
        {"width", s.width},
        {"height", s.height},
        {"noise_sigma", s.noise_sigma},
        {"base_mbf", interval(s.base_mbf)},
        {"mbf_variation", s.mbf_variation},
        {"severity", interval(s.severity)},
        {"defect_radius", interval(s.defect_radius)},
        {"aif_timescale", interval(s.aif_timescale)},
        {"aif_onset", interval(s.aif_onset)},
        {"grid", {{"t0", s.grid.t0}, {"dt", s.grid.dt}, {"n", s.grid.n}}}}},
      {"prior",
       {{"fp", interval(b.fp)},
        {"ps", interval(b.ps)},
        {"vp", interval(b.vp)},
        {"ve", interval(b.ve)},
        {"delay", interval(b.delay)},
        {"log_sigma", interval(c.prior.log_sigma)}}},
      {"mcmc",
       {{"n_iter", c.mcmc.n_iter},
        {"burn_in", c.mcmc.burn_in},
        {"thin", c.mcmc.thin},
        {"target_accept", c.mcmc.target_accept},
        {"adapt_window", c.mcmc.adapt_window},
        {"init_from_nlls", c.mcmc.init_from_nlls}}},
      {"fit",
       {{"max_iter", c.fit.max_iter},
        {"lambda0", c.fit.lambda0},
        {"tol_step", c.fit.tol_step},
        {"tol_grad", c.fit.tol_grad},
        {"multi_start", c.fit.multi_start}}},
      {"network",
       {{"aif_branch", branch(c.network.aif_branch)},
        {"tissue_branch", branch(c.network.tissue_branch)},
        {"pool", c.network.pool},
        {"dense", c.network.dense}}},
      {"train",
       {{"learning_rate", c.train.learning_rate},
        {"beta1", c.train.beta1},
        {"beta2", c.train.beta2},
        {"epsilon", c.train.epsilon},
        {"batch_size", c.train.batch_size},
        {"max_epochs", c.train.max_epochs},
        {"patience", c.train.patience},
        {"delay_augment", c.train.delay_augment}}},
      {"split",
       {{"count", c.split.splits},
        {"train", c.split.train},
        {"val", c.split.val},
        {"test", c.split.test},
        {"index", c.split_index}}},
      {"label", {{"method", c.label_method}}},
      {"render",
       {{"lo", c.render.lo},
        {"hi", c.render.hi},
        {"scale", c.render.scale},
        {"style", c.render.style == io::RenderStyle::Gray ? "gray" : "colour"}}},
  };
}

}  // namespace mbf
