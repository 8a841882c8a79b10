#pragma once

// Run configuration for the command-line tool: one JSON tree whose leaves are
// addressed by dotted names ("train.batch_size", "suite.grid.n", ...).

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "mbf/cnn.hpp"
#include "mbf/mcmc.hpp"
#include "mbf/nlls.hpp"
#include "mbf/phantom.hpp"
#include "mbf/pipeline.hpp"
#include "mbf/render.hpp"

namespace mbf {

struct RunConfig {
  std::uint64_t seed = 1;
  int workers = 1;
  std::string out = "mbfq_out";
  std::string preset = "default";  // "default" or "reduced"
  SuiteOptions suite = default_suite_options();
  Prior prior{};
  McmcConfig mcmc{};
  FitConfig fit{};
  NetworkConfig network{};
  TrainConfig train{};
  SplitShape split{};
  int split_index = 0;
  std::string label_method = "mcmc";
  io::RenderOptions render{};

  // Stage configs with seeds derived from `seed` and worker counts applied.
  McmcConfig mcmc_config() const;
  FitConfig fit_config() const;
  NetworkConfig network_config() const;
  TrainConfig train_config() const;
  std::uint64_t split_seed() const;

  void validate() const;
};

using Override = std::pair<std::string, std::string>;  // dotted key, raw value

// Every key with its default for the given preset.
nlohmann::json default_config_tree(const std::string& preset = "default");

// Defaults for the preset named in `file` or `overrides` (suite.preset),
// then the file, then the overrides. Unknown keys and mistyped values throw
// Config errors naming the key.
RunConfig load_config(const nlohmann::json& file, const std::vector<Override>& overrides);

nlohmann::json to_json(const RunConfig& cfg);

}  // namespace mbf
