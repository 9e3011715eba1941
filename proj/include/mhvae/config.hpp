#pragma once

#include <string>
#include <vector>

#include "mhvae/trainer.hpp"

namespace mhvae {

struct RunConfig {
  TrainConfig train;
  std::string test_manifest;  // optional
};

/// Parses the JSON run configuration. Unknown keys are rejected;
/// `overrides` are dotted-path assignments like "train.epochs=2";
/// `ablation` is "", "mvae" (single-level hierarchy) or "no-gan".
RunConfig load_run_config(const std::string& path, const std::vector<std::string>& overrides = {},
                          const std::string& ablation = "");

/// Same, from a JSON string (used by tests).
RunConfig parse_run_config(const std::string& text, const std::vector<std::string>& overrides = {},
                           const std::string& ablation = "");

/// A complete default configuration document, serialized with 2-space
/// indentation (the `init-config` starting point).
std::string default_run_config_json();

}  // namespace mhvae
