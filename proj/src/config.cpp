#include "mhvae/config.hpp"

#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "mhvae/errors.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace mhvae {

namespace {

json defaults() {
  return json{
      {"dataset", {{"train_manifest", ""}, {"test_manifest", ""}}},
      {"model",
       {{"num_levels", 7},
        {"image_size", 64},
        {"coarsest_channels", 256},
        {"channel_floor", 8},
        {"channels", json::array()},
        {"base_width", 12},
        {"max_width", 96},
        {"encoder_widths", json::array()},
        {"trunk_widths", json::array()},
        {"decoder_channels", 8},
        {"decoder_blocks", 5},
        {"disc_channels", 16},
        {"expansion", 4},
        {"se_reduction", 8}}},
      {"loss",
       {{"lambda_l1", 100.0},
        {"lambda_gan", 1.0},
        {"kl_weights", json::array()},
        {"gan_warmup_fraction", 0.8},
        {"decoder_sigma", 1.0},
        {"sample_single_subset", false}}},
      {"train",
       {{"epochs", 60},
        {"batch_size", 16},
        {"lr_generator", 2e-4},
        {"lr_discriminator", 2e-4},
        {"seed", 7},
        {"checkpoint_every", 20}}},
      {"out_dir", "runs/default"}};
}

void reject_unknown(const json& given, const json& known, const std::string& prefix) {
  for (auto it = given.begin(); it != given.end(); ++it) {
    std::string path = prefix.empty() ? it.key() : prefix + "." + it.key();
    if (!known.contains(it.key())) {
      throw ConfigError("config: unknown key '" + path + "'");
    }
    if (it->is_object()) {
      if (!known[it.key()].is_object()) {
        throw ConfigError("config: key '" + path + "' must be a scalar or list");
      }
      reject_unknown(*it, known[it.key()], path);
    }
  }
}

void merge_into(json& base, const json& given) {
  for (auto it = given.begin(); it != given.end(); ++it) {
    if (it->is_object() && base[it.key()].is_object()) {
      merge_into(base[it.key()], *it);
    } else {
      base[it.key()] = *it;
    }
  }
}

void apply_override(json& doc, const std::string& assignment) {
  auto eq = assignment.find('=');
  if (eq == std::string::npos) {
    throw ConfigError("config: override '" + assignment + "' is not of the form key=value");
  }
  std::string path = assignment.substr(0, eq);
  std::string value = assignment.substr(eq + 1);

  json* node = &doc;
  size_t start = 0;
  std::vector<std::string> parts;
  while (true) {
    auto dot = path.find('.', start);
    parts.push_back(path.substr(start, dot == std::string::npos ? dot : dot - start));
    if (dot == std::string::npos) break;
    start = dot + 1;
  }
  for (size_t i = 0; i + 1 < parts.size(); ++i) {
    if (!node->contains(parts[i]) || !(*node)[parts[i]].is_object()) {
      throw ConfigError("config: override path '" + path + "' does not exist");
    }
    node = &(*node)[parts[i]];
  }
  if (!node->contains(parts.back())) {
    throw ConfigError("config: override path '" + path + "' does not exist");
  }
  json parsed = json::parse(value, nullptr, /*allow_exceptions=*/false);
  (*node)[parts.back()] = parsed.is_discarded() ? json(value) : parsed;
}

template <typename T>
std::vector<T> list_of(const json& node, const std::string& where) {
  if (!node.is_array()) throw ConfigError("config: '" + where + "' must be a list");
  try {
    return node.get<std::vector<T>>();
  } catch (const json::exception&) {
    throw ConfigError("config: '" + where + "' has elements of the wrong type");
  }
}

RunConfig from_document(json doc, const std::string& ablation) {
  if (ablation == "mvae") {
    doc["model"]["num_levels"] = 1;
    doc["model"]["channels"] = json::array();
    // Only the coarsest level remains; keep its weight.
    auto klw = doc["loss"]["kl_weights"];
    if (klw.is_array() && klw.size() > 1) {
      doc["loss"]["kl_weights"] = json::array({klw[0]});
    }
  } else if (ablation == "no-gan") {
    doc["loss"]["lambda_gan"] = 0.0;
  } else if (!ablation.empty()) {
    throw ConfigError("config: unknown ablation '" + ablation + "' (expected mvae or no-gan)");
  }

  RunConfig rc;
  TrainConfig& c = rc.train;
  try {
    rc.test_manifest = doc["dataset"]["test_manifest"].get<std::string>();
    c.train_manifest = doc["dataset"]["train_manifest"].get<std::string>();
    c.out_dir = doc["out_dir"].get<std::string>();

    const auto& m = doc["model"];
    int64_t num_levels = m["num_levels"].get<int64_t>();
    auto channels = list_of<int64_t>(m["channels"], "model.channels");
    if (channels.empty()) {
      c.hierarchy = HierarchySpec::ladder(num_levels, m["coarsest_channels"].get<int64_t>(),
                                          m["channel_floor"].get<int64_t>());
    } else {
      c.hierarchy.num_levels = num_levels;
      c.hierarchy.channels = channels;
      int64_t extent = 1;
      for (int64_t l = 0; l < num_levels; ++l, extent *= 2) {
        c.hierarchy.spatial.push_back({extent, extent});
      }
    }
    c.arch.image_size = m["image_size"].get<int64_t>();
    c.arch.base_width = m["base_width"].get<int64_t>();
    c.arch.max_width = m["max_width"].get<int64_t>();
    c.arch.encoder_widths = list_of<int64_t>(m["encoder_widths"], "model.encoder_widths");
    c.arch.trunk_widths = list_of<int64_t>(m["trunk_widths"], "model.trunk_widths");
    c.arch.decoder_channels = m["decoder_channels"].get<int64_t>();
    c.arch.decoder_blocks = m["decoder_blocks"].get<int64_t>();
    c.arch.disc_channels = m["disc_channels"].get<int64_t>();
    c.arch.expansion = m["expansion"].get<int64_t>();
    c.arch.se_reduction = m["se_reduction"].get<int64_t>();

    const auto& w = doc["loss"];
    c.loss.lambda_l1 = w["lambda_l1"].get<double>();
    c.loss.lambda_gan = w["lambda_gan"].get<double>();
    c.loss.kl_weights = list_of<double>(w["kl_weights"], "loss.kl_weights");
    c.loss.gan_warmup_fraction = w["gan_warmup_fraction"].get<double>();
    c.loss.decoder_sigma = w["decoder_sigma"].get<double>();
    c.loss.sample_single_subset = w["sample_single_subset"].get<bool>();

    const auto& t = doc["train"];
    c.epochs = t["epochs"].get<int64_t>();
    c.batch_size = t["batch_size"].get<int64_t>();
    c.lr_generator = t["lr_generator"].get<double>();
    c.lr_discriminator = t["lr_discriminator"].get<double>();
    c.seed = t["seed"].get<uint64_t>();
    c.checkpoint_every = t["checkpoint_every"].get<int64_t>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }

  validate_train_config(c);
  if (c.hierarchy.spatial.back()[0] > c.arch.image_size) {
    throw ConfigError("config: finest latent extent exceeds image_size");
  }
  if (c.train_manifest.empty()) {
    throw ConfigError("config: dataset.train_manifest is required");
  }
  if (!fs::exists(c.train_manifest)) {
    throw ConfigError("config: train manifest not found: " + c.train_manifest);
  }
  if (!rc.test_manifest.empty() && !fs::exists(rc.test_manifest)) {
    throw ConfigError("config: test manifest not found: " + rc.test_manifest);
  }
  std::error_code ec;
  fs::create_directories(c.out_dir, ec);
  if (ec) throw ConfigError("config: cannot create out_dir " + c.out_dir + ": " + ec.message());
  return rc;
}

}  // namespace

RunConfig parse_run_config(const std::string& text, const std::vector<std::string>& overrides,
                           const std::string& ablation) {
  json given = json::parse(text, nullptr, /*allow_exceptions=*/false);
  if (given.is_discarded()) throw ConfigError("config: not valid JSON");
  json doc = defaults();
  reject_unknown(given, doc, "");
  merge_into(doc, given);
  for (const auto& o : overrides) apply_override(doc, o);
  return from_document(std::move(doc), ablation);
}

RunConfig load_run_config(const std::string& path, const std::vector<std::string>& overrides,
                          const std::string& ablation) {
  std::ifstream in(path);
  if (!in) throw ConfigError("config: cannot open " + path);
  std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return parse_run_config(text, overrides, ablation);
}

std::string default_run_config_json() { return defaults().dump(2) + "\n"; }

}  // namespace mhvae
