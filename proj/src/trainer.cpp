#include "mhvae/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <mutex>
#include <sstream>

#include <json.hpp>

#include "mhvae/errors.hpp"
#include "mhvae/metrics.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace mhvae {

namespace {

constexpr char kMagic[8] = {'M', 'H', 'V', 'A', 'E', 'C', 'K', '1'};

// Model construction draws from the process-global RNG; serializing it lets
// several runs train concurrently without perturbing each other's init.
std::mutex g_model_build_mutex;
constexpr int64_t kFormatVersion = 1;

uint64_t fnv1a(const std::string& bytes) {
  uint64_t h = 1469598103934665603ull;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

std::string term_name_recon(const std::string& modality) { return "l1_" + modality; }

struct EpochAccumulator {
  // (subset label, term) -> running sum over iterations
  std::map<std::pair<std::string, std::string>, double> sums;
  int64_t iterations = 0;

  void add(const std::string& subset, const std::string& term, double v) {
    sums[{subset, term}] += v;
  }
};

void append_csv_rows(std::ofstream& csv, int64_t epoch, const EpochAccumulator& acc) {
  csv << std::setprecision(12);
  for (const auto& [key, sum] : acc.sums) {
    csv << epoch << "," << key.first << "," << key.second << ","
        << sum / std::max<int64_t>(1, acc.iterations) << "\n";
  }
  csv.flush();
}

void check_params_finite(MhvaeModel& model) {
  for (auto& p : model->parameters()) {
    TORCH_CHECK(torch::isfinite(p).all().item<bool>(),
                "checkpoint refused: non-finite model parameter");
  }
}

std::string offending_term(const LossReport& report, const std::vector<std::string>& modalities) {
  for (const auto& entry : report.subsets) {
    auto label = subset_label(entry.subset, modalities);
    for (size_t m = 0; m < entry.recon.size(); ++m) {
      if (!std::isfinite(entry.recon[m])) return term_name_recon(modalities[m]) + " in subset " + label;
    }
    for (size_t l = 0; l < entry.kl.size(); ++l) {
      if (!std::isfinite(entry.kl[l])) return "kl" + std::to_string(l) + " in subset " + label;
    }
    if (!std::isfinite(entry.gan)) return "gan in subset " + label;
  }
  return "total";
}

TrainResult run_training(const TrainConfig& config, MhvaeModel model, LoadedDataset dataset,
                         torch::optim::Adam& gen_opt, torch::optim::Adam& disc_opt,
                         NoiseSource& noise, int64_t start_epoch, int64_t end_epoch,
                         bool append_csv) {
  fs::create_directories(config.out_dir);
  std::string csv_path = (fs::path(config.out_dir) / "loss.csv").string();
  std::ofstream csv(csv_path, append_csv ? std::ios::app : std::ios::trunc);
  if (!csv) throw IoError("cannot open loss log " + csv_path);
  if (!append_csv) csv << "epoch,subset,term,value\n";

  std::string ckpt_path = (fs::path(config.out_dir) / "checkpoint.mhvae").string();
  int64_t L = config.hierarchy.num_levels;
  auto subsets = enumerate_subsets(model->num_modalities());

  model->train();
  for (int64_t epoch = start_epoch; epoch < end_epoch; ++epoch) {
    double fraction = static_cast<double>(epoch) / static_cast<double>(config.epochs);
    bool gan_active = config.loss.lambda_gan > 0.0 &&
                      fraction >= config.loss.gan_warmup_fraction && !model->discs_.empty();
    EpochAccumulator acc;

    for (const auto& batch_indices :
         epoch_batches(dataset.size(), config.batch_size, config.seed, epoch)) {
      auto batch = gather_batch(dataset, batch_indices);
      for (auto& images : batch) {
        images = images.contiguous(torch::MemoryFormat::ChannelsLast);
      }

      auto report = total_loss(batch, *model, config.loss, fraction, noise);
      if (!std::isfinite(report.total_value)) {
        throw std::runtime_error("training aborted at epoch " + std::to_string(epoch) +
                                 ": non-finite loss (" +
                                 offending_term(report, config.modalities) + ")");
      }
      gen_opt.zero_grad();
      report.total.backward();
      gen_opt.step();
      for (auto& p : model->parameters()) {
        if (!torch::isfinite(p).all().item<bool>()) {
          throw std::runtime_error("training aborted at epoch " + std::to_string(epoch) +
                                   ": non-finite parameters after the generator update");
        }
      }

      double disc_value = 0.0;
      if (gan_active) {
        torch::Tensor d_sum;
        for (const auto& entry : report.subsets) {
          auto d = discriminator_loss(batch, entry.decoded_detached, *model);
          d_sum = d_sum.defined() ? d_sum + d : d;
        }
        auto d_loss = d_sum / static_cast<double>(report.subsets.size());
        disc_value = d_loss.item<double>();
        if (!std::isfinite(disc_value)) {
          throw std::runtime_error("training aborted at epoch " + std::to_string(epoch) +
                                   ": non-finite discriminator loss");
        }
        disc_opt.zero_grad();
        d_loss.backward();
        disc_opt.step();
      }

      for (const auto& entry : report.subsets) {
        auto label = subset_label(entry.subset, config.modalities);
        for (size_t m = 0; m < entry.recon.size(); ++m) {
          acc.add(label, term_name_recon(config.modalities[m]), entry.recon[m]);
        }
        for (int64_t l = 0; l < L; ++l) {
          acc.add(label, "kl" + std::to_string(l), entry.kl[l]);
        }
        acc.add(label, "gan", entry.gan);
        acc.add(label, "total", entry.total);
      }
      acc.add("-", "disc", disc_value);
      acc.add("-", "total", report.total_value);
      acc.iterations += 1;
    }

    append_csv_rows(csv, epoch, acc);

    bool last = epoch + 1 == end_epoch;
    if (last || (config.checkpoint_every > 0 && (epoch + 1) % config.checkpoint_every == 0)) {
      save_checkpoint(ckpt_path, config, model, gen_opt, disc_opt, epoch + 1,
                      noise.generator().get_state());
    }
  }

  return {ckpt_path, csv_path, end_epoch};
}

}  // namespace

void validate_train_config(const TrainConfig& config) {
  if (config.epochs < 1) throw ConfigError("train: epochs must be >= 1");
  if (config.batch_size < 1) throw ConfigError("train: batch_size must be >= 1");
  if (config.lr_generator <= 0 || config.lr_discriminator <= 0) {
    throw ConfigError("train: learning rates must be positive");
  }
  if (config.loss.lambda_l1 < 0 || config.loss.lambda_gan < 0) {
    throw ConfigError("train: loss weights must be non-negative");
  }
  if (config.loss.gan_warmup_fraction < 0 || config.loss.gan_warmup_fraction > 1) {
    throw ConfigError("train: gan_warmup_fraction must be in [0, 1]");
  }
  try {
    validate_spec(config.hierarchy);
  } catch (const std::exception& e) {
    throw ConfigError(std::string("train: ") + e.what());
  }
  if (!config.loss.kl_weights.empty() &&
      static_cast<int64_t>(config.loss.kl_weights.size()) != config.hierarchy.num_levels) {
    throw ConfigError("train: loss.kl_weights must have one entry per hierarchy level");
  }
}

std::string train_config_to_json(const TrainConfig& c) {
  json j;
  j["epochs"] = c.epochs;
  j["batch_size"] = c.batch_size;
  j["lr_generator"] = c.lr_generator;
  j["lr_discriminator"] = c.lr_discriminator;
  j["seed"] = c.seed;
  j["checkpoint_every"] = c.checkpoint_every;
  j["train_manifest"] = c.train_manifest;
  j["out_dir"] = c.out_dir;
  j["modalities"] = c.modalities;
  json spatial = json::array();
  for (auto& s : c.hierarchy.spatial) spatial.push_back({s[0], s[1]});
  j["hierarchy"] = {{"num_levels", c.hierarchy.num_levels},
                    {"spatial", spatial},
                    {"channels", c.hierarchy.channels}};
  j["arch"] = {{"image_size", c.arch.image_size},
               {"base_width", c.arch.base_width},
               {"max_width", c.arch.max_width},
               {"encoder_widths", c.arch.encoder_widths},
               {"trunk_widths", c.arch.trunk_widths},
               {"decoder_channels", c.arch.decoder_channels},
               {"decoder_blocks", c.arch.decoder_blocks},
               {"disc_channels", c.arch.disc_channels},
               {"expansion", c.arch.expansion},
               {"se_reduction", c.arch.se_reduction}};
  j["loss"] = {{"lambda_l1", c.loss.lambda_l1},
               {"lambda_gan", c.loss.lambda_gan},
               {"kl_weights", c.loss.kl_weights},
               {"gan_warmup_fraction", c.loss.gan_warmup_fraction},
               {"decoder_sigma", c.loss.decoder_sigma},
               {"sample_single_subset", c.loss.sample_single_subset}};
  return j.dump();
}

TrainConfig train_config_from_json(const std::string& text) {
  json j = json::parse(text);
  TrainConfig c;
  c.epochs = j["epochs"].get<int64_t>();
  c.batch_size = j["batch_size"].get<int64_t>();
  c.lr_generator = j["lr_generator"].get<double>();
  c.lr_discriminator = j["lr_discriminator"].get<double>();
  c.seed = j["seed"].get<uint64_t>();
  c.checkpoint_every = j["checkpoint_every"].get<int64_t>();
  c.train_manifest = j["train_manifest"].get<std::string>();
  c.out_dir = j["out_dir"].get<std::string>();
  c.modalities = j["modalities"].get<std::vector<std::string>>();
  c.hierarchy.num_levels = j["hierarchy"]["num_levels"].get<int64_t>();
  for (auto& s : j["hierarchy"]["spatial"]) {
    c.hierarchy.spatial.push_back({s[0].get<int64_t>(), s[1].get<int64_t>()});
  }
  c.hierarchy.channels = j["hierarchy"]["channels"].get<std::vector<int64_t>>();
  const auto& a = j["arch"];
  c.arch.image_size = a["image_size"].get<int64_t>();
  c.arch.base_width = a["base_width"].get<int64_t>();
  c.arch.max_width = a["max_width"].get<int64_t>();
  c.arch.encoder_widths = a["encoder_widths"].get<std::vector<int64_t>>();
  c.arch.trunk_widths = a["trunk_widths"].get<std::vector<int64_t>>();
  c.arch.decoder_channels = a["decoder_channels"].get<int64_t>();
  c.arch.decoder_blocks = a["decoder_blocks"].get<int64_t>();
  c.arch.disc_channels = a["disc_channels"].get<int64_t>();
  c.arch.expansion = a["expansion"].get<int64_t>();
  c.arch.se_reduction = a["se_reduction"].get<int64_t>();
  const auto& w = j["loss"];
  c.loss.lambda_l1 = w["lambda_l1"].get<double>();
  c.loss.lambda_gan = w["lambda_gan"].get<double>();
  c.loss.kl_weights = w["kl_weights"].get<std::vector<double>>();
  c.loss.gan_warmup_fraction = w["gan_warmup_fraction"].get<double>();
  c.loss.decoder_sigma = w["decoder_sigma"].get<double>();
  c.loss.sample_single_subset = w["sample_single_subset"].get<bool>();
  return c;
}

void save_checkpoint(const std::string& path, const TrainConfig& config, MhvaeModel& model,
                     torch::optim::Adam& gen_opt, torch::optim::Adam& disc_opt, int64_t epoch,
                     const torch::Tensor& noise_state) {
  check_params_finite(model);

  torch::serialize::OutputArchive root;
  root.write("format_version", torch::tensor(kFormatVersion));
  root.write("epoch", torch::tensor(epoch));
  root.write("noise_state", noise_state);
  root.write("config", c10::IValue(train_config_to_json(config)));
  torch::serialize::OutputArchive model_archive;
  model->save(model_archive);
  root.write("model", model_archive);
  torch::serialize::OutputArchive g_archive, d_archive;
  gen_opt.save(g_archive);
  disc_opt.save(d_archive);
  root.write("opt_g", g_archive);
  root.write("opt_d", d_archive);

  std::ostringstream payload_stream;
  root.save_to(payload_stream);
  std::string payload = payload_stream.str();
  uint64_t digest = fnv1a(payload);

  std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write checkpoint " + tmp);
    out.write(kMagic, sizeof(kMagic));
    uint64_t len = payload.size();
    out.write(reinterpret_cast<const char*>(&len), sizeof(len));
    out.write(payload.data(), static_cast<std::streamsize>(payload.size()));
    out.write(reinterpret_cast<const char*>(&digest), sizeof(digest));
    if (!out) throw IoError("short write on checkpoint " + tmp);
  }
  fs::rename(tmp, path);
}

LoadedCheckpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path);
  char magic[sizeof(kMagic)];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
    throw IoError("checkpoint " + path + ": bad magic (not a checkpoint?)");
  }
  uint64_t len = 0;
  in.read(reinterpret_cast<char*>(&len), sizeof(len));
  std::string payload(len, '\0');
  in.read(payload.data(), static_cast<std::streamsize>(len));
  uint64_t digest = 0;
  in.read(reinterpret_cast<char*>(&digest), sizeof(digest));
  if (!in) throw IoError("checkpoint " + path + ": truncated");
  if (fnv1a(payload) != digest) {
    throw IoError("checkpoint " + path + ": digest mismatch (corrupted file)");
  }

  LoadedCheckpoint ck;
  std::istringstream payload_stream(payload);
  ck.archive.load_from(payload_stream);

  torch::Tensor version, epoch;
  ck.archive.read("format_version", version);
  if (version.item<int64_t>() != kFormatVersion) {
    throw IoError("checkpoint " + path + ": unsupported format version " +
                  std::to_string(version.item<int64_t>()));
  }
  ck.archive.read("epoch", epoch);
  ck.epoch = epoch.item<int64_t>();
  ck.archive.read("noise_state", ck.noise_state);
  c10::IValue config_json;
  ck.archive.read("config", config_json);
  ck.config = train_config_from_json(config_json.toStringRef());

  {
    std::lock_guard<std::mutex> lock(g_model_build_mutex);
    ck.model = MhvaeModel(ck.config.hierarchy, ck.config.arch,
                          static_cast<int64_t>(ck.config.modalities.size()),
                          /*with_discriminators=*/true);
  }
  torch::serialize::InputArchive model_archive;
  ck.archive.read("model", model_archive);
  ck.model->load(model_archive);
  return ck;
}

TrainResult train(const TrainConfig& config_in, int64_t halt_after_epochs) {
  TrainConfig config = config_in;
  validate_train_config(config);

  auto dataset = load_dataset(config.train_manifest);
  if (dataset.manifest.height != config.arch.image_size ||
      dataset.manifest.width != config.arch.image_size) {
    throw ConfigError("train: dataset geometry " + std::to_string(dataset.manifest.height) +
                      "x" + std::to_string(dataset.manifest.width) +
                      " does not match configured image_size " +
                      std::to_string(config.arch.image_size));
  }
  config.modalities = dataset.manifest.modalities;

  MhvaeModel model{nullptr};
  {
    std::lock_guard<std::mutex> lock(g_model_build_mutex);
    torch::manual_seed(config.seed);
    model = MhvaeModel(config.hierarchy, config.arch, dataset.num_modalities(),
                       /*with_discriminators=*/true);
  }
  model->to_channels_last();
  torch::optim::Adam gen_opt(model->generator_parameters(),
                             torch::optim::AdamOptions(config.lr_generator).betas({0.5, 0.999}));
  torch::optim::Adam disc_opt(
      model->discriminator_parameters(),
      torch::optim::AdamOptions(config.lr_discriminator).betas({0.5, 0.999}));
  auto noise = NoiseSource::seeded(config.seed + 1);

  int64_t end = halt_after_epochs > 0 ? std::min(halt_after_epochs, config.epochs)
                                      : config.epochs;
  return run_training(config, model, std::move(dataset), gen_opt, disc_opt, noise, 0, end,
                      /*append_csv=*/false);
}

TrainResult resume(const std::string& checkpoint_path, int64_t remaining_epochs,
                   const std::optional<HierarchySpec>& expected_hierarchy) {
  auto ck = load_checkpoint(checkpoint_path);
  if (expected_hierarchy && !(*expected_hierarchy == ck.config.hierarchy)) {
    throw ConfigError("resume: requested hierarchy does not match the checkpoint snapshot");
  }
  TORCH_CHECK(remaining_epochs >= 1, "resume: remaining_epochs must be >= 1");

  auto dataset = load_dataset(ck.config.train_manifest);
  TORCH_CHECK(dataset.manifest.modalities == ck.config.modalities,
              "resume: dataset modalities changed since the checkpoint");

  ck.model->to_channels_last();
  torch::optim::Adam gen_opt(
      ck.model->generator_parameters(),
      torch::optim::AdamOptions(ck.config.lr_generator).betas({0.5, 0.999}));
  torch::optim::Adam disc_opt(
      ck.model->discriminator_parameters(),
      torch::optim::AdamOptions(ck.config.lr_discriminator).betas({0.5, 0.999}));
  torch::serialize::InputArchive g_archive, d_archive;
  ck.archive.read("opt_g", g_archive);
  ck.archive.read("opt_d", d_archive);
  gen_opt.load(g_archive);
  disc_opt.load(d_archive);

  auto noise = NoiseSource::seeded(ck.config.seed + 1);
  noise.generator().set_state(ck.noise_state);

  return run_training(ck.config, ck.model, std::move(dataset), gen_opt, disc_opt, noise,
                      ck.epoch, ck.epoch + remaining_epochs, /*append_csv=*/true);
}

void synthesize(const std::string& checkpoint_path,
                const std::map<std::string, std::string>& inputs_by_modality,
                const std::string& target_modality, const std::string& out_png) {
  if (inputs_by_modality.empty()) {
    throw ConfigError("synthesize: no input images given (use the sample command for "
                      "unconditional generation)");
  }
  auto ck = load_checkpoint(checkpoint_path);
  const auto& names = ck.config.modalities;
  auto index_of = [&](const std::string& name) {
    auto it = std::find(names.begin(), names.end(), name);
    if (it == names.end()) {
      throw ConfigError("synthesize: unknown modality '" + name + "'");
    }
    return static_cast<int64_t>(it - names.begin());
  };
  int64_t target = index_of(target_modality);

  std::vector<torch::Tensor> images(names.size());
  Subset subset;
  for (const auto& [name, file] : inputs_by_modality) {
    int64_t m = index_of(name);
    auto img = read_png16(file);
    if (img.height != ck.config.arch.image_size || img.width != ck.config.arch.image_size) {
      throw ConfigError("synthesize: input " + file + " is " + std::to_string(img.height) + "x" +
                        std::to_string(img.width) + ", model expects " +
                        std::to_string(ck.config.arch.image_size));
    }
    auto stored = torch::empty({1, 1, img.height, img.width}, torch::kInt32);
    auto acc = stored.accessor<int32_t, 4>();
    for (int64_t y = 0; y < img.height; ++y) {
      for (int64_t x = 0; x < img.width; ++x) acc[0][0][y][x] = img.pixels[y * img.width + x];
    }
    images[m] = normalize_u16(stored);
    subset.push_back(m);
  }
  std::sort(subset.begin(), subset.end());

  torch::NoGradGuard no_grad;
  ck.model->eval();
  auto noise = NoiseSource::zero();
  auto state = ck.model->infer(images, subset, noise);
  auto decoded = ck.model->decode(state);
  auto u16 = denormalize_to_u16(decoded[target]);

  Image16 out_img;
  out_img.height = ck.config.arch.image_size;
  out_img.width = ck.config.arch.image_size;
  out_img.pixels.resize(out_img.height * out_img.width);
  auto acc = u16.accessor<int32_t, 4>();
  for (int64_t y = 0; y < out_img.height; ++y) {
    for (int64_t x = 0; x < out_img.width; ++x) {
      out_img.pixels[y * out_img.width + x] = static_cast<uint16_t>(acc[0][0][y][x]);
    }
  }
  if (auto parent = fs::path(out_png).parent_path(); !parent.empty()) {
    fs::create_directories(parent);
  }
  write_png16(out_png, out_img);
}

std::vector<std::string> sample_prior(const std::string& checkpoint_path, uint64_t seed,
                                      const std::string& out_dir) {
  auto ck = load_checkpoint(checkpoint_path);
  torch::NoGradGuard no_grad;
  ck.model->eval();
  auto noise = NoiseSource::seeded(seed);
  auto state = ck.model->infer({}, {}, noise, /*batch_hint=*/1);
  auto decoded = ck.model->decode(state);

  fs::create_directories(out_dir);
  std::vector<std::string> paths;
  for (size_t m = 0; m < ck.config.modalities.size(); ++m) {
    auto u16 = denormalize_to_u16(decoded[m]);
    Image16 img;
    img.height = ck.config.arch.image_size;
    img.width = ck.config.arch.image_size;
    img.pixels.resize(img.height * img.width);
    auto acc = u16.accessor<int32_t, 4>();
    for (int64_t y = 0; y < img.height; ++y) {
      for (int64_t x = 0; x < img.width; ++x) {
        img.pixels[y * img.width + x] = static_cast<uint16_t>(acc[0][0][y][x]);
      }
    }
    auto path = (fs::path(out_dir) / ("sample_" + ck.config.modalities[m] + ".png")).string();
    write_png16(path, img);
    paths.push_back(path);
  }
  return paths;
}

}  // namespace mhvae
