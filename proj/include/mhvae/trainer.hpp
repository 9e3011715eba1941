#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "mhvae/data.hpp"
#include "mhvae/networks.hpp"
#include "mhvae/objective.hpp"

namespace mhvae {

struct TrainConfig {
  int64_t epochs = 60;
  int64_t batch_size = 16;
  double lr_generator = 2e-4;
  double lr_discriminator = 2e-4;
  uint64_t seed = 7;
  HierarchySpec hierarchy;
  ArchOptions arch;
  LossWeights loss;
  std::string train_manifest;
  std::string out_dir;
  int64_t checkpoint_every = 20;               // in epochs
  std::vector<std::string> modalities;         // filled from the manifest
};

void validate_train_config(const TrainConfig& config);

std::string train_config_to_json(const TrainConfig& config);
TrainConfig train_config_from_json(const std::string& text);

struct TrainResult {
  std::string checkpoint_path;
  std::string loss_csv_path;
  int64_t epochs_completed = 0;
};

struct LoadedCheckpoint {
  TrainConfig config;
  MhvaeModel model{nullptr};
  int64_t epoch = 0;
  torch::Tensor noise_state;
  torch::serialize::InputArchive archive;  // for optimizer restoration
};

/// Alternating optimization of the subset-averaged objective: one
/// generator step per iteration, plus one discriminator step on detached
/// fakes once past warm-up. Writes per-epoch loss curves
/// (epoch,subset,term,value) and digest-protected checkpoints.
/// `halt_after_epochs` stops early (checkpointing) without changing the
/// schedule, as an interruption would.
TrainResult train(const TrainConfig& config, int64_t halt_after_epochs = -1);

/// Continue a run from its checkpoint for `remaining_epochs` more epochs.
/// When `expected_hierarchy` is given it must match the snapshot.
TrainResult resume(const std::string& checkpoint_path, int64_t remaining_epochs,
                   const std::optional<HierarchySpec>& expected_hierarchy = std::nullopt);

LoadedCheckpoint load_checkpoint(const std::string& path);

void save_checkpoint(const std::string& path, const TrainConfig& config, MhvaeModel& model,
                     torch::optim::Adam& gen_opt, torch::optim::Adam& disc_opt, int64_t epoch,
                     const torch::Tensor& noise_state);

/// Zero-noise synthesis of `target_modality` from the given input images
/// (modality name -> PNG path); writes a 16-bit PNG.
void synthesize(const std::string& checkpoint_path,
                const std::map<std::string, std::string>& inputs_by_modality,
                const std::string& target_modality, const std::string& out_png);

/// Unconditional generation from the prior chain; writes one PNG per
/// modality into out_dir and returns their paths.
std::vector<std::string> sample_prior(const std::string& checkpoint_path, uint64_t seed,
                                      const std::string& out_dir);

}  // namespace mhvae
