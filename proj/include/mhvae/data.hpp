#pragma once

#include <torch/torch.h>

#include <cstdint>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "mhvae/png_io.hpp"

namespace mhvae {

// ---------------------------------------------------------------------------
// Manifest

struct DatasetManifest {
  int64_t version = 1;
  int64_t height = 0;
  int64_t width = 0;
  std::vector<std::string> modalities;
  std::string split = "train";
  uint64_t seed = 0;
  struct Sample {
    std::string id;
    std::vector<std::string> files;  // one relative path per modality
  };
  std::vector<Sample> samples;
};

DatasetManifest load_manifest(const std::string& path);
void save_manifest(const DatasetManifest& manifest, const std::string& path);

/// Checks that every referenced file exists, decodes to the declared
/// geometry, and that sample ids are unique. `root` is the dataset
/// directory containing the manifest.
void validate_dataset(const DatasetManifest& manifest, const std::string& root);

// ---------------------------------------------------------------------------
// Normalization: stored 16-bit intensities <-> model values in [-1, 1]

torch::Tensor normalize_u16(const torch::Tensor& stored);
torch::Tensor denormalize_to_u16(const torch::Tensor& model_values);
double normalize_value(double stored);
int64_t denormalize_value(double model_value);

// ---------------------------------------------------------------------------
// Synthetic paired scenes

struct SceneRegion {
  double cx = 0, cy = 0;        // center, pixels
  double rx = 0, ry = 0;        // radii, pixels
  double angle = 0;             // rotation, radians
  double intensity = 0;         // base tissue intensity in [0, 1]
  bool lesion = false;
  double wobble_amp3 = 0, wobble_phase3 = 0;  // boundary perturbation harmonics
  double wobble_amp5 = 0, wobble_phase5 = 0;
};

struct Scene {
  int64_t height = 0;
  int64_t width = 0;
  std::vector<SceneRegion> regions;  // painted in order, later wins
};

Scene make_scene(std::mt19937_64& rng, int64_t height, int64_t width);

/// Per-pixel region ids: 0 is background, otherwise index+1 of the owning
/// region in paint order.
std::vector<int32_t> region_ids(const Scene& scene);

/// Renders the co-registered pair: modality A is the smooth, mildly
/// blurred tissue map; modality B is edge-enhanced with multiplicative
/// speckle and a radial falloff.
std::pair<Image16, Image16> render_modalities(const Scene& scene, std::mt19937_64& rng);

struct SyntheticOptions {
  int64_t count = 512;
  uint64_t seed = 7;
  int64_t height = 64;
  int64_t width = 64;
  std::string split = "train";
};

/// Writes `count` paired samples plus manifest.json into `out_dir`.
DatasetManifest generate_synthetic(const SyntheticOptions& options, const std::string& out_dir);

// ---------------------------------------------------------------------------
// Loading and batch iteration

struct LoadedDataset {
  DatasetManifest manifest;
  std::string root;
  std::vector<torch::Tensor> images;   // per modality [N,1,H,W] float32 in [-1,1]
  std::vector<torch::Tensor> stored;   // per modality [N,1,H,W] int32 (as on disk)

  int64_t size() const { return static_cast<int64_t>(manifest.samples.size()); }
  int64_t num_modalities() const { return static_cast<int64_t>(manifest.modalities.size()); }
};

LoadedDataset load_dataset(const std::string& manifest_path);

/// Index batches for one epoch: a deterministic permutation of all samples
/// keyed by (shuffle_seed, epoch), chunked into batch_size groups with the
/// final partial batch kept.
std::vector<std::vector<int64_t>> epoch_batches(int64_t num_samples, int64_t batch_size,
                                                uint64_t shuffle_seed, int64_t epoch);

/// Per-modality [b,1,H,W] tensors for the given sample indices.
std::vector<torch::Tensor> gather_batch(const LoadedDataset& dataset,
                                        const std::vector<int64_t>& indices);

}  // namespace mhvae
