#pragma once

#include <torch/torch.h>

#include <array>
#include <cstdint>
#include <functional>
#include <optional>
#include <vector>

#include "mhvae/gaussian.hpp"

namespace mhvae {

/// Geometry of the latent ladder, listed coarsest level first. The
/// coarsest level is 1x1 and every following level exactly doubles the
/// spatial extent; channel counts never increase towards the fine end.
struct HierarchySpec {
  int64_t num_levels = 0;
  std::vector<std::array<int64_t, 2>> spatial;  // (height, width) per level
  std::vector<int64_t> channels;

  /// Standard ladder: 1x1 coarsest, doubling spatial extents, channels
  /// halved per level down to `channel_floor`.
  static HierarchySpec ladder(int64_t num_levels, int64_t coarsest_channels,
                              int64_t channel_floor);

  std::vector<int64_t> level_shape(int64_t level, int64_t batch) const {
    return {batch, channels[level], spatial[level][0], spatial[level][1]};
  }
};

/// Throws std::invalid_argument naming the first violated invariant.
void validate_spec(const HierarchySpec& spec);

bool operator==(const HierarchySpec& a, const HierarchySpec& b);

/// A modality subset: sorted 0-based modality indices, never empty unless
/// explicitly used to request unconditional generation.
using Subset = std::vector<int64_t>;

/// All 2^M - 1 non-empty subsets of {0..M-1}, ordered by size then
/// lexicographically.
std::vector<Subset> enumerate_subsets(int64_t num_modalities);

bool subset_contains(const Subset& s, int64_t modality);

/// Noise supply for reparameterized sampling: either a seeded generator or
/// the deterministic zero draw (posterior means).
class NoiseSource {
 public:
  static NoiseSource seeded(uint64_t seed);
  static NoiseSource zero();

  torch::Tensor draw(torch::IntArrayRef shape, const torch::TensorOptions& opts);
  bool stochastic() const { return stochastic_; }
  torch::Generator& generator();

 private:
  NoiseSource() = default;
  bool stochastic_ = false;
  std::optional<torch::Generator> gen_;
};

/// One realized top-down pass: per level (coarsest first) the prior, the
/// fused posterior, and the drawn sample, plus the trunk context left at
/// the finest level for image decoding.
struct LevelState {
  DiagGaussian prior;
  DiagGaussian posterior;
  torch::Tensor sample;
};

struct LatentState {
  std::vector<LevelState> levels;  // coarsest first
  torch::Tensor final_context;     // trunk state at the finest latent level
};

/// Network callbacks consumed by top_down_infer. Levels are indexed
/// top-down: 0 is the coarsest. Expert callbacks close over the encoder
/// features of their modality.
struct TopDownHooks {
  std::function<DiagGaussian(int64_t modality)> coarse_expert;
  std::function<torch::Tensor(const torch::Tensor& z_coarse)> init_context;
  std::function<torch::Tensor(int64_t level, const torch::Tensor& ctx)> advance;
  std::function<DiagGaussian(int64_t level, const torch::Tensor& ctx)> prior_head;
  std::function<DiagGaussian(int64_t level, int64_t modality, const torch::Tensor& ctx)> expert_head;
  std::function<torch::Tensor(int64_t level, const torch::Tensor& ctx, const torch::Tensor& z)> absorb;
};

/// Top-down generative/inference pass. At the coarsest level the prior is
/// N(0, I); below it each prior comes from the trunk context. The
/// posterior at every level is the product-of-experts fusion of that prior
/// with one expert per subset modality; an empty subset leaves the
/// posterior equal to the prior (unconditional generation).
LatentState top_down_infer(const HierarchySpec& spec, const TopDownHooks& hooks,
                           const Subset& subset, int64_t num_modalities,
                           int64_t batch, const torch::TensorOptions& opts,
                           NoiseSource& noise);

}  // namespace mhvae
