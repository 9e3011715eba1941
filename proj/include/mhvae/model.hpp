#pragma once

#include <torch/torch.h>

#include <vector>

#include "mhvae/hierarchy.hpp"

namespace mhvae {

/// One subset's inference + decoding result.
struct SubsetPass {
  LatentState latents;
  std::vector<torch::Tensor> decoded;  // per modality, values in [-1, 1]
};

/// What the objective needs from a generative model. Implemented by the
/// convolutional model and by the linear micro-model used in tests.
class GenerativeModel {
 public:
  virtual ~GenerativeModel() = default;

  virtual int64_t num_modalities() const = 0;
  virtual const HierarchySpec& hierarchy() const = 0;

  /// Subset-conditional inference. `images` has one entry per modality;
  /// entries outside `subset` may be undefined. An empty subset is
  /// unconditional generation (`batch_hint` sizes the draw when no image
  /// is given).
  virtual LatentState infer(const std::vector<torch::Tensor>& images, const Subset& subset,
                            NoiseSource& noise, int64_t batch_hint = -1) = 0;

  /// Decode every modality from one latent state.
  virtual std::vector<torch::Tensor> decode(const LatentState& state) = 0;

  virtual torch::Tensor discriminate(int64_t modality, const torch::Tensor& image);
  virtual bool has_discriminators() const { return false; }

  /// Evaluate several subsets against one batch. The base implementation
  /// loops infer + decode per subset; models may batch it.
  virtual std::vector<SubsetPass> run_subsets(const std::vector<torch::Tensor>& images,
                                              const std::vector<Subset>& subsets,
                                              NoiseSource& noise);
};

}  // namespace mhvae
