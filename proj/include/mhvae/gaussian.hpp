#pragma once

#include <torch/torch.h>

#include <vector>

namespace mhvae {

// log-variances entering fusion and divergence math are clamped to this
// range so that stacking many experts cannot overflow the precisions.
inline constexpr double kLogVarMin = -14.0;
inline constexpr double kLogVarMax = 14.0;

/// Factorized Normal distribution over a tensor: per-element mean and
/// log-variance of identical shape.
struct DiagGaussian {
  torch::Tensor mean;
  torch::Tensor log_var;

  DiagGaussian(torch::Tensor mean, torch::Tensor log_var);

  /// N(0, I) of the given shape.
  static DiagGaussian standard(torch::IntArrayRef shape, const torch::TensorOptions& opts);

  torch::Tensor variance() const { return log_var.exp(); }
  torch::IntArrayRef shape() const { return mean.sizes(); }
};

/// KL[q || p] for diagonal Gaussians, summed over all elements.
/// Differentiable in all four inputs. Rejects shape mismatches and
/// non-finite inputs.
torch::Tensor kl_divergence(const DiagGaussian& q, const DiagGaussian& p);

/// Product-of-experts fusion: precisions add, means precision-average.
/// With no experts the prior is returned unchanged (up to log-var clamping).
DiagGaussian poe_fuse(const DiagGaussian& prior, const std::vector<DiagGaussian>& experts);

/// Fusion with a per-expert 0/1 gate (broadcast over the expert's shape).
/// A gate of zero removes that expert from the product; all-ones matches
/// poe_fuse exactly. Used to evaluate several modality subsets in one
/// batched pass.
DiagGaussian poe_fuse_masked(const DiagGaussian& prior,
                             const std::vector<DiagGaussian>& experts,
                             const std::vector<torch::Tensor>& gates);

/// Reparameterized draw: mean + exp(log_var / 2) * noise.
torch::Tensor sample(const DiagGaussian& g, const torch::Tensor& noise);

}  // namespace mhvae
