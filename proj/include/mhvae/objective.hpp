#pragma once

#include <torch/torch.h>

#include <vector>

#include "mhvae/model.hpp"

namespace mhvae {

/// Reconstruction penalty: the default pixel L1 with adversarial term, or
/// the Gaussian negative log-likelihood used by the bound-consistency
/// harness.
enum class ReconLoss { L1, GaussianNll };

struct LossWeights {
  double lambda_l1 = 100.0;
  double lambda_gan = 1.0;
  std::vector<double> kl_weights;  // one per level; empty means all ones
  double gan_warmup_fraction = 0.8;
  double decoder_sigma = 1.0;  // only enters the GaussianNll mode
  ReconLoss recon = ReconLoss::L1;
  // With more than three modalities, evaluate one uniformly drawn subset
  // per iteration instead of all of them.
  bool sample_single_subset = false;

  std::vector<double> resolved_kl_weights(int64_t num_levels) const;
};

/// Itemized loss of one subset evaluation. Scalars are detached values for
/// logging; `total_tensor` carries the graph.
struct SubsetLossEntry {
  Subset subset;
  std::vector<double> recon;  // per modality (L1 mean or NLL sum / batch)
  std::vector<double> kl;     // per level, unweighted
  double gan = 0.0;
  double total = 0.0;
  torch::Tensor total_tensor;
  std::vector<torch::Tensor> decoded_detached;
};

struct LossReport {
  std::vector<SubsetLossEntry> subsets;
  torch::Tensor total;  // mean over evaluated subsets
  double total_value = 0.0;
};

/// Loss of one subset: inference conditioned on `subset`, reconstruction
/// of every modality, per-level KL against the top-down priors, and the
/// generator's adversarial term once past warm-up.
SubsetLossEntry subset_loss(const std::vector<torch::Tensor>& batch, const Subset& subset,
                            GenerativeModel& model, const LossWeights& weights,
                            double epoch_fraction, NoiseSource& noise);

/// Mean of subset_loss over the fixed subset enumeration.
LossReport total_loss(const std::vector<torch::Tensor>& batch, GenerativeModel& model,
                      const LossWeights& weights, double epoch_fraction, NoiseSource& noise);

/// Patch-level binary cross-entropy against real=1 / fake=0, summed over
/// modalities. Fakes must already be detached.
torch::Tensor discriminator_loss(const std::vector<torch::Tensor>& real,
                                 const std::vector<torch::Tensor>& fake,
                                 GenerativeModel& model);

}  // namespace mhvae
