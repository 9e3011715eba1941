#include "mhvae/objective.hpp"

#include <cmath>

namespace mhvae {

namespace {

constexpr double kTwoPi = 6.283185307179586;

SubsetLossEntry evaluate_pass(const std::vector<torch::Tensor>& batch, const Subset& subset,
                              const SubsetPass& pass, GenerativeModel& model,
                              const LossWeights& weights, double epoch_fraction) {
  int64_t M = model.num_modalities();
  int64_t L = model.hierarchy().num_levels;
  auto klw = weights.resolved_kl_weights(L);
  double batch_size = static_cast<double>(batch[0].size(0));

  SubsetLossEntry entry;
  entry.subset = subset;

  torch::Tensor total;
  for (int64_t m = 0; m < M; ++m) {
    torch::Tensor term;
    if (weights.recon == ReconLoss::L1) {
      term = (pass.decoded[m] - batch[m]).abs().mean();
      entry.recon.push_back(term.item<double>());
      term = weights.lambda_l1 * term;
    } else {
      double sigma2 = weights.decoder_sigma * weights.decoder_sigma;
      auto diff = pass.decoded[m] - batch[m];
      term = 0.5 * (diff * diff / sigma2 + std::log(kTwoPi * sigma2)).sum() / batch_size;
      entry.recon.push_back(term.item<double>());
    }
    total = total.defined() ? total + term : term;
  }

  for (int64_t l = 0; l < L; ++l) {
    auto kl = kl_divergence(pass.latents.levels[l].posterior, pass.latents.levels[l].prior) /
              batch_size;
    entry.kl.push_back(kl.item<double>());
    total = total + klw[l] * kl;
  }

  bool gan_active = weights.lambda_gan > 0.0 &&
                    epoch_fraction >= weights.gan_warmup_fraction &&
                    model.has_discriminators();
  if (gan_active) {
    torch::Tensor g;
    for (int64_t m = 0; m < M; ++m) {
      auto logits = model.discriminate(m, pass.decoded[m]);
      auto term = torch::binary_cross_entropy_with_logits(logits, torch::ones_like(logits));
      g = g.defined() ? g + term : term;
    }
    entry.gan = g.item<double>();
    total = total + weights.lambda_gan * g;
  }

  entry.total_tensor = total;
  entry.total = total.item<double>();
  entry.decoded_detached.reserve(M);
  for (int64_t m = 0; m < M; ++m) {
    entry.decoded_detached.push_back(pass.decoded[m].detach());
  }
  return entry;
}

}  // namespace

std::vector<double> LossWeights::resolved_kl_weights(int64_t num_levels) const {
  if (kl_weights.empty()) return std::vector<double>(num_levels, 1.0);
  TORCH_CHECK(static_cast<int64_t>(kl_weights.size()) == num_levels,
              "kl_weights must have one entry per level (", num_levels, "), got ",
              kl_weights.size());
  return kl_weights;
}

SubsetLossEntry subset_loss(const std::vector<torch::Tensor>& batch, const Subset& subset,
                            GenerativeModel& model, const LossWeights& weights,
                            double epoch_fraction, NoiseSource& noise) {
  TORCH_CHECK(!subset.empty(), "subset_loss: empty modality subset");
  TORCH_CHECK(static_cast<int64_t>(batch.size()) == model.num_modalities(),
              "subset_loss: batch must contain every modality");
  auto passes = model.run_subsets(batch, {subset}, noise);
  return evaluate_pass(batch, subset, passes[0], model, weights, epoch_fraction);
}

LossReport total_loss(const std::vector<torch::Tensor>& batch, GenerativeModel& model,
                      const LossWeights& weights, double epoch_fraction, NoiseSource& noise) {
  TORCH_CHECK(static_cast<int64_t>(batch.size()) == model.num_modalities(),
              "total_loss: batch must contain every modality");
  auto subsets = enumerate_subsets(model.num_modalities());
  if (weights.sample_single_subset && model.num_modalities() > 3) {
    TORCH_CHECK(noise.stochastic(), "subset sampling requires a stochastic noise source");
    auto idx = torch::randint(static_cast<int64_t>(subsets.size()), {1}, noise.generator(),
                              torch::TensorOptions().dtype(torch::kLong))
                   .item<int64_t>();
    subsets = {subsets[idx]};
  }

  auto passes = model.run_subsets(batch, subsets, noise);
  LossReport report;
  torch::Tensor sum;
  for (size_t s = 0; s < subsets.size(); ++s) {
    auto entry = evaluate_pass(batch, subsets[s], passes[s], model, weights, epoch_fraction);
    sum = sum.defined() ? sum + entry.total_tensor : entry.total_tensor;
    report.subsets.push_back(std::move(entry));
  }
  report.total = sum / static_cast<double>(subsets.size());
  report.total_value = report.total.item<double>();
  return report;
}

torch::Tensor discriminator_loss(const std::vector<torch::Tensor>& real,
                                 const std::vector<torch::Tensor>& fake,
                                 GenerativeModel& model) {
  TORCH_CHECK(real.size() == fake.size(), "discriminator_loss: modality count mismatch");
  torch::Tensor loss;
  for (size_t m = 0; m < real.size(); ++m) {
    TORCH_CHECK(real[m].sizes() == fake[m].sizes(), "discriminator_loss: shape mismatch at ", m);
    TORCH_CHECK(!fake[m].requires_grad(), "discriminator_loss: fakes must be detached");
    auto real_logits = model.discriminate(static_cast<int64_t>(m), real[m]);
    auto fake_logits = model.discriminate(static_cast<int64_t>(m), fake[m]);
    auto term = torch::binary_cross_entropy_with_logits(real_logits, torch::ones_like(real_logits)) +
                torch::binary_cross_entropy_with_logits(fake_logits, torch::zeros_like(fake_logits));
    loss = loss.defined() ? loss + term : term;
  }
  return loss;
}

}  // namespace mhvae
