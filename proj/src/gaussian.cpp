#include "mhvae/gaussian.hpp"

namespace mhvae {

DiagGaussian::DiagGaussian(torch::Tensor mean_, torch::Tensor log_var_)
    : mean(std::move(mean_)), log_var(std::move(log_var_)) {
  TORCH_CHECK(mean.defined() && log_var.defined(), "DiagGaussian: undefined tensor");
  TORCH_CHECK(mean.sizes() == log_var.sizes(),
              "DiagGaussian: mean shape ", mean.sizes(), " != log_var shape ", log_var.sizes());
}

DiagGaussian DiagGaussian::standard(torch::IntArrayRef shape, const torch::TensorOptions& opts) {
  return {torch::zeros(shape, opts), torch::zeros(shape, opts)};
}

torch::Tensor kl_divergence(const DiagGaussian& q, const DiagGaussian& p) {
  TORCH_CHECK(q.shape() == p.shape(),
              "kl_divergence: shape mismatch ", q.shape(), " vs ", p.shape());
  TORCH_CHECK(torch::isfinite(q.mean).all().item<bool>() &&
                  torch::isfinite(q.log_var).all().item<bool>(),
              "kl_divergence: non-finite q");
  TORCH_CHECK(torch::isfinite(p.mean).all().item<bool>() &&
                  torch::isfinite(p.log_var).all().item<bool>(),
              "kl_divergence: non-finite p");
  auto lq = q.log_var.clamp(kLogVarMin, kLogVarMax);
  auto lp = p.log_var.clamp(kLogVarMin, kLogVarMax);
  auto diff = q.mean - p.mean;
  return 0.5 * ((lq - lp).exp() + diff * diff * (-lp).exp() - 1.0 + lp - lq).sum();
}

DiagGaussian poe_fuse(const DiagGaussian& prior, const std::vector<DiagGaussian>& experts) {
  auto prior_lv = prior.log_var.clamp(kLogVarMin, kLogVarMax);
  if (experts.empty()) {
    return {prior.mean, prior_lv};
  }
  auto precision = (-prior_lv).exp();
  auto weighted_mean = precision * prior.mean;
  for (const auto& e : experts) {
    TORCH_CHECK(e.shape() == prior.shape(),
                "poe_fuse: expert shape ", e.shape(), " != prior shape ", prior.shape());
    auto p = (-e.log_var.clamp(kLogVarMin, kLogVarMax)).exp();
    precision = precision + p;
    weighted_mean = weighted_mean + p * e.mean;
  }
  return {weighted_mean / precision, -precision.log()};
}

DiagGaussian poe_fuse_masked(const DiagGaussian& prior,
                             const std::vector<DiagGaussian>& experts,
                             const std::vector<torch::Tensor>& gates) {
  TORCH_CHECK(experts.size() == gates.size(),
              "poe_fuse_masked: ", experts.size(), " experts but ", gates.size(), " gates");
  auto prior_lv = prior.log_var.clamp(kLogVarMin, kLogVarMax);
  auto precision = (-prior_lv).exp();
  auto weighted_mean = precision * prior.mean;
  for (size_t i = 0; i < experts.size(); ++i) {
    const auto& e = experts[i];
    TORCH_CHECK(e.shape() == prior.shape(),
                "poe_fuse_masked: expert shape ", e.shape(), " != prior shape ", prior.shape());
    auto p = gates[i] * (-e.log_var.clamp(kLogVarMin, kLogVarMax)).exp();
    precision = precision + p;
    weighted_mean = weighted_mean + p * e.mean;
  }
  return {weighted_mean / precision, -precision.log()};
}

torch::Tensor sample(const DiagGaussian& g, const torch::Tensor& noise) {
  TORCH_CHECK(noise.sizes() == g.shape(),
              "sample: noise shape ", noise.sizes(), " != distribution shape ", g.shape());
  return g.mean + (0.5 * g.log_var).exp() * noise;
}

}  // namespace mhvae
