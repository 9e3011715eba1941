#include "support/micro_model.hpp"

#include <cmath>

#include "mhvae/gaussian.hpp"

namespace mhvae::testing {

LinearMicroModel::LinearMicroModel(int64_t num_modalities, int64_t pixels, int64_t latent_dim,
                                   uint64_t seed)
    : pixels_(pixels), latent_dim_(latent_dim) {
  spec_.num_levels = 1;
  spec_.spatial = {{1, 1}};
  spec_.channels = {latent_dim};

  auto gen = at::make_generator<at::CPUGeneratorImpl>(seed);
  auto opts = torch::TensorOptions().dtype(torch::kFloat64);
  for (int64_t m = 0; m < num_modalities; ++m) {
    auto tag = std::to_string(m);
    expert_weight.push_back(register_parameter(
        "expert_weight_" + tag, 0.5 * torch::randn({latent_dim, pixels}, gen, opts)));
    expert_bias.push_back(register_parameter("expert_bias_" + tag,
                                             0.2 * torch::randn({latent_dim}, gen, opts)));
    expert_log_var.push_back(register_parameter(
        "expert_log_var_" + tag, 0.3 * torch::randn({latent_dim}, gen, opts)));
    dec_weight.push_back(register_parameter("dec_weight_" + tag,
                                            0.5 * torch::randn({pixels, latent_dim}, gen, opts)));
    dec_bias.push_back(
        register_parameter("dec_bias_" + tag, 0.2 * torch::randn({pixels}, gen, opts)));
  }
}

LatentState LinearMicroModel::infer(const std::vector<torch::Tensor>& images,
                                    const Subset& subset, NoiseSource& noise,
                                    int64_t batch_hint) {
  int64_t batch = batch_hint > 0 ? batch_hint : 1;
  for (int64_t m : subset) {
    TORCH_CHECK(images[m].defined(), "micro model: missing image for modality ", m);
    batch = images[m].size(0);
  }
  auto opts = torch::TensorOptions().dtype(torch::kFloat64);

  DiagGaussian prior = DiagGaussian::standard({batch, latent_dim_, 1, 1}, opts);
  std::vector<DiagGaussian> experts;
  for (int64_t m : subset) {
    auto flat = images[m].reshape({batch, pixels_});
    auto mean = flat.matmul(expert_weight[m].t()) + expert_bias[m];
    auto log_var = expert_log_var[m].unsqueeze(0).expand({batch, latent_dim_});
    experts.emplace_back(mean.reshape({batch, latent_dim_, 1, 1}),
                         log_var.reshape({batch, latent_dim_, 1, 1}));
  }
  DiagGaussian posterior = poe_fuse(prior, experts);
  auto z = sample(posterior, noise.draw(posterior.shape(), opts));

  LatentState state;
  state.levels.push_back({prior, posterior, z});
  state.final_context = z;
  return state;
}

std::vector<torch::Tensor> LinearMicroModel::decode(const LatentState& state) {
  auto z = state.levels[0].sample.reshape({state.final_context.size(0), latent_dim_});
  std::vector<torch::Tensor> out;
  for (size_t m = 0; m < dec_weight.size(); ++m) {
    auto x = z.matmul(dec_weight[m].t()) + dec_bias[m];
    out.push_back(x.reshape({z.size(0), 1, 1, pixels_}));
  }
  return out;
}

double analytic_subset_elbo(const LinearMicroModel& model,
                            const std::vector<std::vector<double>>& images,
                            const Subset& subset, double sigma) {
  int64_t K = model.latent_dim();
  int64_t P = model.pixels();
  int64_t M = model.num_modalities();

  // Fused posterior moments: precisions add over the prior and experts.
  std::vector<double> post_prec(K, 1.0), weighted(K, 0.0);
  for (int64_t m : subset) {
    auto w = model.expert_weight[m].accessor<double, 2>();
    auto b = model.expert_bias[m].accessor<double, 1>();
    auto lv = model.expert_log_var[m].accessor<double, 1>();
    for (int64_t k = 0; k < K; ++k) {
      double mean = b[k];
      for (int64_t p = 0; p < P; ++p) mean += w[k][p] * images[m][p];
      double prec = std::exp(-lv[k]);
      post_prec[k] += prec;
      weighted[k] += prec * mean;
    }
  }
  std::vector<double> mu(K), var(K);
  for (int64_t k = 0; k < K; ++k) {
    var[k] = 1.0 / post_prec[k];
    mu[k] = weighted[k] * var[k];
  }

  // Expected log-likelihood per modality: the Gaussian log-density at the
  // posterior-mean prediction minus the variance carried through the
  // linear decoder.
  double elbo = 0;
  double sigma2 = sigma * sigma;
  for (int64_t m = 0; m < M; ++m) {
    auto w = model.dec_weight[m].accessor<double, 2>();
    auto b = model.dec_bias[m].accessor<double, 1>();
    for (int64_t p = 0; p < P; ++p) {
      double pred = b[p];
      double carried = 0;
      for (int64_t k = 0; k < K; ++k) {
        pred += w[p][k] * mu[k];
        carried += w[p][k] * w[p][k] * var[k];
      }
      double resid = images[m][p] - pred;
      elbo += -0.5 * std::log(2.0 * M_PI * sigma2) - (resid * resid + carried) / (2.0 * sigma2);
    }
  }

  // Divergence from the standard prior.
  for (int64_t k = 0; k < K; ++k) {
    elbo -= 0.5 * (var[k] + mu[k] * mu[k] - 1.0 - std::log(var[k]));
  }
  return elbo;
}

}  // namespace mhvae::testing
