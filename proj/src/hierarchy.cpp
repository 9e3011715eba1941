#include "mhvae/hierarchy.hpp"

#include <ATen/CPUGeneratorImpl.h>

#include <algorithm>
#include <stdexcept>
#include <string>

namespace mhvae {

HierarchySpec HierarchySpec::ladder(int64_t num_levels, int64_t coarsest_channels,
                                    int64_t channel_floor) {
  HierarchySpec spec;
  spec.num_levels = num_levels;
  int64_t extent = 1;
  int64_t ch = coarsest_channels;
  for (int64_t l = 0; l < num_levels; ++l) {
    spec.spatial.push_back({extent, extent});
    spec.channels.push_back(ch);
    extent *= 2;
    ch = std::max(ch / 2, channel_floor);
  }
  return spec;
}

void validate_spec(const HierarchySpec& spec) {
  if (spec.num_levels < 1) {
    throw std::invalid_argument("HierarchySpec: num_levels must be >= 1, got " +
                                std::to_string(spec.num_levels));
  }
  if (static_cast<int64_t>(spec.spatial.size()) != spec.num_levels ||
      static_cast<int64_t>(spec.channels.size()) != spec.num_levels) {
    throw std::invalid_argument("HierarchySpec: spatial/channel lists must have num_levels entries");
  }
  if (spec.spatial[0][0] != 1 || spec.spatial[0][1] != 1) {
    throw std::invalid_argument("HierarchySpec: coarsest level must be 1x1, got " +
                                std::to_string(spec.spatial[0][0]) + "x" +
                                std::to_string(spec.spatial[0][1]));
  }
  for (int64_t l = 1; l < spec.num_levels; ++l) {
    if (spec.spatial[l][0] != 2 * spec.spatial[l - 1][0] ||
        spec.spatial[l][1] != 2 * spec.spatial[l - 1][1]) {
      throw std::invalid_argument(
          "HierarchySpec: non-doubling spatial extent at level " + std::to_string(l) +
          " (" + std::to_string(spec.spatial[l][0]) + "x" + std::to_string(spec.spatial[l][1]) +
          " after " + std::to_string(spec.spatial[l - 1][0]) + "x" +
          std::to_string(spec.spatial[l - 1][1]) + ")");
    }
  }
  for (int64_t l = 0; l < spec.num_levels; ++l) {
    if (spec.channels[l] < 1) {
      throw std::invalid_argument("HierarchySpec: channel count must be positive at level " +
                                  std::to_string(l));
    }
    if (l > 0 && spec.channels[l] > spec.channels[l - 1]) {
      throw std::invalid_argument(
          "HierarchySpec: channel count increases towards the fine end at level " +
          std::to_string(l));
    }
  }
}

bool operator==(const HierarchySpec& a, const HierarchySpec& b) {
  return a.num_levels == b.num_levels && a.spatial == b.spatial && a.channels == b.channels;
}

std::vector<Subset> enumerate_subsets(int64_t num_modalities) {
  TORCH_CHECK(num_modalities >= 1, "enumerate_subsets: need at least one modality");
  std::vector<Subset> out;
  for (uint64_t bits = 1; bits < (uint64_t{1} << num_modalities); ++bits) {
    Subset s;
    for (int64_t i = 0; i < num_modalities; ++i) {
      if (bits & (uint64_t{1} << i)) s.push_back(i);
    }
    out.push_back(std::move(s));
  }
  std::stable_sort(out.begin(), out.end(), [](const Subset& a, const Subset& b) {
    if (a.size() != b.size()) return a.size() < b.size();
    return a < b;
  });
  return out;
}

bool subset_contains(const Subset& s, int64_t modality) {
  return std::binary_search(s.begin(), s.end(), modality);
}

NoiseSource NoiseSource::seeded(uint64_t seed) {
  NoiseSource n;
  n.stochastic_ = true;
  n.gen_ = at::make_generator<at::CPUGeneratorImpl>(seed);
  return n;
}

NoiseSource NoiseSource::zero() {
  NoiseSource n;
  n.stochastic_ = false;
  return n;
}

torch::Tensor NoiseSource::draw(torch::IntArrayRef shape, const torch::TensorOptions& opts) {
  if (!stochastic_) {
    return torch::zeros(shape, opts);
  }
  return torch::randn(shape, *gen_, opts);
}

torch::Generator& NoiseSource::generator() {
  TORCH_CHECK(gen_.has_value(), "NoiseSource: zero-noise source has no generator");
  return *gen_;
}

LatentState top_down_infer(const HierarchySpec& spec, const TopDownHooks& hooks,
                           const Subset& subset, int64_t num_modalities,
                           int64_t batch, const torch::TensorOptions& opts,
                           NoiseSource& noise) {
  for (int64_t m : subset) {
    TORCH_CHECK(m >= 0 && m < num_modalities,
                "top_down_infer: modality index ", m, " out of range [0, ", num_modalities, ")");
  }

  LatentState state;
  state.levels.reserve(spec.num_levels);

  auto coarse_shape = spec.level_shape(0, batch);
  DiagGaussian prior = DiagGaussian::standard(coarse_shape, opts);
  std::vector<DiagGaussian> experts;
  for (int64_t m : subset) {
    auto e = hooks.coarse_expert(m);
    TORCH_CHECK(e.shape() == torch::IntArrayRef(coarse_shape),
                "top_down_infer: coarse expert for modality ", m, " has shape ", e.shape(),
                " expected ", torch::IntArrayRef(coarse_shape));
    experts.push_back(std::move(e));
  }
  DiagGaussian posterior = poe_fuse(prior, experts);
  torch::Tensor z = sample(posterior, noise.draw(posterior.shape(), opts));
  state.levels.push_back({prior, posterior, z});

  torch::Tensor ctx = hooks.init_context(z);
  for (int64_t level = 1; level < spec.num_levels; ++level) {
    ctx = hooks.advance(level, ctx);
    DiagGaussian level_prior = hooks.prior_head(level, ctx);
    auto expect = spec.level_shape(level, batch);
    TORCH_CHECK(level_prior.shape() == torch::IntArrayRef(expect),
                "top_down_infer: prior at level ", level, " has shape ", level_prior.shape(),
                " expected ", torch::IntArrayRef(expect));
    std::vector<DiagGaussian> level_experts;
    for (int64_t m : subset) {
      level_experts.push_back(hooks.expert_head(level, m, ctx));
    }
    DiagGaussian level_posterior = poe_fuse(level_prior, level_experts);
    torch::Tensor zl = sample(level_posterior, noise.draw(level_posterior.shape(), opts));
    ctx = hooks.absorb(level, ctx, zl);
    state.levels.push_back({std::move(level_prior), std::move(level_posterior), std::move(zl)});
  }

  state.final_context = ctx;
  return state;
}

}  // namespace mhvae
