#include "mhvae/model.hpp"

namespace mhvae {

torch::Tensor GenerativeModel::discriminate(int64_t, const torch::Tensor&) {
  TORCH_CHECK(false, "this model has no discriminators");
}

std::vector<SubsetPass> GenerativeModel::run_subsets(const std::vector<torch::Tensor>& images,
                                                     const std::vector<Subset>& subsets,
                                                     NoiseSource& noise) {
  std::vector<SubsetPass> out;
  out.reserve(subsets.size());
  for (const auto& s : subsets) {
    SubsetPass pass;
    pass.latents = infer(images, s, noise);
    pass.decoded = decode(pass.latents);
    out.push_back(std::move(pass));
  }
  return out;
}

}  // namespace mhvae
