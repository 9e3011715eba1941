#include "mhvae/networks.hpp"
#include "mhvae/objective.hpp"

// doctest last: its assertion macros must win over the c10 logging macros
#undef CHECK
#include <doctest.h>

using namespace mhvae;

namespace {

ArchOptions tiny_arch(int64_t image_size) {
  ArchOptions arch;
  arch.image_size = image_size;
  arch.base_width = 8;
  arch.max_width = 32;
  arch.decoder_channels = 8;
  arch.decoder_blocks = 5;
  arch.disc_channels = 8;
  return arch;
}

MhvaeModel tiny_model(int64_t levels, int64_t image_size, int64_t modalities = 2,
                      bool discs = true) {
  torch::manual_seed(1234);
  auto spec = HierarchySpec::ladder(levels, 32, 4);
  return MhvaeModel(spec, tiny_arch(image_size), modalities, discs);
}

torch::Tensor random_image(int64_t batch, int64_t size, uint64_t seed) {
  auto gen = at::make_generator<at::CPUGeneratorImpl>(seed);
  return torch::rand({batch, 1, size, size}, gen, torch::kFloat32) * 2.0 - 1.0;
}

}  // namespace

TEST_CASE("default_widths ramps from base to cap, coarsest first") {
  auto w = default_widths(7, 12, 96);
  CHECK(w == std::vector<int64_t>{96, 64, 48, 32, 24, 16, 12});
  CHECK(default_widths(1, 8, 64) == std::vector<int64_t>{8});
}

TEST_CASE("encoder pyramid matches the ladder extents") {
  torch::manual_seed(7);
  auto spec = HierarchySpec::ladder(7, 256, 8);
  ArchOptions arch;
  arch.image_size = 64;
  ModalityEncoder enc(spec, arch);

  auto pyramid = enc(random_image(2, 64, 3));
  REQUIRE(pyramid.size() == 7);
  for (int64_t l = 0; l < 7; ++l) {
    CHECK(pyramid[l].size(2) == spec.spatial[l][0]);
    CHECK(pyramid[l].size(3) == spec.spatial[l][1]);
    CHECK(torch::isfinite(pyramid[l]).all().item<bool>());
  }
}

TEST_CASE("encoder: determinism, finiteness on constants, input contracts") {
  torch::manual_seed(7);
  auto spec = HierarchySpec::ladder(3, 16, 4);
  ArchOptions arch = tiny_arch(16);
  ModalityEncoder enc(spec, arch);
  enc->eval();
  torch::NoGradGuard ng;

  auto zero = torch::zeros({1, 1, 16, 16});
  auto p1 = enc(zero);
  for (auto& f : p1) CHECK(torch::isfinite(f).all().item<bool>());

  auto x = random_image(2, 16, 9);
  auto a = enc(x);
  auto b = enc(x);
  for (size_t l = 0; l < a.size(); ++l) CHECK(torch::equal(a[l], b[l]));

  CHECK_THROWS_AS(enc(torch::zeros({1, 1, 8, 8})), c10::Error);
  CHECK_THROWS_AS(enc(torch::full({1, 1, 16, 16}, 3.0f)), c10::Error);
}

TEST_CASE("decode: shapes, range bound, determinism") {
  auto model = tiny_model(3, 16);
  model->eval();
  torch::NoGradGuard ng;
  std::vector<torch::Tensor> images = {random_image(2, 16, 1), random_image(2, 16, 2)};

  auto noise = NoiseSource::zero();
  auto state = model->infer(images, {0, 1}, noise);
  auto out = model->decode(state);
  REQUIRE(out.size() == 2);
  for (auto& img : out) {
    CHECK(img.sizes() == torch::IntArrayRef({2, 1, 16, 16}));
    CHECK(img.abs().max().item<double>() <= 1.0);
  }
  auto again = model->decode(state);
  CHECK(torch::equal(out[0], again[0]));

  LatentState bad = state;
  bad.levels[0].sample = torch::zeros({2, 99, 1, 1});
  CHECK_THROWS_AS(model->decode(bad), c10::Error);
}

TEST_CASE("discriminator: logit grid is strictly coarser than the input") {
  auto model = tiny_model(3, 16);
  auto logits = model->discriminate(0, random_image(2, 16, 4));
  CHECK(logits.size(1) == 1);
  CHECK(logits.size(2) < 16);
  CHECK(logits.size(2) == 2);  // three stride-2 stages from 16
  CHECK(torch::isfinite(logits).all().item<bool>());
  CHECK_THROWS_AS(model->discriminate(0, torch::zeros({1, 1, 8, 8})), c10::Error);

  torch::manual_seed(7);
  auto spec64 = HierarchySpec::ladder(7, 64, 8);
  MhvaeModel big(spec64, tiny_arch(64), 1, true);
  CHECK(big->discriminate(0, random_image(1, 64, 5)).size(2) == 8);
}

TEST_CASE("shape round-trip across hierarchy/image-size combinations") {
  struct Combo {
    int64_t levels, size;
  };
  for (auto combo : {Combo{1, 16}, Combo{3, 16}, Combo{5, 32}, Combo{7, 64}}) {
    auto model = tiny_model(combo.levels, combo.size, 2, false);
    torch::NoGradGuard ng;
    std::vector<torch::Tensor> images = {random_image(1, combo.size, 11),
                                         random_image(1, combo.size, 12)};
    auto noise = NoiseSource::seeded(3);
    auto state = model->infer(images, {0, 1}, noise);
    auto out = model->decode(state);
    CHECK(out[0].sizes() == images[0].sizes());
    CHECK(out[1].sizes() == images[1].sizes());
  }
}

TEST_CASE("empty mask on a fresh model: posteriors equal priors, coarse stats standard") {
  auto model = tiny_model(2, 4);
  torch::NoGradGuard ng;

  auto noise = NoiseSource::seeded(17);
  auto state = model->infer({}, {}, noise, /*batch_hint=*/10000);
  for (auto& level : state.levels) {
    CHECK(torch::equal(level.posterior.mean, level.prior.mean));
    CHECK(torch::equal(level.posterior.log_var, level.prior.log_var));
  }
  // Coarsest draws are straight N(0, I): empirical moments within 5 SE.
  auto z = state.levels[0].sample.to(torch::kFloat64);
  double n = static_cast<double>(z.numel());
  double mean = z.mean().item<double>();
  double var = z.var(false).item<double>();
  CHECK(std::abs(mean) < 5.0 / std::sqrt(n));
  CHECK(std::abs(var - 1.0) < 5.0 * std::sqrt(2.0 / n));
}

TEST_CASE("masking an extra modality never raises posterior variance (real heads)") {
  auto model = tiny_model(3, 16);
  torch::NoGradGuard ng;
  std::vector<torch::Tensor> images = {random_image(2, 16, 21), random_image(2, 16, 22)};

  auto na = NoiseSource::zero();
  auto single = model->infer(images, {0}, na);
  auto nb = NoiseSource::zero();
  auto both = model->infer(images, {0, 1}, nb);
  for (int64_t l = 0; l < 3; ++l) {
    auto vs = single.levels[l].posterior.variance();
    auto vb = both.levels[l].posterior.variance();
    CHECK((vb <= vs * (1 + 1e-6)).all().item<bool>());
  }
}

TEST_CASE("tiled subset evaluation matches the per-subset path") {
  auto model = tiny_model(3, 16);
  model->eval();
  torch::NoGradGuard ng;
  std::vector<torch::Tensor> images = {random_image(3, 16, 31), random_image(3, 16, 32)};
  auto subsets = enumerate_subsets(2);

  auto tiled_noise = NoiseSource::zero();
  auto tiled = model->run_subsets(images, subsets, tiled_noise);

  for (size_t s = 0; s < subsets.size(); ++s) {
    auto noise = NoiseSource::zero();
    auto state = model->infer(images, subsets[s], noise);
    auto decoded = model->decode(state);
    for (int64_t l = 0; l < 3; ++l) {
      CHECK(torch::allclose(tiled[s].latents.levels[l].posterior.mean,
                            state.levels[l].posterior.mean, 1e-4, 1e-5));
      CHECK(torch::allclose(tiled[s].latents.levels[l].posterior.log_var,
                            state.levels[l].posterior.log_var, 1e-4, 1e-5));
    }
    for (int64_t m = 0; m < 2; ++m) {
      CHECK(torch::allclose(tiled[s].decoded[m], decoded[m], 1e-4, 1e-5));
    }
  }
}

TEST_CASE("every generator parameter receives gradient from the total loss") {
  auto model = tiny_model(3, 16);
  model->train();
  std::vector<torch::Tensor> batch = {random_image(4, 16, 41), random_image(4, 16, 42)};

  LossWeights weights;
  auto noise = NoiseSource::seeded(9);
  // Past warm-up so the adversarial term also contributes.
  auto report = total_loss(batch, *model, weights, /*epoch_fraction=*/0.9, noise);
  report.total.backward();

  auto params = model->generator_parameters();
  int64_t covered = 0, total = 0;
  for (auto& p : params) {
    total += 1;
    if (p.grad().defined() && p.grad().abs().max().item<double>() > 0) covered += 1;
  }
  CHECK(static_cast<double>(covered) >= 0.99 * static_cast<double>(total));
}
