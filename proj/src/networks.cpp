#include "mhvae/networks.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace mhvae {

namespace {

namespace F = torch::nn::functional;

int64_t norm_groups(int64_t channels) {
  for (int64_t g : {8, 4, 2}) {
    if (channels % g == 0) return g;
  }
  return 1;
}

int64_t log2_exact(int64_t n, const char* what) {
  TORCH_CHECK(n >= 1 && (n & (n - 1)) == 0, what, " must be a power of two, got ", n);
  int64_t r = 0;
  while ((int64_t{1} << r) < n) ++r;
  return r;
}

torch::Tensor up2(const torch::Tensor& x) {
  return F::interpolate(x, F::InterpolateFuncOptions()
                               .scale_factor(std::vector<double>{2.0, 2.0})
                               .mode(torch::kNearest));
}

torch::nn::Conv2d conv(int64_t in, int64_t out, int64_t k, int64_t stride = 1) {
  return torch::nn::Conv2d(torch::nn::Conv2dOptions(in, out, k).stride(stride).padding(k / 2));
}

std::vector<int64_t> resolve_widths(const std::vector<int64_t>& given, int64_t stages,
                                    int64_t base, int64_t cap, const char* what) {
  if (given.empty()) return default_widths(stages, base, cap);
  TORCH_CHECK(static_cast<int64_t>(given.size()) == stages,
              what, ": expected ", stages, " stage widths, got ", given.size());
  for (int64_t w : given) TORCH_CHECK(w >= 1, what, ": widths must be positive");
  return given;
}

}  // namespace

std::vector<int64_t> default_widths(int64_t stages, int64_t base, int64_t cap) {
  std::vector<int64_t> w(stages);
  for (int64_t k = 0; k < stages; ++k) {
    int64_t d = stages - 1 - k;  // distance from the finest stage
    int64_t v = (d % 2 == 0) ? base << (d / 2) : ((base * 4 + 2) / 3) << ((d - 1) / 2);
    v = std::min(v, cap);
    w[k] = std::max<int64_t>(4, (v / 4) * 4);
  }
  return w;
}

// ---------------------------------------------------------------------------
// ResidualCell

ResidualCellImpl::ResidualCellImpl(int64_t channels, int64_t expansion, int64_t se_reduction) {
  int64_t wide = channels * expansion;
  int64_t se_hidden = std::max<int64_t>(4, wide / se_reduction);
  norm = register_module("norm", torch::nn::GroupNorm(norm_groups(channels), channels));
  expand = register_module("expand", conv(channels, wide, 1));
  depthwise = register_module(
      "depthwise",
      torch::nn::Conv2d(torch::nn::Conv2dOptions(wide, wide, 3).padding(1).groups(wide)));
  se_squeeze = register_module("se_squeeze", torch::nn::Linear(wide, se_hidden));
  se_excite = register_module("se_excite", torch::nn::Linear(se_hidden, wide));
  project = register_module("project", conv(wide, channels, 1));
}

torch::Tensor ResidualCellImpl::forward(const torch::Tensor& x) {
  auto h = torch::silu(expand(norm(x)));
  h = torch::silu(depthwise(h));
  auto pooled = h.mean({2, 3});
  auto gate = torch::sigmoid(se_excite(torch::silu(se_squeeze(pooled))));
  h = h * gate.unsqueeze(-1).unsqueeze(-1);
  return x + project(h);
}

// ---------------------------------------------------------------------------
// ModalityEncoder

ModalityEncoderImpl::ModalityEncoderImpl(const HierarchySpec& spec, const ArchOptions& arch) {
  validate_spec(spec);
  levels_ = spec.num_levels;
  image_size_ = arch.image_size;
  int64_t stages = log2_exact(arch.image_size, "image_size") + 1;
  TORCH_CHECK(spec.spatial.back()[0] <= arch.image_size,
              "finest latent extent ", spec.spatial.back()[0], " exceeds image size ",
              arch.image_size);
  widths_ = resolve_widths(arch.encoder_widths, stages, arch.base_width, arch.max_width,
                           "encoder_widths");

  stem = register_module("stem", conv(1, widths_.back(), 3));
  for (int64_t j = 0; j < stages - 1; ++j) {
    // step j maps stage (stages-1-j) down to stage (stages-2-j)
    int64_t from = widths_[stages - 1 - j];
    int64_t to = widths_[stages - 2 - j];
    downs_.push_back(conv(from, to, 3, /*stride=*/2));
    cells_.emplace_back(to, arch.expansion, arch.se_reduction);
    register_module("down_" + std::to_string(j), downs_.back());
    register_module("cell_" + std::to_string(j), cells_.back());
  }
}

std::vector<torch::Tensor> ModalityEncoderImpl::forward(const torch::Tensor& image) {
  TORCH_CHECK(image.dim() == 4 && image.size(1) == 1 && image.size(2) == image_size_ &&
                  image.size(3) == image_size_,
              "encode: expected [B,1,", image_size_, ",", image_size_, "] image, got ",
              image.sizes());
  auto [lo, hi] = torch::aminmax(image);
  TORCH_CHECK(lo.item<double>() >= -1.0 - 1e-5 && hi.item<double>() <= 1.0 + 1e-5,
              "encode: image values outside [-1, 1]");

  int64_t stages = static_cast<int64_t>(widths_.size());
  std::vector<torch::Tensor> by_stage(stages);
  auto f = torch::silu(stem(image));
  by_stage[stages - 1] = f;
  for (size_t j = 0; j < downs_.size(); ++j) {
    f = cells_[j](downs_[j](f));
    by_stage[stages - 2 - j] = f;
  }
  return {by_stage.begin(), by_stage.begin() + levels_};
}

// ---------------------------------------------------------------------------
// DecoderTrunk

DecoderTrunkImpl::DecoderTrunkImpl(const HierarchySpec& spec, const ArchOptions& arch,
                                   int64_t num_modalities) {
  levels_ = spec.num_levels;
  int64_t stages = log2_exact(arch.image_size, "image_size") + 1;
  widths_ = resolve_widths(arch.trunk_widths, stages, arch.base_width, arch.max_width,
                           "trunk_widths");
  auto enc_widths = resolve_widths(arch.encoder_widths, stages, arch.base_width, arch.max_width,
                                   "encoder_widths");

  init_ = register_module("init", conv(spec.channels[0], widths_[0], 1));
  for (int64_t m = 0; m < num_modalities; ++m) {
    coarse_experts_.push_back(conv(enc_widths[0], 2 * spec.channels[0], 1));
    register_module("coarse_expert_" + std::to_string(m), coarse_experts_.back());
  }
  for (int64_t k = 1; k < stages; ++k) {
    int64_t extent = int64_t{1} << k;
    ups_.push_back(conv(widths_[k - 1], widths_[k], extent <= 16 ? 3 : 1));
    register_module("up_" + std::to_string(k), ups_.back());
  }
  for (int64_t k = 1; k < levels_; ++k) {
    priors_.push_back(conv(widths_[k], 2 * spec.channels[k], 1));
    register_module("prior_" + std::to_string(k), priors_.back());
    merges_.push_back(conv(widths_[k] + spec.channels[k], widths_[k], 1));
    register_module("merge_" + std::to_string(k), merges_.back());
    std::vector<torch::nn::Conv2d> heads;
    for (int64_t m = 0; m < num_modalities; ++m) {
      heads.push_back(conv(widths_[k] + enc_widths[k], 2 * spec.channels[k], 1));
      register_module("expert_" + std::to_string(k) + "_" + std::to_string(m), heads.back());
    }
    experts_.push_back(std::move(heads));
  }
  refine_ = register_module("refine", conv(widths_.back(), widths_.back(), 3));
}

torch::Tensor DecoderTrunkImpl::init_context(const torch::Tensor& z_coarse) {
  return torch::silu(init_(z_coarse));
}

torch::Tensor DecoderTrunkImpl::advance(int64_t level, const torch::Tensor& ctx) {
  return torch::silu(ups_[level - 1](up2(ctx)));
}

DiagGaussian DecoderTrunkImpl::prior_at(int64_t level, const torch::Tensor& ctx) {
  auto parts = priors_[level - 1](ctx).chunk(2, 1);
  return {parts[0], parts[1]};
}

DiagGaussian DecoderTrunkImpl::coarse_expert(int64_t modality, const torch::Tensor& top_feature) {
  auto parts = coarse_experts_[modality](top_feature).chunk(2, 1);
  return {parts[0], parts[1]};
}

DiagGaussian DecoderTrunkImpl::expert_at(int64_t level, int64_t modality,
                                         const torch::Tensor& feature, const torch::Tensor& ctx) {
  auto parts = experts_[level - 1][modality](torch::cat({feature, ctx}, 1)).chunk(2, 1);
  return {parts[0], parts[1]};
}

torch::Tensor DecoderTrunkImpl::absorb(int64_t level, const torch::Tensor& ctx,
                                       const torch::Tensor& z) {
  return torch::silu(merges_[level - 1](torch::cat({ctx, z}, 1)));
}

torch::Tensor DecoderTrunkImpl::to_image_resolution(const torch::Tensor& final_ctx) {
  auto ctx = final_ctx;
  for (int64_t k = levels_; k < static_cast<int64_t>(widths_.size()); ++k) {
    ctx = torch::silu(ups_[k - 1](up2(ctx)));
  }
  return ctx + refine_(ctx);
}

// ---------------------------------------------------------------------------
// ImageDecoder

ImageDecoderImpl::ImageDecoderImpl(int64_t in_channels, int64_t width, int64_t num_blocks) {
  inc = register_module("inc", conv(in_channels, width, 3));
  for (int64_t b = 0; b < num_blocks; ++b) {
    blocks_.push_back(torch::nn::Sequential(conv(width, width, 3), torch::nn::SiLU(),
                                            conv(width, width, 3)));
    register_module("block_" + std::to_string(b), blocks_.back());
  }
  out = register_module("out", conv(width, 1, 3));
}

torch::Tensor ImageDecoderImpl::forward(const torch::Tensor& x) {
  auto h = torch::silu(inc(x));
  for (auto& block : blocks_) {
    h = h + block->forward(h);
  }
  return torch::tanh(out(h));
}

// ---------------------------------------------------------------------------
// PatchDiscriminator

PatchDiscriminatorImpl::PatchDiscriminatorImpl(int64_t base) {
  c1 = register_module("c1", torch::nn::Conv2d(torch::nn::Conv2dOptions(1, base, 4).stride(2).padding(1)));
  c2 = register_module("c2", torch::nn::Conv2d(torch::nn::Conv2dOptions(base, 2 * base, 4).stride(2).padding(1)));
  n2 = register_module("n2", torch::nn::GroupNorm(norm_groups(2 * base), 2 * base));
  c3 = register_module("c3", torch::nn::Conv2d(torch::nn::Conv2dOptions(2 * base, 4 * base, 4).stride(2).padding(1)));
  n3 = register_module("n3", torch::nn::GroupNorm(norm_groups(4 * base), 4 * base));
  head = register_module("head", conv(4 * base, 1, 3));
}

torch::Tensor PatchDiscriminatorImpl::forward(const torch::Tensor& image) {
  auto h = torch::leaky_relu(c1(image), 0.2);
  h = torch::leaky_relu(n2(c2(h)), 0.2);
  h = torch::leaky_relu(n3(c3(h)), 0.2);
  return head(h);
}

// ---------------------------------------------------------------------------
// MhvaeModel

MhvaeModelImpl::MhvaeModelImpl(HierarchySpec spec, ArchOptions arch, int64_t num_modalities,
                               bool with_discriminators)
    : spec_(std::move(spec)), arch_(std::move(arch)), num_modalities_(num_modalities) {
  validate_spec(spec_);
  TORCH_CHECK(num_modalities_ >= 1, "model needs at least one modality");
  for (int64_t m = 0; m < num_modalities_; ++m) {
    encoders_.emplace_back(spec_, arch_);
    register_module("encoder_" + std::to_string(m), encoders_.back());
  }
  trunk_ = register_module("trunk", DecoderTrunk(spec_, arch_, num_modalities_));
  bool full_res_latent = spec_.spatial.back()[0] == arch_.image_size;
  int64_t dec_in = trunk_->image_width() + (full_res_latent ? spec_.channels.back() : 0);
  for (int64_t m = 0; m < num_modalities_; ++m) {
    decoders_.emplace_back(dec_in, arch_.decoder_channels, arch_.decoder_blocks);
    register_module("decoder_" + std::to_string(m), decoders_.back());
  }
  if (with_discriminators) {
    for (int64_t m = 0; m < num_modalities_; ++m) {
      discs_.emplace_back(arch_.disc_channels);
      register_module("disc_" + std::to_string(m), discs_.back());
    }
  }
}

void MhvaeModelImpl::check_image(const torch::Tensor& image) const {
  TORCH_CHECK(image.defined(), "missing image for a masked-present modality");
}

std::vector<torch::Tensor> MhvaeModelImpl::encode(int64_t modality, const torch::Tensor& image) {
  TORCH_CHECK(modality >= 0 && modality < num_modalities_, "encode: bad modality ", modality);
  return encoders_[modality](image);
}

TopDownHooks MhvaeModelImpl::make_hooks(const std::vector<std::vector<torch::Tensor>>& pyramids) {
  TopDownHooks hooks;
  hooks.coarse_expert = [this, &pyramids](int64_t m) {
    return trunk_->coarse_expert(m, pyramids[m][0]);
  };
  hooks.init_context = [this](const torch::Tensor& z) { return trunk_->init_context(z); };
  hooks.advance = [this](int64_t level, const torch::Tensor& ctx) {
    return trunk_->advance(level, ctx);
  };
  hooks.prior_head = [this](int64_t level, const torch::Tensor& ctx) {
    return trunk_->prior_at(level, ctx);
  };
  hooks.expert_head = [this, &pyramids](int64_t level, int64_t m, const torch::Tensor& ctx) {
    return trunk_->expert_at(level, m, pyramids[m][level], ctx);
  };
  hooks.absorb = [this](int64_t level, const torch::Tensor& ctx, const torch::Tensor& z) {
    return trunk_->absorb(level, ctx, z);
  };
  return hooks;
}

LatentState MhvaeModelImpl::infer(const std::vector<torch::Tensor>& images, const Subset& subset,
                                  NoiseSource& noise, int64_t batch_hint) {
  TORCH_CHECK(static_cast<int64_t>(images.size()) == num_modalities_ || subset.empty(),
              "infer: expected ", num_modalities_, " image slots, got ", images.size());
  std::vector<std::vector<torch::Tensor>> pyramids(num_modalities_);
  int64_t batch = batch_hint;
  for (int64_t m : subset) {
    TORCH_CHECK(m >= 0 && m < num_modalities_, "infer: bad modality ", m);
    check_image(images[m]);
    pyramids[m] = encode(m, images[m]);
    batch = images[m].size(0);
  }
  if (subset.empty() && batch <= 0) batch = 1;
  auto hooks = make_hooks(pyramids);
  return top_down_infer(spec_, hooks, subset, num_modalities_, batch, param_options(), noise);
}

torch::Tensor MhvaeModelImpl::decoder_input(const torch::Tensor& z_finest,
                                            const torch::Tensor& image_ctx) const {
  if (spec_.spatial.back()[0] == arch_.image_size) {
    return torch::cat({z_finest, image_ctx}, 1);
  }
  return image_ctx;
}

std::vector<torch::Tensor> MhvaeModelImpl::decode(const LatentState& state) {
  TORCH_CHECK(static_cast<int64_t>(state.levels.size()) == spec_.num_levels,
              "decode: latent state has ", state.levels.size(), " levels, spec has ",
              spec_.num_levels);
  int64_t batch = state.final_context.size(0);
  for (int64_t l = 0; l < spec_.num_levels; ++l) {
    auto expect = spec_.level_shape(l, batch);
    TORCH_CHECK(state.levels[l].sample.sizes() == torch::IntArrayRef(expect),
                "decode: sample shape ", state.levels[l].sample.sizes(), " at level ", l,
                " does not match spec shape ", torch::IntArrayRef(expect));
  }
  auto ctx = trunk_->to_image_resolution(state.final_context);
  auto input = decoder_input(state.levels.back().sample, ctx);
  std::vector<torch::Tensor> out;
  out.reserve(num_modalities_);
  for (int64_t m = 0; m < num_modalities_; ++m) {
    out.push_back(decoders_[m](input));
  }
  return out;
}

torch::Tensor MhvaeModelImpl::discriminate(int64_t modality, const torch::Tensor& image) {
  TORCH_CHECK(!discs_.empty(), "model was built without discriminators");
  TORCH_CHECK(modality >= 0 && modality < num_modalities_, "discriminate: bad modality");
  TORCH_CHECK(image.dim() == 4 && image.size(1) == 1 && image.size(2) == arch_.image_size &&
                  image.size(3) == arch_.image_size,
              "discriminate: expected [B,1,", arch_.image_size, ",", arch_.image_size,
              "] image, got ", image.sizes());
  return discs_[modality](image);
}

std::vector<SubsetPass> MhvaeModelImpl::run_subsets(const std::vector<torch::Tensor>& images,
                                                    const std::vector<Subset>& subsets,
                                                    NoiseSource& noise) {
  if (subsets.size() <= 1) {
    return GenerativeModel::run_subsets(images, subsets, noise);
  }
  int64_t S = static_cast<int64_t>(subsets.size());
  std::vector<bool> used(num_modalities_, false);
  for (const auto& s : subsets) {
    for (int64_t m : s) {
      TORCH_CHECK(m >= 0 && m < num_modalities_, "run_subsets: bad modality ", m);
      used[m] = true;
    }
  }
  int64_t batch = -1;
  for (int64_t m = 0; m < num_modalities_; ++m) {
    if (used[m]) {
      check_image(images[m]);
      batch = images[m].size(0);
    }
  }
  TORCH_CHECK(batch > 0, "run_subsets: no usable image to size the batch");
  auto opts = param_options();

  // Encode each used modality once and tile it across subsets; a 0/1 gate
  // per (subset, modality) removes absent experts from the fusion.
  std::vector<std::vector<torch::Tensor>> tiled(num_modalities_);
  std::vector<torch::Tensor> gates(num_modalities_);
  for (int64_t m = 0; m < num_modalities_; ++m) {
    if (!used[m]) continue;
    auto pyr = encode(m, images[m]);
    tiled[m].reserve(pyr.size());
    for (auto& f : pyr) tiled[m].push_back(f.repeat({S, 1, 1, 1}));
    std::vector<torch::Tensor> parts;
    parts.reserve(S);
    for (const auto& s : subsets) {
      parts.push_back(torch::full({batch, 1, 1, 1}, subset_contains(s, m) ? 1.0 : 0.0, opts));
    }
    gates[m] = torch::cat(parts, 0);
  }

  int64_t tiled_batch = S * batch;
  std::vector<LevelState> levels;
  levels.reserve(spec_.num_levels);

  DiagGaussian prior = DiagGaussian::standard(spec_.level_shape(0, tiled_batch), opts);
  std::vector<DiagGaussian> experts;
  std::vector<torch::Tensor> expert_gates;
  for (int64_t m = 0; m < num_modalities_; ++m) {
    if (!used[m]) continue;
    experts.push_back(trunk_->coarse_expert(m, tiled[m][0]));
    expert_gates.push_back(gates[m]);
  }
  DiagGaussian posterior = poe_fuse_masked(prior, experts, expert_gates);
  torch::Tensor z = sample(posterior, noise.draw(posterior.shape(), opts));
  levels.push_back({prior, posterior, z});

  auto ctx = trunk_->init_context(z);
  for (int64_t level = 1; level < spec_.num_levels; ++level) {
    ctx = trunk_->advance(level, ctx);
    DiagGaussian level_prior = trunk_->prior_at(level, ctx);
    experts.clear();
    expert_gates.clear();
    for (int64_t m = 0; m < num_modalities_; ++m) {
      if (!used[m]) continue;
      experts.push_back(trunk_->expert_at(level, m, tiled[m][level], ctx));
      expert_gates.push_back(gates[m]);
    }
    DiagGaussian level_post = poe_fuse_masked(level_prior, experts, expert_gates);
    torch::Tensor zl = sample(level_post, noise.draw(level_post.shape(), opts));
    ctx = trunk_->absorb(level, ctx, zl);
    levels.push_back({std::move(level_prior), std::move(level_post), std::move(zl)});
  }

  auto image_ctx = trunk_->to_image_resolution(ctx);
  auto dec_in = decoder_input(levels.back().sample, image_ctx);
  std::vector<std::vector<torch::Tensor>> decoded_chunks(num_modalities_);
  for (int64_t m = 0; m < num_modalities_; ++m) {
    auto d = decoders_[m](dec_in);
    auto chunks = d.chunk(S, 0);
    decoded_chunks[m] = {chunks.begin(), chunks.end()};
  }

  std::vector<SubsetPass> passes(S);
  for (int64_t s = 0; s < S; ++s) {
    LatentState st;
    st.levels.reserve(spec_.num_levels);
    for (const auto& lv : levels) {
      auto slice = [&](const torch::Tensor& t) { return t.narrow(0, s * batch, batch); };
      st.levels.push_back({DiagGaussian(slice(lv.prior.mean), slice(lv.prior.log_var)),
                           DiagGaussian(slice(lv.posterior.mean), slice(lv.posterior.log_var)),
                           slice(lv.sample)});
    }
    st.final_context = ctx.narrow(0, s * batch, batch);
    passes[s].latents = std::move(st);
    passes[s].decoded.reserve(num_modalities_);
    for (int64_t m = 0; m < num_modalities_; ++m) {
      passes[s].decoded.push_back(decoded_chunks[m][s]);
    }
  }
  return passes;
}

std::vector<torch::Tensor> MhvaeModelImpl::generator_parameters() {
  std::vector<torch::Tensor> out;
  for (auto& p : named_parameters()) {
    if (p.key().rfind("disc_", 0) != 0) out.push_back(p.value());
  }
  return out;
}

std::vector<torch::Tensor> MhvaeModelImpl::discriminator_parameters() {
  std::vector<torch::Tensor> out;
  for (auto& p : named_parameters()) {
    if (p.key().rfind("disc_", 0) == 0) out.push_back(p.value());
  }
  return out;
}

void MhvaeModelImpl::to_channels_last() {
  torch::NoGradGuard no_grad;
  for (auto& p : parameters()) {
    if (p.dim() == 4) {
      p.set_data(p.data().contiguous(torch::MemoryFormat::ChannelsLast));
    }
  }
}

torch::TensorOptions MhvaeModelImpl::param_options() const {
  auto& w = trunk_->init_->weight;
  return torch::TensorOptions().dtype(w.dtype()).device(w.device());
}

}  // namespace mhvae
