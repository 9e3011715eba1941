#pragma once

#include <torch/torch.h>

#include <vector>

#include "mhvae/model.hpp"

namespace mhvae {

/// Width and depth knobs for the convolutional model. Feature widths are
/// per resolution stage, coarsest (1x1) first; when left empty they are
/// derived from base_width / max_width.
struct ArchOptions {
  int64_t image_size = 64;
  int64_t base_width = 12;   // width at the image resolution
  int64_t max_width = 96;    // cap towards the coarse end
  std::vector<int64_t> encoder_widths;
  std::vector<int64_t> trunk_widths;
  int64_t decoder_channels = 8;
  int64_t decoder_blocks = 5;
  int64_t disc_channels = 16;
  int64_t expansion = 4;      // residual cell bottleneck expansion
  int64_t se_reduction = 8;   // squeeze-excitation reduction
};

/// Geometric width ramp from `base` at the finest stage towards `cap`,
/// coarsest first, one entry per resolution stage.
std::vector<int64_t> default_widths(int64_t stages, int64_t base, int64_t cap);

/// Inverted-residual bottleneck with squeeze-excitation and swish.
struct ResidualCellImpl : torch::nn::Module {
  ResidualCellImpl(int64_t channels, int64_t expansion, int64_t se_reduction);
  torch::Tensor forward(const torch::Tensor& x);

  torch::nn::GroupNorm norm{nullptr};
  torch::nn::Conv2d expand{nullptr}, depthwise{nullptr}, project{nullptr};
  torch::nn::Linear se_squeeze{nullptr}, se_excite{nullptr};
};
TORCH_MODULE(ResidualCell);

/// Contracting path of one modality: a stem at image resolution followed
/// by strided stages, emitting one feature map per hierarchy level.
struct ModalityEncoderImpl : torch::nn::Module {
  ModalityEncoderImpl(const HierarchySpec& spec, const ArchOptions& arch);

  /// Pyramid of L feature maps, coarsest first.
  std::vector<torch::Tensor> forward(const torch::Tensor& image);

  std::vector<int64_t> widths_;  // per resolution stage, coarsest first
  int64_t levels_ = 0;
  int64_t image_size_ = 0;
  torch::nn::Conv2d stem{nullptr};
  std::vector<torch::nn::Conv2d> downs_;   // applied finest to coarsest
  std::vector<ResidualCell> cells_;
};
TORCH_MODULE(ModalityEncoder);

/// Expansive path shared by all modalities: context propagation, prior
/// heads, per-modality posterior expert heads, and the upsampling tail to
/// image resolution.
struct DecoderTrunkImpl : torch::nn::Module {
  DecoderTrunkImpl(const HierarchySpec& spec, const ArchOptions& arch, int64_t num_modalities);

  torch::Tensor init_context(const torch::Tensor& z_coarse);
  torch::Tensor advance(int64_t level, const torch::Tensor& ctx);
  DiagGaussian prior_at(int64_t level, const torch::Tensor& ctx);
  DiagGaussian coarse_expert(int64_t modality, const torch::Tensor& top_feature);
  DiagGaussian expert_at(int64_t level, int64_t modality, const torch::Tensor& feature,
                         const torch::Tensor& ctx);
  torch::Tensor absorb(int64_t level, const torch::Tensor& ctx, const torch::Tensor& z);
  /// Upsampling stages past the finest latent level plus a final refine.
  torch::Tensor to_image_resolution(const torch::Tensor& final_ctx);

  int64_t image_width() const { return widths_.back(); }

  std::vector<int64_t> widths_;
  int64_t levels_ = 0;
  torch::nn::Conv2d init_{nullptr}, refine_{nullptr};
  std::vector<torch::nn::Conv2d> ups_;       // one per upsample step, coarse to fine
  std::vector<torch::nn::Conv2d> priors_;    // levels 1..L-1
  std::vector<torch::nn::Conv2d> merges_;    // levels 1..L-1
  std::vector<torch::nn::Conv2d> coarse_experts_;        // per modality
  std::vector<std::vector<torch::nn::Conv2d>> experts_;  // [level-1][modality]
};
TORCH_MODULE(DecoderTrunk);

/// Per-modality image head: residual blocks over the finest context,
/// bounded output.
struct ImageDecoderImpl : torch::nn::Module {
  ImageDecoderImpl(int64_t in_channels, int64_t width, int64_t num_blocks);
  torch::Tensor forward(const torch::Tensor& x);

  torch::nn::Conv2d inc{nullptr}, out{nullptr};
  std::vector<torch::nn::Sequential> blocks_;
};
TORCH_MODULE(ImageDecoder);

/// Patch critic: grid of real/fake logits over local receptive fields.
struct PatchDiscriminatorImpl : torch::nn::Module {
  explicit PatchDiscriminatorImpl(int64_t base);
  torch::Tensor forward(const torch::Tensor& image);

  torch::nn::Conv2d c1{nullptr}, c2{nullptr}, c3{nullptr}, head{nullptr};
  torch::nn::GroupNorm n2{nullptr}, n3{nullptr};
};
TORCH_MODULE(PatchDiscriminator);

/// The full model: per-modality encoders, the shared trunk, per-modality
/// image decoders, and optionally one patch discriminator per modality.
struct MhvaeModelImpl : torch::nn::Module, GenerativeModel {
  MhvaeModelImpl(HierarchySpec spec, ArchOptions arch, int64_t num_modalities,
                 bool with_discriminators = true);

  int64_t num_modalities() const override { return num_modalities_; }
  const HierarchySpec& hierarchy() const override { return spec_; }

  std::vector<torch::Tensor> encode(int64_t modality, const torch::Tensor& image);

  LatentState infer(const std::vector<torch::Tensor>& images, const Subset& subset,
                    NoiseSource& noise, int64_t batch_hint = -1) override;
  std::vector<torch::Tensor> decode(const LatentState& state) override;
  torch::Tensor discriminate(int64_t modality, const torch::Tensor& image) override;
  bool has_discriminators() const override { return !discs_.empty(); }

  /// Batches all subsets through the trunk in one pass with per-subset
  /// expert gates; equivalent to the per-subset path.
  std::vector<SubsetPass> run_subsets(const std::vector<torch::Tensor>& images,
                                      const std::vector<Subset>& subsets,
                                      NoiseSource& noise) override;

  std::vector<torch::Tensor> generator_parameters();
  std::vector<torch::Tensor> discriminator_parameters();
  torch::TensorOptions param_options() const;

  /// Rewrites convolution weights in channels-last layout; markedly faster
  /// oneDNN kernels at these widths. Call before creating optimizers.
  void to_channels_last();

  HierarchySpec spec_;
  ArchOptions arch_;
  int64_t num_modalities_ = 0;
  std::vector<ModalityEncoder> encoders_;
  DecoderTrunk trunk_{nullptr};
  std::vector<ImageDecoder> decoders_;
  std::vector<PatchDiscriminator> discs_;

 private:
  void check_image(const torch::Tensor& image) const;
  torch::Tensor decoder_input(const torch::Tensor& z_finest, const torch::Tensor& image_ctx) const;
  TopDownHooks make_hooks(const std::vector<std::vector<torch::Tensor>>& pyramids);
};
TORCH_MODULE(MhvaeModel);

}  // namespace mhvae
