#pragma once

#include <optional>
#include <string>
#include <vector>

#include "lumexp/core.hpp"
#include "lumexp/nn.hpp"

namespace lumexp::nets {

using ag::Var;
using nn::ParamList;

enum class Upsampling { kPixelShuffle, kBilinear, kTransposedConv };

Upsampling upsampling_from_string(const std::string& s);
std::string to_string(Upsampling mode);

// One row of an architecture table; the conformance tests assert these
// against the documented layer layouts.
struct LayerInfo {
  std::string name;
  std::string kind;  // strided-conv | conv | residual-block | pixel-shuffle |
                     // bilinear-upsample | transposed-conv | fully-connected
  int64_t kernel = 0;
  int64_t stride = 1;
  int64_t in_channels = 0;
  int64_t out_channels = 0;
  int64_t out_size = 0;      // spatial side after the layer
  int64_t param_count = 0;   // weights + biases (+ norm affine terms)
  std::string activation;    // relu | leaky-relu | tanh | linear
  std::string normalization; // instance | none
};

// ---------------------------------------------------------------------------
// Quality network: six stride-2 4x4 convs (leaky ReLU 0.01) then two linear
// fully-connected layers; raw scalar output.
// ---------------------------------------------------------------------------

struct QualityNetConfig {
  int64_t input_size = 128;   // power of two, >= 64
  int64_t base_channels = 64; // conv widths are base << i
  void validate() const;
};

struct QualityNet {
  QualityNetConfig cfg;
  std::vector<nn::Conv2d> convs;
  nn::Linear fc_hidden;  // 256-wide penultimate features
  nn::Linear fc_out;

  QualityNet() = default;
  QualityNet(const QualityNetConfig& cfg, Rng& rng);

  Var features(const Var& images) const;  // [N, 256]
  Var forward(const Var& images) const;   // [N, 1] raw scores
  ParamList params() const;
  std::vector<LayerInfo> layer_table() const;
  int64_t flatten_width() const;
};

// ---------------------------------------------------------------------------
// Hourglass: 7x7 stem, two stride-2 halvings, residual bottleneck, two
// upsampling stages, 7x7 tanh head. Instance norm + ReLU follow every conv
// and learned/shuffle resize except the final conv.
// ---------------------------------------------------------------------------

struct HourglassConfig {
  int64_t in_channels = 9;
  int64_t base_channels = 64;
  int64_t image_size = 128;  // multiple of 4
  Upsampling upsampling = Upsampling::kPixelShuffle;
  int64_t num_residual_blocks = 6;
  void validate() const;
};

struct UpStage {
  Upsampling mode = Upsampling::kPixelShuffle;
  nn::ConvTranspose2d tconv;          // transposed-conv mode only
  std::optional<nn::InstanceNorm2d> resize_norm;  // after PS / tconv
  nn::Conv2d conv;                    // 4x4/1, pads (1,1)x(2,2)
  nn::InstanceNorm2d conv_norm;

  Var operator()(const Var& x) const;
  void collect(const std::string& prefix, ParamList& out) const;
};

struct Hourglass {
  HourglassConfig cfg;
  nn::Conv2d conv0, conv1, conv2;
  nn::InstanceNorm2d norm0, norm1, norm2;
  std::vector<nn::ResidualBlock> blocks;
  UpStage up0, up1;
  nn::Conv2d conv_out;

  Hourglass() = default;
  Hourglass(const HourglassConfig& cfg, Rng& rng);

  Var forward(const Var& x) const;  // [N, in, H, W] -> [N, 3, H, W] in [-1, 1]
  void collect(const std::string& prefix, ParamList& out) const;
  std::vector<LayerInfo> layer_table() const;
};

// ---------------------------------------------------------------------------
// Generator: expression and lighting hourglasses produce transformation
// masks; a fusion hourglass turns the mask pair into the output image. The
// non-disentangled variant runs one hourglass on image + both condition sets.
// ---------------------------------------------------------------------------

struct GeneratorConfig {
  AttributeSpec spec;
  int64_t image_size = 128;
  int64_t base_channels = 64;
  Upsampling upsampling = Upsampling::kPixelShuffle;
  bool disentangled = true;
  void validate() const;
};

struct GeneratorOutput {
  Var expression_mask;  // null when not disentangled
  Var lighting_mask;    // null when not disentangled
  Var output;
  bool has_masks() const { return expression_mask != nullptr; }
};

struct Generator {
  GeneratorConfig cfg;
  std::optional<Hourglass> expression_hg;  // image + expression planes -> mask
  std::optional<Hourglass> lighting_hg;    // image + lighting planes -> mask
  std::optional<Hourglass> fusion_hg;      // mask pair -> output image
  std::optional<Hourglass> joint_hg;       // ablated single-path variant

  Generator() = default;
  Generator(const GeneratorConfig& cfg, Rng& rng);

  GeneratorOutput forward(const Var& images, const Var& expr_planes,
                          const Var& light_planes) const;
  ParamList params() const;
};

// ---------------------------------------------------------------------------
// Discriminator: Q-style conv trunk without normalization, patch realness
// head (3x3 -> 1 channel) and class head (1x1 -> k channels).
// ---------------------------------------------------------------------------

struct DiscriminatorConfig {
  int64_t input_size = 128;
  int64_t base_channels = 64;
  int64_t num_classes = 26;  // num_expressions + num_lightings
  void validate() const;
};

struct DiscriminatorOutput {
  Var realness_map;  // [N, 1, s, s] raw patch critic values
  Var class_logits;  // [N, k], spatial mean of the class map
  Var class_map;     // [N, k, s, s]
};

struct Discriminator {
  DiscriminatorConfig cfg;
  std::vector<nn::Conv2d> convs;
  nn::Conv2d conv_src, conv_cls;

  Discriminator() = default;
  Discriminator(const DiscriminatorConfig& cfg, Rng& rng);

  DiscriminatorOutput forward(const Var& images) const;
  ParamList params() const;
  std::vector<LayerInfo> layer_table() const;
};

// ---------------------------------------------------------------------------
// Identity embedder: small conv encoder with an embedding head; a class head
// is attached only while it is being fitted on subject labels.
// ---------------------------------------------------------------------------

struct IdentityEncoderConfig {
  int64_t input_size = 64;
  int64_t base_channels = 16;
  int64_t embed_dim = 64;
  int64_t num_subjects = 0;  // > 0 enables the training head
  void validate() const;
};

struct IdentityEncoder {
  IdentityEncoderConfig cfg;
  std::vector<nn::Conv2d> convs;  // four stride-2 convs
  nn::Linear fc_embed;
  std::optional<nn::Linear> fc_class;

  IdentityEncoder() = default;
  IdentityEncoder(const IdentityEncoderConfig& cfg, Rng& rng);

  Var embed(const Var& images) const;       // [N, embed_dim]
  Var class_logits(const Var& images) const;
  ParamList params() const;
};

// ---------------------------------------------------------------------------
// batching helpers
// ---------------------------------------------------------------------------

Tensor batch_images(const std::vector<ImageTensor>& images);  // [N, 3, H, W]

// Tiled one-hot planes for a batch of label pairs.
Tensor batch_condition_planes(const std::vector<int64_t>& ids, int64_t num_classes,
                              int64_t height, int64_t width);

// Broadcast masks to [N, 3, H, W] multipliers.
Tensor batch_masks(const std::vector<FaceMask>& masks);

}  // namespace lumexp::nets
