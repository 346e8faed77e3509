#include "lumexp/nets.hpp"

#include <cmath>

#include "lumexp/errors.hpp"

namespace lumexp::nets {

using namespace ag;

namespace {

bool power_of_two(int64_t v) { return v > 0 && (v & (v - 1)) == 0; }

constexpr double kLeakySlope = 0.01;

}  // namespace

Upsampling upsampling_from_string(const std::string& s) {
  if (s == "pixel-shuffle") return Upsampling::kPixelShuffle;
  if (s == "bilinear") return Upsampling::kBilinear;
  if (s == "transposed-conv") return Upsampling::kTransposedConv;
  throw ConfigError("unknown upsampling mode '" + s +
                    "' (expected pixel-shuffle | bilinear | transposed-conv)");
}

std::string to_string(Upsampling mode) {
  switch (mode) {
    case Upsampling::kPixelShuffle: return "pixel-shuffle";
    case Upsampling::kBilinear: return "bilinear";
    case Upsampling::kTransposedConv: return "transposed-conv";
  }
  return "?";
}

// ---------------------------------------------------------------------------
// QualityNet
// ---------------------------------------------------------------------------

void QualityNetConfig::validate() const {
  if (!power_of_two(input_size) || input_size < 64)
    throw ConfigError("quality net input size must be a power of two >= 64, got " +
                      std::to_string(input_size));
  if (base_channels < 4) throw ConfigError("quality net base channels must be >= 4");
}

QualityNet::QualityNet(const QualityNetConfig& c, Rng& rng) : cfg(c) {
  cfg.validate();
  int64_t in_ch = 3;
  for (int i = 0; i < 6; ++i) {
    const int64_t out_ch = cfg.base_channels << i;
    convs.emplace_back(in_ch, out_ch, 4, 2, 1, rng);
    in_ch = out_ch;
  }
  fc_hidden = nn::Linear(flatten_width(), 256, rng);
  fc_out = nn::Linear(256, 1, rng);
}

int64_t QualityNet::flatten_width() const {
  const int64_t side = cfg.input_size >> 6;
  return side * side * (cfg.base_channels << 5);
}

Var QualityNet::features(const Var& images) const {
  if (images->value.dim(2) != cfg.input_size || images->value.dim(3) != cfg.input_size)
    throw DimensionError("quality net expects " + std::to_string(cfg.input_size) + "x" +
                         std::to_string(cfg.input_size) + " input, got " +
                         shape_str(images->value.shape));
  Var h = images;
  for (const auto& conv : convs) h = leaky_relu(conv(h), kLeakySlope);
  h = reshape(h, {images->value.dim(0), flatten_width()});
  return fc_hidden(h);  // linear activation on both fully-connected layers
}

Var QualityNet::forward(const Var& images) const { return fc_out(features(images)); }

ParamList QualityNet::params() const {
  ParamList out;
  for (size_t i = 0; i < convs.size(); ++i) convs[i].collect("conv" + std::to_string(i), out);
  fc_hidden.collect("fc0", out);
  fc_out.collect("fc1", out);
  return out;
}

std::vector<LayerInfo> QualityNet::layer_table() const {
  std::vector<LayerInfo> rows;
  rows.push_back({"input", "input", 0, 1, 0, 3, cfg.input_size, 0, "", ""});
  int64_t size = cfg.input_size;
  int64_t in_ch = 3;
  for (size_t i = 0; i < convs.size(); ++i) {
    size /= 2;
    const int64_t out_ch = convs[i].w->value.dim(0);
    rows.push_back({"conv" + std::to_string(i), "strided-conv", 4, 2, in_ch, out_ch, size,
                    convs[i].param_count(), "leaky-relu", "none"});
    in_ch = out_ch;
  }
  rows.push_back({"fc0", "fully-connected", 0, 1, flatten_width(), 256, 1,
                  fc_hidden.param_count(), "linear", "none"});
  rows.push_back({"fc1", "fully-connected", 0, 1, 256, 1, 1, fc_out.param_count(), "linear",
                  "none"});
  return rows;
}

// ---------------------------------------------------------------------------
// Hourglass
// ---------------------------------------------------------------------------

void HourglassConfig::validate() const {
  if (in_channels < 1) throw ConfigError("hourglass needs at least one input channel");
  if (image_size % 4 != 0)
    throw ConfigError("hourglass image size must be a multiple of 4, got " +
                      std::to_string(image_size));
  if (base_channels < 4 || base_channels % 2 != 0)
    throw ConfigError("hourglass base channels must be even and >= 4");
  if (num_residual_blocks < 1) throw ConfigError("hourglass needs residual blocks");
}

namespace {

UpStage make_up_stage(int64_t in_ch, int64_t out_ch, Upsampling mode, Rng& rng) {
  UpStage st;
  st.mode = mode;
  int64_t resized_ch = in_ch;
  switch (mode) {
    case Upsampling::kPixelShuffle:
      resized_ch = in_ch / 4;
      st.resize_norm = nn::InstanceNorm2d(resized_ch);
      break;
    case Upsampling::kTransposedConv:
      resized_ch = in_ch / 4;
      st.tconv = nn::ConvTranspose2d(in_ch, resized_ch, 4, 2, 1, rng);
      st.resize_norm = nn::InstanceNorm2d(resized_ch);
      break;
    case Upsampling::kBilinear:
      break;  // plain interpolation, no learned resize and no post-activation
  }
  st.conv = nn::Conv2d(resized_ch, out_ch, 4, 1, 0, rng);
  st.conv.pads(1, 1, 2, 2);  // asymmetric pads keep the spatial size at 4x4/1
  st.conv_norm = nn::InstanceNorm2d(out_ch);
  return st;
}

}  // namespace

Var UpStage::operator()(const Var& x) const {
  Var y;
  switch (mode) {
    case Upsampling::kPixelShuffle:
      y = relu((*resize_norm)(pixel_shuffle(x, 2)));
      break;
    case Upsampling::kTransposedConv:
      y = relu((*resize_norm)(tconv(x)));
      break;
    case Upsampling::kBilinear:
      y = upsample_bilinear2x(x);
      break;
  }
  return relu(conv_norm(conv(y)));
}

void UpStage::collect(const std::string& prefix, ParamList& out) const {
  if (mode == Upsampling::kTransposedConv) tconv.collect(prefix + ".resize", out);
  if (resize_norm) resize_norm->collect(prefix + ".resize_norm", out);
  conv.collect(prefix + ".conv", out);
  conv_norm.collect(prefix + ".conv_norm", out);
}

Hourglass::Hourglass(const HourglassConfig& c, Rng& rng) : cfg(c) {
  cfg.validate();
  const int64_t b = cfg.base_channels;
  conv0 = nn::Conv2d(cfg.in_channels, b, 7, 1, 3, rng);
  norm0 = nn::InstanceNorm2d(b);
  conv1 = nn::Conv2d(b, 2 * b, 4, 2, 1, rng);
  norm1 = nn::InstanceNorm2d(2 * b);
  conv2 = nn::Conv2d(2 * b, 4 * b, 4, 2, 1, rng);
  norm2 = nn::InstanceNorm2d(4 * b);
  for (int64_t i = 0; i < cfg.num_residual_blocks; ++i) blocks.emplace_back(4 * b, rng);
  up0 = make_up_stage(4 * b, 2 * b, cfg.upsampling, rng);
  up1 = make_up_stage(2 * b, b, cfg.upsampling, rng);
  conv_out = nn::Conv2d(b, 3, 7, 1, 3, rng);
}

Var Hourglass::forward(const Var& x) const {
  if (x->value.dim(1) != cfg.in_channels)
    throw DimensionError("hourglass expects " + std::to_string(cfg.in_channels) +
                         " input channels, got " + std::to_string(x->value.dim(1)));
  Var h = relu(norm0(conv0(x)));
  h = relu(norm1(conv1(h)));
  h = relu(norm2(conv2(h)));
  for (const auto& block : blocks) h = block(h);
  h = up0(h);
  h = up1(h);
  return tanh_op(conv_out(h));
}

void Hourglass::collect(const std::string& prefix, ParamList& out) const {
  conv0.collect(prefix + ".conv0", out);
  norm0.collect(prefix + ".norm0", out);
  conv1.collect(prefix + ".conv1", out);
  norm1.collect(prefix + ".norm1", out);
  conv2.collect(prefix + ".conv2", out);
  norm2.collect(prefix + ".norm2", out);
  for (size_t i = 0; i < blocks.size(); ++i)
    blocks[i].collect(prefix + ".rb" + std::to_string(i), out);
  up0.collect(prefix + ".up0", out);
  up1.collect(prefix + ".up1", out);
  conv_out.collect(prefix + ".conv5", out);
}

std::vector<LayerInfo> Hourglass::layer_table() const {
  const int64_t b = cfg.base_channels;
  const int64_t s = cfg.image_size;
  std::vector<LayerInfo> rows;
  rows.push_back({"input", "input", 0, 1, 0, cfg.in_channels, s, 0, "", ""});
  rows.push_back({"conv0", "conv", 7, 1, cfg.in_channels, b, s,
                  conv0.param_count() + 2 * b, "relu", "instance"});
  rows.push_back({"conv1", "strided-conv", 4, 2, b, 2 * b, s / 2,
                  conv1.param_count() + 4 * b, "relu", "instance"});
  rows.push_back({"conv2", "strided-conv", 4, 2, 2 * b, 4 * b, s / 4,
                  conv2.param_count() + 8 * b, "relu", "instance"});
  for (size_t i = 0; i < blocks.size(); ++i) {
    const int64_t conv_params = blocks[i].conv1.param_count() + blocks[i].conv2.param_count();
    rows.push_back({"RB" + std::to_string(i), "residual-block", 3, 1, 4 * b, 4 * b, s / 4,
                    conv_params + 4 * (4 * b), "relu", "instance"});
  }
  auto up_rows = [&](const UpStage& st, const std::string& ps_name, const std::string& conv_name,
                     int64_t in_ch, int64_t out_ch, int64_t out_size) {
    switch (st.mode) {
      case Upsampling::kPixelShuffle:
        rows.push_back({ps_name, "pixel-shuffle", 0, 1, in_ch, in_ch / 4, out_size,
                        2 * (in_ch / 4), "relu", "instance"});
        break;
      case Upsampling::kTransposedConv:
        rows.push_back({ps_name, "transposed-conv", 4, 2, in_ch, in_ch / 4, out_size,
                        st.tconv.w->value.numel() + st.tconv.b->value.numel() + 2 * (in_ch / 4),
                        "relu", "instance"});
        break;
      case Upsampling::kBilinear:
        rows.push_back({ps_name, "bilinear-upsample", 0, 1, in_ch, in_ch, out_size, 0, "linear",
                        "none"});
        break;
    }
    rows.push_back({conv_name, "conv", 4, 1, rows.back().out_channels, out_ch, out_size,
                    st.conv.param_count() + 2 * out_ch, "relu", "instance"});
  };
  up_rows(up0, "PS0", "conv3", 4 * b, 2 * b, s / 2);
  up_rows(up1, "PS1", "conv4", 2 * b, b, s);
  rows.push_back({"conv5", "conv", 7, 1, b, 3, s, conv_out.param_count(), "tanh", "none"});
  return rows;
}

// ---------------------------------------------------------------------------
// Generator
// ---------------------------------------------------------------------------

void GeneratorConfig::validate() const {
  spec.validate();
  if (image_size % 4 != 0)
    throw ConfigError("generator image size must be a multiple of 4");
}

Generator::Generator(const GeneratorConfig& c, Rng& rng) : cfg(c) {
  cfg.validate();
  HourglassConfig hg;
  hg.base_channels = cfg.base_channels;
  hg.image_size = cfg.image_size;
  hg.upsampling = cfg.upsampling;
  if (cfg.disentangled) {
    hg.in_channels = 3 + cfg.spec.num_expressions;
    expression_hg = Hourglass(hg, rng);
    hg.in_channels = 3 + cfg.spec.num_lightings;
    lighting_hg = Hourglass(hg, rng);
    hg.in_channels = 6;
    fusion_hg = Hourglass(hg, rng);
  } else {
    hg.in_channels = 3 + cfg.spec.num_channels();
    joint_hg = Hourglass(hg, rng);
  }
}

GeneratorOutput Generator::forward(const Var& images, const Var& expr_planes,
                                   const Var& light_planes) const {
  if (images->value.dim(2) != cfg.image_size || images->value.dim(3) != cfg.image_size)
    throw DimensionError("generator expects " + std::to_string(cfg.image_size) +
                         "-sized input, got " + shape_str(images->value.shape));
  GeneratorOutput out;
  if (cfg.disentangled) {
    out.expression_mask = expression_hg->forward(concat({images, expr_planes}, 1));
    out.lighting_mask = lighting_hg->forward(concat({images, light_planes}, 1));
    out.output = fusion_hg->forward(concat({out.expression_mask, out.lighting_mask}, 1));
  } else {
    out.output = joint_hg->forward(concat({images, expr_planes, light_planes}, 1));
  }
  return out;
}

ParamList Generator::params() const {
  ParamList out;
  if (cfg.disentangled) {
    expression_hg->collect("hg_expr", out);
    lighting_hg->collect("hg_light", out);
    fusion_hg->collect("hg_fusion", out);
  } else {
    joint_hg->collect("hg_joint", out);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Discriminator
// ---------------------------------------------------------------------------

void DiscriminatorConfig::validate() const {
  if (!power_of_two(input_size) || input_size < 64)
    throw ConfigError("discriminator input size must be a power of two >= 64");
  if (num_classes < 4)
    throw ConfigError("discriminator needs at least 2+2 attribute classes");
  if (base_channels < 4) throw ConfigError("discriminator base channels must be >= 4");
}

Discriminator::Discriminator(const DiscriminatorConfig& c, Rng& rng) : cfg(c) {
  cfg.validate();
  int64_t in_ch = 3;
  for (int i = 0; i < 6; ++i) {
    const int64_t out_ch = cfg.base_channels << i;
    convs.emplace_back(in_ch, out_ch, 4, 2, 1, rng);
    in_ch = out_ch;
  }
  // Gradient-penalty training rules out batch-coupled normalization, so the
  // trunk stays normalization-free.
  conv_src = nn::Conv2d(in_ch, 1, 3, 1, 1, rng);
  conv_cls = nn::Conv2d(in_ch, cfg.num_classes, 1, 1, 0, rng);
}

DiscriminatorOutput Discriminator::forward(const Var& images) const {
  if (images->value.dim(2) != cfg.input_size || images->value.dim(3) != cfg.input_size)
    throw DimensionError("discriminator expects " + std::to_string(cfg.input_size) +
                         "-sized input, got " + shape_str(images->value.shape));
  Var h = images;
  for (const auto& conv : convs) h = leaky_relu(conv(h), kLeakySlope);
  DiscriminatorOutput out;
  out.realness_map = conv_src(h);
  out.class_map = conv_cls(h);
  out.class_logits = reduce_mean(out.class_map, {2, 3}, false);
  return out;
}

ParamList Discriminator::params() const {
  ParamList out;
  for (size_t i = 0; i < convs.size(); ++i) convs[i].collect("conv" + std::to_string(i), out);
  conv_src.collect("conv6_src", out);
  conv_cls.collect("conv7_cls", out);
  return out;
}

std::vector<LayerInfo> Discriminator::layer_table() const {
  std::vector<LayerInfo> rows;
  rows.push_back({"input", "input", 0, 1, 0, 3, cfg.input_size, 0, "", ""});
  int64_t size = cfg.input_size;
  int64_t in_ch = 3;
  for (size_t i = 0; i < convs.size(); ++i) {
    size /= 2;
    const int64_t out_ch = convs[i].w->value.dim(0);
    rows.push_back({"conv" + std::to_string(i), "strided-conv", 4, 2, in_ch, out_ch, size,
                    convs[i].param_count(), "leaky-relu", "none"});
    in_ch = out_ch;
  }
  rows.push_back({"conv6", "conv", 3, 1, in_ch, 1, size, conv_src.param_count(), "linear",
                  "none"});
  rows.push_back({"conv7", "conv", 1, 1, in_ch, cfg.num_classes, size, conv_cls.param_count(),
                  "linear", "none"});
  return rows;
}

// ---------------------------------------------------------------------------
// IdentityEncoder
// ---------------------------------------------------------------------------

void IdentityEncoderConfig::validate() const {
  if (input_size % 16 != 0)
    throw ConfigError("identity encoder input size must be a multiple of 16");
  if (embed_dim < 2) throw ConfigError("identity embedding needs at least 2 dimensions");
}

IdentityEncoder::IdentityEncoder(const IdentityEncoderConfig& c, Rng& rng) : cfg(c) {
  cfg.validate();
  int64_t in_ch = 3;
  for (int i = 0; i < 4; ++i) {
    const int64_t out_ch = cfg.base_channels << i;
    convs.emplace_back(in_ch, out_ch, 4, 2, 1, rng);
    in_ch = out_ch;
  }
  fc_embed = nn::Linear(in_ch, cfg.embed_dim, rng);
  if (cfg.num_subjects > 0) fc_class = nn::Linear(cfg.embed_dim, cfg.num_subjects, rng);
}

Var IdentityEncoder::embed(const Var& images) const {
  Var h = images;
  for (const auto& conv : convs) h = leaky_relu(conv(h), kLeakySlope);
  h = reduce_mean(h, {2, 3}, false);  // global average pool -> [N, C]
  return fc_embed(h);
}

Var IdentityEncoder::class_logits(const Var& images) const {
  if (!fc_class) throw ConfigError("identity encoder has no class head");
  return (*fc_class)(embed(images));
}

ParamList IdentityEncoder::params() const {
  ParamList out;
  for (size_t i = 0; i < convs.size(); ++i) convs[i].collect("conv" + std::to_string(i), out);
  fc_embed.collect("fc_embed", out);
  if (fc_class) fc_class->collect("fc_class", out);
  return out;
}

// ---------------------------------------------------------------------------
// batching helpers
// ---------------------------------------------------------------------------

Tensor batch_images(const std::vector<ImageTensor>& images) {
  if (images.empty()) throw ValidationError("cannot batch zero images");
  const int64_t h = images[0].height(), w = images[0].width();
  Tensor out({static_cast<int64_t>(images.size()), 3, h, w});
  const int64_t per = 3 * h * w;
  for (size_t i = 0; i < images.size(); ++i) {
    if (images[i].height() != h || images[i].width() != w)
      throw DimensionError("batch images must share one size");
    std::copy(images[i].chw.data.begin(), images[i].chw.data.end(),
              out.data.begin() + static_cast<int64_t>(i) * per);
  }
  return out;
}

Tensor batch_condition_planes(const std::vector<int64_t>& ids, int64_t num_classes,
                              int64_t height, int64_t width) {
  Tensor out({static_cast<int64_t>(ids.size()), num_classes, height, width});
  const int64_t plane = height * width;
  for (size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || ids[i] >= num_classes)
      throw BoundsError("condition id " + std::to_string(ids[i]) + " out of range [0, " +
                        std::to_string(num_classes) + ")");
    std::fill_n(out.ptr() + (static_cast<int64_t>(i) * num_classes + ids[i]) * plane, plane, 1.0);
  }
  return out;
}

Tensor batch_masks(const std::vector<FaceMask>& masks) {
  if (masks.empty()) throw ValidationError("cannot batch zero masks");
  const int64_t h = masks[0].height(), w = masks[0].width();
  Tensor out({static_cast<int64_t>(masks.size()), 3, h, w});
  const int64_t plane = h * w;
  for (size_t i = 0; i < masks.size(); ++i) {
    if (masks[i].height() != h || masks[i].width() != w)
      throw DimensionError("batch masks must share one size");
    for (int64_t c = 0; c < 3; ++c)
      std::copy(masks[i].mask.data.begin(), masks[i].mask.data.end(),
                out.data.begin() + (static_cast<int64_t>(i) * 3 + c) * plane);
  }
  return out;
}

}  // namespace lumexp::nets
