#include "lumexp/checkpoint.hpp"

#include <cstring>
#include <fstream>

#include "lumexp/errors.hpp"

namespace lumexp {

using nlohmann::json;

namespace {

constexpr char kMagic[8] = {'L', 'X', 'C', 'K', 'P', 'T', '0', '1'};
constexpr int kFormatVersion = 1;

void write_u64(std::ostream& out, uint64_t v) {
  unsigned char buf[8];
  for (int i = 0; i < 8; ++i) buf[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
  out.write(reinterpret_cast<const char*>(buf), 8);
}

uint64_t read_u64(std::istream& in) {
  unsigned char buf[8];
  in.read(reinterpret_cast<char*>(buf), 8);
  uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(buf[i]) << (8 * i);
  return v;
}

}  // namespace

void Checkpoint::save(const std::string& path) const {
  json header = meta;
  header["version"] = kFormatVersion;
  json arr = json::array();
  for (const auto& [name, tensor] : arrays) {
    json e;
    e["name"] = name;
    e["shape"] = tensor.shape;
    arr.push_back(std::move(e));
  }
  header["arrays"] = std::move(arr);
  const std::string text = header.dump();

  std::ofstream out(path, std::ios::binary);
  if (!out) throw ValidationError("cannot write checkpoint " + path);
  out.write(kMagic, sizeof(kMagic));
  write_u64(out, text.size());
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& [name, tensor] : arrays)
    out.write(reinterpret_cast<const char*>(tensor.data.data()),
              static_cast<std::streamsize>(tensor.data.size() * sizeof(double)));
  if (!out) throw ValidationError("short write for checkpoint " + path);
}

Checkpoint Checkpoint::load(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot open checkpoint " + path);
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
    throw ConfigError(path + " is not a checkpoint file");
  const uint64_t header_len = read_u64(in);
  std::string text(header_len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(header_len));
  if (!in) throw ConfigError(path + ": truncated checkpoint header");

  Checkpoint ckpt;
  try {
    ckpt.meta = json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError(path + ": bad checkpoint header: " + e.what());
  }
  if (!ckpt.meta.contains("version"))
    throw ConfigError(path + ": checkpoint header missing mandatory version field");
  if (ckpt.meta["version"].get<int>() != kFormatVersion)
    throw ConfigError(path + ": unsupported checkpoint version " +
                      ckpt.meta["version"].dump());
  for (const auto& entry : ckpt.meta.at("arrays")) {
    Tensor t(entry.at("shape").get<Shape>());
    in.read(reinterpret_cast<char*>(t.data.data()),
            static_cast<std::streamsize>(t.data.size() * sizeof(double)));
    if (!in) throw ConfigError(path + ": truncated array " + entry.at("name").dump());
    ckpt.arrays.emplace_back(entry.at("name").get<std::string>(), std::move(t));
  }
  ckpt.meta.erase("arrays");
  return ckpt;
}

const Tensor* Checkpoint::find(const std::string& name) const {
  for (const auto& [n, t] : arrays)
    if (n == name) return &t;
  return nullptr;
}

Checkpoint make_checkpoint(const json& arch, const nn::ParamList& params,
                           const nn::Adam* optimizer, int64_t step,
                           const std::string& config_hash) {
  Checkpoint ckpt;
  ckpt.meta["arch"] = arch;
  ckpt.meta["step"] = step;
  ckpt.meta["config_hash"] = config_hash;
  for (const auto& np : params) ckpt.arrays.emplace_back(np.name, np.param->value);
  if (optimizer) {
    ckpt.meta["opt"] = {{"t", optimizer->t},
                        {"lr", optimizer->lr},
                        {"beta1", optimizer->beta1},
                        {"beta2", optimizer->beta2}};
    for (size_t i = 0; i < params.size(); ++i) {
      ckpt.arrays.emplace_back("opt.m." + params[i].name, optimizer->m[i]);
      ckpt.arrays.emplace_back("opt.v." + params[i].name, optimizer->v[i]);
    }
  }
  return ckpt;
}

void restore_params(const Checkpoint& ckpt, const nn::ParamList& params) {
  for (const auto& np : params) {
    const Tensor* stored = ckpt.find(np.name);
    if (!stored) throw ConfigError("checkpoint missing parameter " + np.name);
    if (stored->shape != np.param->value.shape)
      throw ConfigError("checkpoint parameter " + np.name + " has shape " +
                        shape_str(stored->shape) + ", expected " +
                        shape_str(np.param->value.shape));
    np.param->value = *stored;
  }
}

void restore_adam(const Checkpoint& ckpt, const nn::ParamList& params, nn::Adam& optimizer) {
  if (!ckpt.meta.contains("opt")) return;
  optimizer.t = ckpt.meta["opt"].value("t", int64_t{0});
  for (size_t i = 0; i < params.size(); ++i) {
    const Tensor* m = ckpt.find("opt.m." + params[i].name);
    const Tensor* v = ckpt.find("opt.v." + params[i].name);
    if (m) optimizer.m[i] = *m;
    if (v) optimizer.v[i] = *v;
  }
}

// ---------------------------------------------------------------------------
// architecture descriptors
// ---------------------------------------------------------------------------

json arch_of(const nets::QualityNetConfig& cfg) {
  return {{"net", "quality"}, {"input_size", cfg.input_size}, {"base_channels", cfg.base_channels}};
}

json arch_of(const nets::GeneratorConfig& cfg) {
  return {{"net", "generator"},
          {"image_size", cfg.image_size},
          {"base_channels", cfg.base_channels},
          {"upsampling", nets::to_string(cfg.upsampling)},
          {"num_expressions", cfg.spec.num_expressions},
          {"num_lightings", cfg.spec.num_lightings},
          {"disentangled", cfg.disentangled}};
}

json arch_of(const nets::DiscriminatorConfig& cfg) {
  return {{"net", "discriminator"},
          {"input_size", cfg.input_size},
          {"base_channels", cfg.base_channels},
          {"num_classes", cfg.num_classes}};
}

json arch_of(const nets::IdentityEncoderConfig& cfg) {
  return {{"net", "identity"},
          {"input_size", cfg.input_size},
          {"base_channels", cfg.base_channels},
          {"embed_dim", cfg.embed_dim},
          {"num_subjects", cfg.num_subjects}};
}

namespace {

void expect_kind(const Checkpoint& ckpt, const std::string& kind) {
  if (ckpt.kind() != kind)
    throw ConfigError("checkpoint holds a '" + ckpt.kind() + "' network, expected '" + kind +
                      "'");
}

}  // namespace

nets::QualityNet load_quality_net(const Checkpoint& ckpt) {
  expect_kind(ckpt, "quality");
  const auto& a = ckpt.arch();
  nets::QualityNetConfig cfg;
  cfg.input_size = a.at("input_size").get<int64_t>();
  cfg.base_channels = a.at("base_channels").get<int64_t>();
  Rng rng(0);
  nets::QualityNet net(cfg, rng);
  restore_params(ckpt, net.params());
  return net;
}

nets::Generator load_generator(const Checkpoint& ckpt) {
  expect_kind(ckpt, "generator");
  const auto& a = ckpt.arch();
  nets::GeneratorConfig cfg;
  cfg.image_size = a.at("image_size").get<int64_t>();
  cfg.base_channels = a.at("base_channels").get<int64_t>();
  cfg.upsampling = nets::upsampling_from_string(a.at("upsampling").get<std::string>());
  cfg.spec.num_expressions = a.at("num_expressions").get<int64_t>();
  cfg.spec.num_lightings = a.at("num_lightings").get<int64_t>();
  cfg.disentangled = a.at("disentangled").get<bool>();
  Rng rng(0);
  nets::Generator net(cfg, rng);
  restore_params(ckpt, net.params());
  return net;
}

nets::Discriminator load_discriminator(const Checkpoint& ckpt) {
  expect_kind(ckpt, "discriminator");
  const auto& a = ckpt.arch();
  nets::DiscriminatorConfig cfg;
  cfg.input_size = a.at("input_size").get<int64_t>();
  cfg.base_channels = a.at("base_channels").get<int64_t>();
  cfg.num_classes = a.at("num_classes").get<int64_t>();
  Rng rng(0);
  nets::Discriminator net(cfg, rng);
  restore_params(ckpt, net.params());
  return net;
}

nets::IdentityEncoder load_identity_encoder(const Checkpoint& ckpt) {
  expect_kind(ckpt, "identity");
  const auto& a = ckpt.arch();
  nets::IdentityEncoderConfig cfg;
  cfg.input_size = a.at("input_size").get<int64_t>();
  cfg.base_channels = a.at("base_channels").get<int64_t>();
  cfg.embed_dim = a.at("embed_dim").get<int64_t>();
  cfg.num_subjects = a.at("num_subjects").get<int64_t>();
  Rng rng(0);
  nets::IdentityEncoder net(cfg, rng);
  restore_params(ckpt, net.params());
  return net;
}

nets::QualityNet load_quality_net(const std::string& path) {
  return load_quality_net(Checkpoint::load(path));
}
nets::Generator load_generator(const std::string& path) {
  return load_generator(Checkpoint::load(path));
}
nets::Discriminator load_discriminator(const std::string& path) {
  return load_discriminator(Checkpoint::load(path));
}
nets::IdentityEncoder load_identity_encoder(const std::string& path) {
  return load_identity_encoder(Checkpoint::load(path));
}

}  // namespace lumexp
