#pragma once

#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "lumexp/nets.hpp"
#include "lumexp/nn.hpp"

namespace lumexp {

// Self-describing parameter container: a JSON header (version, architecture
// descriptor, step counter, config hash) followed by named raw float64
// arrays. Round trips are bit-exact.
struct Checkpoint {
  nlohmann::json meta;
  std::vector<std::pair<std::string, Tensor>> arrays;

  void save(const std::string& path) const;
  static Checkpoint load(const std::string& path);

  const Tensor* find(const std::string& name) const;
  const nlohmann::json& arch() const { return meta.at("arch"); }
  std::string kind() const { return meta.at("arch").at("net").get<std::string>(); }
  int64_t step() const { return meta.value("step", int64_t{0}); }
};

Checkpoint make_checkpoint(const nlohmann::json& arch, const nn::ParamList& params,
                           const nn::Adam* optimizer, int64_t step,
                           const std::string& config_hash);

// Copies checkpoint arrays into live parameters; names and shapes must match.
void restore_params(const Checkpoint& ckpt, const nn::ParamList& params);
void restore_adam(const Checkpoint& ckpt, const nn::ParamList& params, nn::Adam& optimizer);

// ---- architecture descriptors and reconstruction -------------------------

nlohmann::json arch_of(const nets::QualityNetConfig& cfg);
nlohmann::json arch_of(const nets::GeneratorConfig& cfg);
nlohmann::json arch_of(const nets::DiscriminatorConfig& cfg);
nlohmann::json arch_of(const nets::IdentityEncoderConfig& cfg);

// Each loader validates the descriptor kind and rebuilds the network with the
// stored weights. A kind/shape mismatch is a load error (ConfigError).
nets::QualityNet load_quality_net(const Checkpoint& ckpt);
nets::Generator load_generator(const Checkpoint& ckpt);
nets::Discriminator load_discriminator(const Checkpoint& ckpt);
nets::IdentityEncoder load_identity_encoder(const Checkpoint& ckpt);

nets::QualityNet load_quality_net(const std::string& path);
nets::Generator load_generator(const std::string& path);
nets::Discriminator load_discriminator(const std::string& path);
nets::IdentityEncoder load_identity_encoder(const std::string& path);

}  // namespace lumexp
