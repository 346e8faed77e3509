#pragma once

#include <string>
#include <vector>

#include "lumexp/autograd.hpp"
#include "lumexp/rng.hpp"

namespace lumexp::nn {

using ag::Var;

struct NamedParam {
  std::string name;
  Var param;
};

using ParamList = std::vector<NamedParam>;

// All learned weights start as N(0, 0.02), biases at zero, instance-norm
// scale at one. Keeps seeded runs reproducible.
Tensor normal_init(Shape shape, Rng& rng, double stddev = 0.02);

struct Conv2d {
  Var w, b;
  int64_t stride = 1;
  int64_t pt = 0, pl = 0, pb = 0, pr = 0;

  Conv2d() = default;
  Conv2d(int64_t in_ch, int64_t out_ch, int64_t kernel, int64_t stride, int64_t pad, Rng& rng);

  // Asymmetric padding, used by the size-preserving 4x4 decoder convs.
  Conv2d& pads(int64_t top, int64_t left, int64_t bottom, int64_t right);

  Var operator()(const Var& x) const;
  void collect(const std::string& prefix, ParamList& out) const;
  int64_t param_count() const { return w->value.numel() + b->value.numel(); }
};

struct ConvTranspose2d {
  Var w, b;  // [IC, OC, k, k]
  int64_t stride = 2, pad = 1;

  ConvTranspose2d() = default;
  ConvTranspose2d(int64_t in_ch, int64_t out_ch, int64_t kernel, int64_t stride, int64_t pad,
                  Rng& rng);

  Var operator()(const Var& x) const;
  void collect(const std::string& prefix, ParamList& out) const;
};

struct Linear {
  Var w, b;  // [OUT, IN]

  Linear() = default;
  Linear(int64_t in_dim, int64_t out_dim, Rng& rng);

  Var operator()(const Var& x) const;
  void collect(const std::string& prefix, ParamList& out) const;
  int64_t param_count() const { return w->value.numel() + b->value.numel(); }
};

struct InstanceNorm2d {
  Var gamma, beta;

  InstanceNorm2d() = default;
  explicit InstanceNorm2d(int64_t channels);

  Var operator()(const Var& x) const;
  void collect(const std::string& prefix, ParamList& out) const;
};

// Two 3x3 convs with instance norm, ReLU between, additive skip.
// Zero weights make it the identity map.
struct ResidualBlock {
  Conv2d conv1, conv2;
  InstanceNorm2d norm1, norm2;

  ResidualBlock() = default;
  ResidualBlock(int64_t channels, Rng& rng);

  Var operator()(const Var& x) const;
  void collect(const std::string& prefix, ParamList& out) const;
};

struct Adam {
  double lr = 1e-4, beta1 = 0.5, beta2 = 0.999, eps = 1e-8;
  std::vector<Var> params;
  std::vector<Tensor> m, v;
  int64_t t = 0;

  Adam() = default;
  Adam(std::vector<Var> parameters, double lr, double beta1, double beta2);

  void zero_grad();
  void step();
};

std::vector<Var> raw_params(const ParamList& named);

// FNV-1a over every parameter byte; used to assert frozen networks stay frozen.
uint64_t params_hash(const ParamList& named);

}  // namespace lumexp::nn
