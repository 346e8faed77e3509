#include "lumexp/nn.hpp"

#include <cmath>

namespace lumexp::nn {

using namespace ag;

Tensor normal_init(Shape shape, Rng& rng, double stddev) {
  Tensor t(std::move(shape));
  for (auto& v : t.data) v = rng.normal(0.0, stddev);
  return t;
}

Conv2d::Conv2d(int64_t in_ch, int64_t out_ch, int64_t kernel, int64_t stride_, int64_t pad,
               Rng& rng)
    : stride(stride_), pt(pad), pl(pad), pb(pad), pr(pad) {
  w = leaf(normal_init({out_ch, in_ch, kernel, kernel}, rng), true);
  b = leaf(Tensor::zeros({out_ch}), true);
}

Conv2d& Conv2d::pads(int64_t top, int64_t left, int64_t bottom, int64_t right) {
  pt = top;
  pl = left;
  pb = bottom;
  pr = right;
  return *this;
}

Var Conv2d::operator()(const Var& x) const { return conv2d(x, w, b, stride, pt, pl, pb, pr); }

void Conv2d::collect(const std::string& prefix, ParamList& out) const {
  out.push_back({prefix + ".w", w});
  out.push_back({prefix + ".b", b});
}

ConvTranspose2d::ConvTranspose2d(int64_t in_ch, int64_t out_ch, int64_t kernel, int64_t stride_,
                                 int64_t pad_, Rng& rng)
    : stride(stride_), pad(pad_) {
  w = leaf(normal_init({in_ch, out_ch, kernel, kernel}, rng), true);
  b = leaf(Tensor::zeros({out_ch}), true);
}

Var ConvTranspose2d::operator()(const Var& x) const {
  return conv_transpose2d(x, w, b, stride, pad);
}

void ConvTranspose2d::collect(const std::string& prefix, ParamList& out) const {
  out.push_back({prefix + ".w", w});
  out.push_back({prefix + ".b", b});
}

Linear::Linear(int64_t in_dim, int64_t out_dim, Rng& rng) {
  w = leaf(normal_init({out_dim, in_dim}, rng), true);
  b = leaf(Tensor::zeros({out_dim}), true);
}

Var Linear::operator()(const Var& x) const { return linear(x, w, b); }

void Linear::collect(const std::string& prefix, ParamList& out) const {
  out.push_back({prefix + ".w", w});
  out.push_back({prefix + ".b", b});
}

InstanceNorm2d::InstanceNorm2d(int64_t channels) {
  gamma = leaf(Tensor::ones({channels}), true);
  beta = leaf(Tensor::zeros({channels}), true);
}

Var InstanceNorm2d::operator()(const Var& x) const { return instance_norm(x, gamma, beta); }

void InstanceNorm2d::collect(const std::string& prefix, ParamList& out) const {
  out.push_back({prefix + ".gamma", gamma});
  out.push_back({prefix + ".beta", beta});
}

ResidualBlock::ResidualBlock(int64_t channels, Rng& rng)
    : conv1(channels, channels, 3, 1, 1, rng),
      conv2(channels, channels, 3, 1, 1, rng),
      norm1(channels),
      norm2(channels) {}

Var ResidualBlock::operator()(const Var& x) const {
  Var y = relu(norm1(conv1(x)));
  y = norm2(conv2(y));
  return add(x, y);
}

void ResidualBlock::collect(const std::string& prefix, ParamList& out) const {
  conv1.collect(prefix + ".conv1", out);
  norm1.collect(prefix + ".norm1", out);
  conv2.collect(prefix + ".conv2", out);
  norm2.collect(prefix + ".norm2", out);
}

Adam::Adam(std::vector<Var> parameters, double lr_, double beta1_, double beta2_)
    : lr(lr_), beta1(beta1_), beta2(beta2_), params(std::move(parameters)) {
  m.reserve(params.size());
  v.reserve(params.size());
  for (const auto& p : params) {
    m.push_back(Tensor::zeros(p->value.shape));
    v.push_back(Tensor::zeros(p->value.shape));
  }
}

void Adam::zero_grad() {
  for (auto& p : params) p->zero_grad();
}

void Adam::step() {
  ++t;
  const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(t));
  const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(t));
  for (size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i];
    if (p->grad.data.empty()) continue;
    auto& mi = m[i].data;
    auto& vi = v[i].data;
    const auto& g = p->grad.data;
    auto& x = p->value.data;
    for (size_t j = 0; j < x.size(); ++j) {
      mi[j] = beta1 * mi[j] + (1.0 - beta1) * g[j];
      vi[j] = beta2 * vi[j] + (1.0 - beta2) * g[j] * g[j];
      const double mhat = mi[j] / bc1;
      const double vhat = vi[j] / bc2;
      x[j] -= lr * mhat / (std::sqrt(vhat) + eps);
    }
  }
}

std::vector<Var> raw_params(const ParamList& named) {
  std::vector<Var> out;
  out.reserve(named.size());
  for (const auto& np : named) out.push_back(np.param);
  return out;
}

uint64_t params_hash(const ParamList& named) {
  uint64_t h = 1469598103934665603ULL;
  for (const auto& np : named) {
    h = fnv1a_hash(np.name.data(), np.name.size(), h);
    h = fnv1a_hash(np.param->value.data.data(), np.param->value.data.size() * sizeof(double), h);
  }
  return h;
}

}  // namespace lumexp::nn
