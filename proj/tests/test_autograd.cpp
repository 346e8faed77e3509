// Finite-difference validation of the autodiff engine, including the
// second-order path used by the gradient penalty.
#include <cmath>
#include <functional>

#include "doctest.h"
#include "lumexp/autograd.hpp"
#include "lumexp/nn.hpp"
#include "lumexp/rng.hpp"

using namespace lumexp;
using namespace lumexp::ag;

namespace {

Tensor random_tensor(Shape s, Rng& rng, double scale = 1.0) {
  Tensor t(std::move(s));
  for (auto& v : t.data) v = rng.normal(0.0, scale);
  return t;
}

// Central-difference gradient of f w.r.t. x.
Tensor numeric_grad(const std::function<double(const Tensor&)>& f, const Tensor& x,
                    double h = 1e-5) {
  Tensor g(x.shape);
  Tensor probe = x;
  for (size_t i = 0; i < x.data.size(); ++i) {
    probe.data[i] = x.data[i] + h;
    const double fp = f(probe);
    probe.data[i] = x.data[i] - h;
    const double fm = f(probe);
    probe.data[i] = x.data[i];
    g.data[i] = (fp - fm) / (2.0 * h);
  }
  return g;
}

double rel_err(const Tensor& a, const Tensor& b) {
  double num = 0.0, den = 0.0;
  for (size_t i = 0; i < a.data.size(); ++i) {
    num += (a.data[i] - b.data[i]) * (a.data[i] - b.data[i]);
    den += a.data[i] * a.data[i] + b.data[i] * b.data[i];
  }
  return std::sqrt(num / (den + 1e-30));
}

// Runs backward on scalar expr(x) and compares against numeric differences.
void check_gradient(const std::function<Var(const Var&)>& expr, const Tensor& x0,
                    double tol = 1e-7, double h = 1e-5) {
  Var x = leaf(x0, true);
  Var y = expr(x);
  backward(y);
  auto f = [&](const Tensor& probe) {
    NoGrad ng;
    return expr(constant(probe))->value.item();
  };
  Tensor numeric = numeric_grad(f, x0, h);
  CAPTURE(rel_err(x->grad, numeric));
  CHECK(rel_err(x->grad, numeric) < tol);
}

}  // namespace

TEST_CASE("elementwise op gradients match finite differences") {
  Rng rng(7);
  Tensor x0 = random_tensor({3, 4}, rng);
  check_gradient([](const Var& x) { return sum_all(square(x)); }, x0);
  check_gradient([](const Var& x) { return sum_all(mul(x, x)); }, x0);
  check_gradient([](const Var& x) { return mean_all(tanh_op(x)); }, x0);
  check_gradient([](const Var& x) { return sum_all(leaky_relu(x, 0.01)); }, x0, 1e-6);
  check_gradient([](const Var& x) { return sum_all(exp_op(x)); }, x0);
  check_gradient([](const Var& x) { return sum_all(abs_op(x)); }, x0, 1e-6);
  check_gradient([](const Var& x) { return sum_all(sqrt_op(add_scalar(square(x), 0.5))); }, x0);
  check_gradient([](const Var& x) { return sum_all(log_op(add_scalar(square(x), 1.0))); }, x0);
  check_gradient(
      [](const Var& x) { return sum_all(divv(x, add_scalar(square(x), 2.0))); }, x0);
}

TEST_CASE("matmul and structural op gradients") {
  Rng rng(13);
  Tensor a0 = random_tensor({4, 5}, rng);
  Tensor b0 = random_tensor({5, 3}, rng);

  Var b_const = constant(b0);
  check_gradient([&](const Var& a) { return sum_all(square(matmul(a, b_const))); }, a0);

  Var a_const = constant(a0);
  check_gradient([&](const Var& b) { return sum_all(square(matmul(a_const, b))); }, b0);

  Tensor x0 = random_tensor({2, 3, 4, 4}, rng);
  check_gradient(
      [](const Var& x) { return sum_all(square(permute(x, {1, 0, 3, 2}))); }, x0);
  check_gradient(
      [](const Var& x) { return sum_all(square(reduce_sum(x, {2, 3}, true))); }, x0);
  check_gradient(
      [](const Var& x) {
        return sum_all(square(broadcast_to(reduce_mean(x, {1}, true), x->value.shape)));
      },
      x0);
  check_gradient([](const Var& x) { return sum_all(square(slice(x, 1, 1, 2))); }, x0);
  check_gradient(
      [](const Var& x) {
        return sum_all(square(concat({slice(x, 1, 0, 1), slice(x, 1, 1, 2)}, 1)));
      },
      x0);
}

TEST_CASE("im2col/col2im and bilinear resize are adjoint pairs") {
  Rng rng(17);
  ConvGeom g = make_conv_geom({2, 3, 6, 6}, 4, 4, 2, 2, 1, 1, 1, 1);
  Tensor x = random_tensor({2, 3, 6, 6}, rng);
  Tensor y = random_tensor({3 * 4 * 4, 2 * g.oh * g.ow}, rng);
  // <im2col(x), y> == <x, col2im(y)>
  Var fx = im2col(constant(x), g);
  Var fy = col2im(constant(y), g);
  double lhs = 0.0, rhs = 0.0;
  for (size_t i = 0; i < fx->value.data.size(); ++i) lhs += fx->value.data[i] * y.data[i];
  for (size_t i = 0; i < fy->value.data.size(); ++i) rhs += fy->value.data[i] * x.data[i];
  CHECK(lhs == doctest::Approx(rhs).epsilon(1e-12));

  Tensor u = random_tensor({1, 2, 5, 7}, rng);
  Tensor v = random_tensor({1, 2, 10, 14}, rng);
  Var fu = upsample_bilinear2x(constant(u));
  Var fv = upsample_bilinear2x_adjoint(constant(v));
  lhs = rhs = 0.0;
  for (size_t i = 0; i < fu->value.data.size(); ++i) lhs += fu->value.data[i] * v.data[i];
  for (size_t i = 0; i < fv->value.data.size(); ++i) rhs += fv->value.data[i] * u.data[i];
  CHECK(lhs == doctest::Approx(rhs).epsilon(1e-12));
}

TEST_CASE("conv2d gradients w.r.t. input, weight and bias") {
  Rng rng(23);
  Tensor x0 = random_tensor({2, 3, 6, 6}, rng);
  Tensor w0 = random_tensor({4, 3, 4, 4}, rng, 0.3);
  Tensor b0 = random_tensor({4}, rng, 0.3);

  Var w = constant(w0);
  Var b = constant(b0);
  check_gradient(
      [&](const Var& x) { return mean_all(square(conv2d(x, w, b, 2, 1, 1, 1, 1))); }, x0);

  Var xc = constant(x0);
  check_gradient(
      [&](const Var& wv) { return mean_all(square(conv2d(xc, wv, b, 2, 1, 1, 1, 1))); }, w0);
  check_gradient(
      [&](const Var& bv) { return mean_all(square(conv2d(xc, w, bv, 2, 1, 1, 1, 1))); }, b0);

  // asymmetric padding, stride 1 (decoder shape-preserving conv)
  Tensor w1 = random_tensor({2, 3, 4, 4}, rng, 0.3);
  Var w1v = constant(w1);
  check_gradient(
      [&](const Var& x) {
        Var y = conv2d(x, w1v, nullptr, 1, 1, 1, 2, 2);
        return mean_all(square(y));
      },
      x0);
}

TEST_CASE("conv_transpose2d doubles spatial size and matches finite differences") {
  Rng rng(29);
  Tensor x0 = random_tensor({2, 4, 5, 5}, rng);
  Tensor w0 = random_tensor({4, 3, 4, 4}, rng, 0.3);
  Var w = constant(w0);
  Var y = conv_transpose2d(constant(x0), w, nullptr, 2, 1);
  CHECK(y->value.shape == Shape{2, 3, 10, 10});

  check_gradient(
      [&](const Var& x) { return mean_all(square(conv_transpose2d(x, w, nullptr, 2, 1))); }, x0);
  Var xc = constant(x0);
  check_gradient(
      [&](const Var& wv) { return mean_all(square(conv_transpose2d(xc, wv, nullptr, 2, 1))); },
      w0);
}

TEST_CASE("pixel shuffle rearranges channels to space and inverts") {
  Rng rng(31);
  Tensor x0 = random_tensor({1, 8, 3, 3}, rng);
  Var y = pixel_shuffle(constant(x0), 2);
  CHECK(y->value.shape == Shape{1, 2, 6, 6});
  CHECK(y->value.at4(0, 0, 0, 1) == x0.at4(0, 1, 0, 0));
  CHECK(y->value.at4(0, 0, 1, 0) == x0.at4(0, 2, 0, 0));
  Var back = pixel_unshuffle(y, 2);
  for (size_t i = 0; i < x0.data.size(); ++i) CHECK(back->value.data[i] == x0.data[i]);
  check_gradient([](const Var& x) { return sum_all(square(pixel_shuffle(x, 2))); }, x0);
}

TEST_CASE("instance norm and softmax cross-entropy gradients") {
  Rng rng(37);
  Tensor x0 = random_tensor({2, 3, 4, 4}, rng);
  Tensor g0 = random_tensor({3}, rng, 0.5);
  Tensor beta0 = random_tensor({3}, rng, 0.5);
  Var gm = constant(g0);
  Var bt = constant(beta0);
  // Per-element gradients here are ~1e-3, so a larger step keeps the central
  // difference above round-off.
  check_gradient(
      [&](const Var& x) { return mean_all(square(instance_norm(x, gm, bt))); }, x0, 1e-6, 1e-3);
  Var xc = constant(x0);
  check_gradient(
      [&](const Var& g) { return mean_all(square(instance_norm(xc, g, bt))); }, g0, 1e-6, 1e-3);

  Tensor logits0 = random_tensor({4, 5}, rng);
  Tensor onehot({4, 5});
  for (int64_t i = 0; i < 4; ++i) onehot.at2(i, (i * 2) % 5) = 1.0;
  check_gradient(
      [&](const Var& l) { return softmax_cross_entropy(l, onehot); }, logits0, 1e-7);
}

TEST_CASE("second-order gradients: d/dw of an input-gradient norm (penalty path)") {
  // f(x; w1, w2) = sum(leaky_relu(conv(x)) convolved again); the test checks
  // d/dw of ((||grad_x f|| - 1)^2), the exact structure of the penalty term.
  Rng rng(41);
  Tensor x0 = random_tensor({2, 2, 6, 6}, rng, 0.7);
  Tensor w1_0 = random_tensor({3, 2, 3, 3}, rng, 0.4);
  Tensor w2_0 = random_tensor({1, 3, 3, 3}, rng, 0.4);

  auto penalty = [&](const Var& w1, const Var& w2, const Var& x) {
    Var h = leaky_relu(conv2d(x, w1, nullptr, 1, 1, 1, 1, 1), 0.01);
    Var out = conv2d(h, w2, nullptr, 1, 1, 1, 1, 1);
    Var s = sum_all(out);
    Var gx = grad(s, {x}, /*create_graph=*/true)[0];
    Var norm = sqrt_op(reduce_sum(square(gx), {0, 1, 2, 3}, false));
    return square(sub_scalar(norm, 1.0));
  };

  for (auto which : {0, 1}) {
    Tensor& w_target = which == 0 ? w1_0 : w2_0;
    Var x = leaf(x0, true);  // x must require grad for the inner grad()
    Var w_var = leaf(w_target, true);
    Var w_other = constant(which == 0 ? w2_0 : w1_0);
    Var p = which == 0 ? penalty(w_var, w_other, x) : penalty(w_other, w_var, x);
    backward(p);

    auto f = [&](const Tensor& probe) {
      Var xx = leaf(x0, true);
      Var wv = constant(probe);
      Var other = constant(which == 0 ? w2_0 : w1_0);
      Var val = which == 0 ? penalty(wv, other, xx) : penalty(other, wv, xx);
      return val->value.item();
    };
    Tensor numeric = numeric_grad(f, w_target, 1e-5);
    CAPTURE(which);
    CHECK(rel_err(w_var->grad, numeric) < 1e-6);
  }
}

TEST_CASE("grad() returns zeros for unused inputs and respects detach") {
  Rng rng(43);
  Tensor a0 = random_tensor({3}, rng);
  Var a = leaf(a0, true);
  Var b = leaf(random_tensor({3}, rng), true);
  Var y = sum_all(square(a));
  auto gs = grad(y, {a, b}, false);
  CHECK(gs[1]->value.data[0] == 0.0);
  CHECK(gs[1]->value.data[2] == 0.0);

  Var z = sum_all(square(detach(a)));
  CHECK_FALSE(z->requires_grad);
}

TEST_CASE("backward accumulates into leaf grads across calls") {
  Var a = leaf(Tensor::scalar(3.0), true);
  Var y1 = square(a);
  backward(y1);
  CHECK(a->grad.item() == doctest::Approx(6.0));
  Var y2 = mul_scalar(a, 4.0);
  backward(y2);
  CHECK(a->grad.item() == doctest::Approx(10.0));
  a->zero_grad();
  CHECK(a->grad.item() == 0.0);
}

TEST_CASE("adam minimizes a simple quadratic") {
  Var p = leaf(Tensor::full({4}, 5.0), true);
  nn::Adam opt({p}, 0.1, 0.9, 0.999);
  for (int i = 0; i < 300; ++i) {
    opt.zero_grad();
    Var loss = sum_all(square(sub_scalar(p, 2.0)));
    backward(loss);
    opt.step();
  }
  for (double v : p->value.data) CHECK(v == doctest::Approx(2.0).epsilon(0.01));
}

TEST_CASE("forward passes are deterministic for identical seeds") {
  auto run = [](uint64_t seed) {
    Rng rng(seed);
    nn::Conv2d conv(3, 8, 4, 2, 1, rng);
    Tensor x = random_tensor({2, 3, 8, 8}, rng);
    return conv(constant(x))->value;
  };
  Tensor a = run(99), b = run(99);
  for (size_t i = 0; i < a.data.size(); ++i) CHECK(a.data[i] == b.data[i]);
}
