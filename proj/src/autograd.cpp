#include "lumexp/autograd.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_map>
#include <unordered_set>

namespace lumexp::ag {

namespace {

thread_local int g_no_grad_depth = 0;

Var make_op(const char* name, Tensor value, std::vector<Var> parents, BackwardFn bw) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  bool rg = false;
  if (g_no_grad_depth == 0)
    for (const auto& p : parents)
      if (p && p->requires_grad) rg = true;
  if (rg) {
    node->requires_grad = true;
    node->parents = std::move(parents);
    node->backward_fn = std::move(bw);
    node->op = name;
  }
  return node;
}

void check_same_shape(const Var& a, const Var& b, const char* op) {
  if (a->value.shape != b->value.shape)
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a->value.shape) +
                         " vs " + shape_str(b->value.shape));
}

// Odometer walk over `shape` tracking two strided offsets; stride 0 pins a dim.
template <class F>
void strided_iter(const Shape& shape, const std::vector<int64_t>& sa,
                  const std::vector<int64_t>& sb, F&& f) {
  const int r = static_cast<int>(shape.size());
  if (r == 0) {
    f(0, 0);
    return;
  }
  std::vector<int64_t> idx(static_cast<size_t>(r), 0);
  int64_t oa = 0, ob = 0;
  const int64_t total = numel_of(shape);
  for (int64_t it = 0; it < total; ++it) {
    f(oa, ob);
    for (int d = r - 1; d >= 0; --d) {
      idx[d]++;
      oa += sa[d];
      ob += sb[d];
      if (idx[d] < shape[d]) break;
      oa -= sa[d] * shape[d];
      ob -= sb[d] * shape[d];
      idx[d] = 0;
    }
  }
}

std::vector<int64_t> row_major_strides(const Shape& s) {
  std::vector<int64_t> st(s.size(), 1);
  for (int i = static_cast<int>(s.size()) - 2; i >= 0; --i) st[i] = st[i + 1] * s[i + 1];
  return st;
}

Tensor map_unary(const Tensor& a, double (*f)(double)) {
  Tensor out(a.shape);
  for (size_t i = 0; i < a.data.size(); ++i) out.data[i] = f(a.data[i]);
  return out;
}

}  // namespace

Var leaf(Tensor value, bool requires_grad) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  node->requires_grad = requires_grad;
  return node;
}

Var constant(Tensor value) { return leaf(std::move(value), false); }

Var scalar(double v) { return constant(Tensor::scalar(v)); }

bool grad_enabled() { return g_no_grad_depth == 0; }

NoGrad::NoGrad() { ++g_no_grad_depth; }
NoGrad::~NoGrad() { --g_no_grad_depth; }

// ---------------------------------------------------------------------------
// engine
// ---------------------------------------------------------------------------

namespace {

std::vector<Node*> topo_order(Node* root) {
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, size_t>> stack;
  stack.emplace_back(root, 0);
  visited.insert(root);
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* p = node->parents[next++].get();
      if (p && p->requires_grad && !visited.count(p)) {
        visited.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  return order;  // parents before children; iterate in reverse for backprop
}

std::unordered_map<Node*, Var> run_engine(const Var& root, bool create_graph,
                                          bool into_leaf_grads) {
  if (root->value.numel() != 1)
    throw DimensionError("backward requires a scalar root, got " + shape_str(root->value.shape));
  std::unordered_map<Node*, Var> accum;
  if (!root->requires_grad) return accum;

  auto order = topo_order(root.get());
  accum[root.get()] = constant(Tensor::ones(root->value.shape));

  std::unique_ptr<NoGrad> guard;
  if (!create_graph) guard = std::make_unique<NoGrad>();

  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* node = *it;
    auto found = accum.find(node);
    if (found == accum.end()) continue;
    Var gout = found->second;
    if (node->is_leaf()) {
      if (into_leaf_grads && node->requires_grad) {
        Tensor& g = node->ensure_grad();
        for (size_t i = 0; i < g.data.size(); ++i) g.data[i] += gout->value.data[i];
      }
      continue;
    }
    std::vector<Var> pgrads = node->backward_fn(*node, gout);
    for (size_t i = 0; i < node->parents.size(); ++i) {
      const Var& p = node->parents[i];
      if (!p || !p->requires_grad || i >= pgrads.size() || !pgrads[i]) continue;
      if (pgrads[i]->value.shape != p->value.shape)
        throw DimensionError(std::string("backward of ") + node->op + " produced grad " +
                             shape_str(pgrads[i]->value.shape) + " for parent " +
                             shape_str(p->value.shape));
      auto acc = accum.find(p.get());
      if (acc == accum.end())
        accum[p.get()] = pgrads[i];
      else
        acc->second = add(acc->second, pgrads[i]);
    }
  }
  return accum;
}

}  // namespace

void backward(const Var& root) { run_engine(root, /*create_graph=*/false, /*into_leaf=*/true); }

std::vector<Var> grad(const Var& root, const std::vector<Var>& inputs, bool create_graph) {
  auto accum = run_engine(root, create_graph, /*into_leaf=*/false);
  std::vector<Var> out;
  out.reserve(inputs.size());
  for (const auto& in : inputs) {
    auto it = accum.find(in.get());
    if (it == accum.end())
      out.push_back(constant(Tensor::zeros(in->value.shape)));
    else
      out.push_back(it->second);
  }
  return out;
}

// ---------------------------------------------------------------------------
// elementwise
// ---------------------------------------------------------------------------

Var add(const Var& a, const Var& b) {
  check_same_shape(a, b, "add");
  Tensor out(a->value.shape);
  for (size_t i = 0; i < out.data.size(); ++i) out.data[i] = a->value.data[i] + b->value.data[i];
  return make_op("add", std::move(out), {a, b}, [](Node&, const Var& g) {
    return std::vector<Var>{g, g};
  });
}

Var sub(const Var& a, const Var& b) {
  check_same_shape(a, b, "sub");
  Tensor out(a->value.shape);
  for (size_t i = 0; i < out.data.size(); ++i) out.data[i] = a->value.data[i] - b->value.data[i];
  return make_op("sub", std::move(out), {a, b}, [](Node&, const Var& g) {
    return std::vector<Var>{g, neg(g)};
  });
}

Var mul(const Var& a, const Var& b) {
  check_same_shape(a, b, "mul");
  Tensor out(a->value.shape);
  for (size_t i = 0; i < out.data.size(); ++i) out.data[i] = a->value.data[i] * b->value.data[i];
  return make_op("mul", std::move(out), {a, b}, [](Node& self, const Var& g) {
    return std::vector<Var>{mul(g, self.parents[1]), mul(g, self.parents[0])};
  });
}

Var divv(const Var& a, const Var& b) {
  check_same_shape(a, b, "div");
  Tensor out(a->value.shape);
  for (size_t i = 0; i < out.data.size(); ++i) out.data[i] = a->value.data[i] / b->value.data[i];
  return make_op("div", std::move(out), {a, b}, [](Node& self, const Var& g) {
    const Var& a = self.parents[0];
    const Var& b = self.parents[1];
    Var ga = divv(g, b);
    Var gb = neg(mul(g, divv(a, square(b))));
    return std::vector<Var>{ga, gb};
  });
}

Var neg(const Var& a) { return mul_scalar(a, -1.0); }

Var add_scalar(const Var& a, double c) {
  Tensor out(a->value.shape);
  for (size_t i = 0; i < out.data.size(); ++i) out.data[i] = a->value.data[i] + c;
  return make_op("add_scalar", std::move(out), {a}, [](Node&, const Var& g) {
    return std::vector<Var>{g};
  });
}

Var mul_scalar(const Var& a, double c) {
  Tensor out(a->value.shape);
  for (size_t i = 0; i < out.data.size(); ++i) out.data[i] = a->value.data[i] * c;
  return make_op("mul_scalar", std::move(out), {a}, [c](Node&, const Var& g) {
    return std::vector<Var>{mul_scalar(g, c)};
  });
}

Var sub_scalar(const Var& a, double c) { return add_scalar(a, -c); }

Var rsub_scalar(double c, const Var& a) { return add_scalar(mul_scalar(a, -1.0), c); }

Var relu(const Var& a) { return leaky_relu(a, 0.0); }

Var leaky_relu(const Var& a, double slope) {
  Tensor out(a->value.shape);
  for (size_t i = 0; i < out.data.size(); ++i) {
    double v = a->value.data[i];
    out.data[i] = v > 0.0 ? v : slope * v;
  }
  return make_op("leaky_relu", std::move(out), {a}, [slope](Node& self, const Var& g) {
    // Mask is locally constant in the input, so treating it as a constant is
    // exact for higher-order gradients almost everywhere.
    Tensor mask(self.parents[0]->value.shape);
    const auto& x = self.parents[0]->value.data;
    for (size_t i = 0; i < mask.data.size(); ++i) mask.data[i] = x[i] > 0.0 ? 1.0 : slope;
    return std::vector<Var>{mul(g, constant(std::move(mask)))};
  });
}

Var tanh_op(const Var& a) {
  Tensor out = map_unary(a->value, [](double v) { return std::tanh(v); });
  return make_op("tanh", std::move(out), {a}, [](Node& self, const Var& g) {
    Tensor d(self.value.shape);
    for (size_t i = 0; i < d.data.size(); ++i) {
      double y = self.value.data[i];
      d.data[i] = 1.0 - y * y;
    }
    // First-order only; tanh sits outside every second-order path (the critic
    // has no tanh), so the derivative is materialized as a constant.
    return std::vector<Var>{mul(g, constant(std::move(d)))};
  });
}

Var exp_op(const Var& a) {
  Tensor out = map_unary(a->value, [](double v) { return std::exp(v); });
  return make_op("exp", std::move(out), {a}, [](Node& self, const Var& g) {
    return std::vector<Var>{mul(g, self.shared_from_this())};
  });
}

Var log_op(const Var& a) {
  Tensor out = map_unary(a->value, [](double v) { return std::log(v); });
  return make_op("log", std::move(out), {a}, [](Node& self, const Var& g) {
    return std::vector<Var>{divv(g, self.parents[0])};
  });
}

Var sqrt_op(const Var& a) {
  Tensor out = map_unary(a->value, [](double v) { return std::sqrt(v); });
  return make_op("sqrt", std::move(out), {a}, [](Node& self, const Var& g) {
    Var y = self.shared_from_this();
    return std::vector<Var>{divv(mul_scalar(g, 0.5), y)};
  });
}

Var square(const Var& a) {
  Tensor out(a->value.shape);
  for (size_t i = 0; i < out.data.size(); ++i) {
    double v = a->value.data[i];
    out.data[i] = v * v;
  }
  return make_op("square", std::move(out), {a}, [](Node& self, const Var& g) {
    return std::vector<Var>{mul(g, mul_scalar(self.parents[0], 2.0))};
  });
}

Var abs_op(const Var& a) {
  Tensor out = map_unary(a->value, [](double v) { return std::fabs(v); });
  return make_op("abs", std::move(out), {a}, [](Node& self, const Var& g) {
    Tensor sign(self.parents[0]->value.shape);
    const auto& x = self.parents[0]->value.data;
    for (size_t i = 0; i < sign.data.size(); ++i)
      sign.data[i] = x[i] > 0.0 ? 1.0 : (x[i] < 0.0 ? -1.0 : 0.0);
    return std::vector<Var>{mul(g, constant(std::move(sign)))};
  });
}

// ---------------------------------------------------------------------------
// linear algebra / structure
// ---------------------------------------------------------------------------

Var matmul(const Var& a, const Var& b) {
  if (a->value.rank() != 2 || b->value.rank() != 2 || a->value.dim(1) != b->value.dim(0))
    throw DimensionError("matmul: incompatible shapes " + shape_str(a->value.shape) + " x " +
                         shape_str(b->value.shape));
  const int64_t m = a->value.dim(0), k = a->value.dim(1), n = b->value.dim(1);
  Tensor out({m, n});
  gemm(false, false, m, n, k, 1.0, a->value.ptr(), k, b->value.ptr(), n, 0.0, out.ptr(), n);
  return make_op("matmul", std::move(out), {a, b}, [](Node& self, const Var& g) {
    const Var& a = self.parents[0];
    const Var& b = self.parents[1];
    return std::vector<Var>{matmul(g, transpose(b)), matmul(transpose(a), g)};
  });
}

Var transpose(const Var& a) {
  if (a->value.rank() != 2) throw DimensionError("transpose expects rank 2");
  const int64_t m = a->value.dim(0), n = a->value.dim(1);
  Tensor out({n, m});
  for (int64_t i = 0; i < m; ++i)
    for (int64_t j = 0; j < n; ++j) out.data[static_cast<size_t>(j * m + i)] = a->value.at2(i, j);
  return make_op("transpose", std::move(out), {a}, [](Node&, const Var& g) {
    return std::vector<Var>{transpose(g)};
  });
}

Var reshape(const Var& a, Shape s) {
  if (numel_of(s) != a->value.numel())
    throw DimensionError("reshape: numel mismatch " + shape_str(a->value.shape) + " -> " +
                         shape_str(s));
  Tensor out(s, a->value.data);
  Shape in_shape = a->value.shape;
  return make_op("reshape", std::move(out), {a}, [in_shape](Node&, const Var& g) {
    return std::vector<Var>{reshape(g, in_shape)};
  });
}

Var permute(const Var& a, std::vector<int> axes) {
  const int r = a->value.rank();
  if (static_cast<int>(axes.size()) != r) throw DimensionError("permute: axes rank mismatch");
  Shape out_shape(static_cast<size_t>(r));
  for (int i = 0; i < r; ++i) out_shape[i] = a->value.dim(axes[i]);
  const auto in_strides = row_major_strides(a->value.shape);
  std::vector<int64_t> walk_in(static_cast<size_t>(r));
  for (int i = 0; i < r; ++i) walk_in[i] = in_strides[axes[i]];
  Tensor out(out_shape);
  const auto out_strides = row_major_strides(out_shape);
  double* dst = out.ptr();
  const double* src = a->value.ptr();
  strided_iter(out_shape, out_strides, walk_in,
               [&](int64_t o, int64_t i) { dst[o] = src[i]; });
  std::vector<int> inverse(static_cast<size_t>(r));
  for (int i = 0; i < r; ++i) inverse[axes[i]] = i;
  return make_op("permute", std::move(out), {a}, [inverse](Node&, const Var& g) {
    return std::vector<Var>{permute(g, inverse)};
  });
}

namespace {

Tensor reduce_sum_kernel(const Tensor& x, const std::vector<int>& axes) {
  Shape out_shape = x.shape;
  for (int ax : axes) out_shape[static_cast<size_t>(ax)] = 1;
  Tensor out(out_shape);
  auto out_strides = row_major_strides(out_shape);
  for (int ax : axes) out_strides[static_cast<size_t>(ax)] = 0;
  const auto in_strides = row_major_strides(x.shape);
  const double* src = x.ptr();
  double* dst = out.ptr();
  strided_iter(x.shape, in_strides, out_strides,
               [&](int64_t i, int64_t o) { dst[o] += src[i]; });
  return out;
}

}  // namespace

Var reduce_sum(const Var& a, std::vector<int> axes, bool keepdims) {
  for (int ax : axes)
    if (ax < 0 || ax >= a->value.rank()) throw DimensionError("reduce_sum: bad axis");
  Tensor out = reduce_sum_kernel(a->value, axes);
  Shape in_shape = a->value.shape;
  Var kept = make_op("reduce_sum", std::move(out), {a}, [in_shape](Node&, const Var& g) {
    return std::vector<Var>{broadcast_to(g, in_shape)};
  });
  if (keepdims) return kept;
  Shape squeezed;
  std::vector<bool> drop(static_cast<size_t>(a->value.rank()), false);
  for (int ax : axes) drop[static_cast<size_t>(ax)] = true;
  for (int i = 0; i < a->value.rank(); ++i)
    if (!drop[static_cast<size_t>(i)]) squeezed.push_back(a->value.dim(i));
  if (squeezed.empty()) squeezed.push_back(1);
  return reshape(kept, squeezed);
}

Var reduce_mean(const Var& a, std::vector<int> axes, bool keepdims) {
  int64_t count = 1;
  for (int ax : axes) count *= a->value.dim(ax);
  return mul_scalar(reduce_sum(a, std::move(axes), keepdims), 1.0 / static_cast<double>(count));
}

Var broadcast_to(const Var& a, Shape s) {
  if (a->value.rank() != static_cast<int>(s.size()))
    throw DimensionError("broadcast_to: rank mismatch");
  std::vector<int> expanded;
  for (int i = 0; i < a->value.rank(); ++i) {
    if (a->value.dim(i) == s[static_cast<size_t>(i)]) continue;
    if (a->value.dim(i) != 1)
      throw DimensionError("broadcast_to: cannot expand " + shape_str(a->value.shape) + " to " +
                           shape_str(s));
    expanded.push_back(i);
  }
  if (expanded.empty() && a->value.shape == s) {
    // Identity broadcast; still emit a node so the graph stays uniform.
  }
  auto in_strides = row_major_strides(a->value.shape);
  for (int ax : expanded) in_strides[static_cast<size_t>(ax)] = 0;
  Tensor out(s);
  const auto out_strides = row_major_strides(s);
  const double* src = a->value.ptr();
  double* dst = out.ptr();
  strided_iter(s, out_strides, in_strides, [&](int64_t o, int64_t i) { dst[o] = src[i]; });
  return make_op("broadcast_to", std::move(out), {a}, [expanded](Node&, const Var& g) {
    return std::vector<Var>{reduce_sum(g, expanded, /*keepdims=*/true)};
  });
}

Var concat(const std::vector<Var>& xs, int axis) {
  if (xs.empty()) throw DimensionError("concat: empty input list");
  const int r = xs[0]->value.rank();
  Shape out_shape = xs[0]->value.shape;
  int64_t total = 0;
  for (const auto& x : xs) {
    if (x->value.rank() != r) throw DimensionError("concat: rank mismatch");
    for (int d = 0; d < r; ++d)
      if (d != axis && x->value.dim(d) != out_shape[static_cast<size_t>(d)])
        throw DimensionError("concat: off-axis shape mismatch");
    total += x->value.dim(axis);
  }
  out_shape[static_cast<size_t>(axis)] = total;
  Tensor out(out_shape);
  // outer: product of dims before axis; inner: product after
  int64_t outer = 1, inner = 1;
  for (int d = 0; d < axis; ++d) outer *= out_shape[static_cast<size_t>(d)];
  for (int d = axis + 1; d < r; ++d) inner *= out_shape[static_cast<size_t>(d)];
  int64_t offset = 0;
  for (const auto& x : xs) {
    const int64_t ax = x->value.dim(axis);
    for (int64_t o = 0; o < outer; ++o) {
      const double* src = x->value.ptr() + o * ax * inner;
      double* dst = out.ptr() + (o * total + offset) * inner;
      std::copy(src, src + ax * inner, dst);
    }
    offset += ax;
  }
  std::vector<int64_t> sizes;
  for (const auto& x : xs) sizes.push_back(x->value.dim(axis));
  return make_op("concat", std::move(out), xs, [axis, sizes](Node&, const Var& g) {
    std::vector<Var> grads;
    int64_t start = 0;
    for (int64_t sz : sizes) {
      grads.push_back(slice(g, axis, start, sz));
      start += sz;
    }
    return grads;
  });
}

Var slice(const Var& a, int axis, int64_t start, int64_t len) {
  const int r = a->value.rank();
  if (axis < 0 || axis >= r || start < 0 || start + len > a->value.dim(axis))
    throw DimensionError("slice: out of range");
  Shape out_shape = a->value.shape;
  out_shape[static_cast<size_t>(axis)] = len;
  int64_t outer = 1, inner = 1;
  for (int d = 0; d < axis; ++d) outer *= a->value.dim(d);
  for (int d = axis + 1; d < r; ++d) inner *= a->value.dim(d);
  const int64_t ax = a->value.dim(axis);
  Tensor out(out_shape);
  for (int64_t o = 0; o < outer; ++o) {
    const double* src = a->value.ptr() + (o * ax + start) * inner;
    std::copy(src, src + len * inner, out.ptr() + o * len * inner);
  }
  Shape in_shape = a->value.shape;
  return make_op("slice", std::move(out), {a}, [axis, start, len, in_shape](Node&, const Var& g) {
    std::vector<Var> parts;
    if (start > 0) {
      Shape s = in_shape;
      s[static_cast<size_t>(axis)] = start;
      parts.push_back(constant(Tensor::zeros(s)));
    }
    parts.push_back(g);
    const int64_t after = in_shape[static_cast<size_t>(axis)] - start - len;
    if (after > 0) {
      Shape s = in_shape;
      s[static_cast<size_t>(axis)] = after;
      parts.push_back(constant(Tensor::zeros(s)));
    }
    return std::vector<Var>{concat(parts, axis)};
  });
}

Var sum_all(const Var& a) {
  std::vector<int> axes(static_cast<size_t>(a->value.rank()));
  for (int i = 0; i < a->value.rank(); ++i) axes[static_cast<size_t>(i)] = i;
  return reshape(reduce_sum(a, axes, true), {1});
}

Var mean_all(const Var& a) {
  return mul_scalar(sum_all(a), 1.0 / static_cast<double>(a->value.numel()));
}

Var detach(const Var& a) { return constant(a->value); }

// ---------------------------------------------------------------------------
// convolution plumbing
// ---------------------------------------------------------------------------

ConvGeom make_conv_geom(const Shape& input, int64_t kh, int64_t kw, int64_t sh, int64_t sw,
                        int64_t pt, int64_t pl, int64_t pb, int64_t pr) {
  if (input.size() != 4) throw DimensionError("conv input must be [N,C,H,W]");
  ConvGeom g{input[0], input[1], input[2], input[3], kh, kw, sh, sw, pt, pl, pb, pr, 0, 0};
  const int64_t eff_h = g.h + pt + pb, eff_w = g.w + pl + pr;
  if (eff_h < kh || eff_w < kw) throw DimensionError("conv kernel larger than padded input");
  g.oh = (eff_h - kh) / sh + 1;
  g.ow = (eff_w - kw) / sw + 1;
  return g;
}

Var im2col(const Var& x, const ConvGeom& g) {
  const int64_t rows = g.c * g.kh * g.kw;
  const int64_t cols_n = g.n * g.oh * g.ow;
  Tensor out({rows, cols_n});
  const double* src = x->value.ptr();
  double* dst = out.ptr();
  for (int64_t c = 0; c < g.c; ++c)
    for (int64_t ki = 0; ki < g.kh; ++ki)
      for (int64_t kj = 0; kj < g.kw; ++kj) {
        const int64_t r = (c * g.kh + ki) * g.kw + kj;
        double* row = dst + r * cols_n;
        for (int64_t n = 0; n < g.n; ++n) {
          const double* plane = src + (n * g.c + c) * g.h * g.w;
          for (int64_t oh = 0; oh < g.oh; ++oh) {
            const int64_t ih = oh * g.sh - g.pt + ki;
            double* q = row + (n * g.oh + oh) * g.ow;
            if (ih < 0 || ih >= g.h) {
              std::fill(q, q + g.ow, 0.0);
              continue;
            }
            const double* line = plane + ih * g.w;
            for (int64_t ow = 0; ow < g.ow; ++ow) {
              const int64_t iw = ow * g.sw - g.pl + kj;
              q[ow] = (iw >= 0 && iw < g.w) ? line[iw] : 0.0;
            }
          }
        }
      }
  ConvGeom geom = g;
  return make_op("im2col", std::move(out), {x}, [geom](Node&, const Var& gr) {
    return std::vector<Var>{col2im(gr, geom)};
  });
}

Var col2im(const Var& cols, const ConvGeom& g) {
  const int64_t rows = g.c * g.kh * g.kw;
  const int64_t cols_n = g.n * g.oh * g.ow;
  if (cols->value.rank() != 2 || cols->value.dim(0) != rows || cols->value.dim(1) != cols_n)
    throw DimensionError("col2im: column matrix shape mismatch");
  Tensor out({g.n, g.c, g.h, g.w});
  const double* src = cols->value.ptr();
  double* dst = out.ptr();
  for (int64_t c = 0; c < g.c; ++c)
    for (int64_t ki = 0; ki < g.kh; ++ki)
      for (int64_t kj = 0; kj < g.kw; ++kj) {
        const int64_t r = (c * g.kh + ki) * g.kw + kj;
        const double* row = src + r * cols_n;
        for (int64_t n = 0; n < g.n; ++n) {
          double* plane = dst + (n * g.c + c) * g.h * g.w;
          for (int64_t oh = 0; oh < g.oh; ++oh) {
            const int64_t ih = oh * g.sh - g.pt + ki;
            if (ih < 0 || ih >= g.h) continue;
            const double* q = row + (n * g.oh + oh) * g.ow;
            double* line = plane + ih * g.w;
            for (int64_t ow = 0; ow < g.ow; ++ow) {
              const int64_t iw = ow * g.sw - g.pl + kj;
              if (iw >= 0 && iw < g.w) line[iw] += q[ow];
            }
          }
        }
      }
  ConvGeom geom = g;
  return make_op("col2im", std::move(out), {cols}, [geom](Node&, const Var& gr) {
    return std::vector<Var>{im2col(gr, geom)};
  });
}

Var pixel_shuffle(const Var& x, int64_t r) {
  const auto& s = x->value.shape;
  if (s.size() != 4 || s[1] % (r * r) != 0)
    throw DimensionError("pixel_shuffle: channels must divide r^2");
  const int64_t n = s[0], c_out = s[1] / (r * r), h = s[2], w = s[3];
  Tensor out({n, c_out, h * r, w * r});
  for (int64_t b = 0; b < n; ++b)
    for (int64_t c = 0; c < c_out; ++c)
      for (int64_t dr = 0; dr < r; ++dr)
        for (int64_t dc = 0; dc < r; ++dc) {
          const int64_t cin = c * r * r + dr * r + dc;
          for (int64_t i = 0; i < h; ++i)
            for (int64_t j = 0; j < w; ++j)
              out.at4(b, c, i * r + dr, j * r + dc) = x->value.at4(b, cin, i, j);
        }
  return make_op("pixel_shuffle", std::move(out), {x}, [r](Node&, const Var& g) {
    return std::vector<Var>{pixel_unshuffle(g, r)};
  });
}

Var pixel_unshuffle(const Var& x, int64_t r) {
  const auto& s = x->value.shape;
  if (s.size() != 4 || s[2] % r != 0 || s[3] % r != 0)
    throw DimensionError("pixel_unshuffle: spatial dims must divide r");
  const int64_t n = s[0], c_in = s[1], h = s[2] / r, w = s[3] / r;
  Tensor out({n, c_in * r * r, h, w});
  for (int64_t b = 0; b < n; ++b)
    for (int64_t c = 0; c < c_in; ++c)
      for (int64_t dr = 0; dr < r; ++dr)
        for (int64_t dc = 0; dc < r; ++dc) {
          const int64_t cout = c * r * r + dr * r + dc;
          for (int64_t i = 0; i < h; ++i)
            for (int64_t j = 0; j < w; ++j)
              out.at4(b, cout, i, j) = x->value.at4(b, c, i * r + dr, j * r + dc);
        }
  return make_op("pixel_unshuffle", std::move(out), {x}, [r](Node&, const Var& g) {
    return std::vector<Var>{pixel_shuffle(g, r)};
  });
}

namespace {

struct LerpTap {
  int64_t i0, i1;
  double w0, w1;
};

std::vector<LerpTap> bilinear_taps(int64_t out_len, int64_t in_len) {
  std::vector<LerpTap> taps(static_cast<size_t>(out_len));
  for (int64_t o = 0; o < out_len; ++o) {
    const double src = (static_cast<double>(o) + 0.5) / 2.0 - 0.5;
    double f = std::floor(src);
    double t = src - f;
    int64_t i0 = static_cast<int64_t>(f);
    int64_t i1 = i0 + 1;
    if (i0 < 0) i0 = 0;
    if (i1 < 0) i1 = 0;
    if (i0 > in_len - 1) i0 = in_len - 1;
    if (i1 > in_len - 1) i1 = in_len - 1;
    taps[static_cast<size_t>(o)] = {i0, i1, 1.0 - t, t};
  }
  return taps;
}

}  // namespace

Var upsample_bilinear2x(const Var& x) {
  const auto& s = x->value.shape;
  if (s.size() != 4) throw DimensionError("upsample expects [N,C,H,W]");
  const int64_t n = s[0], c = s[1], h = s[2], w = s[3];
  const auto ty = bilinear_taps(h * 2, h);
  const auto tx = bilinear_taps(w * 2, w);
  Tensor out({n, c, h * 2, w * 2});
  for (int64_t b = 0; b < n; ++b)
    for (int64_t ch = 0; ch < c; ++ch)
      for (int64_t oy = 0; oy < h * 2; ++oy) {
        const auto& wy = ty[static_cast<size_t>(oy)];
        for (int64_t ox = 0; ox < w * 2; ++ox) {
          const auto& wx = tx[static_cast<size_t>(ox)];
          out.at4(b, ch, oy, ox) = wy.w0 * (wx.w0 * x->value.at4(b, ch, wy.i0, wx.i0) +
                                            wx.w1 * x->value.at4(b, ch, wy.i0, wx.i1)) +
                                   wy.w1 * (wx.w0 * x->value.at4(b, ch, wy.i1, wx.i0) +
                                            wx.w1 * x->value.at4(b, ch, wy.i1, wx.i1));
        }
      }
  return make_op("bilinear2x", std::move(out), {x}, [](Node&, const Var& g) {
    return std::vector<Var>{upsample_bilinear2x_adjoint(g)};
  });
}

Var upsample_bilinear2x_adjoint(const Var& gy) {
  const auto& s = gy->value.shape;
  if (s.size() != 4 || s[2] % 2 != 0 || s[3] % 2 != 0)
    throw DimensionError("bilinear adjoint expects even spatial dims");
  const int64_t n = s[0], c = s[1], h = s[2] / 2, w = s[3] / 2;
  const auto ty = bilinear_taps(h * 2, h);
  const auto tx = bilinear_taps(w * 2, w);
  Tensor out({n, c, h, w});
  for (int64_t b = 0; b < n; ++b)
    for (int64_t ch = 0; ch < c; ++ch)
      for (int64_t oy = 0; oy < h * 2; ++oy) {
        const auto& wy = ty[static_cast<size_t>(oy)];
        for (int64_t ox = 0; ox < w * 2; ++ox) {
          const auto& wx = tx[static_cast<size_t>(ox)];
          const double v = gy->value.at4(b, ch, oy, ox);
          out.at4(b, ch, wy.i0, wx.i0) += wy.w0 * wx.w0 * v;
          out.at4(b, ch, wy.i0, wx.i1) += wy.w0 * wx.w1 * v;
          out.at4(b, ch, wy.i1, wx.i0) += wy.w1 * wx.w0 * v;
          out.at4(b, ch, wy.i1, wx.i1) += wy.w1 * wx.w1 * v;
        }
      }
  return make_op("bilinear2x_adjoint", std::move(out), {gy}, [](Node&, const Var& g) {
    return std::vector<Var>{upsample_bilinear2x(g)};
  });
}

// ---------------------------------------------------------------------------
// composites
// ---------------------------------------------------------------------------

Var conv2d(const Var& x, const Var& w, const Var& b, int64_t stride, int64_t pt, int64_t pl,
           int64_t pb, int64_t pr) {
  const auto& ws = w->value.shape;
  if (ws.size() != 4) throw DimensionError("conv2d weight must be [OC,C,kh,kw]");
  const int64_t oc = ws[0], kh = ws[2], kw = ws[3];
  if (ws[1] != x->value.dim(1))
    throw DimensionError("conv2d: input channels " + std::to_string(x->value.dim(1)) +
                         " != weight channels " + std::to_string(ws[1]));
  ConvGeom g = make_conv_geom(x->value.shape, kh, kw, stride, stride, pt, pl, pb, pr);
  Var cols = im2col(x, g);
  Var w2 = reshape(w, {oc, g.c * kh * kw});
  Var y = matmul(w2, cols);                       // [OC, N*OH*OW]
  y = reshape(y, {oc, g.n, g.oh * g.ow});
  y = permute(y, {1, 0, 2});
  y = reshape(y, {g.n, oc, g.oh, g.ow});
  if (b) y = bias_add(y, b);
  return y;
}

Var conv_transpose2d(const Var& x, const Var& w, const Var& b, int64_t stride, int64_t pad) {
  const auto& ws = w->value.shape;
  if (ws.size() != 4) throw DimensionError("conv_transpose2d weight must be [IC,OC,kh,kw]");
  const int64_t ic = ws[0], oc = ws[1], kh = ws[2], kw = ws[3];
  if (ic != x->value.dim(1)) throw DimensionError("conv_transpose2d: channel mismatch");
  const int64_t n = x->value.dim(0), h = x->value.dim(2), win = x->value.dim(3);
  const int64_t out_h = (h - 1) * stride + kh - 2 * pad;
  const int64_t out_w = (win - 1) * stride + kw - 2 * pad;
  ConvGeom g = make_conv_geom({n, oc, out_h, out_w}, kh, kw, stride, stride, pad, pad, pad, pad);
  if (g.oh != h || g.ow != win)
    throw DimensionError("conv_transpose2d: geometry does not invert cleanly");
  Var x2 = reshape(permute(x, {1, 0, 2, 3}), {ic, n * h * win});
  Var w2 = reshape(w, {ic, oc * kh * kw});
  Var cols = matmul(transpose(w2), x2);  // [OC*kh*kw, N*h*w]
  Var y = col2im(cols, g);
  if (b) y = bias_add(y, b);
  return y;
}

Var linear(const Var& x, const Var& w, const Var& b) {
  Var y = matmul(x, transpose(w));
  if (b) {
    Var bb = reshape(b, {1, b->value.numel()});
    y = add(y, broadcast_to(bb, y->value.shape));
  }
  return y;
}

Var bias_add(const Var& x, const Var& b) {
  const int64_t c = x->value.dim(1);
  if (b->value.numel() != c) throw DimensionError("bias_add: channel mismatch");
  Var bb = reshape(b, {1, c, 1, 1});
  return add(x, broadcast_to(bb, x->value.shape));
}

Var instance_norm(const Var& x, const Var& gamma, const Var& beta, double eps) {
  const auto& s = x->value.shape;
  if (s.size() != 4) throw DimensionError("instance_norm expects [N,C,H,W]");
  Var mu = reduce_mean(x, {2, 3}, true);
  Var xc = sub(x, broadcast_to(mu, s));
  Var var = reduce_mean(square(xc), {2, 3}, true);
  Var denom = sqrt_op(add_scalar(var, eps));
  Var y = divv(xc, broadcast_to(denom, s));
  Var g4 = reshape(gamma, {1, s[1], 1, 1});
  Var b4 = reshape(beta, {1, s[1], 1, 1});
  return add(mul(y, broadcast_to(g4, s)), broadcast_to(b4, s));
}

Var softmax_cross_entropy(const Var& logits, const Tensor& onehot) {
  const auto& s = logits->value.shape;
  if (s.size() != 2 || onehot.shape != s)
    throw DimensionError("softmax_cross_entropy expects matching [N,K] logits and one-hot");
  const int64_t n = s[0], k = s[1];
  // Row maxima enter as constants; the log-sum-exp gradient is exact because
  // the shift cancels.
  Tensor m({n, 1});
  for (int64_t i = 0; i < n; ++i) {
    double best = logits->value.at2(i, 0);
    for (int64_t j = 1; j < k; ++j) best = std::max(best, logits->value.at2(i, j));
    m.data[static_cast<size_t>(i)] = best;
  }
  Var z = sub(logits, broadcast_to(constant(std::move(m)), s));
  Var lse = log_op(reduce_sum(exp_op(z), {1}, true));
  Var logp = sub(z, broadcast_to(lse, s));
  Var picked = mul(logp, constant(onehot));
  return mul_scalar(sum_all(picked), -1.0 / static_cast<double>(n));
}

}  // namespace lumexp::ag
