#pragma once

#include <functional>
#include <memory>
#include <vector>

#include "lumexp/tensor.hpp"

namespace lumexp::ag {

class Node;
using Var = std::shared_ptr<Node>;

// Produces gradients w.r.t. each parent given the upstream gradient. The
// returned Vars are built from regular ops, so running backward with
// create_graph=true yields a differentiable gradient graph (required for the
// gradient-penalty term, which needs d/dtheta of an input gradient).
using BackwardFn = std::function<std::vector<Var>(Node& self, const Var& gout)>;

class Node : public std::enable_shared_from_this<Node> {
 public:
  Tensor value;
  Tensor grad;  // leaf accumulation buffer; empty until first backward
  bool requires_grad = false;
  std::vector<Var> parents;
  BackwardFn backward_fn;
  const char* op = "leaf";

  bool is_leaf() const { return parents.empty(); }
  const Shape& shape() const { return value.shape; }
  void zero_grad() {
    if (!grad.data.empty())
      for (auto& g : grad.data) g = 0.0;
  }
  Tensor& ensure_grad() {
    if (grad.data.empty()) grad = Tensor::zeros(value.shape);
    return grad;
  }
};

Var leaf(Tensor value, bool requires_grad = false);
Var constant(Tensor value);
Var scalar(double v);

bool grad_enabled();

struct NoGrad {
  NoGrad();
  ~NoGrad();
  NoGrad(const NoGrad&) = delete;
  NoGrad& operator=(const NoGrad&) = delete;
};

// Accumulates d(root)/d(leaf) into every reachable requires_grad leaf's .grad.
// root must be a scalar.
void backward(const Var& root);

// Functional gradient of a scalar root w.r.t. the given inputs. With
// create_graph=true the results carry history and can be differentiated again.
// Inputs the root does not depend on yield zero tensors.
std::vector<Var> grad(const Var& root, const std::vector<Var>& inputs, bool create_graph);

// ---- elementwise (same shape unless noted) ----
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var divv(const Var& a, const Var& b);
Var neg(const Var& a);
Var add_scalar(const Var& a, double c);
Var mul_scalar(const Var& a, double c);
Var sub_scalar(const Var& a, double c);   // a - c
Var rsub_scalar(double c, const Var& a);  // c - a
Var relu(const Var& a);
Var leaky_relu(const Var& a, double slope);
Var tanh_op(const Var& a);
Var exp_op(const Var& a);
Var log_op(const Var& a);
Var sqrt_op(const Var& a);
Var square(const Var& a);
Var abs_op(const Var& a);

// ---- linear algebra / structure ----
Var matmul(const Var& a, const Var& b);  // 2-D
Var transpose(const Var& a);             // 2-D
Var reshape(const Var& a, Shape s);
Var permute(const Var& a, std::vector<int> axes);
Var reduce_sum(const Var& a, std::vector<int> axes, bool keepdims);
Var reduce_mean(const Var& a, std::vector<int> axes, bool keepdims);
Var broadcast_to(const Var& a, Shape s);  // dims of size 1 expand
Var concat(const std::vector<Var>& xs, int axis);
Var slice(const Var& a, int axis, int64_t start, int64_t len);
Var sum_all(const Var& a);   // -> scalar
Var mean_all(const Var& a);  // -> scalar
Var detach(const Var& a);

// ---- convolution plumbing ----
struct ConvGeom {
  int64_t n, c, h, w;           // input
  int64_t kh, kw, sh, sw;       // kernel, stride
  int64_t pt, pl, pb, pr;       // pads: top, left, bottom, right
  int64_t oh, ow;               // output spatial
};
ConvGeom make_conv_geom(const Shape& input, int64_t kh, int64_t kw, int64_t sh, int64_t sw,
                        int64_t pt, int64_t pl, int64_t pb, int64_t pr);

// x[N,C,H,W] -> cols[C*kh*kw, N*OH*OW]; col2im is its adjoint.
Var im2col(const Var& x, const ConvGeom& g);
Var col2im(const Var& cols, const ConvGeom& g);

Var pixel_shuffle(const Var& x, int64_t r);
Var pixel_unshuffle(const Var& x, int64_t r);

// Factor-2 bilinear resize (align_corners=false) and its adjoint.
Var upsample_bilinear2x(const Var& x);
Var upsample_bilinear2x_adjoint(const Var& gy);

// ---- composites (built from the primitives above) ----
Var conv2d(const Var& x, const Var& w, const Var& b, int64_t stride, int64_t pt, int64_t pl,
           int64_t pb, int64_t pr);
Var conv_transpose2d(const Var& x, const Var& w, const Var& b, int64_t stride, int64_t pad);
Var linear(const Var& x, const Var& w, const Var& b);  // x[N,F], w[OUT,F] -> [N,OUT]
Var instance_norm(const Var& x, const Var& gamma, const Var& beta, double eps = 1e-5);
Var bias_add(const Var& x, const Var& b);  // b[C] over [N,C,H,W]

// Mean over batch of softmax cross-entropy rows; onehot is a constant mask.
Var softmax_cross_entropy(const Var& logits, const Tensor& onehot);

}  // namespace lumexp::ag
