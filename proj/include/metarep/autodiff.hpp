#pragma once

// Reverse-mode differentiation over dense tensors.
//
// Every operation produces a Var that remembers its inputs and a backward
// rule. Backward rules are themselves written in terms of recorded
// operations, so a gradient returned with create_graph=true can be
// differentiated again. Unrolled second-order MAML depends on this.
//
// Records are plain shared_ptr graphs: there is no global tape, and a
// graph is freed when the last Var referring to it goes away.

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <memory>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "metarep/tensor.hpp"

namespace metarep {

class Var;

// (inputs, output, upstream gradient) -> one gradient per input, null where
// the input does not need one.
using BackwardFn =
    std::function<std::vector<Var>(const std::vector<Var>&, const Var&, const Var&)>;

namespace detail {

struct Node {
  Tensor value;
  std::vector<std::shared_ptr<Node>> inputs;
  BackwardFn backward;
  const char* op = "leaf";
  bool requires_grad = false;

  Node(Tensor v, bool rg) : value(std::move(v)), requires_grad(rg) {}
  Node(const Node&) = delete;
  Node& operator=(const Node&) = delete;

  // Long unrolled chains would otherwise recurse once per node on release.
  ~Node() {
    std::vector<std::shared_ptr<Node>> pending = std::move(inputs);
    while (!pending.empty()) {
      std::shared_ptr<Node> n = std::move(pending.back());
      pending.pop_back();
      if (n && n.use_count() == 1) {
        for (auto& in : n->inputs) pending.push_back(std::move(in));
        n->inputs.clear();
      }
    }
  }
};

inline bool& recording_flag() {
  thread_local bool enabled = true;
  return enabled;
}

}  // namespace detail

// Disables recording on this thread for its lifetime: operations return
// constants with no history.
class NoRecordGuard {
 public:
  NoRecordGuard() : saved_(detail::recording_flag()) { detail::recording_flag() = false; }
  explicit NoRecordGuard(bool disable) : saved_(detail::recording_flag()) {
    if (disable) detail::recording_flag() = false;
  }
  ~NoRecordGuard() { detail::recording_flag() = saved_; }
  NoRecordGuard(const NoRecordGuard&) = delete;
  NoRecordGuard& operator=(const NoRecordGuard&) = delete;

 private:
  bool saved_;
};

inline bool is_recording() { return detail::recording_flag(); }

class Var {
 public:
  Var() = default;

  static Var param(Tensor value) {
    return Var(std::make_shared<detail::Node>(std::move(value), true));
  }
  static Var constant(Tensor value) {
    return Var(std::make_shared<detail::Node>(std::move(value), false));
  }

  // Record an operation result. History is kept only while recording and
  // when at least one input needs gradients.
  static Var make(const char* op, Tensor value, std::vector<Var> inputs, BackwardFn backward) {
    value.check_finite(op);
    bool rg = false;
    if (is_recording())
      for (const Var& in : inputs) rg = rg || in.requires_grad();
    auto node = std::make_shared<detail::Node>(std::move(value), rg);
    node->op = op;
    if (rg) {
      node->inputs.reserve(inputs.size());
      for (Var& in : inputs) node->inputs.push_back(std::move(in.node_));
      node->backward = std::move(backward);
    }
    return Var(std::move(node));
  }

  bool defined() const { return static_cast<bool>(node_); }
  const Tensor& value() const { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  std::size_t size() const { return node_->value.size(); }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  const char* op() const { return node_->op; }

  // Same value, no history.
  Var detach() const { return Var::constant(node_->value); }

  const detail::Node* id() const { return node_.get(); }

 private:
  friend std::vector<Var> grad(const Var&, const std::vector<Var>&, bool, std::vector<bool>*);

  explicit Var(std::shared_ptr<detail::Node> n) : node_(std::move(n)) {}

  std::shared_ptr<detail::Node> node_;
};

// ----------------------------------------------------------------------------
// Operations. Each primitive's backward is expressed with primitives, which
// closes the set under differentiation.

inline Var add(const Var& a, const Var& b);
inline Var sub(const Var& a, const Var& b);
inline Var mul(const Var& a, const Var& b);
inline Var scale(const Var& a, double c);
inline Var add_scalar(const Var& a, double c);
inline Var powc(const Var& a, double p);
inline Var exp(const Var& a);
inline Var relu(const Var& a);
inline Var reshape(const Var& a, Shape shape);
inline Var transpose(const Var& a);
inline Var matmul(const Var& a, const Var& b);

// Tensor viewed as [outer, keep, inner]: reduce_keep sums over outer and
// inner, leaving shape {keep}; expand_keep is its adjoint.
struct KeepAxis {
  std::size_t outer = 1, keep = 1, inner = 1;
};
inline Var reduce_keep(const Var& a, KeepAxis ax);
inline Var expand_keep(const Var& v, KeepAxis ax, Shape out_shape);

inline Var sum(const Var& a);
inline Var mean(const Var& a);

using IndexList = std::shared_ptr<const std::vector<std::size_t>>;
// out[i] = a[idx[i]]
inline Var gather(const Var& a, IndexList idx, Shape out_shape);
// out[idx[i]] += g[i]
inline Var scatter_add(const Var& g, IndexList idx, Shape out_shape);

struct Conv2dGeom {
  std::size_t n, c, h, w;     // input
  std::size_t o, kh, kw;      // kernel
  std::size_t stride;
  std::size_t oh, ow;         // output
  std::size_t pad_top, pad_left;
};
// SAME padding (TensorFlow convention): out = ceil(in / stride), extra
// padding row/column goes to the bottom/right.
inline Conv2dGeom conv2d_geometry(const Shape& input, const Shape& kernel, std::size_t stride);

inline Var conv2d(const Var& x, const Var& w, std::size_t stride);
inline Var conv2d_input_grad(const Var& gy, const Var& w, const Shape& x_shape, std::size_t stride);
inline Var conv2d_kernel_grad(const Var& x, const Var& gy, const Shape& w_shape, std::size_t stride);

// Row-wise log-softmax of an N x K matrix.
inline Var log_softmax(const Var& logits);
// Mean over rows of -log softmax(logits)[row, label].
inline Var softmax_cross_entropy(const Var& logits, std::span<const int> labels);

// 2x2 / stride 2 max pooling, SAME padding.
inline Var max_pool2x2(const Var& x);

// Per-channel normalization of an NCHW batch by its own statistics (no
// running averages), then gamma/beta. Built from primitives, so gradients
// flow through the batch mean and variance.
inline Var batch_norm_train(const Var& x, const Var& gamma, const Var& beta, double eps);

// x[N x d] * w[d x k] + b[k]
inline Var dense(const Var& x, const Var& w, const Var& b);

// Convenience operators.
inline Var operator+(const Var& a, const Var& b) { return add(a, b); }
inline Var operator-(const Var& a, const Var& b) { return sub(a, b); }
inline Var operator*(const Var& a, const Var& b) { return mul(a, b); }
inline Var operator*(double c, const Var& a) { return scale(a, c); }

// ----------------------------------------------------------------------------
// Gradients.

// d loss / d wrt for a scalar loss. With create_graph the returned Vars are
// themselves recorded and can be differentiated again. Inputs the loss does
// not reach get an explicit zero; when `unreachable` is non-null it receives
// one flag per wrt entry.
inline std::vector<Var> grad(const Var& loss, const std::vector<Var>& wrt, bool create_graph = false,
                      std::vector<bool>* unreachable = nullptr);

// ============================================================================
// Implementation

namespace detail {

inline void require_same_shape(const Var& a, const Var& b, const char* op) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
}

template <typename F>
Tensor map_values(const Tensor& a, F f) {
  Tensor out = Tensor::uninitialized(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = f(a[i]);
  return out;
}

template <typename F>
Tensor zip_values(const Tensor& a, const Tensor& b, F f) {
  Tensor out = Tensor::uninitialized(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = f(a[i], b[i]);
  return out;
}

inline Var grad_if(bool needed, const std::function<Var()>& f) { return needed ? f() : Var(); }

}  // namespace detail

inline Var add(const Var& a, const Var& b) {
  detail::require_same_shape(a, b, "add");
  return Var::make("add", detail::zip_values(a.value(), b.value(), std::plus<>()), {a, b},
                   [](const std::vector<Var>& in, const Var&, const Var& g) {
                     return std::vector<Var>{in[0].requires_grad() ? g : Var(),
                                             in[1].requires_grad() ? g : Var()};
                   });
}

inline Var sub(const Var& a, const Var& b) {
  detail::require_same_shape(a, b, "sub");
  return Var::make("sub", detail::zip_values(a.value(), b.value(), std::minus<>()), {a, b},
                   [](const std::vector<Var>& in, const Var&, const Var& g) {
                     return std::vector<Var>{in[0].requires_grad() ? g : Var(),
                                             in[1].requires_grad() ? scale(g, -1.0) : Var()};
                   });
}

inline Var mul(const Var& a, const Var& b) {
  detail::require_same_shape(a, b, "mul");
  return Var::make("mul", detail::zip_values(a.value(), b.value(), std::multiplies<>()), {a, b},
                   [](const std::vector<Var>& in, const Var&, const Var& g) {
                     return std::vector<Var>{
                         detail::grad_if(in[0].requires_grad(), [&] { return mul(g, in[1]); }),
                         detail::grad_if(in[1].requires_grad(), [&] { return mul(g, in[0]); })};
                   });
}

inline Var scale(const Var& a, double c) {
  return Var::make("scale", detail::map_values(a.value(), [c](double v) { return c * v; }), {a},
                   [c](const std::vector<Var>&, const Var&, const Var& g) {
                     return std::vector<Var>{scale(g, c)};
                   });
}

inline Var add_scalar(const Var& a, double c) {
  return Var::make("add_scalar", detail::map_values(a.value(), [c](double v) { return v + c; }),
                   {a}, [](const std::vector<Var>&, const Var&, const Var& g) {
                     return std::vector<Var>{g};
                   });
}

inline Var powc(const Var& a, double p) {
  return Var::make("powc", detail::map_values(a.value(), [p](double v) { return std::pow(v, p); }),
                   {a}, [p](const std::vector<Var>& in, const Var&, const Var& g) {
                     return std::vector<Var>{mul(g, scale(powc(in[0], p - 1.0), p))};
                   });
}

inline Var exp(const Var& a) {
  return Var::make("exp", detail::map_values(a.value(), [](double v) { return std::exp(v); }), {a},
                   [](const std::vector<Var>&, const Var& out, const Var& g) {
                     return std::vector<Var>{mul(g, out)};
                   });
}

// Subgradient at exactly 0 is 0.
inline Var relu(const Var& a) {
  return Var::make("relu", detail::map_values(a.value(), [](double v) { return v > 0.0 ? v : 0.0; }),
                   {a}, [](const std::vector<Var>& in, const Var&, const Var& g) {
                     Var mask = Var::constant(detail::map_values(
                         in[0].value(), [](double v) { return v > 0.0 ? 1.0 : 0.0; }));
                     return std::vector<Var>{mul(g, mask)};
                   });
}

inline Var reshape(const Var& a, Shape shape) {
  Shape original = a.shape();
  return Var::make("reshape", a.value().reshaped(std::move(shape)), {a},
                   [original](const std::vector<Var>&, const Var&, const Var& g) {
                     return std::vector<Var>{reshape(g, original)};
                   });
}

inline Var transpose(const Var& a) {
  if (a.shape().size() != 2) throw ShapeError("transpose: expected matrix, got " + shape_str(a.shape()));
  const std::size_t r = a.shape()[0], c = a.shape()[1];
  Tensor out = Tensor::uninitialized(Shape{c, r});
  const auto& v = a.value();
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = v[i * c + j];
  return Var::make("transpose", std::move(out), {a},
                   [](const std::vector<Var>&, const Var&, const Var& g) {
                     return std::vector<Var>{transpose(g)};
                   });
}

inline Var matmul(const Var& a, const Var& b) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (sa.size() != 2 || sb.size() != 2 || sa[1] != sb[0])
    throw ShapeError("matmul: incompatible shapes " + shape_str(sa) + " and " + shape_str(sb));
  const std::size_t m = sa[0], k = sa[1], n = sb[1];
  Tensor out(Shape{m, n});
  const auto& av = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < m; ++i) {
    double* orow = &out[i * n];
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = av[i * k + p];
      if (aip == 0.0) continue;
      const double* brow = &bv.data()[p * n];
      for (std::size_t j = 0; j < n; ++j) orow[j] += aip * brow[j];
    }
  }
  return Var::make("matmul", std::move(out), {a, b},
                   [](const std::vector<Var>& in, const Var&, const Var& g) {
                     return std::vector<Var>{
                         detail::grad_if(in[0].requires_grad(),
                                         [&] { return matmul(g, transpose(in[1])); }),
                         detail::grad_if(in[1].requires_grad(),
                                         [&] { return matmul(transpose(in[0]), g); })};
                   });
}

inline Var reduce_keep(const Var& a, KeepAxis ax) {
  if (ax.outer * ax.keep * ax.inner != a.size())
    throw ShapeError("reduce_keep: axis split does not cover " + shape_str(a.shape()));
  Tensor out(Shape{ax.keep});
  const auto& v = a.value();
  for (std::size_t o = 0; o < ax.outer; ++o)
    for (std::size_t k = 0; k < ax.keep; ++k) {
      const double* p = &v.data()[(o * ax.keep + k) * ax.inner];
      double s = 0.0;
      for (std::size_t i = 0; i < ax.inner; ++i) s += p[i];
      out[k] += s;
    }
  Shape in_shape = a.shape();
  return Var::make("reduce_keep", std::move(out), {a},
                   [ax, in_shape](const std::vector<Var>&, const Var&, const Var& g) {
                     return std::vector<Var>{expand_keep(g, ax, in_shape)};
                   });
}

inline Var expand_keep(const Var& v, KeepAxis ax, Shape out_shape) {
  if (v.size() != ax.keep || shape_size(out_shape) != ax.outer * ax.keep * ax.inner)
    throw ShapeError("expand_keep: " + shape_str(v.shape()) + " cannot expand to " +
                     shape_str(out_shape));
  Tensor out = Tensor::uninitialized(out_shape);
  const auto& src = v.value();
  for (std::size_t o = 0; o < ax.outer; ++o)
    for (std::size_t k = 0; k < ax.keep; ++k) {
      double* p = &out[(o * ax.keep + k) * ax.inner];
      std::fill(p, p + ax.inner, src[k]);
    }
  return Var::make("expand_keep", std::move(out), {v},
                   [ax](const std::vector<Var>&, const Var&, const Var& g) {
                     return std::vector<Var>{reduce_keep(g, ax)};
                   });
}

inline Var sum(const Var& a) { return reduce_keep(a, {1, 1, a.size()}); }

inline Var mean(const Var& a) { return scale(sum(a), 1.0 / static_cast<double>(a.size())); }

inline Var gather(const Var& a, IndexList idx, Shape out_shape) {
  if (shape_size(out_shape) != idx->size())
    throw ShapeError("gather: index count does not match " + shape_str(out_shape));
  Tensor out = Tensor::uninitialized(out_shape);
  const auto& v = a.value();
  for (std::size_t i = 0; i < idx->size(); ++i) {
    if ((*idx)[i] >= v.size()) throw ShapeError("gather: index out of range");
    out[i] = v[(*idx)[i]];
  }
  Shape in_shape = a.shape();
  return Var::make("gather", std::move(out), {a},
                   [idx, in_shape](const std::vector<Var>&, const Var&, const Var& g) {
                     return std::vector<Var>{scatter_add(g, idx, in_shape)};
                   });
}

inline Var scatter_add(const Var& g, IndexList idx, Shape out_shape) {
  if (g.size() != idx->size()) throw ShapeError("scatter_add: index count does not match input");
  Tensor out(out_shape);
  const auto& v = g.value();
  for (std::size_t i = 0; i < idx->size(); ++i) {
    if ((*idx)[i] >= out.size()) throw ShapeError("scatter_add: index out of range");
    out[(*idx)[i]] += v[i];
  }
  Shape in_shape = g.shape();
  return Var::make("scatter_add", std::move(out), {g},
                   [idx, in_shape](const std::vector<Var>&, const Var&, const Var& gout) {
                     return std::vector<Var>{gather(gout, idx, in_shape)};
                   });
}

// --- convolution -------------------------------------------------------------

inline Conv2dGeom conv2d_geometry(const Shape& input, const Shape& kernel, std::size_t stride) {
  if (input.size() != 4 || kernel.size() != 4)
    throw ShapeError("conv2d: expected NCHW input and OCHW kernel, got " + shape_str(input) +
                     " and " + shape_str(kernel));
  if (input[1] != kernel[1])
    throw ShapeError("conv2d: channel mismatch, input has " + std::to_string(input[1]) +
                     ", kernel expects " + std::to_string(kernel[1]));
  if (stride == 0) throw ShapeError("conv2d: stride must be positive");
  Conv2dGeom g{};
  g.n = input[0];
  g.c = input[1];
  g.h = input[2];
  g.w = input[3];
  g.o = kernel[0];
  g.kh = kernel[2];
  g.kw = kernel[3];
  g.stride = stride;
  g.oh = (g.h + stride - 1) / stride;
  g.ow = (g.w + stride - 1) / stride;
  const auto pad = [&](std::size_t in, std::size_t out, std::size_t k) {
    const std::size_t needed = (out - 1) * stride + k;
    return needed > in ? (needed - in) / 2 : std::size_t{0};
  };
  g.pad_top = pad(g.h, g.oh, g.kh);
  g.pad_left = pad(g.w, g.ow, g.kw);
  return g;
}

namespace detail {

// im2col index map: entry [r][q] is the flat input offset read by kernel tap
// r = (c, ki, kj) at output position q = (n, yi, yj), or -1 in the padding.
struct ConvIndex {
  std::size_t rows = 0, cols = 0;
  std::vector<std::ptrdiff_t> src;
};

inline ConvIndex conv_index(const Conv2dGeom& g) {
  ConvIndex ix;
  ix.rows = g.c * g.kh * g.kw;
  ix.cols = g.n * g.oh * g.ow;
  ix.src.assign(ix.rows * ix.cols, -1);
  for (std::size_t c = 0; c < g.c; ++c)
    for (std::size_t ki = 0; ki < g.kh; ++ki)
      for (std::size_t kj = 0; kj < g.kw; ++kj) {
        const std::size_t r = (c * g.kh + ki) * g.kw + kj;
        std::ptrdiff_t* row = &ix.src[r * ix.cols];
        for (std::size_t n = 0; n < g.n; ++n)
          for (std::size_t yi = 0; yi < g.oh; ++yi) {
            const std::ptrdiff_t xi = static_cast<std::ptrdiff_t>(yi * g.stride + ki) -
                                      static_cast<std::ptrdiff_t>(g.pad_top);
            if (xi < 0 || xi >= static_cast<std::ptrdiff_t>(g.h)) continue;
            for (std::size_t yj = 0; yj < g.ow; ++yj) {
              const std::ptrdiff_t xj = static_cast<std::ptrdiff_t>(yj * g.stride + kj) -
                                        static_cast<std::ptrdiff_t>(g.pad_left);
              if (xj < 0 || xj >= static_cast<std::ptrdiff_t>(g.w)) continue;
              row[(n * g.oh + yi) * g.ow + yj] =
                  static_cast<std::ptrdiff_t>(((n * g.c + c) * g.h + static_cast<std::size_t>(xi)) * g.w) + xj;
            }
          }
      }
  return ix;
}

// Dot product with four independent partial sums (lets the compiler use
// vector lanes without reassociating a single accumulator).
inline double dot(const double* a, const double* b, std::size_t n) {
  double s0 = 0.0, s1 = 0.0, s2 = 0.0, s3 = 0.0;
  std::size_t q = 0;
  for (; q + 4 <= n; q += 4) {
    s0 += a[q] * b[q];
    s1 += a[q + 1] * b[q + 1];
    s2 += a[q + 2] * b[q + 2];
    s3 += a[q + 3] * b[q + 3];
  }
  for (; q < n; ++q) s0 += a[q] * b[q];
  return (s0 + s2) + (s1 + s3);
}

inline Storage im2col(const ConvIndex& ix, const double* x) {
  Storage cols(ix.src.size());
  for (std::size_t i = 0; i < cols.size(); ++i) cols[i] = ix.src[i] < 0 ? 0.0 : x[ix.src[i]];
  return cols;
}

// NCHW output <-> [O x (N*OH*OW)] matrix.
inline Storage output_to_matrix(const Conv2dGeom& g, const double* y) {
  const std::size_t plane = g.oh * g.ow, q = g.n * plane;
  Storage m(g.o * q);
  for (std::size_t n = 0; n < g.n; ++n)
    for (std::size_t o = 0; o < g.o; ++o)
      std::copy_n(y + (n * g.o + o) * plane, plane, m.begin() + static_cast<std::ptrdiff_t>(o * q + n * plane));
  return m;
}

inline void matrix_to_output(const Conv2dGeom& g, const std::vector<double>& m, double* y) {
  const std::size_t plane = g.oh * g.ow, q = g.n * plane;
  for (std::size_t n = 0; n < g.n; ++n)
    for (std::size_t o = 0; o < g.o; ++o)
      std::copy_n(m.begin() + static_cast<std::ptrdiff_t>(o * q + n * plane), plane, y + (n * g.o + o) * plane);
}

}  // namespace detail

inline Var conv2d(const Var& x, const Var& w, std::size_t stride) {
  const Conv2dGeom g = conv2d_geometry(x.shape(), w.shape(), stride);
  const detail::ConvIndex ix = detail::conv_index(g);
  const Storage cols = detail::im2col(ix, x.value().data().data());
  const double* wv = w.value().data().data();
  std::vector<double> ym(g.o * ix.cols, 0.0);
  for (std::size_t o = 0; o < g.o; ++o) {
    double* yrow = &ym[o * ix.cols];
    for (std::size_t r = 0; r < ix.rows; ++r) {
      const double wr = wv[o * ix.rows + r];
      const double* crow = &cols[r * ix.cols];
      for (std::size_t q = 0; q < ix.cols; ++q) yrow[q] += wr * crow[q];
    }
  }
  Tensor out = Tensor::uninitialized(Shape{g.n, g.o, g.oh, g.ow});
  detail::matrix_to_output(g, ym, out.data().data());
  return Var::make("conv2d", std::move(out), {x, w},
                   [stride](const std::vector<Var>& in, const Var&, const Var& gy) {
                     return std::vector<Var>{
                         detail::grad_if(in[0].requires_grad(),
                                         [&] { return conv2d_input_grad(gy, in[1], in[0].shape(), stride); }),
                         detail::grad_if(in[1].requires_grad(), [&] {
                           return conv2d_kernel_grad(in[0], gy, in[1].shape(), stride);
                         })};
                   });
}

// Adjoint of conv2d with respect to its input.
inline Var conv2d_input_grad(const Var& gy, const Var& w, const Shape& x_shape, std::size_t stride) {
  const Conv2dGeom g = conv2d_geometry(x_shape, w.shape(), stride);
  if (gy.shape() != Shape{g.n, g.o, g.oh, g.ow})
    throw ShapeError("conv2d_input_grad: upstream shape " + shape_str(gy.shape()));
  const detail::ConvIndex ix = detail::conv_index(g);
  const Storage gm = detail::output_to_matrix(g, gy.value().data().data());
  const double* wv = w.value().data().data();
  std::vector<double> gcols(ix.rows * ix.cols, 0.0);
  for (std::size_t o = 0; o < g.o; ++o) {
    const double* grow = &gm[o * ix.cols];
    for (std::size_t r = 0; r < ix.rows; ++r) {
      const double wr = wv[o * ix.rows + r];
      double* crow = &gcols[r * ix.cols];
      for (std::size_t q = 0; q < ix.cols; ++q) crow[q] += wr * grow[q];
    }
  }
  Tensor out(x_shape);
  double* xv = out.data().data();
  for (std::size_t i = 0; i < gcols.size(); ++i)
    if (ix.src[i] >= 0) xv[ix.src[i]] += gcols[i];
  return Var::make("conv2d_input_grad", std::move(out), {gy, w},
                   [stride, x_shape](const std::vector<Var>& in, const Var&, const Var& gx) {
                     return std::vector<Var>{
                         detail::grad_if(in[0].requires_grad(), [&] { return conv2d(gx, in[1], stride); }),
                         detail::grad_if(in[1].requires_grad(), [&] {
                           return conv2d_kernel_grad(gx, in[0], in[1].shape(), stride);
                         })};
                   });
}

// Adjoint of conv2d with respect to its kernel.
inline Var conv2d_kernel_grad(const Var& x, const Var& gy, const Shape& w_shape, std::size_t stride) {
  const Conv2dGeom g = conv2d_geometry(x.shape(), w_shape, stride);
  if (gy.shape() != Shape{g.n, g.o, g.oh, g.ow})
    throw ShapeError("conv2d_kernel_grad: upstream shape " + shape_str(gy.shape()));
  const detail::ConvIndex ix = detail::conv_index(g);
  const Storage cols = detail::im2col(ix, x.value().data().data());
  const Storage gm = detail::output_to_matrix(g, gy.value().data().data());
  Tensor out(w_shape);
  double* wv = out.data().data();
  for (std::size_t o = 0; o < g.o; ++o) {
    const double* grow = &gm[o * ix.cols];
    for (std::size_t r = 0; r < ix.rows; ++r) {
      wv[o * ix.rows + r] = detail::dot(grow, &cols[r * ix.cols], ix.cols);
    }
  }
  return Var::make("conv2d_kernel_grad", std::move(out), {x, gy},
                   [stride](const std::vector<Var>& in, const Var&, const Var& gw) {
                     return std::vector<Var>{
                         detail::grad_if(in[0].requires_grad(), [&] {
                           return conv2d_input_grad(in[1], gw, in[0].shape(), stride);
                         }),
                         detail::grad_if(in[1].requires_grad(), [&] { return conv2d(in[0], gw, stride); })};
                   });
}

// --- softmax / loss ----------------------------------------------------------

inline Var log_softmax(const Var& logits) {
  const Shape& s = logits.shape();
  if (s.size() != 2) throw ShapeError("log_softmax: expected N x K, got " + shape_str(s));
  const std::size_t n = s[0], k = s[1];
  Tensor out = Tensor::uninitialized(s);
  const auto& v = logits.value();
  for (std::size_t i = 0; i < n; ++i) {
    const double* row = &v.data()[i * k];
    const double mx = *std::max_element(row, row + k);
    double z = 0.0;
    for (std::size_t j = 0; j < k; ++j) z += std::exp(row[j] - mx);
    const double lse = mx + std::log(z);
    for (std::size_t j = 0; j < k; ++j) out[i * k + j] = row[j] - lse;
  }
  return Var::make("log_softmax", std::move(out), {logits},
                   [n, k](const std::vector<Var>&, const Var& out, const Var& g) {
                     const KeepAxis rows{1, n, k};
                     Var row_total = expand_keep(reduce_keep(g, rows), rows, Shape{n, k});
                     return std::vector<Var>{sub(g, mul(exp(out), row_total))};
                   });
}

inline Var softmax_cross_entropy(const Var& logits, std::span<const int> labels) {
  const Shape& s = logits.shape();
  if (s.size() != 2 || s[0] != labels.size())
    throw ShapeError("softmax_cross_entropy: logits " + shape_str(s) + " with " +
                     std::to_string(labels.size()) + " labels");
  const std::size_t n = s[0], k = s[1];
  auto idx = std::make_shared<std::vector<std::size_t>>(n);
  for (std::size_t i = 0; i < n; ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= k)
      throw ShapeError("softmax_cross_entropy: label " + std::to_string(labels[i]) +
                       " out of range [0, " + std::to_string(k) + ")");
    (*idx)[i] = i * k + static_cast<std::size_t>(labels[i]);
  }
  Var picked = gather(log_softmax(logits), std::move(idx), Shape{n});
  return scale(sum(picked), -1.0 / static_cast<double>(n));
}

inline Var max_pool2x2(const Var& x) {
  const Shape& s = x.shape();
  if (s.size() != 4) throw ShapeError("max_pool2x2: expected NCHW, got " + shape_str(s));
  const std::size_t n = s[0], c = s[1], h = s[2], w = s[3];
  const std::size_t oh = (h + 1) / 2, ow = (w + 1) / 2;
  auto idx = std::make_shared<std::vector<std::size_t>>(n * c * oh * ow);
  const auto& v = x.value();
  std::size_t t = 0;
  for (std::size_t p = 0; p < n * c; ++p)
    for (std::size_t i = 0; i < oh; ++i)
      for (std::size_t j = 0; j < ow; ++j) {
        std::size_t best = (p * h + 2 * i) * w + 2 * j;
        for (std::size_t di = 0; di < 2; ++di)
          for (std::size_t dj = 0; dj < 2; ++dj) {
            const std::size_t r = 2 * i + di, q = 2 * j + dj;
            if (r >= h || q >= w) continue;
            const std::size_t cand = (p * h + r) * w + q;
            if (v[cand] > v[best]) best = cand;
          }
        (*idx)[t++] = best;
      }
  return gather(x, std::move(idx), Shape{n, c, oh, ow});
}

// --- gradient ----------------------------------------------------------------

inline std::vector<Var> grad(const Var& loss, const std::vector<Var>& wrt, bool create_graph,
                             std::vector<bool>* unreachable) {
  if (!loss.defined() || loss.size() != 1)
    throw ShapeError("grad: loss must be a scalar, got " + (loss.defined() ? shape_str(loss.shape()) : "undefined"));

  using NodePtr = std::shared_ptr<detail::Node>;
  // Iterative post-order DFS gives a topological order (inputs first).
  std::vector<NodePtr> order;
  std::unordered_map<const detail::Node*, std::size_t> position;
  if (loss.requires_grad()) {
    std::unordered_map<const detail::Node*, bool> visited;
    std::vector<std::pair<NodePtr, std::size_t>> stack;
    stack.emplace_back(loss.node_, 0);
    visited[loss.node_.get()] = true;
    while (!stack.empty()) {
      auto& [node, next] = stack.back();
      if (next < node->inputs.size()) {
        const NodePtr& child = node->inputs[next++];
        if (child->requires_grad && !visited[child.get()]) {
          visited[child.get()] = true;
          stack.emplace_back(child, 0);
        }
      } else {
        position[node.get()] = order.size();
        order.push_back(node);
        stack.pop_back();
      }
    }
  }

  std::vector<bool> keep(order.size(), false);
  for (const Var& w : wrt) {
    auto it = position.find(w.id());
    if (it != position.end()) keep[it->second] = true;
  }

  NoRecordGuard guard(!create_graph);
  std::vector<Var> grads(order.size());
  if (!order.empty()) grads.back() = Var::constant(Tensor(loss.shape(), 1.0));

  for (std::size_t i = order.size(); i-- > 0;) {
    const NodePtr& node = order[i];
    if (!grads[i].defined() || !node->backward) continue;
    std::vector<Var> inputs;
    inputs.reserve(node->inputs.size());
    for (const NodePtr& in : node->inputs) inputs.push_back(Var(in));
    std::vector<Var> parent_grads = node->backward(inputs, Var(node), grads[i]);
    for (std::size_t j = 0; j < inputs.size(); ++j) {
      if (!parent_grads[j].defined() || !node->inputs[j]->requires_grad) continue;
      const std::size_t p = position.at(node->inputs[j].get());
      grads[p] = grads[p].defined() ? add(grads[p], parent_grads[j]) : parent_grads[j];
    }
    // Intermediate gradients are not needed once propagated.
    if (!node->inputs.empty() && !keep[i]) grads[i] = Var();
  }

  std::vector<Var> result;
  result.reserve(wrt.size());
  if (unreachable) unreachable->assign(wrt.size(), false);
  for (std::size_t k = 0; k < wrt.size(); ++k) {
    auto it = position.find(wrt[k].id());
    if (it != position.end() && grads[it->second].defined()) {
      result.push_back(grads[it->second]);
    } else {
      result.push_back(Var::constant(Tensor(wrt[k].shape(), 0.0)));
      if (unreachable) (*unreachable)[k] = true;
    }
  }
  return result;
}

// --- composites ----------------------------------------------------------------

inline Var batch_norm_train(const Var& x, const Var& gamma, const Var& beta, double eps) {
  if (!(eps > 0.0)) throw Error("batch_norm_train: eps must be positive");
  const Shape& s = x.shape();
  if (s.size() != 4) throw ShapeError("batch_norm_train: expected NCHW, got " + shape_str(s));
  const std::size_t c = s[1];
  if (gamma.shape() != Shape{c} || beta.shape() != Shape{c})
    throw ShapeError("batch_norm_train: gamma/beta must have shape [" + std::to_string(c) + "]");
  const std::size_t per_channel = s[0] * s[2] * s[3];
  if (per_channel < 2) throw ShapeError("batch_norm_train: need at least 2 values per channel");
  const KeepAxis ax{s[0], c, s[2] * s[3]};
  const double inv_m = 1.0 / static_cast<double>(per_channel);
  Var mu = scale(reduce_keep(x, ax), inv_m);
  Var centered = sub(x, expand_keep(mu, ax, s));
  Var var = scale(reduce_keep(mul(centered, centered), ax), inv_m);
  Var inv_std = powc(add_scalar(var, eps), -0.5);
  Var normalized = mul(centered, expand_keep(inv_std, ax, s));
  return add(mul(normalized, expand_keep(gamma, ax, s)), expand_keep(beta, ax, s));
}

inline Var dense(const Var& x, const Var& w, const Var& b) {
  Var y = matmul(x, w);
  const std::size_t n = y.shape()[0], k = y.shape()[1];
  if (b.shape() != Shape{k}) throw ShapeError("dense: bias shape " + shape_str(b.shape()));
  return add(y, expand_keep(b, {n, k, 1}, y.shape()));
}

}  // namespace metarep
