// src/grad.cpp

// Copyright 2026 The mert-lab Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//  http://www.apache.org/licenses/LICENSE-2.0
//
// THIS CODE IS PROVIDED *AS IS* BASIS, WITHOUT WARRANTIES OR CONDITIONS OF ANY
// KIND, EITHER EXPRESS OR IMPLIED, INCLUDING WITHOUT LIMITATION ANY IMPLIED
// WARRANTIES OR CONDITIONS OF TITLE, FITNESS FOR A PARTICULAR PURPOSE,
// MERCHANTABLITY OR NON-INFRINGEMENT.
// See the Apache 2 License for the specific language governing permissions and
// limitations under the License.

#include "mert/grad.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <cmath>
#include <numeric>
#include <random>
#include <sstream>
#include <unordered_set>

namespace mert::grad {

namespace {

thread_local bool g_grad_enabled = true;

template <typename T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapC = Eigen::Map<const RowMatrix<T>>;
template <typename T>
using Map = Eigen::Map<RowMatrix<T>>;

template <typename T>
using NodePtr = std::shared_ptr<Node<T>>;

[[noreturn]] void shape_fail(const char* op, const Shape& a, const Shape& b) {
  throw ShapeError(std::string(op) + ": incompatible shapes " + a.str() + " and " + b.str());
}

template <typename T>
MapC<T> view(const Node<T>& n) {
  return MapC<T>(n.value.data(), static_cast<Eigen::Index>(n.shape.rows),
                 static_cast<Eigen::Index>(n.shape.cols));
}

template <typename T>
MapC<T> grad_view(const Node<T>& n) {
  return MapC<T>(n.grad.data(), static_cast<Eigen::Index>(n.shape.rows),
                 static_cast<Eigen::Index>(n.shape.cols));
}

template <typename T>
Map<T> grad_target(Node<T>& n) {
  auto& g = n.grad_buffer();
  return Map<T>(g.data(), static_cast<Eigen::Index>(n.shape.rows),
                static_cast<Eigen::Index>(n.shape.cols));
}

enum class Broadcast { kSame, kRow, kCol, kScalar };

Broadcast broadcast_kind(const char* op, const Shape& a, const Shape& b) {
  if (a == b) return Broadcast::kSame;
  if (b.rows == 1 && b.cols == 1) return Broadcast::kScalar;
  if (b.rows == 1 && b.cols == a.cols) return Broadcast::kRow;
  if (b.cols == 1 && b.rows == a.rows) return Broadcast::kCol;
  shape_fail(op, a, b);
}

inline std::size_t broadcast_index(Broadcast kind, std::size_t r, std::size_t c,
                                   std::size_t cols) {
  switch (kind) {
    case Broadcast::kSame: return r * cols + c;
    case Broadcast::kRow: return c;
    case Broadcast::kCol: return r;
    case Broadcast::kScalar: return 0;
  }
  return 0;
}

template <typename T>
bool wants_grad(const std::vector<NodePtr<T>>& parents) {
  if (!g_grad_enabled) return false;
  return std::any_of(parents.begin(), parents.end(),
                     [](const NodePtr<T>& p) { return p && p->requires_grad; });
}

}  // namespace

std::string Shape::str() const {
  std::ostringstream os;
  os << "[" << rows << " x " << cols << "]";
  return os.str();
}

template <typename T>
std::vector<T>& Node<T>::grad_buffer() {
  if (grad.empty()) grad.assign(shape.size(), T(0));
  return grad;
}

// ---------------------------------------------------------------------------
// Tensor

template <typename T>
Tensor<T> Tensor<T>::constant(Shape shape, std::vector<T> values) {
  if (values.size() != shape.size()) {
    throw ShapeError("constant: " + std::to_string(values.size()) + " values for shape " +
                     shape.str());
  }
  auto n = std::make_shared<Node<T>>();
  n->shape = shape;
  n->value = std::move(values);
  return Tensor(std::move(n));
}

template <typename T>
Tensor<T> Tensor<T>::zeros(Shape shape) {
  return constant(shape, std::vector<T>(shape.size(), T(0)));
}

template <typename T>
Tensor<T> Tensor<T>::scalar(T value) {
  return constant({1, 1}, {value});
}

template <typename T>
Tensor<T> Tensor<T>::parameter(Shape shape, std::vector<T> values) {
  Tensor t = constant(shape, std::move(values));
  t.node_->requires_grad = true;
  return t;
}

template <typename T>
T Tensor<T>::item() const {
  if (size() != 1) throw ShapeError("item: tensor of shape " + shape().str() + " is not scalar");
  return node_->value[0];
}

template <typename T>
std::span<T> Tensor<T>::mutable_values() {
  if (!node_->is_leaf()) {
    throw std::logic_error(std::string("mutable_values on non-leaf op '") + node_->op + "'");
  }
  return node_->value;
}

template <typename T>
Tensor<T> Tensor<T>::detach() const {
  return constant(shape(), node_->value);
}

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

bool grad_enabled() { return g_grad_enabled; }

template <typename T>
Tensor<T> make_op(const char* name, Shape shape, std::vector<T> value,
                  std::vector<NodePtr<T>> parents, std::function<void(Node<T>&)> backward) {
  for (std::size_t i = 0; i < value.size(); ++i) {
    if (!std::isfinite(value[i])) {
      throw NumericalError(std::string(name) + ": non-finite output at element " +
                           std::to_string(i) + " of " + shape.str());
    }
  }
  auto n = std::make_shared<Node<T>>();
  n->shape = shape;
  n->value = std::move(value);
  n->op = name;
  if (wants_grad(parents)) {
    n->requires_grad = true;
    n->parents = std::move(parents);
    n->backward = std::move(backward);
  }
  return Tensor<T>(std::move(n));
}

// ---------------------------------------------------------------------------
// Elementwise

namespace {

template <typename T, typename Fwd, typename Da, typename Db>
Tensor<T> binary(const char* name, const Tensor<T>& a, const Tensor<T>& b, Fwd fwd, Da da,
                 Db db) {
  const Broadcast kind = broadcast_kind(name, a.shape(), b.shape());
  const std::size_t rows = a.rows(), cols = a.cols();
  std::vector<T> out(a.size());
  const auto av = a.values();
  const auto bv = b.values();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c)
      out[r * cols + c] = fwd(av[r * cols + c], bv[broadcast_index(kind, r, c, cols)]);
  return make_op<T>(name, a.shape(), std::move(out), {a.node(), b.node()},
                    [kind, da, db](Node<T>& self) {
                      Node<T>& pa = *self.parents[0];
                      Node<T>& pb = *self.parents[1];
                      const std::size_t rows = self.shape.rows, cols = self.shape.cols;
                      if (pa.requires_grad) {
                        auto& ga = pa.grad_buffer();
                        for (std::size_t r = 0; r < rows; ++r)
                          for (std::size_t c = 0; c < cols; ++c) {
                            const std::size_t i = r * cols + c;
                            ga[i] += self.grad[i] *
                                     da(pa.value[i], pb.value[broadcast_index(kind, r, c, cols)]);
                          }
                      }
                      if (pb.requires_grad) {
                        auto& gb = pb.grad_buffer();
                        for (std::size_t r = 0; r < rows; ++r)
                          for (std::size_t c = 0; c < cols; ++c) {
                            const std::size_t i = r * cols + c;
                            const std::size_t j = broadcast_index(kind, r, c, cols);
                            gb[j] += self.grad[i] * db(pa.value[i], pb.value[j]);
                          }
                      }
                    });
}

template <typename T, typename Fwd, typename Deriv>
Tensor<T> unary(const char* name, const Tensor<T>& a, Fwd fwd, Deriv deriv) {
  std::vector<T> out(a.size());
  const auto av = a.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(av[i]);
  return make_op<T>(name, a.shape(), std::move(out), {a.node()}, [deriv](Node<T>& self) {
    Node<T>& pa = *self.parents[0];
    auto& ga = pa.grad_buffer();
    for (std::size_t i = 0; i < ga.size(); ++i)
      ga[i] += self.grad[i] * deriv(pa.value[i], self.value[i]);
  });
}

}  // namespace

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return binary<T>(
      "add", a, b, [](T x, T y) { return x + y; }, [](T, T) { return T(1); },
      [](T, T) { return T(1); });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return binary<T>(
      "sub", a, b, [](T x, T y) { return x - y; }, [](T, T) { return T(1); },
      [](T, T) { return T(-1); });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return binary<T>(
      "mul", a, b, [](T x, T y) { return x * y; }, [](T, T y) { return y; },
      [](T x, T) { return x; });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T factor) {
  return unary<T>(
      "scale", a, [factor](T x) { return x * factor; }, [factor](T, T) { return factor; });
}

template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
  constexpr double kInvSqrt2 = 0.70710678118654752440;
  constexpr double kInvSqrt2Pi = 0.39894228040143267794;
  return unary<T>(
      "gelu", x,
      [](T v) { return T(0.5 * v * (1.0 + std::erf(v * kInvSqrt2))); },
      [](T v, T) {
        const double cdf = 0.5 * (1.0 + std::erf(v * kInvSqrt2));
        const double pdf = kInvSqrt2Pi * std::exp(-0.5 * double(v) * double(v));
        return T(cdf + v * pdf);
      });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  return unary<T>(
      "relu", x, [](T v) { return v > T(0) ? v : T(0); },
      [](T v, T) { return v > T(0) ? T(1) : T(0); });
}

template <typename T>
Tensor<T> log(const Tensor<T>& x) {
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (!(x.values()[i] > T(0))) {
      throw NumericalError("log: non-positive input at element " + std::to_string(i));
    }
  }
  return unary<T>(
      "log", x, [](T v) { return std::log(v); }, [](T v, T) { return T(1) / v; });
}

// ---------------------------------------------------------------------------
// Linear algebra

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.cols() != b.rows()) shape_fail("matmul", a.shape(), b.shape());
  const Shape out_shape{a.rows(), b.cols()};
  std::vector<T> out(out_shape.size());
  Map<T>(out.data(), out_shape.rows, out_shape.cols).noalias() = view(*a.node()) * view(*b.node());
  return make_op<T>("matmul", out_shape, std::move(out), {a.node(), b.node()}, [](Node<T>& self) {
    Node<T>& pa = *self.parents[0];
    Node<T>& pb = *self.parents[1];
    const auto g = grad_view(self);
    if (pa.requires_grad) grad_target(pa).noalias() += g * view(pb).transpose();
    if (pb.requires_grad) grad_target(pb).noalias() += view(pa).transpose() * g;
  });
}

template <typename T>
Tensor<T> matmul_nt(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.cols() != b.cols()) shape_fail("matmul_nt", a.shape(), b.shape());
  const Shape out_shape{a.rows(), b.rows()};
  std::vector<T> out(out_shape.size());
  Map<T>(out.data(), out_shape.rows, out_shape.cols).noalias() =
      view(*a.node()) * view(*b.node()).transpose();
  return make_op<T>("matmul_nt", out_shape, std::move(out), {a.node(), b.node()},
                    [](Node<T>& self) {
                      Node<T>& pa = *self.parents[0];
                      Node<T>& pb = *self.parents[1];
                      const auto g = grad_view(self);
                      if (pa.requires_grad) grad_target(pa).noalias() += g * view(pb);
                      if (pb.requires_grad) grad_target(pb).noalias() += g.transpose() * view(pa);
                    });
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& a) {
  const Shape out_shape{a.cols(), a.rows()};
  std::vector<T> out(out_shape.size());
  Map<T>(out.data(), out_shape.rows, out_shape.cols) = view(*a.node()).transpose();
  return make_op<T>("transpose", out_shape, std::move(out), {a.node()}, [](Node<T>& self) {
    Node<T>& pa = *self.parents[0];
    grad_target(pa) += grad_view(self).transpose();
  });
}

template <typename T>
Tensor<T> conv1d(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias,
                 std::size_t kernel, const Conv1dOptions& opt) {
  const std::size_t frames = input.rows();
  const std::size_t in_ch = input.cols();
  const std::size_t out_ch = weight.rows();
  const std::size_t groups = opt.groups;
  if (kernel == 0 || opt.stride == 0 || groups == 0) {
    throw std::invalid_argument("conv1d: kernel, stride and groups must be positive");
  }
  if (in_ch % groups != 0 || out_ch % groups != 0) {
    throw ShapeError("conv1d: channels " + std::to_string(in_ch) + " -> " +
                     std::to_string(out_ch) + " not divisible by groups " +
                     std::to_string(groups));
  }
  const std::size_t in_g = in_ch / groups;
  const std::size_t out_g = out_ch / groups;
  if (weight.cols() != in_g * kernel) shape_fail("conv1d weight", input.shape(), weight.shape());
  if (bias.defined() && !(bias.rows() == 1 && bias.cols() == out_ch)) {
    shape_fail("conv1d bias", weight.shape(), bias.shape());
  }
  const std::size_t padded = frames + opt.pad_left + opt.pad_right;
  if (padded < kernel) {
    throw ShapeError("conv1d: padded length " + std::to_string(padded) + " shorter than kernel " +
                     std::to_string(kernel));
  }
  const std::size_t out_frames = (padded - kernel) / opt.stride + 1;
  const std::size_t patch = in_g * kernel;

  // im2col per group: cols[g] is out_frames x patch.
  auto columns = std::make_shared<std::vector<RowMatrix<T>>>(groups);
  const auto x = input.values();
  for (std::size_t g = 0; g < groups; ++g) {
    RowMatrix<T>& cols = (*columns)[g];
    cols.setZero(out_frames, patch);
    for (std::size_t t = 0; t < out_frames; ++t) {
      const std::size_t base = t * opt.stride;
      for (std::size_t k = 0; k < kernel; ++k) {
        const std::size_t p = base + k;
        if (p < opt.pad_left || p >= opt.pad_left + frames) continue;
        const T* src = x.data() + (p - opt.pad_left) * in_ch + g * in_g;
        for (std::size_t c = 0; c < in_g; ++c) cols(t, c * kernel + k) = src[c];
      }
    }
  }

  std::vector<T> out(out_frames * out_ch);
  Map<T> out_map(out.data(), out_frames, out_ch);
  const auto w = view(*weight.node());
  for (std::size_t g = 0; g < groups; ++g) {
    out_map.middleCols(g * out_g, out_g).noalias() =
        (*columns)[g] * w.middleRows(g * out_g, out_g).transpose();
  }
  if (bias.defined()) {
    const auto b = bias.values();
    for (std::size_t t = 0; t < out_frames; ++t)
      for (std::size_t c = 0; c < out_ch; ++c) out[t * out_ch + c] += b[c];
  }

  std::vector<NodePtr<T>> parents{input.node(), weight.node()};
  if (bias.defined()) parents.push_back(bias.node());
  return make_op<T>(
      "conv1d", {out_frames, out_ch}, std::move(out), std::move(parents),
      [columns, opt, kernel, frames, in_ch, in_g, out_g, groups](Node<T>& self) {
        Node<T>& pin = *self.parents[0];
        Node<T>& pw = *self.parents[1];
        const auto g_out = grad_view(self);
        const std::size_t out_frames = self.shape.rows;
        if (pw.requires_grad) {
          auto gw = grad_target(pw);
          for (std::size_t g = 0; g < groups; ++g) {
            gw.middleRows(g * out_g, out_g).noalias() +=
                g_out.middleCols(g * out_g, out_g).transpose() * (*columns)[g];
          }
        }
        if (self.parents.size() > 2 && self.parents[2]->requires_grad) {
          auto& gb = self.parents[2]->grad_buffer();
          for (std::size_t t = 0; t < out_frames; ++t)
            for (std::size_t c = 0; c < gb.size(); ++c) gb[c] += self.grad[t * gb.size() + c];
        }
        if (pin.requires_grad) {
          auto& gx = pin.grad_buffer();
          const auto w = view(pw);
          for (std::size_t g = 0; g < groups; ++g) {
            const RowMatrix<T> gcols =
                g_out.middleCols(g * out_g, out_g) * w.middleRows(g * out_g, out_g);
            for (std::size_t t = 0; t < out_frames; ++t) {
              const std::size_t base = t * opt.stride;
              for (std::size_t k = 0; k < kernel; ++k) {
                const std::size_t p = base + k;
                if (p < opt.pad_left || p >= opt.pad_left + frames) continue;
                T* dst = gx.data() + (p - opt.pad_left) * in_ch + g * in_g;
                for (std::size_t c = 0; c < in_g; ++c) dst[c] += gcols(t, c * kernel + k);
              }
            }
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Normalisation and softmax

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps) {
  const std::size_t rows = x.rows(), cols = x.cols();
  if (gamma.shape() != Shape{1, cols}) shape_fail("layer_norm gamma", x.shape(), gamma.shape());
  if (beta.shape() != Shape{1, cols}) shape_fail("layer_norm beta", x.shape(), beta.shape());
  auto xhat = std::make_shared<std::vector<T>>(x.size());
  auto rstd = std::make_shared<std::vector<T>>(rows);
  std::vector<T> out(x.size());
  const auto xv = x.values();
  const auto gv = gamma.values();
  const auto bv = beta.values();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = xv.data() + r * cols;
    double m = 0.0;
    for (std::size_t c = 0; c < cols; ++c) m += row[c];
    m /= double(cols);
    double var = 0.0;
    for (std::size_t c = 0; c < cols; ++c) var += (row[c] - m) * (row[c] - m);
    var /= double(cols);
    const double rs = 1.0 / std::sqrt(var + double(eps));
    (*rstd)[r] = T(rs);
    for (std::size_t c = 0; c < cols; ++c) {
      const T h = T((row[c] - m) * rs);
      (*xhat)[r * cols + c] = h;
      out[r * cols + c] = h * gv[c] + bv[c];
    }
  }
  return make_op<T>(
      "layer_norm", x.shape(), std::move(out), {x.node(), gamma.node(), beta.node()},
      [xhat, rstd](Node<T>& self) {
        Node<T>& px = *self.parents[0];
        Node<T>& pg = *self.parents[1];
        Node<T>& pb = *self.parents[2];
        const std::size_t rows = self.shape.rows, cols = self.shape.cols;
        if (pg.requires_grad || pb.requires_grad) {
          auto& gg = pg.grad_buffer();
          auto& gb = pb.grad_buffer();
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < cols; ++c) {
              const T d = self.grad[r * cols + c];
              gg[c] += d * (*xhat)[r * cols + c];
              gb[c] += d;
            }
        }
        if (px.requires_grad) {
          auto& gx = px.grad_buffer();
          for (std::size_t r = 0; r < rows; ++r) {
            double mean_g = 0.0, mean_gx = 0.0;
            for (std::size_t c = 0; c < cols; ++c) {
              const double gh = double(self.grad[r * cols + c]) * pg.value[c];
              mean_g += gh;
              mean_gx += gh * (*xhat)[r * cols + c];
            }
            mean_g /= double(cols);
            mean_gx /= double(cols);
            for (std::size_t c = 0; c < cols; ++c) {
              const double gh = double(self.grad[r * cols + c]) * pg.value[c];
              gx[r * cols + c] +=
                  T((*rstd)[r] * (gh - mean_g - (*xhat)[r * cols + c] * mean_gx));
            }
          }
        }
      });
}

template <typename T>
Tensor<T> softmax(const Tensor<T>& x) {
  const std::size_t rows = x.rows(), cols = x.cols();
  std::vector<T> out(x.size());
  const auto xv = x.values();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = xv.data() + r * cols;
    const T mx = *std::max_element(row, row + cols);
    double z = 0.0;
    for (std::size_t c = 0; c < cols; ++c) {
      const T e = std::exp(row[c] - mx);
      out[r * cols + c] = e;
      z += e;
    }
    for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] = T(out[r * cols + c] / z);
  }
  return make_op<T>("softmax", x.shape(), std::move(out), {x.node()}, [](Node<T>& self) {
    Node<T>& px = *self.parents[0];
    auto& gx = px.grad_buffer();
    const std::size_t rows = self.shape.rows, cols = self.shape.cols;
    for (std::size_t r = 0; r < rows; ++r) {
      double dot = 0.0;
      for (std::size_t c = 0; c < cols; ++c)
        dot += double(self.grad[r * cols + c]) * self.value[r * cols + c];
      for (std::size_t c = 0; c < cols; ++c) {
        const std::size_t i = r * cols + c;
        gx[i] += T(self.value[i] * (self.grad[i] - dot));
      }
    }
  });
}

template <typename T>
Tensor<T> log_softmax(const Tensor<T>& x) {
  const std::size_t rows = x.rows(), cols = x.cols();
  std::vector<T> out(x.size());
  const auto xv = x.values();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = xv.data() + r * cols;
    const T mx = *std::max_element(row, row + cols);
    double z = 0.0;
    for (std::size_t c = 0; c < cols; ++c) z += std::exp(double(row[c] - mx));
    const double lse = double(mx) + std::log(z);
    for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] = T(row[c] - lse);
  }
  return make_op<T>("log_softmax", x.shape(), std::move(out), {x.node()}, [](Node<T>& self) {
    Node<T>& px = *self.parents[0];
    auto& gx = px.grad_buffer();
    const std::size_t rows = self.shape.rows, cols = self.shape.cols;
    for (std::size_t r = 0; r < rows; ++r) {
      double gsum = 0.0;
      for (std::size_t c = 0; c < cols; ++c) gsum += self.grad[r * cols + c];
      for (std::size_t c = 0; c < cols; ++c) {
        const std::size_t i = r * cols + c;
        gx[i] += T(self.grad[i] - std::exp(double(self.value[i])) * gsum);
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Indexing

template <typename T>
Tensor<T> gather_rows(const Tensor<T>& a, std::span<const std::size_t> indices) {
  const std::size_t cols = a.cols();
  std::vector<T> out(indices.size() * cols);
  const auto av = a.values();
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= a.rows()) {
      throw std::out_of_range("gather_rows: row " + std::to_string(indices[i]) +
                              " out of range for " + a.shape().str());
    }
    std::copy_n(av.data() + indices[i] * cols, cols, out.data() + i * cols);
  }
  auto idx = std::make_shared<std::vector<std::size_t>>(indices.begin(), indices.end());
  return make_op<T>("gather_rows", {indices.size(), cols}, std::move(out), {a.node()},
                    [idx](Node<T>& self) {
                      Node<T>& pa = *self.parents[0];
                      auto& ga = pa.grad_buffer();
                      const std::size_t cols = self.shape.cols;
                      for (std::size_t i = 0; i < idx->size(); ++i)
                        for (std::size_t c = 0; c < cols; ++c)
                          ga[(*idx)[i] * cols + c] += self.grad[i * cols + c];
                    });
}

template <typename T>
Tensor<T> select_per_row(const Tensor<T>& a, std::span<const std::size_t> columns) {
  if (columns.size() != a.rows()) {
    throw ShapeError("select_per_row: " + std::to_string(columns.size()) +
                     " column indices for " + a.shape().str());
  }
  std::vector<T> out(a.rows());
  for (std::size_t r = 0; r < a.rows(); ++r) {
    if (columns[r] >= a.cols()) {
      throw std::out_of_range("select_per_row: column " + std::to_string(columns[r]) +
                              " out of range for " + a.shape().str());
    }
    out[r] = a.at(r, columns[r]);
  }
  auto idx = std::make_shared<std::vector<std::size_t>>(columns.begin(), columns.end());
  return make_op<T>("select_per_row", {a.rows(), 1}, std::move(out), {a.node()},
                    [idx](Node<T>& self) {
                      Node<T>& pa = *self.parents[0];
                      auto& ga = pa.grad_buffer();
                      for (std::size_t r = 0; r < idx->size(); ++r)
                        ga[r * pa.shape.cols + (*idx)[r]] += self.grad[r];
                    });
}

template <typename T>
Tensor<T> normalize_rows(const Tensor<T>& a, T eps) {
  const std::size_t rows = a.rows(), cols = a.cols();
  auto norms = std::make_shared<std::vector<T>>(rows);
  std::vector<T> out(a.size());
  const auto av = a.values();
  for (std::size_t r = 0; r < rows; ++r) {
    double sq = 0.0;
    for (std::size_t c = 0; c < cols; ++c) sq += double(av[r * cols + c]) * av[r * cols + c];
    const T n = std::max(T(std::sqrt(sq)), eps);
    (*norms)[r] = n;
    for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] = av[r * cols + c] / n;
  }
  return make_op<T>("normalize_rows", a.shape(), std::move(out), {a.node()},
                    [norms, eps](Node<T>& self) {
                      Node<T>& pa = *self.parents[0];
                      auto& ga = pa.grad_buffer();
                      const std::size_t rows = self.shape.rows, cols = self.shape.cols;
                      for (std::size_t r = 0; r < rows; ++r) {
                        const T n = (*norms)[r];
                        const bool clamped = !(n > eps);
                        double dot = 0.0;
                        if (!clamped) {
                          for (std::size_t c = 0; c < cols; ++c)
                            dot += double(self.grad[r * cols + c]) * self.value[r * cols + c];
                        }
                        for (std::size_t c = 0; c < cols; ++c) {
                          const std::size_t i = r * cols + c;
                          ga[i] += T((self.grad[i] - self.value[i] * dot) / n);
                        }
                      }
                    });
}

template <typename T>
Tensor<T> cosine_similarity(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) shape_fail("cosine_similarity", a.shape(), b.shape());
  return sum_rows(mul(normalize_rows(a), normalize_rows(b)));
}

template <typename T>
Tensor<T> cosine_similarity_matrix(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.cols() != b.cols()) shape_fail("cosine_similarity_matrix", a.shape(), b.shape());
  return matmul_nt(normalize_rows(a), normalize_rows(b));
}

// ---------------------------------------------------------------------------
// Reductions

template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
  double s = 0.0;
  for (T v : a.values()) s += v;
  return make_op<T>("sum", {1, 1}, {T(s)}, {a.node()}, [](Node<T>& self) {
    Node<T>& pa = *self.parents[0];
    auto& ga = pa.grad_buffer();
    for (auto& g : ga) g += self.grad[0];
  });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& a) {
  if (a.size() == 0) throw ShapeError("mean: empty tensor " + a.shape().str());
  double s = 0.0;
  for (T v : a.values()) s += v;
  const double n = double(a.size());
  return make_op<T>("mean", {1, 1}, {T(s / n)}, {a.node()}, [n](Node<T>& self) {
    Node<T>& pa = *self.parents[0];
    auto& ga = pa.grad_buffer();
    const T g = T(self.grad[0] / n);
    for (auto& v : ga) v += g;
  });
}

template <typename T>
Tensor<T> sum_rows(const Tensor<T>& a) {
  const std::size_t rows = a.rows(), cols = a.cols();
  std::vector<T> out(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    double s = 0.0;
    for (std::size_t c = 0; c < cols; ++c) s += a.values()[r * cols + c];
    out[r] = T(s);
  }
  return make_op<T>("sum_rows", {rows, 1}, std::move(out), {a.node()}, [](Node<T>& self) {
    Node<T>& pa = *self.parents[0];
    auto& ga = pa.grad_buffer();
    const std::size_t cols = pa.shape.cols;
    for (std::size_t r = 0; r < self.shape.rows; ++r)
      for (std::size_t c = 0; c < cols; ++c) ga[r * cols + c] += self.grad[r];
  });
}

template <typename T>
Tensor<T> mse(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) shape_fail("mse", a.shape(), b.shape());
  if (a.size() == 0) throw ShapeError("mse: empty tensors");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = double(a.values()[i]) - b.values()[i];
    s += d * d;
  }
  const double n = double(a.size());
  return make_op<T>("mse", {1, 1}, {T(s / n)}, {a.node(), b.node()}, [n](Node<T>& self) {
    Node<T>& pa = *self.parents[0];
    Node<T>& pb = *self.parents[1];
    const double k = 2.0 * self.grad[0] / n;
    if (pa.requires_grad) {
      auto& ga = pa.grad_buffer();
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += T(k * (pa.value[i] - pb.value[i]));
    }
    if (pb.requires_grad) {
      auto& gb = pb.grad_buffer();
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] -= T(k * (pa.value[i] - pb.value[i]));
    }
  });
}

template <typename T>
Tensor<T> bce_with_logits(const Tensor<T>& logits, const Tensor<T>& targets) {
  if (logits.shape() != targets.shape()) {
    shape_fail("bce_with_logits", logits.shape(), targets.shape());
  }
  if (logits.size() == 0) throw ShapeError("bce_with_logits: empty tensors");
  double s = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    const double x = logits.values()[i];
    const double y = targets.values()[i];
    // log(1 + exp(-|x|)) + max(x, 0) - x y
    s += std::log1p(std::exp(-std::abs(x))) + std::max(x, 0.0) - x * y;
  }
  const double n = double(logits.size());
  return make_op<T>("bce_with_logits", {1, 1}, {T(s / n)}, {logits.node(), targets.node()},
                    [n](Node<T>& self) {
                      Node<T>& px = *self.parents[0];
                      Node<T>& py = *self.parents[1];
                      const double k = self.grad[0] / n;
                      if (px.requires_grad) {
                        auto& gx = px.grad_buffer();
                        for (std::size_t i = 0; i < gx.size(); ++i) {
                          const double sig = 1.0 / (1.0 + std::exp(-double(px.value[i])));
                          gx[i] += T(k * (sig - py.value[i]));
                        }
                      }
                      if (py.requires_grad) {
                        auto& gy = py.grad_buffer();
                        for (std::size_t i = 0; i < gy.size(); ++i) gy[i] -= T(k * px.value[i]);
                      }
                    });
}

// ---------------------------------------------------------------------------
// Slicing

template <typename T>
Tensor<T> slice_rows(const Tensor<T>& a, std::size_t start, std::size_t count) {
  if (start + count > a.rows()) {
    throw std::out_of_range("slice_rows: [" + std::to_string(start) + ", " +
                            std::to_string(start + count) + ") out of " + a.shape().str());
  }
  const std::size_t cols = a.cols();
  std::vector<T> out(a.values().begin() + start * cols,
                     a.values().begin() + (start + count) * cols);
  return make_op<T>("slice_rows", {count, cols}, std::move(out), {a.node()},
                    [start](Node<T>& self) {
                      auto& ga = self.parents[0]->grad_buffer();
                      const std::size_t off = start * self.shape.cols;
                      for (std::size_t i = 0; i < self.grad.size(); ++i) ga[off + i] += self.grad[i];
                    });
}

template <typename T>
Tensor<T> slice_cols(const Tensor<T>& a, std::size_t start, std::size_t count) {
  if (start + count > a.cols()) {
    throw std::out_of_range("slice_cols: [" + std::to_string(start) + ", " +
                            std::to_string(start + count) + ") out of " + a.shape().str());
  }
  const std::size_t rows = a.rows(), cols = a.cols();
  std::vector<T> out(rows * count);
  for (std::size_t r = 0; r < rows; ++r)
    std::copy_n(a.values().data() + r * cols + start, count, out.data() + r * count);
  return make_op<T>("slice_cols", {rows, count}, std::move(out), {a.node()},
                    [start](Node<T>& self) {
                      Node<T>& pa = *self.parents[0];
                      auto& ga = pa.grad_buffer();
                      const std::size_t count = self.shape.cols, cols = pa.shape.cols;
                      for (std::size_t r = 0; r < self.shape.rows; ++r)
                        for (std::size_t c = 0; c < count; ++c)
                          ga[r * cols + start + c] += self.grad[r * count + c];
                    });
}

template <typename T>
Tensor<T> concat_rows(std::span<const Tensor<T>> parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no inputs");
  const std::size_t cols = parts[0].cols();
  std::size_t rows = 0;
  std::vector<NodePtr<T>> parents;
  for (const auto& p : parts) {
    if (p.cols() != cols) shape_fail("concat_rows", parts[0].shape(), p.shape());
    rows += p.rows();
    parents.push_back(p.node());
  }
  std::vector<T> out;
  out.reserve(rows * cols);
  for (const auto& p : parts) out.insert(out.end(), p.values().begin(), p.values().end());
  return make_op<T>("concat_rows", {rows, cols}, std::move(out), std::move(parents),
                    [](Node<T>& self) {
                      std::size_t off = 0;
                      for (auto& p : self.parents) {
                        const std::size_t n = p->shape.size();
                        if (p->requires_grad) {
                          auto& g = p->grad_buffer();
                          for (std::size_t i = 0; i < n; ++i) g[i] += self.grad[off + i];
                        }
                        off += n;
                      }
                    });
}

template <typename T>
Tensor<T> concat_cols(std::span<const Tensor<T>> parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no inputs");
  const std::size_t rows = parts[0].rows();
  std::size_t cols = 0;
  std::vector<NodePtr<T>> parents;
  for (const auto& p : parts) {
    if (p.rows() != rows) shape_fail("concat_cols", parts[0].shape(), p.shape());
    cols += p.cols();
    parents.push_back(p.node());
  }
  std::vector<T> out(rows * cols);
  std::size_t off = 0;
  for (const auto& p : parts) {
    for (std::size_t r = 0; r < rows; ++r)
      std::copy_n(p.values().data() + r * p.cols(), p.cols(), out.data() + r * cols + off);
    off += p.cols();
  }
  return make_op<T>("concat_cols", {rows, cols}, std::move(out), std::move(parents),
                    [](Node<T>& self) {
                      std::size_t off = 0;
                      const std::size_t cols = self.shape.cols;
                      for (auto& p : self.parents) {
                        const std::size_t pc = p->shape.cols;
                        if (p->requires_grad) {
                          auto& g = p->grad_buffer();
                          for (std::size_t r = 0; r < self.shape.rows; ++r)
                            for (std::size_t c = 0; c < pc; ++c)
                              g[r * pc + c] += self.grad[r * cols + off + c];
                        }
                        off += pc;
                      }
                    });
}

// ---------------------------------------------------------------------------
// Backward

template <typename T>
void backward(const Tensor<T>& loss) {
  if (loss.size() != 1) {
    throw ShapeError("backward: loss must be scalar, got " + loss.shape().str());
  }
  if (!loss.requires_grad()) return;

  // Iterative post-order DFS gives a topological order.
  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> visited;
  std::vector<std::pair<Node<T>*, std::size_t>> stack;
  stack.emplace_back(loss.node().get(), 0);
  visited.insert(loss.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node<T>* p = node->parents[next++].get();
      if (p->requires_grad && visited.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  for (Node<T>* n : order) {
    if (!n->is_leaf()) n->grad.assign(n->shape.size(), T(0));
  }
  loss.node()->grad_buffer()[0] += T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* n = *it;
    if (!n->is_leaf() && n->backward) n->backward(*n);
  }
}

// ---------------------------------------------------------------------------
// Finite differences

FiniteDiffResult finite_diff_check(const std::function<Tensor<double>()>& loss,
                                   std::span<const Tensor<double>> params,
                                   const FiniteDiffOptions& options) {
  std::vector<Tensor<double>> leaves(params.begin(), params.end());
  for (auto& p : leaves) {
    if (!p.is_leaf()) throw std::invalid_argument("finite_diff_check: parameters must be leaves");
    p.zero_grad();
  }
  {
    const Tensor<double> l = loss();
    if (l.size() != 1) throw ShapeError("finite_diff_check: loss must be scalar");
    backward(l);
  }

  std::mt19937_64 rng(options.seed);
  std::vector<double> analytic, numeric;
  for (auto& p : leaves) {
    std::vector<std::size_t> coords(p.size());
    std::iota(coords.begin(), coords.end(), 0);
    if (coords.size() > options.max_coordinates) {
      std::shuffle(coords.begin(), coords.end(), rng);
      coords.resize(options.max_coordinates);
      std::sort(coords.begin(), coords.end());
    }
    const std::vector<double> g(p.grad().begin(), p.grad().end());
    auto values = p.mutable_values();
    for (std::size_t i : coords) {
      const double x0 = values[i];
      const double h = options.step_scale * std::max(1.0, std::abs(x0));
      values[i] = x0 + h;
      const double up = loss().item();
      values[i] = x0 - h;
      const double down = loss().item();
      values[i] = x0;
      analytic.push_back(g.empty() ? 0.0 : g[i]);
      numeric.push_back((up - down) / (2.0 * h));
    }
  }

  double scale = 0.0;
  for (std::size_t i = 0; i < analytic.size(); ++i)
    scale = std::max({scale, std::abs(analytic[i]), std::abs(numeric[i])});
  FiniteDiffResult result;
  result.coordinates_checked = analytic.size();
  if (scale == 0.0) return result;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    const double denom =
        std::max({std::abs(analytic[i]), std::abs(numeric[i]), 1e-2 * scale});
    result.max_relative_error =
        std::max(result.max_relative_error, std::abs(analytic[i] - numeric[i]) / denom);
  }
  return result;
}

FiniteDiffResult finite_diff_check(
    const std::function<Tensor<double>(const Tensor<double>&)>& f, const Tensor<double>& point,
    double step_scale) {
  Tensor<double> leaf = Tensor<double>::parameter(point.shape(),
                                                  {point.values().begin(), point.values().end()});
  FiniteDiffOptions options;
  options.step_scale = step_scale;
  options.max_coordinates = leaf.size() <= 4096 ? std::max<std::size_t>(leaf.size(), 1) : 256;
  const std::array<Tensor<double>, 1> params{leaf};
  return finite_diff_check([&] { return f(leaf); }, params, options);
}

// ---------------------------------------------------------------------------
// Instantiations

#define MERT_GRAD_INSTANTIATE(T)                                                              \
  template struct Node<T>;                                                                    \
  template class Tensor<T>;                                                                   \
  template Tensor<T> make_op<T>(const char*, Shape, std::vector<T>, std::vector<NodePtr<T>>,  \
                                std::function<void(Node<T>&)>);                               \
  template Tensor<T> add<T>(const Tensor<T>&, const Tensor<T>&);                              \
  template Tensor<T> sub<T>(const Tensor<T>&, const Tensor<T>&);                              \
  template Tensor<T> mul<T>(const Tensor<T>&, const Tensor<T>&);                              \
  template Tensor<T> scale<T>(const Tensor<T>&, T);                                           \
  template Tensor<T> matmul<T>(const Tensor<T>&, const Tensor<T>&);                           \
  template Tensor<T> matmul_nt<T>(const Tensor<T>&, const Tensor<T>&);                        \
  template Tensor<T> transpose<T>(const Tensor<T>&);                                          \
  template Tensor<T> conv1d<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,          \
                               std::size_t, const Conv1dOptions&);                            \
  template Tensor<T> layer_norm<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, T);  \
  template Tensor<T> softmax<T>(const Tensor<T>&);                                            \
  template Tensor<T> log_softmax<T>(const Tensor<T>&);                                        \
  template Tensor<T> gelu<T>(const Tensor<T>&);                                               \
  template Tensor<T> relu<T>(const Tensor<T>&);                                               \
  template Tensor<T> log<T>(const Tensor<T>&);                                                \
  template Tensor<T> gather_rows<T>(const Tensor<T>&, std::span<const std::size_t>);          \
  template Tensor<T> select_per_row<T>(const Tensor<T>&, std::span<const std::size_t>);       \
  template Tensor<T> normalize_rows<T>(const Tensor<T>&, T);                                  \
  template Tensor<T> cosine_similarity<T>(const Tensor<T>&, const Tensor<T>&);                \
  template Tensor<T> cosine_similarity_matrix<T>(const Tensor<T>&, const Tensor<T>&);         \
  template Tensor<T> sum<T>(const Tensor<T>&);                                                \
  template Tensor<T> mean<T>(const Tensor<T>&);                                               \
  template Tensor<T> sum_rows<T>(const Tensor<T>&);                                           \
  template Tensor<T> mse<T>(const Tensor<T>&, const Tensor<T>&);                              \
  template Tensor<T> bce_with_logits<T>(const Tensor<T>&, const Tensor<T>&);                  \
  template Tensor<T> slice_rows<T>(const Tensor<T>&, std::size_t, std::size_t);               \
  template Tensor<T> slice_cols<T>(const Tensor<T>&, std::size_t, std::size_t);               \
  template Tensor<T> concat_rows<T>(std::span<const Tensor<T>>);                              \
  template Tensor<T> concat_cols<T>(std::span<const Tensor<T>>);                              \
  template void backward<T>(const Tensor<T>&);

MERT_GRAD_INSTANTIATE(float)
MERT_GRAD_INSTANTIATE(double)

#undef MERT_GRAD_INSTANTIATE

}  // namespace mert::grad
