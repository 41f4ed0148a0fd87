#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "dot/common.hpp"

namespace dot {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (std::size_t e : s) n *= e;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += "x";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

namespace detail {

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // allocated lazily; same length as data when present
  bool requires_grad = false;
  std::vector<std::shared_ptr<TensorImpl>> parents;
  std::function<void(TensorImpl&)> backward_fn;
};

inline std::vector<double>& ensure_grad(TensorImpl& t) {
  if (t.grad.empty()) t.grad.assign(t.data.size(), 0.0);
  return t.grad;
}

// Thread-local switch mirroring eval-mode forward passes: while disabled, op
// results carry no graph, so evaluation never allocates backward state.
inline bool& grad_mode() {
  thread_local bool enabled = true;
  return enabled;
}

}  // namespace detail

struct NoGradGuard {
  NoGradGuard() : prev_(detail::grad_mode()) { detail::grad_mode() = false; }
  ~NoGradGuard() { detail::grad_mode() = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

class Tensor {
 public:
  Tensor() = default;

  Tensor(Shape shape, std::vector<double> data, bool requires_grad = false) {
    if (shape_numel(shape) != data.size())
      throw std::invalid_argument("Tensor: shape " + shape_str(shape) +
                                  " does not match data length " +
                                  std::to_string(data.size()));
    impl_ = std::make_shared<detail::TensorImpl>();
    impl_->shape = std::move(shape);
    impl_->data = std::move(data);
    impl_->requires_grad = requires_grad;
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    std::size_t n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
  }

  static Tensor full(Shape shape, double v, bool requires_grad = false) {
    std::size_t n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<double>(n, v), requires_grad);
  }

  static Tensor scalar(double v) { return Tensor({1}, {v}); }

  static Tensor randn(Shape shape, Rng& rng, double stddev,
                      bool requires_grad = false) {
    std::size_t n = shape_numel(shape);
    std::vector<double> d(n);
    for (auto& x : d) x = rng.normal(0.0, stddev);
    return Tensor(std::move(shape), std::move(d), requires_grad);
  }

  static Tensor trunc_normal(Shape shape, Rng& rng, double stddev,
                             bool requires_grad = false) {
    std::size_t n = shape_numel(shape);
    std::vector<double> d(n);
    for (auto& x : d) x = rng.trunc_normal(stddev);
    return Tensor(std::move(shape), std::move(d), requires_grad);
  }

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t dim(std::size_t i) const { return impl_->shape.at(i); }
  std::size_t size() const { return impl_->data.size(); }
  std::vector<double>& data() { return impl_->data; }
  const std::vector<double>& data() const { return impl_->data; }
  bool requires_grad() const { return impl_ && impl_->requires_grad; }

  double item() const {
    if (size() != 1) throw std::logic_error("item(): tensor is not scalar");
    return impl_->data[0];
  }

  bool has_grad() const { return impl_ && !impl_->grad.empty(); }
  const std::vector<double>& grad() const {
    if (!has_grad()) throw std::logic_error("grad(): no gradient present");
    return impl_->grad;
  }
  std::vector<double>& grad() {
    if (!has_grad()) throw std::logic_error("grad(): no gradient present");
    return impl_->grad;
  }

  void zero_grad() {
    if (impl_) impl_->grad.assign(impl_->data.size(), 0.0);
  }

  // Value copy with no graph attached.
  Tensor detach() const { return Tensor(impl_->shape, impl_->data, false); }

  void backward() {
    if (size() != 1) throw std::logic_error("backward(): root must be scalar");
    std::vector<detail::TensorImpl*> order;
    std::unordered_set<detail::TensorImpl*> seen;
    std::vector<std::pair<detail::TensorImpl*, std::size_t>> stack;
    stack.emplace_back(impl_.get(), 0);
    seen.insert(impl_.get());
    while (!stack.empty()) {
      auto& [node, next] = stack.back();
      if (next < node->parents.size()) {
        detail::TensorImpl* p = node->parents[next++].get();
        if (seen.insert(p).second) stack.emplace_back(p, 0);
      } else {
        order.push_back(node);
        stack.pop_back();
      }
    }
    detail::ensure_grad(*impl_)[0] = 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      detail::TensorImpl* node = *it;
      if (node->backward_fn && node->requires_grad) node->backward_fn(*node);
    }
  }

  std::shared_ptr<detail::TensorImpl> impl() const { return impl_; }

 private:
  std::shared_ptr<detail::TensorImpl> impl_;
};

namespace detail {

inline Tensor make_node(Shape shape, std::vector<double> data,
                        std::vector<Tensor> parents,
                        std::function<void(TensorImpl&)> backward) {
  Tensor out(std::move(shape), std::move(data));
  bool rg = false;
  if (grad_mode())
    for (const auto& p : parents) rg = rg || p.requires_grad();
  if (rg) {
    out.impl()->requires_grad = true;
    out.impl()->parents.reserve(parents.size());
    for (const auto& p : parents) out.impl()->parents.push_back(p.impl());
    out.impl()->backward_fn = std::move(backward);
  }
  return out;
}

inline void check_same_shape(const Tensor& a, const Tensor& b,
                             const char* op) {
  if (a.shape() != b.shape())
    throw std::invalid_argument(std::string(op) + ": shape mismatch " +
                                shape_str(a.shape()) + " vs " +
                                shape_str(b.shape()));
}

inline void check_finite(const Tensor& t, const char* op) {
  for (double v : t.data())
    if (!std::isfinite(v))
      throw std::invalid_argument(std::string(op) + ": non-finite input");
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise and structural ops
// ---------------------------------------------------------------------------

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::check_same_shape(a, b, "add");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
  return detail::make_node(a.shape(), std::move(out), {a, b},
                           [](detail::TensorImpl& self) {
                             for (auto& p : self.parents) {
                               if (!p->requires_grad) continue;
                               auto& g = detail::ensure_grad(*p);
                               for (std::size_t i = 0; i < g.size(); ++i)
                                 g[i] += self.grad[i];
                             }
                           });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::check_same_shape(a, b, "sub");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] - b.data()[i];
  return detail::make_node(
      a.shape(), std::move(out), {a, b}, [](detail::TensorImpl& self) {
        auto& pa = *self.parents[0];
        auto& pb = *self.parents[1];
        if (pa.requires_grad) {
          auto& g = detail::ensure_grad(pa);
          for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
        }
        if (pb.requires_grad) {
          auto& g = detail::ensure_grad(pb);
          for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
        }
      });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::check_same_shape(a, b, "mul");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
  return detail::make_node(
      a.shape(), std::move(out), {a, b}, [](detail::TensorImpl& self) {
        auto& pa = *self.parents[0];
        auto& pb = *self.parents[1];
        if (pa.requires_grad) {
          auto& g = detail::ensure_grad(pa);
          for (std::size_t i = 0; i < g.size(); ++i)
            g[i] += self.grad[i] * pb.data[i];
        }
        if (pb.requires_grad) {
          auto& g = detail::ensure_grad(pb);
          for (std::size_t i = 0; i < g.size(); ++i)
            g[i] += self.grad[i] * pa.data[i];
        }
      });
}

inline Tensor scale(const Tensor& a, double c) {
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * c;
  return detail::make_node(a.shape(), std::move(out), {a},
                           [c](detail::TensorImpl& self) {
                             auto& p = *self.parents[0];
                             if (!p.requires_grad) return;
                             auto& g = detail::ensure_grad(p);
                             for (std::size_t i = 0; i < g.size(); ++i)
                               g[i] += c * self.grad[i];
                           });
}

inline Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.size())
    throw std::invalid_argument("reshape: size mismatch " +
                                shape_str(a.shape()) + " -> " + shape_str(shape));
  return detail::make_node(std::move(shape), a.data(), {a},
                           [](detail::TensorImpl& self) {
                             auto& p = *self.parents[0];
                             if (!p.requires_grad) return;
                             auto& g = detail::ensure_grad(p);
                             for (std::size_t i = 0; i < g.size(); ++i)
                               g[i] += self.grad[i];
                           });
}

inline Tensor sum(const Tensor& a) {
  double s = std::accumulate(a.data().begin(), a.data().end(), 0.0);
  return detail::make_node({1}, {s}, {a}, [](detail::TensorImpl& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    auto& g = detail::ensure_grad(p);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[0];
  });
}

inline Tensor mean(const Tensor& a) {
  if (a.size() == 0) throw std::invalid_argument("mean: empty tensor");
  double s = std::accumulate(a.data().begin(), a.data().end(), 0.0);
  double inv = 1.0 / static_cast<double>(a.size());
  return detail::make_node({1}, {s * inv}, {a},
                           [inv](detail::TensorImpl& self) {
                             auto& p = *self.parents[0];
                             if (!p.requires_grad) return;
                             auto& g = detail::ensure_grad(p);
                             for (std::size_t i = 0; i < g.size(); ++i)
                               g[i] += self.grad[0] * inv;
                           });
}

// ---------------------------------------------------------------------------
// 2-D linear algebra
// ---------------------------------------------------------------------------

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
    throw std::invalid_argument("matmul: incompatible shapes " +
                                shape_str(a.shape()) + " x " +
                                shape_str(b.shape()));
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<double> out(m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t l = 0; l < k; ++l) {
      double av = a.data()[i * k + l];
      if (av == 0.0) continue;
      for (std::size_t j = 0; j < n; ++j)
        out[i * n + j] += av * b.data()[l * n + j];
    }
  return detail::make_node(
      {m, n}, std::move(out), {a, b}, [m, k, n](detail::TensorImpl& self) {
        auto& pa = *self.parents[0];
        auto& pb = *self.parents[1];
        if (pa.requires_grad) {  // dA = dC * B^T
          auto& ga = detail::ensure_grad(pa);
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t l = 0; l < k; ++l) {
              double acc = 0.0;
              for (std::size_t j = 0; j < n; ++j)
                acc += self.grad[i * n + j] * pb.data[l * n + j];
              ga[i * k + l] += acc;
            }
        }
        if (pb.requires_grad) {  // dB = A^T * dC
          auto& gb = detail::ensure_grad(pb);
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t l = 0; l < k; ++l) {
              double av = pa.data[i * k + l];
              if (av == 0.0) continue;
              for (std::size_t j = 0; j < n; ++j)
                gb[l * n + j] += av * self.grad[i * n + j];
            }
        }
      });
}

inline Tensor transpose(const Tensor& a) {
  if (a.rank() != 2)
    throw std::invalid_argument("transpose: expected rank-2, got " +
                                shape_str(a.shape()));
  const std::size_t m = a.dim(0), n = a.dim(1);
  std::vector<double> out(m * n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = a.data()[i * n + j];
  return detail::make_node({n, m}, std::move(out), {a},
                           [m, n](detail::TensorImpl& self) {
                             auto& p = *self.parents[0];
                             if (!p.requires_grad) return;
                             auto& g = detail::ensure_grad(p);
                             for (std::size_t i = 0; i < m; ++i)
                               for (std::size_t j = 0; j < n; ++j)
                                 g[i * n + j] += self.grad[j * m + i];
                           });
}

// x: R x C, bias: C. Broadcast add over rows.
inline Tensor add_row_bias(const Tensor& x, const Tensor& bias) {
  if (x.rank() != 2 || bias.rank() != 1 || bias.dim(0) != x.dim(1))
    throw std::invalid_argument("add_row_bias: incompatible shapes " +
                                shape_str(x.shape()) + " + " +
                                shape_str(bias.shape()));
  const std::size_t r = x.dim(0), c = x.dim(1);
  std::vector<double> out(r * c);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j)
      out[i * c + j] = x.data()[i * c + j] + bias.data()[j];
  return detail::make_node(
      x.shape(), std::move(out), {x, bias}, [r, c](detail::TensorImpl& self) {
        auto& px = *self.parents[0];
        auto& pb = *self.parents[1];
        if (px.requires_grad) {
          auto& g = detail::ensure_grad(px);
          for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
        }
        if (pb.requires_grad) {
          auto& g = detail::ensure_grad(pb);
          for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < c; ++j) g[j] += self.grad[i * c + j];
        }
      });
}

inline Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_rows: no inputs");
  const std::size_t c = parts[0].dim(1);
  std::size_t rows = 0;
  for (const auto& p : parts) {
    if (p.rank() != 2 || p.dim(1) != c)
      throw std::invalid_argument("concat_rows: column mismatch");
    rows += p.dim(0);
  }
  std::vector<double> out;
  out.reserve(rows * c);
  for (const auto& p : parts)
    out.insert(out.end(), p.data().begin(), p.data().end());
  return detail::make_node({rows, c}, std::move(out), parts,
                           [](detail::TensorImpl& self) {
                             std::size_t off = 0;
                             for (auto& p : self.parents) {
                               std::size_t n = p->data.size();
                               if (p->requires_grad) {
                                 auto& g = detail::ensure_grad(*p);
                                 for (std::size_t i = 0; i < n; ++i)
                                   g[i] += self.grad[off + i];
                               }
                               off += n;
                             }
                           });
}

inline Tensor slice_rows(const Tensor& x, std::size_t start, std::size_t count) {
  if (x.rank() != 2 || start + count > x.dim(0))
    throw std::invalid_argument("slice_rows: range out of bounds");
  const std::size_t c = x.dim(1);
  std::vector<double> out(x.data().begin() + start * c,
                          x.data().begin() + (start + count) * c);
  return detail::make_node({count, c}, std::move(out), {x},
                           [start, count, c](detail::TensorImpl& self) {
                             auto& p = *self.parents[0];
                             if (!p.requires_grad) return;
                             auto& g = detail::ensure_grad(p);
                             for (std::size_t i = 0; i < count * c; ++i)
                               g[start * c + i] += self.grad[i];
                           });
}

inline Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_cols: no inputs");
  const std::size_t r = parts[0].dim(0);
  std::size_t cols = 0;
  std::vector<std::size_t> widths;
  for (const auto& p : parts) {
    if (p.rank() != 2 || p.dim(0) != r)
      throw std::invalid_argument("concat_cols: row mismatch");
    widths.push_back(p.dim(1));
    cols += p.dim(1);
  }
  std::vector<double> out(r * cols);
  std::size_t off = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const std::size_t w = widths[k];
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < w; ++j)
        out[i * cols + off + j] = parts[k].data()[i * w + j];
    off += w;
  }
  return detail::make_node(
      {r, cols}, std::move(out), parts,
      [r, cols, widths](detail::TensorImpl& self) {
        std::size_t off = 0;
        for (std::size_t k = 0; k < self.parents.size(); ++k) {
          auto& p = *self.parents[k];
          const std::size_t w = widths[k];
          if (p.requires_grad) {
            auto& g = detail::ensure_grad(p);
            for (std::size_t i = 0; i < r; ++i)
              for (std::size_t j = 0; j < w; ++j)
                g[i * w + j] += self.grad[i * cols + off + j];
          }
          off += w;
        }
      });
}

// ---------------------------------------------------------------------------
// Nonlinear kernels
// ---------------------------------------------------------------------------

// Softmax over the last axis, computed with max-subtraction.
inline Tensor softmax(const Tensor& x) {
  if (x.rank() == 0 || x.dim(x.rank() - 1) == 0)
    throw std::invalid_argument("softmax: empty last axis");
  detail::check_finite(x, "softmax");
  const std::size_t n = x.dim(x.rank() - 1);
  const std::size_t rows = x.size() / n;
  std::vector<double> out(x.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = x.data().data() + r * n;
    double* o = out.data() + r * n;
    double mx = in[0];
    for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, in[j]);
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      o[j] = std::exp(in[j] - mx);
      z += o[j];
    }
    for (std::size_t j = 0; j < n; ++j) o[j] /= z;
  }
  return detail::make_node(
      x.shape(), std::move(out), {x}, [n, rows](detail::TensorImpl& self) {
        auto& p = *self.parents[0];
        if (!p.requires_grad) return;
        auto& g = detail::ensure_grad(p);
        for (std::size_t r = 0; r < rows; ++r) {
          const double* y = self.data.data() + r * n;
          const double* dy = self.grad.data() + r * n;
          double dot = 0.0;
          for (std::size_t j = 0; j < n; ++j) dot += y[j] * dy[j];
          for (std::size_t j = 0; j < n; ++j)
            g[r * n + j] += y[j] * (dy[j] - dot);
        }
      });
}

// Per-row standardization over the last axis, then affine by gain/bias.
inline Tensor layer_norm(const Tensor& x, const Tensor& gain,
                         const Tensor& bias, double eps = 1e-5) {
  if (x.rank() == 0 || x.dim(x.rank() - 1) == 0)
    throw std::invalid_argument("layer_norm: zero-length row");
  const std::size_t d = x.dim(x.rank() - 1);
  if (gain.rank() != 1 || gain.dim(0) != d || bias.rank() != 1 ||
      bias.dim(0) != d)
    throw std::invalid_argument("layer_norm: gain/bias must be [" +
                                std::to_string(d) + "]");
  const std::size_t rows = x.size() / d;
  std::vector<double> out(x.size());
  std::vector<double> xhat(x.size());
  std::vector<double> inv_std(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = x.data().data() + r * d;
    double mu = 0.0;
    for (std::size_t j = 0; j < d; ++j) mu += in[j];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (in[j] - mu) * (in[j] - mu);
    var /= static_cast<double>(d);
    const double is = 1.0 / std::sqrt(var + eps);
    inv_std[r] = is;
    for (std::size_t j = 0; j < d; ++j) {
      xhat[r * d + j] = (in[j] - mu) * is;
      out[r * d + j] = xhat[r * d + j] * gain.data()[j] + bias.data()[j];
    }
  }
  return detail::make_node(
      x.shape(), std::move(out), {x, gain, bias},
      [d, rows, xhat = std::move(xhat),
       inv_std = std::move(inv_std)](detail::TensorImpl& self) {
        auto& px = *self.parents[0];
        auto& pg = *self.parents[1];
        auto& pb = *self.parents[2];
        for (std::size_t r = 0; r < rows; ++r) {
          const double* dy = self.grad.data() + r * d;
          const double* xh = xhat.data() + r * d;
          if (pg.requires_grad) {
            auto& gg = detail::ensure_grad(pg);
            for (std::size_t j = 0; j < d; ++j) gg[j] += dy[j] * xh[j];
          }
          if (pb.requires_grad) {
            auto& gb = detail::ensure_grad(pb);
            for (std::size_t j = 0; j < d; ++j) gb[j] += dy[j];
          }
          if (px.requires_grad) {
            auto& gx = detail::ensure_grad(px);
            double m1 = 0.0, m2 = 0.0;  // means of g*dy and g*dy*xhat
            for (std::size_t j = 0; j < d; ++j) {
              const double gdy = dy[j] * pg.data[j];
              m1 += gdy;
              m2 += gdy * xh[j];
            }
            m1 /= static_cast<double>(d);
            m2 /= static_cast<double>(d);
            for (std::size_t j = 0; j < d; ++j) {
              const double gdy = dy[j] * pg.data[j];
              gx[r * d + j] += inv_std[r] * (gdy - m1 - xh[j] * m2);
            }
          }
        }
      });
}

// GELU, tanh approximation.
inline Tensor gelu(const Tensor& x) {
  constexpr double kC = 0.7978845608028654;  // sqrt(2/pi)
  constexpr double kA = 0.044715;
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double v = x.data()[i];
    out[i] = 0.5 * v * (1.0 + std::tanh(kC * (v + kA * v * v * v)));
  }
  return detail::make_node(
      x.shape(), std::move(out), {x}, [](detail::TensorImpl& self) {
        auto& p = *self.parents[0];
        if (!p.requires_grad) return;
        auto& g = detail::ensure_grad(p);
        for (std::size_t i = 0; i < g.size(); ++i) {
          const double v = p.data[i];
          const double t = std::tanh(kC * (v + kA * v * v * v));
          const double du = kC * (1.0 + 3.0 * kA * v * v);
          g[i] += self.grad[i] * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du);
        }
      });
}

// Unit-L2 rows over the last axis.
inline Tensor l2_normalize(const Tensor& x) {
  if (x.rank() == 0 || x.dim(x.rank() - 1) == 0)
    throw std::invalid_argument("l2_normalize: empty last axis");
  const std::size_t d = x.dim(x.rank() - 1);
  const std::size_t rows = x.size() / d;
  std::vector<double> out(x.size());
  std::vector<double> norms(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = x.data().data() + r * d;
    double s = 0.0;
    for (std::size_t j = 0; j < d; ++j) s += in[j] * in[j];
    const double nrm = std::sqrt(s);
    if (nrm <= 1e-12)
      throw std::invalid_argument(
          "l2_normalize: degenerate row with near-zero norm");
    norms[r] = nrm;
    for (std::size_t j = 0; j < d; ++j) out[r * d + j] = in[j] / nrm;
  }
  return detail::make_node(
      x.shape(), std::move(out), {x},
      [d, rows, norms = std::move(norms)](detail::TensorImpl& self) {
        auto& p = *self.parents[0];
        if (!p.requires_grad) return;
        auto& g = detail::ensure_grad(p);
        for (std::size_t r = 0; r < rows; ++r) {
          const double* y = self.data.data() + r * d;
          const double* dy = self.grad.data() + r * d;
          double dot = 0.0;
          for (std::size_t j = 0; j < d; ++j) dot += y[j] * dy[j];
          for (std::size_t j = 0; j < d; ++j)
            g[r * d + j] += (dy[j] - y[j] * dot) / norms[r];
        }
      });
}

// Mean over the batch of -log softmax(logits)[label].
inline Tensor cross_entropy_with_logits(const Tensor& logits,
                                        const std::vector<int>& labels) {
  if (logits.rank() != 2)
    throw std::invalid_argument("cross_entropy_with_logits: expected [BxK]");
  const std::size_t b = logits.dim(0), k = logits.dim(1);
  if (labels.size() != b)
    throw std::invalid_argument(
        "cross_entropy_with_logits: label count mismatch");
  for (int y : labels)
    if (y < 0 || static_cast<std::size_t>(y) >= k)
      throw std::out_of_range("cross_entropy_with_logits: label " +
                              std::to_string(y) + " out of range [0, " +
                              std::to_string(k) + ")");
  double total = 0.0;
  for (std::size_t i = 0; i < b; ++i) {
    const double* row = logits.data().data() + i * k;
    double mx = row[0];
    for (std::size_t j = 1; j < k; ++j) mx = std::max(mx, row[j]);
    double z = 0.0;
    for (std::size_t j = 0; j < k; ++j) z += std::exp(row[j] - mx);
    total += mx + std::log(z) - row[labels[i]];
  }
  total /= static_cast<double>(b);
  return detail::make_node(
      {1}, {total}, {logits}, [b, k, labels](detail::TensorImpl& self) {
        auto& p = *self.parents[0];
        if (!p.requires_grad) return;
        auto& g = detail::ensure_grad(p);
        const double gs = self.grad[0] / static_cast<double>(b);
        for (std::size_t i = 0; i < b; ++i) {
          const double* row = p.data.data() + i * k;
          double mx = row[0];
          for (std::size_t j = 1; j < k; ++j) mx = std::max(mx, row[j]);
          double z = 0.0;
          for (std::size_t j = 0; j < k; ++j) z += std::exp(row[j] - mx);
          for (std::size_t j = 0; j < k; ++j) {
            double sm = std::exp(row[j] - mx) / z;
            g[i * k + j] +=
                gs * (sm - (static_cast<std::size_t>(labels[i]) == j ? 1.0 : 0.0));
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Finite-difference gradient checker
// ---------------------------------------------------------------------------

// Central differences against the autodiff gradient of f at x. Returns the
// max over coordinates of |fd - ad| / max(1e-8, |fd| + |ad|).
inline double grad_check(const std::function<Tensor(const Tensor&)>& f,
                         Tensor x, double h = 1e-5) {
  if (!x.requires_grad())
    throw std::invalid_argument("grad_check: x must require grad");
  x.zero_grad();
  Tensor loss = f(x);
  if (!std::isfinite(loss.item()))
    throw std::runtime_error("grad_check: non-finite function value");
  loss.backward();
  std::vector<double> ad = x.grad();

  double worst = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double orig = x.data()[i];
    x.data()[i] = orig + h;
    double fp;
    {
      NoGradGuard ng;
      fp = f(x).item();
    }
    x.data()[i] = orig - h;
    double fm;
    {
      NoGradGuard ng;
      fm = f(x).item();
    }
    x.data()[i] = orig;
    if (!std::isfinite(fp) || !std::isfinite(fm))
      throw std::runtime_error("grad_check: non-finite perturbed value");
    const double fd = (fp - fm) / (2.0 * h);
    const double rel =
        std::abs(fd - ad[i]) / std::max(1e-8, std::abs(fd) + std::abs(ad[i]));
    worst = std::max(worst, rel);
  }
  return worst;
}

}  // namespace dot
