#pragma once

#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

#include "relctr/tensor.hpp"

// Differentiable operations over rank-2 tensors. Each op computes its value
// eagerly and, when any input carries gradients, registers a closure that
// accumulates into the parents. Broadcasting is deliberately narrow: the
// right operand of add/sub/mul may be a [1 x c] row or a [1 x 1] scalar.

namespace relctr {

namespace detail {

inline std::shared_ptr<Node> new_node(Shape shape, const char* op,
                                      std::initializer_list<std::shared_ptr<Node>> parents) {
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->value.resize(shape_size(n->shape));
  n->op = op;
  for (const auto& p : parents)
    if (p->requires_grad) n->requires_grad = true;
  if (n->requires_grad) n->parents.assign(parents);
  n->id = next_node_id();
  return n;
}

inline std::shared_ptr<Node> new_node(Shape shape, const char* op,
                                      std::vector<std::shared_ptr<Node>> parents) {
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->value.resize(shape_size(n->shape));
  n->op = op;
  for (const auto& p : parents)
    if (p->requires_grad) n->requires_grad = true;
  if (n->requires_grad) n->parents = std::move(parents);
  n->id = next_node_id();
  return n;
}

inline bool wants_grad(const std::shared_ptr<Node>& p) {
  if (!p->requires_grad) return false;
  p->ensure_grad();
  return true;
}

enum class Bcast { same, row, scalar };

inline Bcast bcast_kind(const Node& a, const Node& b, const char* op) {
  if (a.shape == b.shape) return Bcast::same;
  if (b.shape.size() == 2 && b.shape[0] == 1 && b.shape[1] == 1)
    return Bcast::scalar;
  if (a.shape.size() == 2 && b.shape.size() == 2 && b.shape[0] == 1 &&
      b.shape[1] == a.shape[1])
    return Bcast::row;
  throw InputError(std::string(op) + ": incompatible shapes");
}

inline double stable_sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

inline double stable_softplus(double x) {
  return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x)));
}

}  // namespace detail

inline Tensor add(const Tensor& a, const Tensor& b) {
  auto pa = a.node(), pb = b.node();
  const auto kind = detail::bcast_kind(*pa, *pb, "add");
  auto n = detail::new_node(pa->shape, "add", {pa, pb});
  const std::size_t sz = n->value.size();
  const std::size_t c = a.cols();
  switch (kind) {
    case detail::Bcast::same:
      for (std::size_t i = 0; i < sz; ++i)
        n->value[i] = pa->value[i] + pb->value[i];
      break;
    case detail::Bcast::row:
      for (std::size_t i = 0; i < sz; ++i)
        n->value[i] = pa->value[i] + pb->value[i % c];
      break;
    case detail::Bcast::scalar:
      for (std::size_t i = 0; i < sz; ++i)
        n->value[i] = pa->value[i] + pb->value[0];
      break;
  }
  if (n->requires_grad)
    n->backprop = [pa, pb, kind, c](const detail::Node& self) {
      if (detail::wants_grad(pa))
        for (std::size_t i = 0; i < self.grad.size(); ++i)
          pa->grad[i] += self.grad[i];
      if (detail::wants_grad(pb)) {
        switch (kind) {
          case detail::Bcast::same:
            for (std::size_t i = 0; i < self.grad.size(); ++i)
              pb->grad[i] += self.grad[i];
            break;
          case detail::Bcast::row:
            for (std::size_t i = 0; i < self.grad.size(); ++i)
              pb->grad[i % c] += self.grad[i];
            break;
          case detail::Bcast::scalar:
            for (double g : self.grad) pb->grad[0] += g;
            break;
        }
      }
    };
  return Tensor(n);
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  auto pa = a.node(), pb = b.node();
  const auto kind = detail::bcast_kind(*pa, *pb, "sub");
  auto n = detail::new_node(pa->shape, "sub", {pa, pb});
  const std::size_t sz = n->value.size();
  const std::size_t c = a.cols();
  switch (kind) {
    case detail::Bcast::same:
      for (std::size_t i = 0; i < sz; ++i)
        n->value[i] = pa->value[i] - pb->value[i];
      break;
    case detail::Bcast::row:
      for (std::size_t i = 0; i < sz; ++i)
        n->value[i] = pa->value[i] - pb->value[i % c];
      break;
    case detail::Bcast::scalar:
      for (std::size_t i = 0; i < sz; ++i)
        n->value[i] = pa->value[i] - pb->value[0];
      break;
  }
  if (n->requires_grad)
    n->backprop = [pa, pb, kind, c](const detail::Node& self) {
      if (detail::wants_grad(pa))
        for (std::size_t i = 0; i < self.grad.size(); ++i)
          pa->grad[i] += self.grad[i];
      if (detail::wants_grad(pb)) {
        switch (kind) {
          case detail::Bcast::same:
            for (std::size_t i = 0; i < self.grad.size(); ++i)
              pb->grad[i] -= self.grad[i];
            break;
          case detail::Bcast::row:
            for (std::size_t i = 0; i < self.grad.size(); ++i)
              pb->grad[i % c] -= self.grad[i];
            break;
          case detail::Bcast::scalar:
            for (double g : self.grad) pb->grad[0] -= g;
            break;
        }
      }
    };
  return Tensor(n);
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  auto pa = a.node(), pb = b.node();
  const auto kind = detail::bcast_kind(*pa, *pb, "mul");
  auto n = detail::new_node(pa->shape, "mul", {pa, pb});
  const std::size_t sz = n->value.size();
  const std::size_t c = a.cols();
  switch (kind) {
    case detail::Bcast::same:
      for (std::size_t i = 0; i < sz; ++i)
        n->value[i] = pa->value[i] * pb->value[i];
      break;
    case detail::Bcast::row:
      for (std::size_t i = 0; i < sz; ++i)
        n->value[i] = pa->value[i] * pb->value[i % c];
      break;
    case detail::Bcast::scalar:
      for (std::size_t i = 0; i < sz; ++i)
        n->value[i] = pa->value[i] * pb->value[0];
      break;
  }
  if (n->requires_grad)
    n->backprop = [pa, pb, kind, c](const detail::Node& self) {
      const bool ga = detail::wants_grad(pa);
      const bool gb = detail::wants_grad(pb);
      switch (kind) {
        case detail::Bcast::same:
          for (std::size_t i = 0; i < self.grad.size(); ++i) {
            if (ga) pa->grad[i] += self.grad[i] * pb->value[i];
            if (gb) pb->grad[i] += self.grad[i] * pa->value[i];
          }
          break;
        case detail::Bcast::row:
          for (std::size_t i = 0; i < self.grad.size(); ++i) {
            if (ga) pa->grad[i] += self.grad[i] * pb->value[i % c];
            if (gb) pb->grad[i % c] += self.grad[i] * pa->value[i];
          }
          break;
        case detail::Bcast::scalar:
          for (std::size_t i = 0; i < self.grad.size(); ++i) {
            if (ga) pa->grad[i] += self.grad[i] * pb->value[0];
            if (gb) pb->grad[0] += self.grad[i] * pa->value[i];
          }
          break;
      }
    };
  return Tensor(n);
}

inline Tensor scale(const Tensor& a, double k) {
  auto pa = a.node();
  auto n = detail::new_node(pa->shape, "scale", {pa});
  for (std::size_t i = 0; i < n->value.size(); ++i)
    n->value[i] = pa->value[i] * k;
  if (n->requires_grad)
    n->backprop = [pa, k](const detail::Node& self) {
      if (detail::wants_grad(pa))
        for (std::size_t i = 0; i < self.grad.size(); ++i)
          pa->grad[i] += self.grad[i] * k;
    };
  return Tensor(n);
}

inline Tensor add_scalar(const Tensor& a, double k) {
  auto pa = a.node();
  auto n = detail::new_node(pa->shape, "add_scalar", {pa});
  for (std::size_t i = 0; i < n->value.size(); ++i)
    n->value[i] = pa->value[i] + k;
  if (n->requires_grad)
    n->backprop = [pa](const detail::Node& self) {
      if (detail::wants_grad(pa))
        for (std::size_t i = 0; i < self.grad.size(); ++i)
          pa->grad[i] += self.grad[i];
    };
  return Tensor(n);
}

inline Tensor neg(const Tensor& a) { return scale(a, -1.0); }

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  auto pa = a.node(), pb = b.node();
  if (a.shape().size() != 2 || b.shape().size() != 2 || a.cols() != b.rows())
    throw InputError("matmul: need [r x k] by [k x c]");
  const std::size_t r = a.rows(), k = a.cols(), c = b.cols();
  auto n = detail::new_node({r, c}, "matmul", {pa, pb});
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t t = 0; t < k; ++t) {
      const double av = pa->value[i * k + t];
      if (av == 0.0) continue;
      for (std::size_t j = 0; j < c; ++j)
        n->value[i * c + j] += av * pb->value[t * c + j];
    }
  if (n->requires_grad)
    n->backprop = [pa, pb, r, k, c](const detail::Node& self) {
      if (detail::wants_grad(pa)) {
        // dA = G * B^T
        for (std::size_t i = 0; i < r; ++i)
          for (std::size_t t = 0; t < k; ++t) {
            double acc = 0.0;
            for (std::size_t j = 0; j < c; ++j)
              acc += self.grad[i * c + j] * pb->value[t * c + j];
            pa->grad[i * k + t] += acc;
          }
      }
      if (detail::wants_grad(pb)) {
        // dB = A^T * G
        for (std::size_t t = 0; t < k; ++t)
          for (std::size_t i = 0; i < r; ++i) {
            const double av = pa->value[i * k + t];
            if (av == 0.0) continue;
            for (std::size_t j = 0; j < c; ++j)
              pb->grad[t * c + j] += av * self.grad[i * c + j];
          }
      }
    };
  return Tensor(n);
}

// a [r x k] times b^T where b is [c x k]; avoids materializing transposes in
// attention score computation.
inline Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  auto pa = a.node(), pb = b.node();
  if (a.shape().size() != 2 || b.shape().size() != 2 || a.cols() != b.cols())
    throw InputError("matmul_nt: need [r x k] by [c x k]");
  const std::size_t r = a.rows(), k = a.cols(), c = b.rows();
  auto n = detail::new_node({r, c}, "matmul_nt", {pa, pb});
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) {
      double acc = 0.0;
      for (std::size_t t = 0; t < k; ++t)
        acc += pa->value[i * k + t] * pb->value[j * k + t];
      n->value[i * c + j] = acc;
    }
  if (n->requires_grad)
    n->backprop = [pa, pb, r, k, c](const detail::Node& self) {
      const bool ga = detail::wants_grad(pa);
      const bool gb = detail::wants_grad(pb);
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) {
          const double g = self.grad[i * c + j];
          if (g == 0.0) continue;
          for (std::size_t t = 0; t < k; ++t) {
            if (ga) pa->grad[i * k + t] += g * pb->value[j * k + t];
            if (gb) pb->grad[j * k + t] += g * pa->value[i * k + t];
          }
        }
    };
  return Tensor(n);
}

inline Tensor transpose(const Tensor& a) {
  auto pa = a.node();
  const std::size_t r = a.rows(), c = a.cols();
  auto n = detail::new_node({c, r}, "transpose", {pa});
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j)
      n->value[j * r + i] = pa->value[i * c + j];
  if (n->requires_grad)
    n->backprop = [pa, r, c](const detail::Node& self) {
      if (detail::wants_grad(pa))
        for (std::size_t i = 0; i < r; ++i)
          for (std::size_t j = 0; j < c; ++j)
            pa->grad[i * c + j] += self.grad[j * r + i];
    };
  return Tensor(n);
}

inline Tensor sigmoid(const Tensor& a) {
  auto pa = a.node();
  auto n = detail::new_node(pa->shape, "sigmoid", {pa});
  for (std::size_t i = 0; i < n->value.size(); ++i)
    n->value[i] = detail::stable_sigmoid(pa->value[i]);
  if (n->requires_grad)
    n->backprop = [pa](const detail::Node& self) {
      if (detail::wants_grad(pa))
        for (std::size_t i = 0; i < self.grad.size(); ++i) {
          const double s = self.value[i];
          pa->grad[i] += self.grad[i] * s * (1.0 - s);
        }
    };
  return Tensor(n);
}

inline Tensor relu(const Tensor& a) {
  auto pa = a.node();
  auto n = detail::new_node(pa->shape, "relu", {pa});
  for (std::size_t i = 0; i < n->value.size(); ++i)
    n->value[i] = pa->value[i] > 0.0 ? pa->value[i] : 0.0;
  if (n->requires_grad)
    n->backprop = [pa](const detail::Node& self) {
      if (detail::wants_grad(pa))
        for (std::size_t i = 0; i < self.grad.size(); ++i)
          if (pa->value[i] > 0.0) pa->grad[i] += self.grad[i];
    };
  return Tensor(n);
}

inline Tensor gelu(const Tensor& a) {
  auto pa = a.node();
  auto n = detail::new_node(pa->shape, "gelu", {pa});
  constexpr double inv_sqrt2 = 0.70710678118654752440;
  for (std::size_t i = 0; i < n->value.size(); ++i) {
    const double x = pa->value[i];
    n->value[i] = 0.5 * x * (1.0 + std::erf(x * inv_sqrt2));
  }
  if (n->requires_grad)
    n->backprop = [pa](const detail::Node& self) {
      if (!detail::wants_grad(pa)) return;
      constexpr double inv_sqrt2 = 0.70710678118654752440;
      constexpr double inv_sqrt2pi = 0.39894228040143267794;
      for (std::size_t i = 0; i < self.grad.size(); ++i) {
        const double x = pa->value[i];
        const double cdf = 0.5 * (1.0 + std::erf(x * inv_sqrt2));
        const double pdf = inv_sqrt2pi * std::exp(-0.5 * x * x);
        pa->grad[i] += self.grad[i] * (cdf + x * pdf);
      }
    };
  return Tensor(n);
}

// Overflow-safe log(1 + e^x); returns x itself (to within 1e-9) for large x.
inline Tensor softplus(const Tensor& a) {
  auto pa = a.node();
  auto n = detail::new_node(pa->shape, "softplus", {pa});
  for (std::size_t i = 0; i < n->value.size(); ++i)
    n->value[i] = detail::stable_softplus(pa->value[i]);
  if (n->requires_grad)
    n->backprop = [pa](const detail::Node& self) {
      if (detail::wants_grad(pa))
        for (std::size_t i = 0; i < self.grad.size(); ++i)
          pa->grad[i] += self.grad[i] * detail::stable_sigmoid(pa->value[i]);
    };
  return Tensor(n);
}

inline Tensor softmax_rows(const Tensor& a) {
  auto pa = a.node();
  const std::size_t r = a.rows(), c = a.cols();
  auto n = detail::new_node(pa->shape, "softmax_rows", {pa});
  for (std::size_t i = 0; i < r; ++i) {
    const double* x = &pa->value[i * c];
    double m = x[0];
    for (std::size_t j = 1; j < c; ++j) m = std::max(m, x[j]);
    double s = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      n->value[i * c + j] = std::exp(x[j] - m);
      s += n->value[i * c + j];
    }
    for (std::size_t j = 0; j < c; ++j) n->value[i * c + j] /= s;
  }
  if (n->requires_grad)
    n->backprop = [pa, r, c](const detail::Node& self) {
      if (!detail::wants_grad(pa)) return;
      for (std::size_t i = 0; i < r; ++i) {
        double dot = 0.0;
        for (std::size_t j = 0; j < c; ++j)
          dot += self.grad[i * c + j] * self.value[i * c + j];
        for (std::size_t j = 0; j < c; ++j)
          pa->grad[i * c + j] +=
              self.value[i * c + j] * (self.grad[i * c + j] - dot);
      }
    };
  return Tensor(n);
}

inline Tensor log_softmax_rows(const Tensor& a) {
  auto pa = a.node();
  const std::size_t r = a.rows(), c = a.cols();
  auto n = detail::new_node(pa->shape, "log_softmax_rows", {pa});
  for (std::size_t i = 0; i < r; ++i) {
    const double* x = &pa->value[i * c];
    double m = x[0];
    for (std::size_t j = 1; j < c; ++j) m = std::max(m, x[j]);
    double s = 0.0;
    for (std::size_t j = 0; j < c; ++j) s += std::exp(x[j] - m);
    const double lse = m + std::log(s);
    for (std::size_t j = 0; j < c; ++j) n->value[i * c + j] = x[j] - lse;
  }
  if (n->requires_grad)
    n->backprop = [pa, r, c](const detail::Node& self) {
      if (!detail::wants_grad(pa)) return;
      for (std::size_t i = 0; i < r; ++i) {
        double gsum = 0.0;
        for (std::size_t j = 0; j < c; ++j) gsum += self.grad[i * c + j];
        for (std::size_t j = 0; j < c; ++j)
          pa->grad[i * c + j] +=
              self.grad[i * c + j] - std::exp(self.value[i * c + j]) * gsum;
      }
    };
  return Tensor(n);
}

// Row-wise normalization with learned gain/bias rows ([1 x c] each).
inline Tensor layer_norm_rows(const Tensor& x, const Tensor& gain,
                              const Tensor& bias, double eps = 1e-5) {
  auto px = x.node(), pg = gain.node(), pb = bias.node();
  const std::size_t r = x.rows(), c = x.cols();
  if (gain.rows() != 1 || gain.cols() != c || bias.rows() != 1 ||
      bias.cols() != c)
    throw InputError("layer_norm_rows: gain/bias must be [1 x c]");
  auto n = detail::new_node(px->shape, "layer_norm_rows", {px, pg, pb});
  std::vector<double> xhat(r * c), inv_std(r);
  for (std::size_t i = 0; i < r; ++i) {
    double mean = 0.0;
    for (std::size_t j = 0; j < c; ++j) mean += px->value[i * c + j];
    mean /= static_cast<double>(c);
    double var = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      const double d = px->value[i * c + j] - mean;
      var += d * d;
    }
    var /= static_cast<double>(c);
    inv_std[i] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < c; ++j) {
      xhat[i * c + j] = (px->value[i * c + j] - mean) * inv_std[i];
      n->value[i * c + j] = xhat[i * c + j] * pg->value[j] + pb->value[j];
    }
  }
  if (n->requires_grad)
    n->backprop = [px, pg, pb, r, c, xhat = std::move(xhat),
                   inv_std = std::move(inv_std)](const detail::Node& self) {
      const bool gx = detail::wants_grad(px);
      const bool gg = detail::wants_grad(pg);
      const bool gb = detail::wants_grad(pb);
      for (std::size_t i = 0; i < r; ++i) {
        double sum_dxh = 0.0, sum_dxh_xh = 0.0;
        for (std::size_t j = 0; j < c; ++j) {
          const double g = self.grad[i * c + j];
          if (gg) pg->grad[j] += g * xhat[i * c + j];
          if (gb) pb->grad[j] += g;
          const double dxh = g * pg->value[j];
          sum_dxh += dxh;
          sum_dxh_xh += dxh * xhat[i * c + j];
        }
        if (gx) {
          const double cn = static_cast<double>(c);
          for (std::size_t j = 0; j < c; ++j) {
            const double dxh = self.grad[i * c + j] * pg->value[j];
            px->grad[i * c + j] +=
                inv_std[i] *
                (dxh - sum_dxh / cn - xhat[i * c + j] * sum_dxh_xh / cn);
          }
        }
      }
    };
  return Tensor(n);
}

inline Tensor sum_all(const Tensor& a) {
  auto pa = a.node();
  auto n = detail::new_node({1, 1}, "sum_all", {pa});
  double s = 0.0;
  for (double v : pa->value) s += v;
  n->value[0] = s;
  if (n->requires_grad)
    n->backprop = [pa](const detail::Node& self) {
      if (detail::wants_grad(pa))
        for (double& g : pa->grad) g += self.grad[0];
    };
  return Tensor(n);
}

inline Tensor mean_all(const Tensor& a) {
  return scale(sum_all(a), 1.0 / static_cast<double>(a.size()));
}

// [r x c] -> [r x 1], summing each row.
inline Tensor row_sums(const Tensor& a) {
  auto pa = a.node();
  const std::size_t r = a.rows(), c = a.cols();
  auto n = detail::new_node({r, 1}, "row_sums", {pa});
  for (std::size_t i = 0; i < r; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < c; ++j) s += pa->value[i * c + j];
    n->value[i] = s;
  }
  if (n->requires_grad)
    n->backprop = [pa, r, c](const detail::Node& self) {
      if (detail::wants_grad(pa))
        for (std::size_t i = 0; i < r; ++i)
          for (std::size_t j = 0; j < c; ++j)
            pa->grad[i * c + j] += self.grad[i];
    };
  return Tensor(n);
}

inline Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw InputError("concat_cols: empty input");
  const std::size_t r = parts[0].rows();
  std::size_t c = 0;
  std::vector<std::shared_ptr<detail::Node>> parents;
  parents.reserve(parts.size());
  for (const auto& t : parts) {
    if (t.rows() != r) throw InputError("concat_cols: row mismatch");
    c += t.cols();
    parents.push_back(t.node());
  }
  auto n = detail::new_node({r, c}, "concat_cols", parents);
  std::size_t off = 0;
  for (const auto& p : parents) {
    const std::size_t pc = p->shape[1];
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < pc; ++j)
        n->value[i * c + off + j] = p->value[i * pc + j];
    off += pc;
  }
  if (n->requires_grad)
    n->backprop = [parents, r, c](const detail::Node& self) {
      std::size_t off = 0;
      for (const auto& p : parents) {
        const std::size_t pc = p->shape[1];
        if (detail::wants_grad(p))
          for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < pc; ++j)
              p->grad[i * pc + j] += self.grad[i * c + off + j];
        off += pc;
      }
    };
  return Tensor(n);
}

inline Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw InputError("concat_rows: empty input");
  const std::size_t c = parts[0].cols();
  std::size_t r = 0;
  std::vector<std::shared_ptr<detail::Node>> parents;
  parents.reserve(parts.size());
  for (const auto& t : parts) {
    if (t.cols() != c) throw InputError("concat_rows: column mismatch");
    r += t.rows();
    parents.push_back(t.node());
  }
  auto n = detail::new_node({r, c}, "concat_rows", parents);
  std::size_t off = 0;
  for (const auto& p : parents) {
    std::copy(p->value.begin(), p->value.end(), n->value.begin() + off);
    off += p->value.size();
  }
  if (n->requires_grad)
    n->backprop = [parents](const detail::Node& self) {
      std::size_t off = 0;
      for (const auto& p : parents) {
        if (detail::wants_grad(p))
          for (std::size_t i = 0; i < p->value.size(); ++i)
            p->grad[i] += self.grad[off + i];
        off += p->value.size();
      }
    };
  return Tensor(n);
}

inline Tensor slice_rows(const Tensor& a, std::size_t r0, std::size_t r1) {
  auto pa = a.node();
  const std::size_t c = a.cols();
  if (r1 > a.rows() || r0 >= r1) throw InputError("slice_rows: bad range");
  auto n = detail::new_node({r1 - r0, c}, "slice_rows", {pa});
  std::copy(pa->value.begin() + r0 * c, pa->value.begin() + r1 * c,
            n->value.begin());
  if (n->requires_grad)
    n->backprop = [pa, r0, c](const detail::Node& self) {
      if (detail::wants_grad(pa))
        for (std::size_t i = 0; i < self.grad.size(); ++i)
          pa->grad[r0 * c + i] += self.grad[i];
    };
  return Tensor(n);
}

inline Tensor slice_cols(const Tensor& a, std::size_t c0, std::size_t c1) {
  auto pa = a.node();
  const std::size_t r = a.rows(), c = a.cols();
  if (c1 > c || c0 >= c1) throw InputError("slice_cols: bad range");
  const std::size_t w = c1 - c0;
  auto n = detail::new_node({r, w}, "slice_cols", {pa});
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < w; ++j)
      n->value[i * w + j] = pa->value[i * c + c0 + j];
  if (n->requires_grad)
    n->backprop = [pa, r, c, c0, w](const detail::Node& self) {
      if (detail::wants_grad(pa))
        for (std::size_t i = 0; i < r; ++i)
          for (std::size_t j = 0; j < w; ++j)
            pa->grad[i * c + c0 + j] += self.grad[i * w + j];
    };
  return Tensor(n);
}

// Embedding lookup: rows of `table` selected by index, scatter-add on the
// way back.
inline Tensor gather_rows(const Tensor& table, std::vector<std::size_t> idx) {
  auto pt = table.node();
  const std::size_t c = table.cols();
  for (std::size_t i : idx)
    if (i >= table.rows()) throw InputError("gather_rows: index out of range");
  auto n = detail::new_node({idx.size(), c}, "gather_rows", {pt});
  for (std::size_t i = 0; i < idx.size(); ++i)
    std::copy(pt->value.begin() + idx[i] * c,
              pt->value.begin() + (idx[i] + 1) * c, n->value.begin() + i * c);
  if (n->requires_grad)
    n->backprop = [pt, c, idx = std::move(idx)](const detail::Node& self) {
      if (detail::wants_grad(pt))
        for (std::size_t i = 0; i < idx.size(); ++i)
          for (std::size_t j = 0; j < c; ++j)
            pt->grad[idx[i] * c + j] += self.grad[i * c + j];
    };
  return Tensor(n);
}

// Attention of a single target query over a sequence: softmax(q K^T / sqrt(d)) V.
// The output is a convex combination of the rows of V.
inline Tensor target_attention(const Tensor& q, const Tensor& K,
                               const Tensor& V, std::size_t d) {
  if (K.rows() == 0)
    throw InputError("target_attention: empty key sequence, caller must supply a fallback");
  if (q.rows() != 1 || q.cols() != K.cols() || K.rows() != V.rows())
    throw InputError("target_attention: inconsistent widths");
  if (d == 0) throw InputError("target_attention: d must be positive");
  const Tensor scores = scale(matmul_nt(q, K), 1.0 / std::sqrt(static_cast<double>(d)));
  return matmul(softmax_rows(scores), V);
}

inline Tensor mse(const Tensor& a, const Tensor& b) {
  auto pa = a.node(), pb = b.node();
  if (pa->shape != pb->shape) throw InputError("mse: shape mismatch");
  auto n = detail::new_node({1, 1}, "mse", {pa, pb});
  const double inv_n = 1.0 / static_cast<double>(pa->value.size());
  double s = 0.0;
  for (std::size_t i = 0; i < pa->value.size(); ++i) {
    const double d = pa->value[i] - pb->value[i];
    s += d * d;
  }
  n->value[0] = s * inv_n;
  if (n->requires_grad)
    n->backprop = [pa, pb, inv_n](const detail::Node& self) {
      const bool ga = detail::wants_grad(pa);
      const bool gb = detail::wants_grad(pb);
      for (std::size_t i = 0; i < pa->value.size(); ++i) {
        const double d = 2.0 * inv_n * (pa->value[i] - pb->value[i]) * self.grad[0];
        if (ga) pa->grad[i] += d;
        if (gb) pb->grad[i] -= d;
      }
    };
  return Tensor(n);
}

// Mean binary cross-entropy of probabilities against {0,1} targets.
inline Tensor bce(const Tensor& p, const Tensor& y) {
  auto pp = p.node(), py = y.node();
  if (pp->shape != py->shape) throw InputError("bce: shape mismatch");
  for (double v : pp->value)
    if (!(v > 0.0 && v < 1.0))
      throw InputError("bce: probabilities must lie strictly in (0,1)");
  auto n = detail::new_node({1, 1}, "bce", {pp, py});
  const double inv_n = 1.0 / static_cast<double>(pp->value.size());
  double s = 0.0;
  for (std::size_t i = 0; i < pp->value.size(); ++i) {
    const double pv = pp->value[i], yv = py->value[i];
    s -= yv * std::log(pv) + (1.0 - yv) * std::log1p(-pv);
  }
  n->value[0] = s * inv_n;
  if (n->requires_grad)
    n->backprop = [pp, py, inv_n](const detail::Node& self) {
      if (!detail::wants_grad(pp)) return;
      for (std::size_t i = 0; i < pp->value.size(); ++i) {
        const double pv = pp->value[i], yv = py->value[i];
        pp->grad[i] +=
            self.grad[0] * inv_n * (pv - yv) / (pv * (1.0 - pv));
      }
    };
  return Tensor(n);
}

// Mean negative log-probability of the target class, probabilities given
// directly ([n x k] rows summing to 1).
inline Tensor cross_entropy(const Tensor& probs,
                            const std::vector<std::size_t>& cls) {
  auto pp = probs.node();
  const std::size_t r = probs.rows(), c = probs.cols();
  if (cls.size() != r) throw InputError("cross_entropy: label count mismatch");
  for (std::size_t i = 0; i < r; ++i) {
    if (cls[i] >= c) throw InputError("cross_entropy: class index out of range");
    if (!(pp->value[i * c + cls[i]] > 0.0))
      throw InputError("cross_entropy: target-class probability must be positive");
  }
  auto n = detail::new_node({1, 1}, "cross_entropy", {pp});
  const double inv_n = 1.0 / static_cast<double>(r);
  double s = 0.0;
  for (std::size_t i = 0; i < r; ++i) s -= std::log(pp->value[i * c + cls[i]]);
  n->value[0] = s * inv_n;
  if (n->requires_grad)
    n->backprop = [pp, c, inv_n, cls](const detail::Node& self) {
      if (!detail::wants_grad(pp)) return;
      for (std::size_t i = 0; i < cls.size(); ++i)
        pp->grad[i * c + cls[i]] -=
            self.grad[0] * inv_n / pp->value[i * c + cls[i]];
    };
  return Tensor(n);
}

// Mean negative log-likelihood over log-probability rows; pair with
// log_softmax_rows for a numerically safe cross-entropy on logits.
inline Tensor nll_rows(const Tensor& logp, const std::vector<std::size_t>& cls) {
  auto pp = logp.node();
  const std::size_t r = logp.rows(), c = logp.cols();
  if (cls.size() != r) throw InputError("nll_rows: label count mismatch");
  for (std::size_t i : cls)
    if (i >= c) throw InputError("nll_rows: class index out of range");
  auto n = detail::new_node({1, 1}, "nll_rows", {pp});
  const double inv_n = 1.0 / static_cast<double>(r);
  double s = 0.0;
  for (std::size_t i = 0; i < r; ++i) s -= pp->value[i * c + cls[i]];
  n->value[0] = s * inv_n;
  if (n->requires_grad)
    n->backprop = [pp, c, inv_n, cls](const detail::Node& self) {
      if (!detail::wants_grad(pp)) return;
      for (std::size_t i = 0; i < cls.size(); ++i)
        pp->grad[i * c + cls[i]] -= self.grad[0] * inv_n;
    };
  return Tensor(n);
}

inline void assert_finite(const Tensor& t, const char* context) {
  if (!t.all_finite())
    throw DivergenceError(std::string(context) + ": non-finite value encountered");
}

}  // namespace relctr
