#pragma once

#include <Eigen/Core>

#include <cmath>
#include <cstdint>
#include <limits>
#include <memory>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "pengi/core/error.hpp"
#include "pengi/core/tape.hpp"
#include "pengi/core/tensor.hpp"

namespace pengi {

using TokenId = std::uint32_t;

namespace detail {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MatMap = Eigen::Map<RowMat<T>>;
template <class T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;

template <class T>
ConstMatMap<T> as_mat(const Tensor<T>& t) {
  return ConstMatMap<T>(t.data().data(), static_cast<Eigen::Index>(t.rows()),
                        static_cast<Eigen::Index>(t.cols()));
}

template <class T>
MatMap<T> as_mat(Tensor<T>& t) {
  return MatMap<T>(t.data().data(), static_cast<Eigen::Index>(t.rows()), static_cast<Eigen::Index>(t.cols()));
}

template <class T>
ConstMatMap<T> as_mat(std::span<const T> s, std::size_t rows, std::size_t cols) {
  return ConstMatMap<T>(s.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

template <class T>
MatMap<T> as_mat(std::span<T> s, std::size_t rows, std::size_t cols) {
  return MatMap<T>(s.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

template <class T>
void require_matrix(const Tensor<T>& t, const char* op) {
  if (t.rank() != 2) {
    throw DimensionError(std::string(op) + ": expected a matrix, got " + shape_string(t.shape()));
  }
}

template <class T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                         shape_string(b.shape()));
  }
}

template <class T>
void require_finite(std::span<const T> v, const char* op) {
  for (T x : v) {
    if (!std::isfinite(x)) throw NumericError(std::string(op) + ": non-finite input");
  }
}

inline std::size_t total(std::span<const std::size_t> lengths) {
  std::size_t n = 0;
  for (auto l : lengths) n += l;
  return n;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Linear algebra

/// [m x k] . [k x n] -> [m x n]
template <class T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
  const auto& av = a.value();
  const auto& bv = b.value();
  detail::require_matrix(av, "matmul");
  detail::require_matrix(bv, "matmul");
  if (av.cols() != bv.rows()) {
    throw DimensionError("matmul: inner dimensions differ for " + shape_string(av.shape()) + " and " +
                         shape_string(bv.shape()));
  }
  Tensor<T> out = Tensor<T>::matrix(av.rows(), bv.cols());
  detail::as_mat(out).noalias() = detail::as_mat(av) * detail::as_mat(bv);
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().record(std::move(out), {a, b}, [ia, ib](Tape<T>& tp, std::size_t self) {
    const auto& A = tp.value(ia);
    const auto& B = tp.value(ib);
    auto G = detail::as_mat(tp.upstream(self), A.rows(), B.cols());
    if (tp.needs_grad(ia)) {
      detail::as_mat(tp.grad_buffer(ia), A.rows(), A.cols()).noalias() += G * detail::as_mat(B).transpose();
    }
    if (tp.needs_grad(ib)) {
      detail::as_mat(tp.grad_buffer(ib), B.rows(), B.cols()).noalias() += detail::as_mat(A).transpose() * G;
    }
  });
}

/// [m x k] . [n x k]^T -> [m x n]
template <class T>
Var<T> matmul_nt(const Var<T>& a, const Var<T>& b) {
  const auto& av = a.value();
  const auto& bv = b.value();
  detail::require_matrix(av, "matmul_nt");
  detail::require_matrix(bv, "matmul_nt");
  if (av.cols() != bv.cols()) {
    throw DimensionError("matmul_nt: inner dimensions differ for " + shape_string(av.shape()) + " and " +
                         shape_string(bv.shape()) + "^T");
  }
  Tensor<T> out = Tensor<T>::matrix(av.rows(), bv.rows());
  detail::as_mat(out).noalias() = detail::as_mat(av) * detail::as_mat(bv).transpose();
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().record(std::move(out), {a, b}, [ia, ib](Tape<T>& tp, std::size_t self) {
    const auto& A = tp.value(ia);
    const auto& B = tp.value(ib);
    auto G = detail::as_mat(tp.upstream(self), A.rows(), B.rows());
    if (tp.needs_grad(ia)) {
      detail::as_mat(tp.grad_buffer(ia), A.rows(), A.cols()).noalias() += G * detail::as_mat(B);
    }
    if (tp.needs_grad(ib)) {
      detail::as_mat(tp.grad_buffer(ib), B.rows(), B.cols()).noalias() += G.transpose() * detail::as_mat(A);
    }
  });
}

/// a . b^T computed with plain sequential dot products. Entry (i, j) of
/// pairwise_dot(a, b) is bit-identical to entry (j, i) of pairwise_dot(b, a).
template <class T>
Var<T> pairwise_dot(const Var<T>& a, const Var<T>& b) {
  const auto& av = a.value();
  const auto& bv = b.value();
  if (av.cols() != bv.cols()) {
    throw DimensionError("pairwise_dot: column mismatch " + shape_string(av.shape()) + " vs " +
                         shape_string(bv.shape()));
  }
  const std::size_t m = av.rows(), n = bv.rows(), d = av.cols();
  Tensor<T> out = Tensor<T>::matrix(m, n);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      T s = 0;
      for (std::size_t c = 0; c < d; ++c) s += av.at(i, c) * bv.at(j, c);
      out.at(i, j) = s;
    }
  }
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().record(std::move(out), {a, b}, [ia, ib, m, n, d](Tape<T>& tp, std::size_t self) {
    auto g = tp.upstream(self);
    const auto& A = tp.value(ia);
    const auto& B = tp.value(ib);
    if (tp.needs_grad(ia)) {
      auto ga = tp.grad_buffer(ia);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j)
          for (std::size_t c = 0; c < d; ++c) ga[i * d + c] += g[i * n + j] * B.at(j, c);
    }
    if (tp.needs_grad(ib)) {
      auto gb = tp.grad_buffer(ib);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j)
          for (std::size_t c = 0; c < d; ++c) gb[j * d + c] += g[i * n + j] * A.at(i, c);
    }
  });
}

template <class T>
Var<T> transpose(const Var<T>& x) {
  const auto& xv = x.value();
  detail::require_matrix(xv, "transpose");
  const std::size_t r = xv.rows(), c = xv.cols();
  Tensor<T> out = Tensor<T>::matrix(c, r);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out.at(j, i) = xv.at(i, j);
  const std::size_t ix = x.id();
  return x.tape().record(std::move(out), {x}, [ix, r, c](Tape<T>& tp, std::size_t self) {
    auto g = tp.upstream(self);
    auto gx = tp.grad_buffer(ix);
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) gx[i * c + j] += g[j * r + i];
  });
}

// ---------------------------------------------------------------------------
// Elementwise

template <class T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  detail::require_same_shape(a.value(), b.value(), "add");
  Tensor<T> out = a.value();
  out.set_requires_grad(false);
  auto bd = b.value().data();
  auto od = out.data();
  for (std::size_t i = 0; i < od.size(); ++i) od[i] += bd[i];
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().record(std::move(out), {a, b}, [ia, ib](Tape<T>& tp, std::size_t self) {
    auto g = tp.upstream(self);
    for (std::size_t id : {ia, ib}) {
      if (!tp.needs_grad(id)) continue;
      auto gi = tp.grad_buffer(id);
      for (std::size_t i = 0; i < g.size(); ++i) gi[i] += g[i];
    }
  });
}

/// Adds a 1 x n bias row to every row of an m x n matrix. The only
/// broadcasting the library supports.
template <class T>
Var<T> add_bias(const Var<T>& x, const Var<T>& bias) {
  const auto& xv = x.value();
  const auto& bv = bias.value();
  if (bv.size() != xv.cols()) {
    throw DimensionError("add_bias: bias " + shape_string(bv.shape()) + " does not match " +
                         shape_string(xv.shape()));
  }
  const std::size_t r = xv.rows(), c = xv.cols();
  Tensor<T> out = Tensor<T>::matrix(r, c);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out.at(i, j) = xv.at(i, j) + bv[j];
  const std::size_t ix = x.id(), ib = bias.id();
  return x.tape().record(std::move(out), {x, bias}, [ix, ib, r, c](Tape<T>& tp, std::size_t self) {
    auto g = tp.upstream(self);
    if (tp.needs_grad(ix)) {
      auto gx = tp.grad_buffer(ix);
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    }
    if (tp.needs_grad(ib)) {
      auto gb = tp.grad_buffer(ib);
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) gb[j] += g[i * c + j];
    }
  });
}

template <class T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  detail::require_same_shape(a.value(), b.value(), "mul");
  const auto& av = a.value();
  const auto& bv = b.value();
  Tensor<T> out(av.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().record(std::move(out), {a, b}, [ia, ib](Tape<T>& tp, std::size_t self) {
    auto g = tp.upstream(self);
    const auto& A = tp.value(ia);
    const auto& B = tp.value(ib);
    if (tp.needs_grad(ia)) {
      auto ga = tp.grad_buffer(ia);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * B[i];
    }
    if (tp.needs_grad(ib)) {
      auto gb = tp.grad_buffer(ib);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * A[i];
    }
  });
}

/// Multiplies by a compile-time-free constant.
template <class T>
Var<T> scale(const Var<T>& x, T s) {
  Tensor<T> out(x.value().shape());
  const auto& xv = x.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[i] * s;
  const std::size_t ix = x.id();
  return x.tape().record(std::move(out), {x}, [ix, s](Tape<T>& tp, std::size_t self) {
    auto g = tp.upstream(self);
    auto gx = tp.grad_buffer(ix);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * s;
  });
}

/// Multiplies every entry of x by the single entry of a 1x1 variable.
template <class T>
Var<T> scale_by(const Var<T>& x, const Var<T>& s) {
  if (s.value().size() != 1) throw DimensionError("scale_by: scale must be 1x1, got " + shape_string(s.value().shape()));
  const T sv = s.value()[0];
  const auto& xv = x.value();
  Tensor<T> out(xv.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[i] * sv;
  const std::size_t ix = x.id(), is = s.id();
  return x.tape().record(std::move(out), {x, s}, [ix, is](Tape<T>& tp, std::size_t self) {
    auto g = tp.upstream(self);
    const T sv = tp.value(is)[0];
    const auto& X = tp.value(ix);
    if (tp.needs_grad(ix)) {
      auto gx = tp.grad_buffer(ix);
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * sv;
    }
    if (tp.needs_grad(is)) {
      T acc = 0;
      for (std::size_t i = 0; i < g.size(); ++i) acc += g[i] * X[i];
      tp.grad_buffer(is)[0] += acc;
    }
  });
}

template <class T>
Var<T> exp(const Var<T>& x) {
  Tensor<T> out(x.value().shape());
  const auto& xv = x.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::exp(xv[i]);
  const std::size_t ix = x.id();
  return x.tape().record(std::move(out), {x}, [ix](Tape<T>& tp, std::size_t self) {
    auto g = tp.upstream(self);
    const auto& Y = tp.value(self);
    auto gx = tp.grad_buffer(ix);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * Y[i];
  });
}

/// Tanh approximation of GELU.
template <class T>
Var<T> gelu(const Var<T>& x) {
  constexpr T kC = T(0.7978845608028654);  // sqrt(2/pi)
  constexpr T kA = T(0.044715);
  const auto& xv = x.value();
  Tensor<T> out(xv.shape());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const T v = xv[i];
    out[i] = T(0.5) * v * (T(1) + std::tanh(kC * (v + kA * v * v * v)));
  }
  const std::size_t ix = x.id();
  return x.tape().record(std::move(out), {x}, [ix](Tape<T>& tp, std::size_t self) {
    auto g = tp.upstream(self);
    const auto& X = tp.value(ix);
    auto gx = tp.grad_buffer(ix);
    for (std::size_t i = 0; i < g.size(); ++i) {
      const T v = X[i];
      const T u = kC * (v + kA * v * v * v);
      const T th = std::tanh(u);
      const T du = kC * (T(1) + T(3) * kA * v * v);
      gx[i] += g[i] * (T(0.5) * (T(1) + th) + T(0.5) * v * (T(1) - th * th) * du);
    }
  });
}

template <class T>
Var<T> relu(const Var<T>& x) {
  const auto& xv = x.value();
  Tensor<T> out(xv.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[i] > T(0) ? xv[i] : T(0);
  const std::size_t ix = x.id();
  return x.tape().record(std::move(out), {x}, [ix](Tape<T>& tp, std::size_t self) {
    auto g = tp.upstream(self);
    const auto& X = tp.value(ix);
    auto gx = tp.grad_buffer(ix);
    for (std::size_t i = 0; i < g.size(); ++i)
      if (X[i] > T(0)) gx[i] += g[i];
  });
}

// ---------------------------------------------------------------------------
// Normalization

/// Row-wise layer normalization with learned 1 x n gain and bias.
template <class T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, T eps = T(1e-5)) {
  const auto& xv = x.value();
  const std::size_t r = xv.rows(), c = xv.cols();
  if (gamma.value().size() != c || beta.value().size() != c) {
    throw DimensionError("layer_norm: gain/bias width does not match " + shape_string(xv.shape()));
  }
  const auto& gv = gamma.value();
  const auto& bv = beta.value();
  Tensor<T> out = Tensor<T>::matrix(r, c);
  auto xhat = std::make_shared<std::vector<T>>(r * c);
  auto inv_std = std::make_shared<std::vector<T>>(r);
  for (std::size_t i = 0; i < r; ++i) {
    T mean = 0;
    for (std::size_t j = 0; j < c; ++j) mean += xv.at(i, j);
    mean /= T(c);
    T var = 0;
    for (std::size_t j = 0; j < c; ++j) {
      const T d = xv.at(i, j) - mean;
      var += d * d;
    }
    var /= T(c);
    const T is = T(1) / std::sqrt(var + eps);
    (*inv_std)[i] = is;
    for (std::size_t j = 0; j < c; ++j) {
      const T h = (xv.at(i, j) - mean) * is;
      (*xhat)[i * c + j] = h;
      out.at(i, j) = h * gv[j] + bv[j];
    }
  }
  const std::size_t ix = x.id(), ig = gamma.id(), ib = beta.id();
  return x.tape().record(std::move(out), {x, gamma, beta},
                         [ix, ig, ib, r, c, xhat, inv_std](Tape<T>& tp, std::size_t self) {
                           auto g = tp.upstream(self);
                           const auto& G = tp.value(ig);
                           if (tp.needs_grad(ig)) {
                             auto gg = tp.grad_buffer(ig);
                             for (std::size_t i = 0; i < r; ++i)
                               for (std::size_t j = 0; j < c; ++j) gg[j] += g[i * c + j] * (*xhat)[i * c + j];
                           }
                           if (tp.needs_grad(ib)) {
                             auto gb = tp.grad_buffer(ib);
                             for (std::size_t i = 0; i < r; ++i)
                               for (std::size_t j = 0; j < c; ++j) gb[j] += g[i * c + j];
                           }
                           if (tp.needs_grad(ix)) {
                             auto gx = tp.grad_buffer(ix);
                             for (std::size_t i = 0; i < r; ++i) {
                               T m1 = 0, m2 = 0;
                               for (std::size_t j = 0; j < c; ++j) {
                                 const T dh = g[i * c + j] * G[j];
                                 m1 += dh;
                                 m2 += dh * (*xhat)[i * c + j];
                               }
                               m1 /= T(c);
                               m2 /= T(c);
                               for (std::size_t j = 0; j < c; ++j) {
                                 const T dh = g[i * c + j] * G[j];
                                 gx[i * c + j] += (*inv_std)[i] * (dh - m1 - (*xhat)[i * c + j] * m2);
                               }
                             }
                           }
                         });
}

/// Scales each row to unit Euclidean norm. Rows with norm below `eps` raise.
template <class T>
Var<T> l2_normalize_rows(const Var<T>& x, T eps = T(1e-12)) {
  const auto& xv = x.value();
  const std::size_t r = xv.rows(), c = xv.cols();
  Tensor<T> out = Tensor<T>::matrix(r, c);
  auto norms = std::make_shared<std::vector<T>>(r);
  for (std::size_t i = 0; i < r; ++i) {
    T s = 0;
    for (std::size_t j = 0; j < c; ++j) s += xv.at(i, j) * xv.at(i, j);
    const T n = std::sqrt(s);
    if (!(n > eps)) throw NumericError("l2_normalize_rows: zero-norm row " + std::to_string(i));
    (*norms)[i] = n;
    for (std::size_t j = 0; j < c; ++j) out.at(i, j) = xv.at(i, j) / n;
  }
  const std::size_t ix = x.id();
  return x.tape().record(std::move(out), {x}, [ix, r, c, norms](Tape<T>& tp, std::size_t self) {
    auto g = tp.upstream(self);
    const auto& Y = tp.value(self);
    auto gx = tp.grad_buffer(ix);
    for (std::size_t i = 0; i < r; ++i) {
      T dot = 0;
      for (std::size_t j = 0; j < c; ++j) dot += Y.at(i, j) * g[i * c + j];
      for (std::size_t j = 0; j < c; ++j) gx[i * c + j] += (g[i * c + j] - Y.at(i, j) * dot) / (*norms)[i];
    }
  });
}

// ---------------------------------------------------------------------------
// Structural

/// Gathers rows of a V x d table.
template <class T>
Var<T> embedding_lookup(const Var<T>& table, std::span<const TokenId> ids) {
  const auto& tv = table.value();
  if (ids.empty()) throw ContractError("embedding_lookup: empty id list");
  const std::size_t d = tv.cols();
  Tensor<T> out = Tensor<T>::matrix(ids.size(), d);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] >= tv.rows()) {
      throw ContractError("embedding_lookup: id " + std::to_string(ids[i]) + " out of range for table " +
                          shape_string(tv.shape()));
    }
    auto src = tv.row(ids[i]);
    std::copy(src.begin(), src.end(), out.row(i).begin());
  }
  std::vector<TokenId> idv(ids.begin(), ids.end());
  const std::size_t it = table.id();
  return table.tape().record(std::move(out), {table}, [it, d, idv = std::move(idv)](Tape<T>& tp, std::size_t self) {
    auto g = tp.upstream(self);
    auto gt = tp.grad_buffer(it);
    for (std::size_t i = 0; i < idv.size(); ++i)
      for (std::size_t j = 0; j < d; ++j) gt[idv[i] * d + j] += g[i * d + j];
  });
}

template <class T>
Var<T> concat_rows(std::span<const Var<T>> parts) {
  if (parts.empty()) throw ContractError("concat_rows: nothing to concatenate");
  const std::size_t c = parts[0].cols();
  std::size_t r = 0;
  for (const auto& p : parts) {
    if (p.cols() != c) {
      throw DimensionError("concat_rows: column mismatch " + shape_string(parts[0].value().shape()) + " vs " +
                           shape_string(p.value().shape()));
    }
    r += p.rows();
  }
  Tensor<T> out = Tensor<T>::matrix(r, c);
  std::vector<std::size_t> ids, offsets;
  std::size_t off = 0;
  for (const auto& p : parts) {
    auto src = p.value().data();
    std::copy(src.begin(), src.end(), out.data().begin() + static_cast<std::ptrdiff_t>(off));
    ids.push_back(p.id());
    offsets.push_back(off);
    off += src.size();
  }
  return parts[0].tape().record(std::move(out), parts,
                                [ids = std::move(ids), offsets = std::move(offsets)](Tape<T>& tp, std::size_t self) {
                                  auto g = tp.upstream(self);
                                  for (std::size_t k = 0; k < ids.size(); ++k) {
                                    if (!tp.needs_grad(ids[k])) continue;
                                    auto gi = tp.grad_buffer(ids[k]);
                                    for (std::size_t i = 0; i < gi.size(); ++i) gi[i] += g[offsets[k] + i];
                                  }
                                });
}

template <class T>
Var<T> concat_rows(std::initializer_list<Var<T>> parts) {
  return concat_rows(std::span<const Var<T>>(parts.begin(), parts.size()));
}

template <class T>
Var<T> slice_rows(const Var<T>& x, std::size_t start, std::size_t count) {
  const auto& xv = x.value();
  if (count == 0 || start + count > xv.rows()) {
    throw DimensionError("slice_rows: rows [" + std::to_string(start) + ", " + std::to_string(start + count) +
                         ") out of range for " + shape_string(xv.shape()));
  }
  const std::size_t c = xv.cols();
  Tensor<T> out = Tensor<T>::matrix(count, c);
  auto src = xv.data().subspan(start * c, count * c);
  std::copy(src.begin(), src.end(), out.data().begin());
  const std::size_t ix = x.id();
  return x.tape().record(std::move(out), {x}, [ix, start, c](Tape<T>& tp, std::size_t self) {
    auto g = tp.upstream(self);
    auto gx = tp.grad_buffer(ix);
    for (std::size_t i = 0; i < g.size(); ++i) gx[start * c + i] += g[i];
  });
}

/// Row-major reshape; [B x (k*d)] -> [(B*k) x d] splits each row into k rows.
template <class T>
Var<T> reshape(const Var<T>& x, std::size_t rows, std::size_t cols) {
  Tensor<T> out = x.value().reshaped(Shape{rows, cols});
  out.set_requires_grad(false);
  const std::size_t ix = x.id();
  return x.tape().record(std::move(out), {x}, [ix](Tape<T>& tp, std::size_t self) {
    auto g = tp.upstream(self);
    auto gx = tp.grad_buffer(ix);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
  });
}

/// Averages consecutive row segments: lengths {3, 2} on a 5 x d input -> 2 x d.
template <class T>
Var<T> mean_pool(const Var<T>& x, std::span<const std::size_t> lengths) {
  const auto& xv = x.value();
  if (detail::total(lengths) != xv.rows()) {
    throw DimensionError("mean_pool: segment lengths do not cover " + shape_string(xv.shape()));
  }
  const std::size_t c = xv.cols();
  Tensor<T> out = Tensor<T>::matrix(lengths.size(), c);
  std::size_t r0 = 0;
  for (std::size_t s = 0; s < lengths.size(); ++s) {
    if (lengths[s] == 0) throw DimensionError("mean_pool: empty segment");
    for (std::size_t i = 0; i < lengths[s]; ++i)
      for (std::size_t j = 0; j < c; ++j) out.at(s, j) += xv.at(r0 + i, j);
    for (std::size_t j = 0; j < c; ++j) out.at(s, j) /= T(lengths[s]);
    r0 += lengths[s];
  }
  std::vector<std::size_t> lens(lengths.begin(), lengths.end());
  const std::size_t ix = x.id();
  return x.tape().record(std::move(out), {x}, [ix, c, lens = std::move(lens)](Tape<T>& tp, std::size_t self) {
    auto g = tp.upstream(self);
    auto gx = tp.grad_buffer(ix);
    std::size_t r0 = 0;
    for (std::size_t s = 0; s < lens.size(); ++s) {
      const T w = T(1) / T(lens[s]);
      for (std::size_t i = 0; i < lens[s]; ++i)
        for (std::size_t j = 0; j < c; ++j) gx[(r0 + i) * c + j] += g[s * c + j] * w;
      r0 += lens[s];
    }
  });
}

/// Sum of all entries as a 1x1 tensor.
template <class T>
Var<T> sum(const Var<T>& x) {
  T s = 0;
  for (T v : x.value().data()) s += v;
  const std::size_t ix = x.id();
  return x.tape().record(Tensor<T>::scalar(s), {x}, [ix](Tape<T>& tp, std::size_t self) {
    const T g = tp.upstream(self)[0];
    auto gx = tp.grad_buffer(ix);
    for (auto& v : gx) v += g;
  });
}

// ---------------------------------------------------------------------------
// Probabilities and losses

/// Row-wise softmax with max subtraction.
template <class T>
Var<T> softmax_rows(const Var<T>& x) {
  const auto& xv = x.value();
  detail::require_finite(xv.data(), "softmax_rows");
  const std::size_t r = xv.rows(), c = xv.cols();
  Tensor<T> out = Tensor<T>::matrix(r, c);
  for (std::size_t i = 0; i < r; ++i) {
    T m = xv.at(i, 0);
    for (std::size_t j = 1; j < c; ++j) m = std::max(m, xv.at(i, j));
    T z = 0;
    for (std::size_t j = 0; j < c; ++j) {
      const T e = std::exp(xv.at(i, j) - m);
      out.at(i, j) = e;
      z += e;
    }
    for (std::size_t j = 0; j < c; ++j) out.at(i, j) /= z;
  }
  const std::size_t ix = x.id();
  return x.tape().record(std::move(out), {x}, [ix, r, c](Tape<T>& tp, std::size_t self) {
    auto g = tp.upstream(self);
    const auto& Y = tp.value(self);
    auto gx = tp.grad_buffer(ix);
    for (std::size_t i = 0; i < r; ++i) {
      T dot = 0;
      for (std::size_t j = 0; j < c; ++j) dot += g[i * c + j] * Y.at(i, j);
      for (std::size_t j = 0; j < c; ++j) gx[i * c + j] += Y.at(i, j) * (g[i * c + j] - dot);
    }
  });
}

/// Numerically stable log-softmax of one row, written into `out`.
template <class T>
void log_softmax_row(std::span<const T> row, std::span<T> out) {
  T m = row[0];
  for (T v : row) m = std::max(m, v);
  T z = 0;
  for (T v : row) z += std::exp(v - m);
  const T lse = m + std::log(z);
  for (std::size_t j = 0; j < row.size(); ++j) out[j] = row[j] - lse;
}

/// Sum over rows of weight_i * -log softmax(logits_i)[target_i]. Rows with
/// zero weight are never read, so they contribute neither loss nor gradient.
template <class T>
Var<T> weighted_cross_entropy(const Var<T>& logits, std::span<const TokenId> targets, std::span<const T> weights) {
  const auto& lv = logits.value();
  const std::size_t r = lv.rows(), c = lv.cols();
  if (targets.size() != r || weights.size() != r) {
    throw DimensionError("cross_entropy: " + std::to_string(targets.size()) + " targets / " +
                         std::to_string(weights.size()) + " weights for logits " + shape_string(lv.shape()));
  }
  std::vector<std::size_t> active;
  for (std::size_t i = 0; i < r; ++i) {
    if (weights[i] == T(0)) continue;
    if (targets[i] >= c) {
      throw ContractError("cross_entropy: target " + std::to_string(targets[i]) + " out of range for vocabulary " +
                          std::to_string(c));
    }
    active.push_back(i);
  }
  if (active.empty()) throw DataError("cross_entropy: degenerate batch, no supervised positions");
  auto probs = std::make_shared<std::vector<T>>(active.size() * c);
  T loss = 0;
  std::vector<T> lsm(c);
  for (std::size_t a = 0; a < active.size(); ++a) {
    const std::size_t i = active[a];
    auto row = lv.row(i);
    detail::require_finite(row, "cross_entropy");
    log_softmax_row<T>(row, lsm);
    loss -= weights[i] * lsm[targets[i]];
    for (std::size_t j = 0; j < c; ++j) (*probs)[a * c + j] = std::exp(lsm[j]);
  }
  std::vector<TokenId> tg(targets.begin(), targets.end());
  std::vector<T> w(weights.begin(), weights.end());
  const std::size_t il = logits.id();
  return logits.tape().record(
      Tensor<T>::scalar(loss), {logits},
      [il, c, probs, active = std::move(active), tg = std::move(tg), w = std::move(w)](Tape<T>& tp, std::size_t self) {
        const T g = tp.upstream(self)[0];
        auto gl = tp.grad_buffer(il);
        for (std::size_t a = 0; a < active.size(); ++a) {
          const std::size_t i = active[a];
          const T s = g * w[i];
          for (std::size_t j = 0; j < c; ++j) gl[i * c + j] += s * (*probs)[a * c + j];
          gl[i * c + tg[i]] -= s;
        }
      });
}

/// Mean cross-entropy over the positions where `mask` is true.
template <class T>
Var<T> cross_entropy(const Var<T>& logits, std::span<const TokenId> targets, const std::vector<bool>& mask) {
  if (mask.size() != logits.rows()) {
    throw DimensionError("cross_entropy: mask length " + std::to_string(mask.size()) + " for " +
                         std::to_string(logits.rows()) + " positions");
  }
  std::size_t m = 0;
  for (bool b : mask) m += b ? 1 : 0;
  if (m == 0) throw DataError("cross_entropy: degenerate batch, mask selects no positions");
  std::vector<T> w(mask.size(), T(0));
  for (std::size_t i = 0; i < mask.size(); ++i)
    if (mask[i]) w[i] = T(1) / T(m);
  return weighted_cross_entropy<T>(logits, targets, w);
}

}  // namespace pengi
