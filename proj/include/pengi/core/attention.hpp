#pragma once

#include <cmath>
#include <limits>
#include <memory>
#include <span>
#include <vector>

#include "pengi/core/ops.hpp"

namespace pengi {

/// Fused multi-head scaled dot-product attention over packed sequences.
///
/// q, k and v are [rows x d] with rows the concatenation of independent
/// sequences whose lengths are given by `segments`; attention never crosses a
/// segment boundary. Heads split the columns into equal slices. With `causal`
/// set, position i attends to positions <= i within its segment.
template <class T>
Var<T> attention(const Var<T>& q, const Var<T>& k, const Var<T>& v, std::size_t heads,
                 std::span<const std::size_t> segments, bool causal) {
  const auto& qv = q.value();
  detail::require_same_shape(qv, k.value(), "attention");
  detail::require_same_shape(qv, v.value(), "attention");
  const std::size_t rows = qv.rows(), d = qv.cols();
  if (heads == 0 || d % heads != 0) {
    throw DimensionError("attention: width " + std::to_string(d) + " not divisible into " + std::to_string(heads) +
                         " heads");
  }
  if (detail::total(segments) != rows) {
    throw DimensionError("attention: segment lengths do not cover " + shape_string(qv.shape()));
  }
  const std::size_t dh = d / heads;
  const T sc = T(1) / std::sqrt(T(dh));

  using Mat = detail::RowMat<T>;
  auto Q = detail::as_mat(qv);
  auto K = detail::as_mat(k.value());
  auto V = detail::as_mat(v.value());

  // Attention probabilities are kept for the backward pass, one n x n block per
  // (segment, head).
  auto probs = std::make_shared<std::vector<Mat>>();
  probs->reserve(segments.size() * heads);
  Tensor<T> out = Tensor<T>::matrix(rows, d);
  auto O = detail::as_mat(out);

  std::size_t r0 = 0;
  for (std::size_t n : segments) {
    const auto ni = static_cast<Eigen::Index>(n);
    const auto r0i = static_cast<Eigen::Index>(r0);
    for (std::size_t h = 0; h < heads; ++h) {
      const auto c0 = static_cast<Eigen::Index>(h * dh);
      const auto dhi = static_cast<Eigen::Index>(dh);
      Mat S = (Q.block(r0i, c0, ni, dhi) * K.block(r0i, c0, ni, dhi).transpose()) * sc;
      for (Eigen::Index i = 0; i < ni; ++i) {
        const Eigen::Index last = causal ? i : ni - 1;
        T m = S(i, 0);
        for (Eigen::Index j = 1; j <= last; ++j) m = std::max(m, S(i, j));
        T z = 0;
        for (Eigen::Index j = 0; j <= last; ++j) {
          S(i, j) = std::exp(S(i, j) - m);
          z += S(i, j);
        }
        for (Eigen::Index j = 0; j <= last; ++j) S(i, j) /= z;
        for (Eigen::Index j = last + 1; j < ni; ++j) S(i, j) = T(0);
      }
      O.block(r0i, c0, ni, dhi).noalias() = S * V.block(r0i, c0, ni, dhi);
      probs->push_back(std::move(S));
    }
    r0 += n;
  }

  std::vector<std::size_t> segs(segments.begin(), segments.end());
  const std::size_t iq = q.id(), ik = k.id(), iv = v.id();
  return q.tape().record(
      std::move(out), {q, k, v},
      [iq, ik, iv, rows, d, dh, heads, sc, probs, segs = std::move(segs)](Tape<T>& tp, std::size_t self) {
        auto G = detail::as_mat(tp.upstream(self), rows, d);
        auto Qm = detail::as_mat(tp.value(iq));
        auto Km = detail::as_mat(tp.value(ik));
        auto Vm = detail::as_mat(tp.value(iv));
        const bool gq = tp.needs_grad(iq), gk = tp.needs_grad(ik), gv = tp.needs_grad(iv);
        std::span<T> dq_s = gq ? tp.grad_buffer(iq) : std::span<T>{};
        std::span<T> dk_s = gk ? tp.grad_buffer(ik) : std::span<T>{};
        std::span<T> dv_s = gv ? tp.grad_buffer(iv) : std::span<T>{};
        std::size_t r0 = 0, p = 0;
        for (std::size_t n : segs) {
          const auto ni = static_cast<Eigen::Index>(n);
          const auto r0i = static_cast<Eigen::Index>(r0);
          for (std::size_t h = 0; h < heads; ++h, ++p) {
            const auto c0 = static_cast<Eigen::Index>(h * dh);
            const auto dhi = static_cast<Eigen::Index>(dh);
            const Mat& P = (*probs)[p];
            auto Gh = G.block(r0i, c0, ni, dhi);
            if (gv) detail::as_mat(dv_s, rows, d).block(r0i, c0, ni, dhi).noalias() += P.transpose() * Gh;
            if (!gq && !gk) continue;
            Mat dP = Gh * Vm.block(r0i, c0, ni, dhi).transpose();
            for (Eigen::Index i = 0; i < ni; ++i) {
              T dot = 0;
              for (Eigen::Index j = 0; j < ni; ++j) dot += dP(i, j) * P(i, j);
              for (Eigen::Index j = 0; j < ni; ++j) dP(i, j) = P(i, j) * (dP(i, j) - dot) * sc;
            }
            if (gq) detail::as_mat(dq_s, rows, d).block(r0i, c0, ni, dhi).noalias() += dP * Km.block(r0i, c0, ni, dhi);
            if (gk) {
              detail::as_mat(dk_s, rows, d).block(r0i, c0, ni, dhi).noalias() +=
                  dP.transpose() * Qm.block(r0i, c0, ni, dhi);
            }
          }
          r0 += n;
        }
      });
}

}  // namespace pengi
