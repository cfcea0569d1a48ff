#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "qnn/tensor.hpp"

namespace qnn {

inline double frobenius(const Tensor& m) {
  double s = 0.0;
  for (double v : m.data()) s += v * v;
  return std::sqrt(s);
}

/// (M + M^T) / 2. The result has bit-identical (i, j) and (j, i) entries,
/// and the same quadratic form as M.
inline Tensor symmetrize(const Tensor& m) {
  if (!m.is_square()) throw ShapeError("symmetrize: expected a square matrix, got " + shape_str(m.shape()));
  const std::size_t n = m.rows();
  Tensor out({n, n});
  for (std::size_t i = 0; i < n; ++i) {
    out(i, i) = m(i, i);
    for (std::size_t j = i + 1; j < n; ++j) {
      const double v = 0.5 * (m(i, j) + m(j, i));
      out(i, j) = v;
      out(j, i) = v;
    }
  }
  detail::require_finite(out, "symmetrize");
  return out;
}

/// Eigenvectors (columns of q) and eigenvalues of a symmetric matrix,
/// ordered by |lambda| descending.
struct EighResult {
  Tensor q;
  std::vector<double> lambda;
};

struct TopK {
  Tensor qk;                 // n x k
  std::vector<double> lam;   // k
};

inline constexpr double kDefaultEighTol = 1e-12;
inline constexpr int kMaxJacobiSweeps = 100;

inline double max_offdiag(const Tensor& a) {
  double m = 0.0;
  const std::size_t n = a.rows();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) m = std::max(m, std::abs(a(i, j)));
  return m;
}

/// Cyclic Jacobi eigensolver, row-sweep order. Stops when the largest
/// off-diagonal magnitude is at most tol * |s|_F.
inline EighResult eigh(const Tensor& s, double tol = kDefaultEighTol) {
  if (!s.is_square()) throw ShapeError("eigh: expected a square matrix, got " + shape_str(s.shape()));
  if (!(tol > 0.0)) throw DomainError("eigh: tolerance must be positive");
  if (!s.all_finite()) throw DomainError("eigh: input is not finite");
  const std::size_t n = s.rows();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j)
      if (std::abs(s(i, j) - s(j, i)) > 1e-12) throw DomainError("eigh: input is not symmetric");

  Tensor a = s;
  Tensor v = Tensor::identity(n);
  const double threshold = tol * frobenius(s);

  int sweep = 0;
  while (max_offdiag(a) > threshold) {
    if (sweep++ >= kMaxJacobiSweeps) {
      throw ConvergenceError("eigh: no convergence after " + std::to_string(kMaxJacobiSweeps) + " sweeps");
    }
    for (std::size_t p = 0; p + 1 < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        const double apq = a(p, q);
        if (apq == 0.0) continue;
        // Smaller root of t^2 + 2*tau*t - 1 = 0; tau == 0 takes t = -1 so
        // the larger eigenvalue lands on the lower index.
        const double tau = (a(q, q) - a(p, p)) / (2.0 * apq);
        const double t = (tau > 0.0 ? 1.0 : -1.0) / (std::abs(tau) + std::sqrt(1.0 + tau * tau));
        const double c = 1.0 / std::sqrt(1.0 + t * t);
        const double sn = t * c;
        for (std::size_t r = 0; r < n; ++r) {
          const double arp = a(r, p), arq = a(r, q);
          a(r, p) = c * arp - sn * arq;
          a(r, q) = sn * arp + c * arq;
        }
        for (std::size_t r = 0; r < n; ++r) {
          const double apr = a(p, r), aqr = a(q, r);
          a(p, r) = c * apr - sn * aqr;
          a(q, r) = sn * apr + c * aqr;
        }
        a(p, q) = 0.0;
        a(q, p) = 0.0;
        for (std::size_t r = 0; r < n; ++r) {
          const double vrp = v(r, p), vrq = v(r, q);
          v(r, p) = c * vrp - sn * vrq;
          v(r, q) = sn * vrp + c * vrq;
        }
      }
    }
  }

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t i, std::size_t j) { return std::abs(a(i, i)) > std::abs(a(j, j)); });

  EighResult out{Tensor({n, n}), std::vector<double>(n)};
  for (std::size_t c = 0; c < n; ++c) {
    const std::size_t src = order[c];
    out.lambda[c] = a(src, src);
    // Sign convention: largest-magnitude entry positive (first one on ties).
    std::size_t arg = 0;
    for (std::size_t r = 1; r < n; ++r)
      if (std::abs(v(r, src)) > std::abs(v(arg, src))) arg = r;
    const double sign = v(arg, src) < 0.0 ? -1.0 : 1.0;
    for (std::size_t r = 0; r < n; ++r) out.q(r, c) = sign * v(r, src);
  }
  return out;
}

inline TopK topk_truncate(const EighResult& e, std::size_t k) {
  const std::size_t n = e.lambda.size();
  if (k < 1 || k > n) {
    throw DomainError("topk_truncate: k=" + std::to_string(k) + " outside [1, " + std::to_string(n) + "]");
  }
  TopK out{Tensor({n, k}), std::vector<double>(e.lambda.begin(), e.lambda.begin() + static_cast<std::ptrdiff_t>(k))};
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < k; ++c) out.qk(r, c) = e.q(r, c);
  return out;
}

/// q * diag(lam) * q^T for an n x k factor.
inline Tensor reconstruct(const Tensor& q, std::span<const double> lam) {
  detail::require_rank(q, 2, "reconstruct");
  if (q.cols() != lam.size()) throw ShapeError("reconstruct: factor/eigenvalue count mismatch");
  const std::size_t n = q.rows(), k = q.cols();
  Tensor out({n, n});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      double s = 0.0;
      for (std::size_t c = 0; c < k; ++c) s += q(i, c) * lam[c] * q(j, c);
      out(i, j) = s;
    }
  return out;
}

inline Tensor reconstruct(const EighResult& e) { return reconstruct(e.q, e.lambda); }
inline Tensor reconstruct(const TopK& t) { return reconstruct(t.qk, t.lam); }

/// x^T M x by direct summation.
inline double quadratic_form(const Tensor& m, std::span<const double> x) {
  if (!m.is_square() || m.rows() != x.size()) throw ShapeError("quadratic_form: shape mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i)
    for (std::size_t j = 0; j < x.size(); ++j) s += x[i] * m(i, j) * x[j];
  return s;
}

}  // namespace qnn
