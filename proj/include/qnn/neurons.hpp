#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "qnn/linalg.hpp"
#include "qnn/tensor.hpp"

namespace qnn {

struct LinearNeuronParams {
  Tensor w;  // n
  double b = 0.0;
};

// x^T M x + w^T x + b with M stored as given.
struct GeneralQuadParams {
  Tensor m;  // n x n
  Tensor w;  // n
  double b = 0.0;
};

/// Low-rank quadratic neuron. The forward pass computes f = qk^T x and
/// y = w^T x + b + (1/k) * sum_i lam[i] * f[i]^2, emitting [y, f...].
struct QuadNeuronParams {
  Tensor qk;               // n x k, one retained direction per column
  std::vector<double> lam; // k
  Tensor w;                // n
  double b = 0.0;

  std::size_t n() const { return w.size(); }
  std::size_t k() const { return lam.size(); }

  static QuadNeuronParams zeros(std::size_t n, std::size_t k) {
    return QuadNeuronParams{Tensor({n, k}), std::vector<double>(k, 0.0), Tensor({n}), 0.0};
  }
};

// (w1^T x)(w2^T x) + w3^T x + b
struct ProductQuadParams {
  Tensor w1, w2, w3;
  double b = 0.0;
};

struct QuadOutput {
  double y = 0.0;
  std::vector<double> f;
};

struct QuadGradients {
  std::vector<double> gx;
  QuadNeuronParams grads;
};

struct NeuronCost {
  std::int64_t params = 0;
  std::int64_t macs = 0;
  friend bool operator==(const NeuronCost&, const NeuronCost&) = default;
};

namespace detail {

inline void require_len(const Tensor& w, std::span<const double> x, const char* op) {
  if (w.rank() != 1 || w.size() != x.size()) {
    throw ShapeError(std::string(op) + ": input length " + std::to_string(x.size()) +
                     " does not match weights " + shape_str(w.shape()));
  }
}

inline void check_quad_params(const QuadNeuronParams& p, const char* op) {
  if (p.qk.rank() != 2 || p.w.rank() != 1 || p.qk.rows() != p.w.size() || p.qk.cols() != p.lam.size()) {
    throw ShapeError(std::string(op) + ": inconsistent quadratic neuron shapes");
  }
}

}  // namespace detail

inline double linear_forward(const LinearNeuronParams& p, std::span<const double> x) {
  detail::require_len(p.w, x, "linear_forward");
  return dot(p.w.data(), x) + p.b;
}

/// Reference evaluation of the general quadratic neuron: explicit double
/// loop over every x_i * M_ij * x_j term.
inline double general_quad_forward(const GeneralQuadParams& p, std::span<const double> x) {
  detail::require_len(p.w, x, "general_quad_forward");
  if (!p.m.is_square() || p.m.rows() != x.size()) {
    throw ShapeError("general_quad_forward: matrix is " + shape_str(p.m.shape()) + ", input length " +
                     std::to_string(x.size()));
  }
  const std::size_t n = x.size();
  double quad = 0.0;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) quad += x[i] * p.m(i, j) * x[j];
  double lin = 0.0;
  for (std::size_t i = 0; i < n; ++i) lin += p.w[i] * x[i];
  return quad + lin + p.b;
}

/// f is computed once and reused for both the quadratic term and the
/// vectorized output.
inline QuadOutput quad_forward(const QuadNeuronParams& p, std::span<const double> x) {
  detail::check_quad_params(p, "quad_forward");
  detail::require_len(p.w, x, "quad_forward");
  const std::size_t n = p.n(), k = p.k();
  QuadOutput out;
  out.f.assign(k, 0.0);
  for (std::size_t c = 0; c < k; ++c) {
    double s = 0.0;
    for (std::size_t j = 0; j < n; ++j) s += p.qk(j, c) * x[j];
    out.f[c] = s;
  }
  double quad = 0.0;
  for (std::size_t c = 0; c < k; ++c) quad += p.lam[c] * out.f[c] * out.f[c];
  out.y = (dot(p.w.data(), x) + p.b) + quad / static_cast<double>(k);
  return out;
}

/// Quadratic part (1/k) * sum lam_i f_i^2 alone.
inline double quad_response(const QuadNeuronParams& p, std::span<const double> x) {
  const QuadOutput o = quad_forward(p, x);
  double quad = 0.0;
  for (std::size_t c = 0; c < p.k(); ++c) quad += p.lam[c] * o.f[c] * o.f[c];
  return quad / static_cast<double>(p.k());
}

/// Backward pass given upstream gradients gy (for y) and gf (for each f).
/// Both paths into qk and x are summed.
inline QuadGradients quad_backward(const QuadNeuronParams& p, std::span<const double> x, double gy,
                                   std::span<const double> gf) {
  detail::check_quad_params(p, "quad_backward");
  detail::require_len(p.w, x, "quad_backward");
  if (gf.size() != p.k()) throw ShapeError("quad_backward: gf length does not match rank");
  const std::size_t n = p.n(), k = p.k();
  const double inv_k = 1.0 / static_cast<double>(k);
  const QuadOutput fwd = quad_forward(p, x);

  QuadGradients g{std::vector<double>(n, 0.0), QuadNeuronParams::zeros(n, k)};
  g.grads.b = gy;
  for (std::size_t j = 0; j < n; ++j) g.grads.w[j] = gy * x[j];

  for (std::size_t c = 0; c < k; ++c) {
    const double f = fwd.f[c];
    g.grads.lam[c] = gy * f * f * inv_k;
    // Total gradient reaching f[c]: the direct output plus the quadratic term.
    const double gfc = gf[c] + gy * 2.0 * inv_k * p.lam[c] * f;
    for (std::size_t j = 0; j < n; ++j) {
      g.grads.qk(j, c) = gfc * x[j];
      g.gx[j] += gfc * p.qk(j, c);
    }
  }
  for (std::size_t j = 0; j < n; ++j) g.gx[j] += gy * p.w[j];
  return g;
}

inline double product_quad_forward(const ProductQuadParams& p, std::span<const double> x) {
  detail::require_len(p.w1, x, "product_quad_forward");
  detail::require_len(p.w2, x, "product_quad_forward");
  detail::require_len(p.w3, x, "product_quad_forward");
  return dot(p.w1.data(), x) * dot(p.w2.data(), x) + dot(p.w3.data(), x) + p.b;
}

/// Decompose a general quadratic neuron: symmetrize, eigendecompose, keep the
/// k largest-magnitude eigenpairs. lam is stored pre-multiplied by k so the
/// runtime 1/k normalization cancels.
inline QuadNeuronParams from_general(const Tensor& m, const Tensor& w, double b, std::size_t k,
                                     double tol = kDefaultEighTol) {
  if (!m.is_square()) throw ShapeError("from_general: expected a square matrix");
  if (w.rank() != 1 || w.size() != m.rows()) throw ShapeError("from_general: w length does not match matrix");
  const EighResult e = eigh(symmetrize(m), tol);
  TopK top = topk_truncate(e, k);
  for (double& v : top.lam) v *= static_cast<double>(k);
  return QuadNeuronParams{std::move(top.qk), std::move(top.lam), w, b};
}

/// Parameters (k+1)n + k and MACs (k+1)n + 2k, bias excluded.
inline NeuronCost neuron_cost(std::int64_t n, std::int64_t k) {
  if (n < 1 || k < 1) throw DomainError("neuron_cost: n and k must be positive");
  return NeuronCost{(k + 1) * n + k, (k + 1) * n + 2 * k};
}

}  // namespace qnn
