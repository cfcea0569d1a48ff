#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "qnn/arch.hpp"
#include "qnn/neurons.hpp"
#include "qnn/tensor.hpp"

namespace qnn {

struct ConvGeometry {
  std::size_t channels = 0, height = 0, width = 0;
  std::size_t kernel_h = 1, kernel_w = 1, stride = 1, pad = 0;
  std::size_t out_h = 0, out_w = 0;

  static ConvGeometry make(const ConvSpec& spec, FeatureShape in) {
    ConvGeometry g{in.c, in.h, in.w, spec.kernel_h, spec.kernel_w, spec.stride, spec.pad, 0, 0};
    g.out_h = conv_out_extent(in.h, spec.kernel_h, spec.stride, spec.pad);
    g.out_w = conv_out_extent(in.w, spec.kernel_w, spec.stride, spec.pad);
    return g;
  }
  std::size_t patch() const { return channels * kernel_h * kernel_w; }
  std::size_t positions() const { return out_h * out_w; }
  std::size_t in_size() const { return channels * height * width; }
};

// Row l = (c * kernel_h + i) * kernel_w + j holds input pixel
// (c, oh*stride + i - pad, ow*stride + j - pad) for column oh*out_w + ow.
inline void im2col_into(const double* x, const ConvGeometry& g, double* cols) {
  const std::size_t npos = g.positions();
  std::size_t row = 0;
  for (std::size_t c = 0; c < g.channels; ++c) {
    const double* xc = x + c * g.height * g.width;
    for (std::size_t i = 0; i < g.kernel_h; ++i) {
      for (std::size_t j = 0; j < g.kernel_w; ++j, ++row) {
        double* out = cols + row * npos;
        for (std::size_t oh = 0; oh < g.out_h; ++oh) {
          const std::ptrdiff_t ih = static_cast<std::ptrdiff_t>(oh * g.stride + i) - static_cast<std::ptrdiff_t>(g.pad);
          for (std::size_t ow = 0; ow < g.out_w; ++ow) {
            const std::ptrdiff_t iw =
                static_cast<std::ptrdiff_t>(ow * g.stride + j) - static_cast<std::ptrdiff_t>(g.pad);
            const bool inside = ih >= 0 && iw >= 0 && ih < static_cast<std::ptrdiff_t>(g.height) &&
                                iw < static_cast<std::ptrdiff_t>(g.width);
            out[oh * g.out_w + ow] = inside ? xc[ih * static_cast<std::ptrdiff_t>(g.width) + iw] : 0.0;
          }
        }
      }
    }
  }
}

inline void col2im_add(const double* cols, const ConvGeometry& g, double* x) {
  const std::size_t npos = g.positions();
  std::size_t row = 0;
  for (std::size_t c = 0; c < g.channels; ++c) {
    double* xc = x + c * g.height * g.width;
    for (std::size_t i = 0; i < g.kernel_h; ++i) {
      for (std::size_t j = 0; j < g.kernel_w; ++j, ++row) {
        const double* in = cols + row * npos;
        for (std::size_t oh = 0; oh < g.out_h; ++oh) {
          const std::ptrdiff_t ih = static_cast<std::ptrdiff_t>(oh * g.stride + i) - static_cast<std::ptrdiff_t>(g.pad);
          if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(g.height)) continue;
          for (std::size_t ow = 0; ow < g.out_w; ++ow) {
            const std::ptrdiff_t iw =
                static_cast<std::ptrdiff_t>(ow * g.stride + j) - static_cast<std::ptrdiff_t>(g.pad);
            if (iw < 0 || iw >= static_cast<std::ptrdiff_t>(g.width)) continue;
            xc[ih * static_cast<std::ptrdiff_t>(g.width) + iw] += in[oh * g.out_w + ow];
          }
        }
      }
    }
  }
}

/// Patch matrix (n x P) of a single C x H x W feature map.
inline Tensor im2col(const Tensor& x, const ConvSpec& spec) {
  if (x.rank() != 3) throw ShapeError("im2col: expected a C x H x W feature map, got " + shape_str(x.shape()));
  if (x.dim(0) != spec.in_channels) throw ShapeError("im2col: channel count does not match spec");
  ConvGeometry g;
  try {
    g = ConvGeometry::make(spec, {x.dim(0), x.dim(1), x.dim(2)});
  } catch (const BuildError& e) {
    throw ShapeError(std::string("im2col: ") + e.what());
  }
  Tensor cols({g.patch(), g.positions()});
  im2col_into(x.data().data(), g, cols.data().data());
  return cols;
}

namespace detail {

inline void require_batch(const Tensor& x, FeatureShape s, const char* op) {
  if (x.rank() != 4 || x.dim(1) != s.c || x.dim(2) != s.h || x.dim(3) != s.w) {
    throw ShapeError(std::string(op) + ": expected (N, " + std::to_string(s.c) + ", " + std::to_string(s.h) +
                     ", " + std::to_string(s.w) + "), got " + shape_str(x.shape()));
  }
}

}  // namespace detail

/// A convolution whose filters are linear, low-rank quadratic, or product
/// neurons. Every neuron kind is evaluated as one matrix product
/// Z = weight * patches followed by a per-position combine step.
///
/// Quadratic layers hold m = floor(out/(k+1)) quadratic neurons followed by
/// r = out - m(k+1) linear fill neurons. Weight rows coincide with output
/// channels: neuron j owns rows j(k+1) .. j(k+1)+k as [w, q_1 .. q_k] and
/// emits channels [y, f_1 .. f_k] in the same order. Product layers keep
/// three rows (w1, w2, w3) per output channel.
class ConvLayer {
 public:
  ConvLayer(const ConvSpec& spec, FeatureShape in) : spec_(spec), in_(in), geom_(ConvGeometry::make(spec, in)) {
    if (spec.in_channels != in.c) throw ShapeError("conv: input channels do not match spec");
    const std::size_t n = geom_.patch();
    const std::size_t out = spec.out_channels;
    switch (spec.neuron.kind) {
      case NeuronKind::Quadratic:
        k_ = spec.neuron.k;
        if (k_ < 1) throw BuildError("conv: quadratic neuron needs k >= 1");
        m_ = out / (k_ + 1);
        r_ = out - m_ * (k_ + 1);
        rows_ = out;
        neurons_ = m_ + r_;
        break;
      case NeuronKind::Product:
        rows_ = 3 * out;
        neurons_ = out;
        break;
      case NeuronKind::Linear:
      case NeuronKind::Default:
        rows_ = out;
        neurons_ = out;
        break;
    }
    weight = Tensor({rows_, n});
    grad_weight = Tensor({rows_, n});
    if (m_ > 0) {
      lambda = Tensor({m_, k_});
      grad_lambda = Tensor({m_, k_});
    }
    if (spec.bias == BiasMode::On) {
      bias = Tensor({neurons_});
      grad_bias = Tensor({neurons_});
    }
  }

  const ConvSpec& spec() const { return spec_; }
  const ConvGeometry& geometry() const { return geom_; }
  FeatureShape input_shape() const { return in_; }
  FeatureShape output_shape() const { return {spec_.out_channels, geom_.out_h, geom_.out_w}; }
  NeuronKind kind() const { return spec_.neuron.kind; }
  std::size_t rank() const { return k_; }
  std::size_t quad_neurons() const { return m_; }
  std::size_t fill_neurons() const { return r_; }
  std::size_t neuron_count() const { return neurons_; }
  bool has_bias() const { return !bias.empty(); }

  // Output channel carrying neuron j's bias.
  std::size_t bias_channel(std::size_t j) const {
    if (kind() == NeuronKind::Quadratic) return j < m_ ? j * (k_ + 1) : m_ * (k_ + 1) + (j - m_);
    return j;
  }

  QuadNeuronParams neuron(std::size_t j) const {
    if (j >= m_) throw DomainError("conv: quadratic neuron index out of range");
    const std::size_t n = geom_.patch();
    QuadNeuronParams p = QuadNeuronParams::zeros(n, k_);
    const std::size_t base = j * (k_ + 1);
    for (std::size_t l = 0; l < n; ++l) {
      p.w[l] = weight(base, l);
      for (std::size_t c = 0; c < k_; ++c) p.qk(l, c) = weight(base + 1 + c, l);
    }
    for (std::size_t c = 0; c < k_; ++c) p.lam[c] = lambda(j, c);
    p.b = has_bias() ? bias[j] : 0.0;
    return p;
  }

  void set_neuron(std::size_t j, const QuadNeuronParams& p) {
    if (j >= m_) throw DomainError("conv: quadratic neuron index out of range");
    const std::size_t n = geom_.patch();
    if (p.n() != n || p.k() != k_ || p.qk.rows() != n || p.qk.cols() != k_) {
      throw ShapeError("conv: neuron parameters do not match layer shape");
    }
    const std::size_t base = j * (k_ + 1);
    for (std::size_t l = 0; l < n; ++l) {
      weight(base, l) = p.w[l];
      for (std::size_t c = 0; c < k_; ++c) weight(base + 1 + c, l) = p.qk(l, c);
    }
    for (std::size_t c = 0; c < k_; ++c) lambda(j, c) = p.lam[c];
    if (has_bias()) bias[j] = p.b;
  }

  Tensor forward(const Tensor& x) {
    detail::require_batch(x, in_, "conv forward");
    const std::size_t batch = x.dim(0);
    const std::size_t n = geom_.patch(), npos = geom_.positions(), out_c = spec_.out_channels;
    cols_.assign(batch * n * npos, 0.0);
    z_.assign(batch * rows_ * npos, 0.0);
    batch_ = batch;
    Tensor y({batch, out_c, geom_.out_h, geom_.out_w});
    for (std::size_t s = 0; s < batch; ++s) {
      double* cols = cols_.data() + s * n * npos;
      double* z = z_.data() + s * rows_ * npos;
      im2col_into(x.data().data() + s * geom_.in_size(), geom_, cols);
      matmul_rows(weight.data().data(), rows_, n, cols, npos, z);
      combine(z, y.data().data() + s * out_c * npos);
    }
    return y;
  }

  /// Accumulates parameter gradients (+=) and returns the input gradient.
  Tensor backward(const Tensor& grad_out) {
    if (grad_out.rank() != 4 || grad_out.dim(0) != batch_ || grad_out.dim(1) != spec_.out_channels ||
        grad_out.dim(2) != geom_.out_h || grad_out.dim(3) != geom_.out_w) {
      throw ShapeError("conv backward: gradient shape " + shape_str(grad_out.shape()) + " does not match output");
    }
    const std::size_t n = geom_.patch(), npos = geom_.positions(), out_c = spec_.out_channels;
    Tensor gx({batch_, in_.c, in_.h, in_.w});
    std::vector<double> gz(rows_ * npos), dcols(n * npos);
    for (std::size_t s = 0; s < batch_; ++s) {
      const double* cols = cols_.data() + s * n * npos;
      const double* z = z_.data() + s * rows_ * npos;
      split_gradient(grad_out.data().data() + s * out_c * npos, z, gz.data());
      double* gw = grad_weight.data().data();
      for (std::size_t r = 0; r < rows_; ++r) {
        const double* gzr = gz.data() + r * npos;
        for (std::size_t l = 0; l < n; ++l) {
          const double* cl = cols + l * npos;
          double acc = 0.0;
          for (std::size_t p = 0; p < npos; ++p) acc += gzr[p] * cl[p];
          gw[r * n + l] += corrupt_backward ? 1.5 * acc : acc;
        }
      }
      std::fill(dcols.begin(), dcols.end(), 0.0);
      for (std::size_t r = 0; r < rows_; ++r) {
        const double* gzr = gz.data() + r * npos;
        const double* wr = &weight(r, 0);
        for (std::size_t l = 0; l < n; ++l) {
          const double wv = wr[l];
          double* dl = dcols.data() + l * npos;
          for (std::size_t p = 0; p < npos; ++p) dl[p] += wv * gzr[p];
        }
      }
      col2im_add(dcols.data(), geom_, gx.data().data() + s * geom_.in_size());
    }
    return gx;
  }

  void zero_grad() {
    grad_weight.fill(0.0);
    if (!grad_lambda.empty()) grad_lambda.fill(0.0);
    if (!grad_bias.empty()) grad_bias.fill(0.0);
  }

  Tensor weight, lambda, bias;
  Tensor grad_weight, grad_lambda, grad_bias;
  bool corrupt_backward = false;  // fault injection for negative-control tests

 private:
  static void matmul_rows(const double* w, std::size_t rows, std::size_t n, const double* cols, std::size_t npos,
                          double* z) {
    for (std::size_t r = 0; r < rows; ++r) {
      double* zr = z + r * npos;
      const double* wr = w + r * n;
      for (std::size_t l = 0; l < n; ++l) {
        const double wv = wr[l];
        const double* cl = cols + l * npos;
        for (std::size_t p = 0; p < npos; ++p) zr[p] += wv * cl[p];
      }
    }
  }

  void combine(const double* z, double* y) const {
    const std::size_t npos = geom_.positions();
    switch (kind()) {
      case NeuronKind::Quadratic: {
        const double kd = static_cast<double>(k_);
        std::copy(z, z + rows_ * npos, y);
        for (std::size_t j = 0; j < m_; ++j) {
          const std::size_t base = j * (k_ + 1);
          const double b = has_bias() ? bias[j] : 0.0;
          for (std::size_t p = 0; p < npos; ++p) {
            double quad = 0.0;
            for (std::size_t c = 0; c < k_; ++c) {
              const double f = z[(base + 1 + c) * npos + p];
              quad += lambda(j, c) * f * f;
            }
            y[base * npos + p] = (z[base * npos + p] + b) + quad / kd;
          }
        }
        if (has_bias()) {
          for (std::size_t t = 0; t < r_; ++t) {
            const std::size_t ch = m_ * (k_ + 1) + t;
            for (std::size_t p = 0; p < npos; ++p) y[ch * npos + p] = z[ch * npos + p] + bias[m_ + t];
          }
        }
        break;
      }
      case NeuronKind::Product:
        for (std::size_t c = 0; c < spec_.out_channels; ++c) {
          const double b = has_bias() ? bias[c] : 0.0;
          const double* z1 = z + (3 * c) * npos;
          const double* z2 = z1 + npos;
          const double* z3 = z2 + npos;
          for (std::size_t p = 0; p < npos; ++p) y[c * npos + p] = z1[p] * z2[p] + z3[p] + b;
        }
        break;
      default:
        for (std::size_t c = 0; c < rows_; ++c) {
          const double b = has_bias() ? bias[c] : 0.0;
          for (std::size_t p = 0; p < npos; ++p) y[c * npos + p] = has_bias() ? z[c * npos + p] + b : z[c * npos + p];
        }
        break;
    }
  }

  // Maps output-channel gradients onto gradients of Z; accumulates lambda and
  // bias gradients on the way.
  void split_gradient(const double* g, const double* z, double* gz) {
    const std::size_t npos = geom_.positions();
    switch (kind()) {
      case NeuronKind::Quadratic: {
        const double inv_k = 1.0 / static_cast<double>(k_);
        std::copy(g, g + rows_ * npos, gz);
        for (std::size_t j = 0; j < m_; ++j) {
          const std::size_t base = j * (k_ + 1);
          const double* gy = g + base * npos;
          for (std::size_t c = 0; c < k_; ++c) {
            const double lam = lambda(j, c);
            const double* f = z + (base + 1 + c) * npos;
            double* gf = gz + (base + 1 + c) * npos;
            double glam = 0.0;
            for (std::size_t p = 0; p < npos; ++p) {
              glam += gy[p] * f[p] * f[p];
              gf[p] += gy[p] * 2.0 * inv_k * lam * f[p];
            }
            grad_lambda(j, c) += glam * inv_k;
          }
        }
        if (has_bias()) {
          for (std::size_t j = 0; j < neurons_; ++j) {
            const double* gc = g + bias_channel(j) * npos;
            double acc = 0.0;
            for (std::size_t p = 0; p < npos; ++p) acc += gc[p];
            grad_bias[j] += acc;
          }
        }
        break;
      }
      case NeuronKind::Product:
        for (std::size_t c = 0; c < spec_.out_channels; ++c) {
          const double* gc = g + c * npos;
          const double* z1 = z + (3 * c) * npos;
          const double* z2 = z1 + npos;
          double* g1 = gz + (3 * c) * npos;
          double* g2 = g1 + npos;
          double* g3 = g2 + npos;
          double acc = 0.0;
          for (std::size_t p = 0; p < npos; ++p) {
            g1[p] = gc[p] * z2[p];
            g2[p] = gc[p] * z1[p];
            g3[p] = gc[p];
            acc += gc[p];
          }
          if (has_bias()) grad_bias[c] += acc;
        }
        break;
      default:
        std::copy(g, g + rows_ * npos, gz);
        if (has_bias()) {
          for (std::size_t c = 0; c < rows_; ++c) {
            double acc = 0.0;
            for (std::size_t p = 0; p < npos; ++p) acc += g[c * npos + p];
            grad_bias[c] += acc;
          }
        }
        break;
    }
  }

  ConvSpec spec_;
  FeatureShape in_;
  ConvGeometry geom_;
  std::size_t k_ = 0, m_ = 0, r_ = 0, rows_ = 0, neurons_ = 0;
  std::size_t batch_ = 0;
  std::vector<double> cols_, z_;
};

/// Per-channel batch normalization over (N, H, W).
class BatchNormLayer {
 public:
  static constexpr double kEps = 1e-5;
  static constexpr double kMomentum = 0.9;

  explicit BatchNormLayer(FeatureShape in)
      : in_(in),
        gamma(Tensor({in.c}, 1.0)),
        beta(Tensor({in.c})),
        running_mean(Tensor({in.c})),
        running_var(Tensor({in.c}, 1.0)),
        grad_gamma(Tensor({in.c})),
        grad_beta(Tensor({in.c})) {}

  Tensor forward(const Tensor& x, bool train) {
    detail::require_batch(x, in_, "batchnorm forward");
    const std::size_t batch = x.dim(0), hw = in_.h * in_.w, c_count = in_.c;
    if (train && batch < 2) throw DomainError("batchnorm: training mode needs a batch of at least 2");
    Tensor y(x.shape());
    xhat_ = Tensor(x.shape());
    inv_std_.assign(c_count, 0.0);
    const double count = static_cast<double>(batch * hw);
    for (std::size_t c = 0; c < c_count; ++c) {
      double mean, var;
      if (train) {
        double s = 0.0;
        for (std::size_t n = 0; n < batch; ++n)
          for (std::size_t p = 0; p < hw; ++p) s += x[(n * c_count + c) * hw + p];
        mean = s / count;
        double v = 0.0;
        for (std::size_t n = 0; n < batch; ++n)
          for (std::size_t p = 0; p < hw; ++p) {
            const double d = x[(n * c_count + c) * hw + p] - mean;
            v += d * d;
          }
        var = v / count;
        running_mean[c] = kMomentum * running_mean[c] + (1.0 - kMomentum) * mean;
        const double unbiased = count > 1.0 ? v / (count - 1.0) : var;
        running_var[c] = kMomentum * running_var[c] + (1.0 - kMomentum) * unbiased;
      } else {
        mean = running_mean[c];
        var = running_var[c];
      }
      const double inv_std = 1.0 / std::sqrt(var + kEps);
      inv_std_[c] = inv_std;
      for (std::size_t n = 0; n < batch; ++n)
        for (std::size_t p = 0; p < hw; ++p) {
          const std::size_t idx = (n * c_count + c) * hw + p;
          const double xh = (x[idx] - mean) * inv_std;
          xhat_[idx] = xh;
          y[idx] = gamma[c] * xh + beta[c];
        }
    }
    return y;
  }

  // Training-mode gradient (batch statistics depend on the input).
  Tensor backward(const Tensor& g) {
    if (g.shape() != xhat_.shape()) throw ShapeError("batchnorm backward: gradient shape mismatch");
    const std::size_t batch = g.dim(0), hw = in_.h * in_.w, c_count = in_.c;
    const double count = static_cast<double>(batch * hw);
    Tensor gx(g.shape());
    for (std::size_t c = 0; c < c_count; ++c) {
      double sum_g = 0.0, sum_gx = 0.0;
      for (std::size_t n = 0; n < batch; ++n)
        for (std::size_t p = 0; p < hw; ++p) {
          const std::size_t idx = (n * c_count + c) * hw + p;
          sum_g += g[idx];
          sum_gx += g[idx] * xhat_[idx];
        }
      grad_beta[c] += sum_g;
      grad_gamma[c] += sum_gx;
      const double scale = gamma[c] * inv_std_[c] / count;
      for (std::size_t n = 0; n < batch; ++n)
        for (std::size_t p = 0; p < hw; ++p) {
          const std::size_t idx = (n * c_count + c) * hw + p;
          gx[idx] = scale * (count * g[idx] - sum_g - xhat_[idx] * sum_gx);
        }
    }
    return gx;
  }

  void zero_grad() {
    grad_gamma.fill(0.0);
    grad_beta.fill(0.0);
  }

  FeatureShape shape() const { return in_; }

 private:
  FeatureShape in_;

 public:
  Tensor gamma, beta, running_mean, running_var;
  Tensor grad_gamma, grad_beta;

 private:
  Tensor xhat_;
  std::vector<double> inv_std_;
};

class ReluLayer {
 public:
  Tensor forward(const Tensor& x) {
    input_ = x;
    Tensor y = x;
    for (double& v : y.data()) v = v > 0.0 ? v : 0.0;
    return y;
  }
  Tensor backward(const Tensor& g) const {
    if (g.shape() != input_.shape()) throw ShapeError("relu backward: gradient shape mismatch");
    Tensor gx = g;
    for (std::size_t i = 0; i < gx.size(); ++i)
      if (!(input_[i] > 0.0)) gx[i] = 0.0;
    return gx;
  }

 private:
  Tensor input_;
};

class MaxPoolLayer {
 public:
  MaxPoolLayer(const MaxPoolSpec& spec, FeatureShape in) : spec_(spec), in_(in) {
    out_ = {in.c, conv_out_extent(in.h, spec.kernel, spec.stride, spec.pad),
            conv_out_extent(in.w, spec.kernel, spec.stride, spec.pad)};
  }

  Tensor forward(const Tensor& x) {
    detail::require_batch(x, in_, "maxpool forward");
    const std::size_t batch = x.dim(0);
    Tensor y({batch, out_.c, out_.h, out_.w});
    argmax_.assign(y.size(), 0);
    for (std::size_t n = 0; n < batch; ++n)
      for (std::size_t c = 0; c < in_.c; ++c)
        for (std::size_t oh = 0; oh < out_.h; ++oh)
          for (std::size_t ow = 0; ow < out_.w; ++ow) {
            double best = -std::numeric_limits<double>::infinity();
            std::size_t best_idx = 0;
            bool found = false;
            for (std::size_t i = 0; i < spec_.kernel; ++i)
              for (std::size_t j = 0; j < spec_.kernel; ++j) {
                const std::ptrdiff_t ih = static_cast<std::ptrdiff_t>(oh * spec_.stride + i) -
                                          static_cast<std::ptrdiff_t>(spec_.pad);
                const std::ptrdiff_t iw = static_cast<std::ptrdiff_t>(ow * spec_.stride + j) -
                                          static_cast<std::ptrdiff_t>(spec_.pad);
                if (ih < 0 || iw < 0 || ih >= static_cast<std::ptrdiff_t>(in_.h) ||
                    iw >= static_cast<std::ptrdiff_t>(in_.w))
                  continue;
                const std::size_t idx = ((n * in_.c + c) * in_.h + static_cast<std::size_t>(ih)) * in_.w +
                                        static_cast<std::size_t>(iw);
                if (!found || x[idx] > best) {
                  best = x[idx];
                  best_idx = idx;
                  found = true;
                }
              }
            const std::size_t o = ((n * out_.c + c) * out_.h + oh) * out_.w + ow;
            y[o] = found ? best : 0.0;
            argmax_[o] = best_idx;
          }
    batch_ = batch;
    return y;
  }

  Tensor backward(const Tensor& g) const {
    Tensor gx({batch_, in_.c, in_.h, in_.w});
    for (std::size_t o = 0; o < g.size(); ++o) gx[argmax_[o]] += g[o];
    return gx;
  }

 private:
  MaxPoolSpec spec_;
  FeatureShape in_, out_;
  std::vector<std::size_t> argmax_;
  std::size_t batch_ = 0;
};

class GapLayer {
 public:
  explicit GapLayer(FeatureShape in) : in_(in) {}

  Tensor forward(const Tensor& x) {
    detail::require_batch(x, in_, "gap forward");
    batch_ = x.dim(0);
    const std::size_t hw = in_.h * in_.w;
    Tensor y({batch_, in_.c, 1, 1});
    for (std::size_t i = 0; i < batch_ * in_.c; ++i) {
      double s = 0.0;
      for (std::size_t p = 0; p < hw; ++p) s += x[i * hw + p];
      y[i] = s / static_cast<double>(hw);
    }
    return y;
  }

  Tensor backward(const Tensor& g) const {
    const std::size_t hw = in_.h * in_.w;
    Tensor gx({batch_, in_.c, in_.h, in_.w});
    for (std::size_t i = 0; i < batch_ * in_.c; ++i)
      for (std::size_t p = 0; p < hw; ++p) gx[i * hw + p] = g[i] / static_cast<double>(hw);
    return gx;
  }

 private:
  FeatureShape in_;
  std::size_t batch_ = 0;
};

/// Fully connected layer over the flattened C*H*W features.
class DenseLayer {
 public:
  DenseLayer(const DenseSpec& spec, FeatureShape in)
      : in_(in),
        weight(Tensor({spec.out, in.size()})),
        bias(Tensor({spec.out})),
        grad_weight(Tensor({spec.out, in.size()})),
        grad_bias(Tensor({spec.out})) {}

  Tensor forward(const Tensor& x) {
    detail::require_batch(x, in_, "dense forward");
    input_ = x;
    const std::size_t batch = x.dim(0), f = in_.size(), out = weight.rows();
    Tensor y({batch, out, 1, 1});
    for (std::size_t n = 0; n < batch; ++n)
      for (std::size_t o = 0; o < out; ++o) {
        double s = 0.0;
        for (std::size_t i = 0; i < f; ++i) s += weight(o, i) * x[n * f + i];
        y[n * out + o] = s + bias[o];
      }
    return y;
  }

  Tensor backward(const Tensor& g) {
    const std::size_t batch = input_.dim(0), f = in_.size(), out = weight.rows();
    if (g.size() != batch * out) throw ShapeError("dense backward: gradient shape mismatch");
    Tensor gx(input_.shape());
    for (std::size_t n = 0; n < batch; ++n)
      for (std::size_t o = 0; o < out; ++o) {
        const double go = g[n * out + o];
        grad_bias[o] += go;
        for (std::size_t i = 0; i < f; ++i) {
          grad_weight(o, i) += go * input_[n * f + i];
          gx[n * f + i] += go * weight(o, i);
        }
      }
    return gx;
  }

  void zero_grad() {
    grad_weight.fill(0.0);
    grad_bias.fill(0.0);
  }

 private:
  FeatureShape in_;
  Tensor input_;

 public:
  Tensor weight, bias, grad_weight, grad_bias;
};

/// Elementwise sum of the main path and a shortcut from an earlier entry.
class ResidualLayer {
 public:
  ResidualLayer(const ResidualSpec& spec, FeatureShape main, FeatureShape src, const std::optional<ConvSpec>& proj)
      : spec_(spec), main_(main), src_(src) {
    if (spec.shortcut == Shortcut::Projection) {
      if (!proj) throw BuildError("residual: projection shortcut without a resolved conv");
      projection.emplace(*proj, src);
      projection_bn.emplace(main);
    }
  }

  const ResidualSpec& spec() const { return spec_; }

  Tensor forward(const Tensor& x, const Tensor& source, bool train) {
    detail::require_batch(x, main_, "residual forward");
    detail::require_batch(source, src_, "residual source");
    Tensor y = x;
    switch (spec_.shortcut) {
      case Shortcut::Identity:
        for (std::size_t i = 0; i < y.size(); ++i) y[i] += source[i];
        break;
      case Shortcut::Pad: {
        const std::size_t stride = src_.h / main_.h, before = (main_.c - src_.c) / 2;
        for (std::size_t n = 0; n < x.dim(0); ++n)
          for (std::size_t c = 0; c < src_.c; ++c)
            for (std::size_t h = 0; h < main_.h; ++h)
              for (std::size_t w = 0; w < main_.w; ++w) y(n, c + before, h, w) += source(n, c, h * stride, w * stride);
        break;
      }
      case Shortcut::Projection: {
        const Tensor s = projection_bn->forward(projection->forward(source), train);
        for (std::size_t i = 0; i < y.size(); ++i) y[i] += s[i];
        break;
      }
    }
    return y;
  }

  /// Gradient for the shortcut source; the main path receives g unchanged.
  Tensor backward_source(const Tensor& g) {
    const std::size_t batch = g.dim(0);
    switch (spec_.shortcut) {
      case Shortcut::Identity:
        return g;
      case Shortcut::Pad: {
        Tensor gs({batch, src_.c, src_.h, src_.w});
        const std::size_t stride = src_.h / main_.h, before = (main_.c - src_.c) / 2;
        for (std::size_t n = 0; n < batch; ++n)
          for (std::size_t c = 0; c < src_.c; ++c)
            for (std::size_t h = 0; h < main_.h; ++h)
              for (std::size_t w = 0; w < main_.w; ++w) gs(n, c, h * stride, w * stride) = g(n, c + before, h, w);
        return gs;
      }
      case Shortcut::Projection:
        return projection->backward(projection_bn->backward(g));
    }
    return g;
  }

  void zero_grad() {
    if (projection) {
      projection->zero_grad();
      projection_bn->zero_grad();
    }
  }

  std::optional<ConvLayer> projection;
  std::optional<BatchNormLayer> projection_bn;

 private:
  ResidualSpec spec_;
  FeatureShape main_, src_;
};

class BinaryLogitLayer {
 public:
  explicit BinaryLogitLayer(FeatureShape in) : in_(in) {}

  Tensor forward(const Tensor& x) {
    detail::require_batch(x, in_, "binary_logit forward");
    batch_ = x.dim(0);
    Tensor y({batch_, 2, 1, 1});
    for (std::size_t n = 0; n < batch_; ++n) y[n * 2 + 1] = x[n * in_.size()];
    return y;
  }

  Tensor backward(const Tensor& g) const {
    Tensor gx({batch_, in_.c, in_.h, in_.w});
    for (std::size_t n = 0; n < batch_; ++n) gx[n * in_.size()] = g[n * 2 + 1];
    return gx;
  }

 private:
  FeatureShape in_;
  std::size_t batch_ = 0;
};

}  // namespace qnn
