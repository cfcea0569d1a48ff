#pragma once

#include <cmath>

#include "qnn/network.hpp"
#include "qnn/rng.hpp"

namespace qnn {

namespace detail {

inline void he_fill(Tensor& t, std::size_t fan_in, Rng& rng) {
  const double std = std::sqrt(2.0 / static_cast<double>(fan_in));
  for (double& v : t.data()) v = rng.normal(0.0, std);
}

inline void init_conv(ConvLayer& c, Rng& rng) {
  // Rows are w, the columns of Q, fills, or product factors; all He-normal.
  he_fill(c.weight, c.geometry().patch(), rng);
  if (!c.lambda.empty()) c.lambda.fill(0.0);
  if (!c.bias.empty()) c.bias.fill(0.0);
}

inline void init_bn(BatchNormLayer& bn) {
  bn.gamma.fill(1.0);
  bn.beta.fill(0.0);
  bn.running_mean.fill(0.0);
  bn.running_var.fill(1.0);
}

}  // namespace detail

/// He-normal (std sqrt(2/fan_in)) weights for every filter row and dense
/// layer, zero lambda and biases, batchnorm gamma = 1 and beta = 0.
/// Draws happen in layer order, so a seed fixes the whole network.
inline void init_params(Network& net, Rng& rng) {
  for (std::size_t i = 0; i < net.size(); ++i) {
    std::visit(
        [&](auto& l) {
          using T = std::decay_t<decltype(l)>;
          if constexpr (std::is_same_v<T, ConvLayer>) {
            detail::init_conv(l, rng);
          } else if constexpr (std::is_same_v<T, BatchNormLayer>) {
            detail::init_bn(l);
          } else if constexpr (std::is_same_v<T, DenseLayer>) {
            detail::he_fill(l.weight, l.weight.cols(), rng);
            l.bias.fill(0.0);
          } else if constexpr (std::is_same_v<T, ResidualLayer>) {
            if (l.projection) {
              detail::init_conv(*l.projection, rng);
              detail::init_bn(*l.projection_bn);
            }
          }
        },
        net.layer(i));
  }
}

/// Builds a network with every default conv entry using `neuron`, then
/// initializes it.
inline Network build(const ArchDescriptor& arch, NeuronSpec neuron, Rng& rng) {
  Network net(arch, neuron);
  init_params(net, rng);
  return net;
}

inline Network build(const ArchDescriptor& arch, std::size_t k, Rng& rng) {
  return build(arch, NeuronSpec::quadratic(k), rng);
}

}  // namespace qnn
