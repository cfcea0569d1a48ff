#pragma once

#include <map>
#include <string>
#include <variant>
#include <vector>

#include "qnn/arch.hpp"
#include "qnn/layers.hpp"

namespace qnn {

enum class ParamKind { Main, Lambda };

struct ParamRef {
  std::string name;
  Tensor* value = nullptr;
  Tensor* grad = nullptr;
  ParamKind kind = ParamKind::Main;
};

using Layer =
    std::variant<ConvLayer, BatchNormLayer, ReluLayer, MaxPoolLayer, GapLayer, DenseLayer, ResidualLayer, BinaryLogitLayer>;

class Network {
 public:
  /// Instantiates layers for a descriptor with all parameters zero (except
  /// batchnorm gamma = 1). Use build() in init.hpp for an initialized net.
  explicit Network(const ArchDescriptor& arch, NeuronSpec fallback = NeuronSpec::linear())
      : resolved_(resolve(arch, fallback)) {
    for (const ResolvedLayer& rl : resolved_.layers) {
      layers_.push_back(std::visit(
          [&](const auto& s) -> Layer {
            using T = std::decay_t<decltype(s)>;
            if constexpr (std::is_same_v<T, ConvSpec>) return ConvLayer(s, rl.in);
            else if constexpr (std::is_same_v<T, BatchNormSpec>) return BatchNormLayer(rl.in);
            else if constexpr (std::is_same_v<T, ReluSpec>) return ReluLayer{};
            else if constexpr (std::is_same_v<T, MaxPoolSpec>) return MaxPoolLayer(s, rl.in);
            else if constexpr (std::is_same_v<T, GapSpec>) return GapLayer(rl.in);
            else if constexpr (std::is_same_v<T, DenseSpec>) return DenseLayer(s, rl.in);
            else if constexpr (std::is_same_v<T, ResidualSpec>) return ResidualLayer(s, rl.in, rl.shortcut_in, rl.projection);
            else return BinaryLogitLayer(rl.in);
          },
          rl.entry.spec));
    }
  }

  const ResolvedArch& resolved() const { return resolved_; }
  const ArchDescriptor& arch() const { return resolved_.arch; }
  FeatureShape input_shape() const { return resolved_.arch.input; }
  FeatureShape output_shape() const { return resolved_.output; }
  std::size_t size() const { return layers_.size(); }
  Layer& layer(std::size_t i) { return layers_.at(i); }
  const Layer& layer(std::size_t i) const { return layers_.at(i); }

  Tensor forward(const Tensor& x, bool train) { return run(x, train, layers_.size()); }

  /// Input of layer `stop` under an eval-mode pass.
  Tensor forward_until(const Tensor& x, std::size_t stop) { return run(x, false, stop); }

  /// Back-propagates the gradient of the loss w.r.t. the network output.
  /// Parameter gradients accumulate; call zero_grad() between steps.
  Tensor backward(const Tensor& grad_out) {
    std::map<std::string, Tensor> pending;
    Tensor g = grad_out;
    for (std::size_t i = layers_.size(); i-- > 0;) {
      const std::string& name = resolved_.layers[i].entry.name;
      if (!name.empty()) {
        if (auto it = pending.find(name); it != pending.end()) {
          accumulate(g, it->second);
          pending.erase(it);
        }
      }
      g = std::visit(
          [&](auto& l) -> Tensor {
            using T = std::decay_t<decltype(l)>;
            if constexpr (std::is_same_v<T, ResidualLayer>) {
              Tensor gs = l.backward_source(g);
              auto [it, inserted] = pending.try_emplace(l.spec().from, gs);
              if (!inserted) accumulate(it->second, gs);
              return g;
            } else {
              return l.backward(g);
            }
          },
          layers_[i]);
    }
    if (auto it = pending.find("input"); it != pending.end()) accumulate(g, it->second);
    return g;
  }

  void zero_grad() {
    for (Layer& l : layers_) {
      std::visit(
          [](auto& layer) {
            if constexpr (requires { layer.zero_grad(); }) layer.zero_grad();
          },
          l);
    }
  }

  /// Trainable tensors in layer order.
  std::vector<ParamRef> params() {
    std::vector<ParamRef> out;
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      const std::string prefix = "layer" + std::to_string(i);
      std::visit(
          [&](auto& l) {
            using T = std::decay_t<decltype(l)>;
            if constexpr (std::is_same_v<T, ConvLayer>) {
              conv_params(l, prefix + ".conv", out);
            } else if constexpr (std::is_same_v<T, BatchNormLayer>) {
              bn_params(l, prefix + ".bn", out);
            } else if constexpr (std::is_same_v<T, DenseLayer>) {
              out.push_back({prefix + ".dense.weight", &l.weight, &l.grad_weight, ParamKind::Main});
              out.push_back({prefix + ".dense.bias", &l.bias, &l.grad_bias, ParamKind::Main});
            } else if constexpr (std::is_same_v<T, ResidualLayer>) {
              if (l.projection) {
                conv_params(*l.projection, prefix + ".proj", out);
                bn_params(*l.projection_bn, prefix + ".proj_bn", out);
              }
            }
          },
          layers_[i]);
    }
    return out;
  }

  /// Every tensor persisted in a checkpoint: trainable parameters plus
  /// batchnorm running statistics, in layer order.
  std::vector<std::pair<std::string, Tensor*>> state() {
    std::vector<std::pair<std::string, Tensor*>> out;
    const auto bn_state = [&](BatchNormLayer& bn, const std::string& p) {
      out.emplace_back(p + ".gamma", &bn.gamma);
      out.emplace_back(p + ".beta", &bn.beta);
      out.emplace_back(p + ".running_mean", &bn.running_mean);
      out.emplace_back(p + ".running_var", &bn.running_var);
    };
    const auto conv_state = [&](ConvLayer& c, const std::string& p) {
      out.emplace_back(p + ".weight", &c.weight);
      if (!c.lambda.empty()) out.emplace_back(p + ".lambda", &c.lambda);
      if (!c.bias.empty()) out.emplace_back(p + ".bias", &c.bias);
    };
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      const std::string prefix = "layer" + std::to_string(i);
      std::visit(
          [&](auto& l) {
            using T = std::decay_t<decltype(l)>;
            if constexpr (std::is_same_v<T, ConvLayer>) {
              conv_state(l, prefix + ".conv");
            } else if constexpr (std::is_same_v<T, BatchNormLayer>) {
              bn_state(l, prefix + ".bn");
            } else if constexpr (std::is_same_v<T, DenseLayer>) {
              out.emplace_back(prefix + ".dense.weight", &l.weight);
              out.emplace_back(prefix + ".dense.bias", &l.bias);
            } else if constexpr (std::is_same_v<T, ResidualLayer>) {
              if (l.projection) {
                conv_state(*l.projection, prefix + ".proj");
                bn_state(*l.projection_bn, prefix + ".proj_bn");
              }
            }
          },
          layers_[i]);
    }
    return out;
  }

  std::size_t parameter_count() {
    std::size_t n = 0;
    for (const ParamRef& p : params()) n += p.value->size();
    return n;
  }

  /// Indices of the top-level conv entries, in order.
  std::vector<std::size_t> conv_indices() const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < layers_.size(); ++i)
      if (std::holds_alternative<ConvLayer>(layers_[i])) out.push_back(i);
    return out;
  }

  ConvLayer& conv(std::size_t layer_index) { return std::get<ConvLayer>(layers_.at(layer_index)); }

  /// Every conv layer including residual projections.
  std::vector<ConvLayer*> all_convs() {
    std::vector<ConvLayer*> out;
    for (Layer& l : layers_) {
      if (auto* c = std::get_if<ConvLayer>(&l)) out.push_back(c);
      if (auto* r = std::get_if<ResidualLayer>(&l); r && r->projection) out.push_back(&*r->projection);
    }
    return out;
  }

 private:
  static void accumulate(Tensor& into, const Tensor& g) {
    if (into.shape() != g.shape()) throw ShapeError("backward: residual gradient shape mismatch");
    for (std::size_t i = 0; i < into.size(); ++i) into[i] += g[i];
  }

  static void conv_params(ConvLayer& c, const std::string& p, std::vector<ParamRef>& out) {
    out.push_back({p + ".weight", &c.weight, &c.grad_weight, ParamKind::Main});
    if (!c.lambda.empty()) out.push_back({p + ".lambda", &c.lambda, &c.grad_lambda, ParamKind::Lambda});
    if (!c.bias.empty()) out.push_back({p + ".bias", &c.bias, &c.grad_bias, ParamKind::Main});
  }

  static void bn_params(BatchNormLayer& bn, const std::string& p, std::vector<ParamRef>& out) {
    out.push_back({p + ".gamma", &bn.gamma, &bn.grad_gamma, ParamKind::Main});
    out.push_back({p + ".beta", &bn.beta, &bn.grad_beta, ParamKind::Main});
  }

  Tensor run(const Tensor& x, bool train, std::size_t stop) {
    detail::require_batch(x, resolved_.arch.input, "network forward");
    std::map<std::string, Tensor> named{{"input", x}};
    Tensor cur = x;
    for (std::size_t i = 0; i < stop && i < layers_.size(); ++i) {
      cur = std::visit(
          [&](auto& l) -> Tensor {
            using T = std::decay_t<decltype(l)>;
            if constexpr (std::is_same_v<T, BatchNormLayer>) return l.forward(cur, train);
            else if constexpr (std::is_same_v<T, ResidualLayer>) return l.forward(cur, named.at(l.spec().from), train);
            else return l.forward(cur);
          },
          layers_[i]);
      const std::string& name = resolved_.layers[i].entry.name;
      if (!name.empty()) named[name] = cur;
    }
    return cur;
  }

  ResolvedArch resolved_;
  std::vector<Layer> layers_;
};

/// Width-matched linear network with identical outputs whenever every
/// quadratic lambda is zero: each weight row becomes a linear filter and
/// neuron biases move to their y channels.
inline Network to_linear(Network& net) {
  ArchDescriptor arch = net.arch();
  for (LayerEntry& e : arch.layers) {
    if (auto* c = std::get_if<ConvSpec>(&e.spec)) {
      if (c->neuron.kind == NeuronKind::Product) throw DomainError("to_linear: product neurons have no linear twin");
      c->neuron = NeuronSpec::linear();
    } else if (auto* r = std::get_if<ResidualSpec>(&e.spec); r && r->shortcut == Shortcut::Projection) {
      r->projection_neuron = NeuronSpec::linear();
    }
  }
  Network lin(arch);
  const auto copy_conv = [](const ConvLayer& from, ConvLayer& to) {
    to.weight = from.weight;
    if (from.has_bias()) {
      to.bias.fill(0.0);
      for (std::size_t j = 0; j < from.neuron_count(); ++j) to.bias[from.bias_channel(j)] = from.bias[j];
    }
  };
  for (std::size_t i = 0; i < net.size(); ++i) {
    std::visit(
        [&](auto& src) {
          using T = std::decay_t<decltype(src)>;
          auto& dst = std::get<T>(lin.layer(i));
          if constexpr (std::is_same_v<T, ConvLayer>) {
            copy_conv(src, dst);
          } else if constexpr (std::is_same_v<T, BatchNormLayer>) {
            dst.gamma = src.gamma;
            dst.beta = src.beta;
            dst.running_mean = src.running_mean;
            dst.running_var = src.running_var;
          } else if constexpr (std::is_same_v<T, DenseLayer>) {
            dst.weight = src.weight;
            dst.bias = src.bias;
          } else if constexpr (std::is_same_v<T, ResidualLayer>) {
            if (src.projection) {
              copy_conv(*src.projection, *dst.projection);
              dst.projection_bn->gamma = src.projection_bn->gamma;
              dst.projection_bn->beta = src.projection_bn->beta;
              dst.projection_bn->running_mean = src.projection_bn->running_mean;
              dst.projection_bn->running_var = src.projection_bn->running_var;
            }
          }
        },
        net.layer(i));
  }
  return lin;
}

}  // namespace qnn
