#pragma once

#include <array>
#include <cstddef>
#include <map>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "json.hpp"
#include "qnn/error.hpp"

namespace qnn {

enum class NeuronKind { Default, Linear, Quadratic, Product };

struct NeuronSpec {
  NeuronKind kind = NeuronKind::Default;
  std::size_t k = 0;  // rank, quadratic only; 0 means "take the build rank"

  static NeuronSpec linear() { return {NeuronKind::Linear, 0}; }
  static NeuronSpec quadratic(std::size_t k) { return {NeuronKind::Quadratic, k}; }
  static NeuronSpec product() { return {NeuronKind::Product, 0}; }
  friend bool operator==(const NeuronSpec&, const NeuronSpec&) = default;
};

enum class BiasMode { Auto, On, Off };

struct ConvSpec {
  std::size_t in_channels = 0;
  std::size_t out_channels = 0;
  std::size_t kernel_h = 1;
  std::size_t kernel_w = 1;
  std::size_t stride = 1;
  std::size_t pad = 0;
  NeuronSpec neuron;
  BiasMode bias = BiasMode::Auto;

  std::size_t fan_in() const { return in_channels * kernel_h * kernel_w; }
};

struct BatchNormSpec {};
struct ReluSpec {};
struct MaxPoolSpec {
  std::size_t kernel = 2;
  std::size_t stride = 2;
  std::size_t pad = 0;
};
struct GapSpec {};
struct DenseSpec {
  std::size_t out = 0;
};

enum class Shortcut { Identity, Pad, Projection };

/// Adds the output of an earlier named entry ("input" names the network
/// input) to the current activation. Pad subsamples and zero-pads channels;
/// Projection applies a 1x1 convolution followed by batch normalization.
struct ResidualSpec {
  std::string from;
  Shortcut shortcut = Shortcut::Identity;
  NeuronSpec projection_neuron;  // projection only
};

// Maps channel 0 to the two-class logits [0, x]; softmax over them is the
// logistic sigmoid of x.
struct BinaryLogitSpec {};

using LayerSpec =
    std::variant<ConvSpec, BatchNormSpec, ReluSpec, MaxPoolSpec, GapSpec, DenseSpec, ResidualSpec, BinaryLogitSpec>;

struct LayerEntry {
  LayerSpec spec;
  std::string name;
};

struct FeatureShape {
  std::size_t c = 0, h = 0, w = 0;
  std::size_t size() const { return c * h * w; }
  friend bool operator==(const FeatureShape&, const FeatureShape&) = default;
};

struct ArchDescriptor {
  FeatureShape input;
  std::vector<LayerEntry> layers;

  template <typename Spec>
  ArchDescriptor& add(Spec spec, std::string name = {}) {
    layers.push_back(LayerEntry{std::move(spec), std::move(name)});
    return *this;
  }
};

// One entry after shape inference. Conv specs (including residual
// projections) have their neuron kind and bias mode fixed.
struct ResolvedLayer {
  LayerEntry entry;
  FeatureShape in;
  FeatureShape out;
  std::optional<ConvSpec> projection;
  FeatureShape shortcut_in;
};

struct ResolvedArch {
  ArchDescriptor arch;  // with every neuron spec and bias mode made explicit
  std::vector<ResolvedLayer> layers;
  FeatureShape output;
};

inline std::size_t conv_out_extent(std::size_t in, std::size_t kernel, std::size_t stride, std::size_t pad) {
  if (stride == 0) throw BuildError("stride must be positive");
  if (in + 2 * pad < kernel) throw BuildError("kernel larger than padded input");
  return (in + 2 * pad - kernel) / stride + 1;
}

inline NeuronSpec resolve_neuron(NeuronSpec n, NeuronSpec fallback) {
  if (n.kind == NeuronKind::Default) n = fallback;
  if (n.kind == NeuronKind::Default) n = NeuronSpec::linear();
  if (n.kind == NeuronKind::Quadratic && n.k == 0) n.k = fallback.k;
  if (n.kind == NeuronKind::Quadratic && n.k == 0) throw BuildError("quadratic neuron needs a rank k >= 1");
  if (n.kind != NeuronKind::Quadratic) n.k = 0;
  return n;
}

/// Shape-checks a descriptor end to end and fixes every default.
inline ResolvedArch resolve(const ArchDescriptor& arch, NeuronSpec fallback = NeuronSpec::linear()) {
  if (arch.input.size() == 0) throw BuildError("input shape must be positive");
  ResolvedArch out;
  out.arch = arch;
  std::map<std::string, FeatureShape> named{{"input", arch.input}};
  FeatureShape cur = arch.input;
  const auto where = [](std::size_t i) { return "layer " + std::to_string(i) + ": "; };

  for (std::size_t i = 0; i < arch.layers.size(); ++i) {
    LayerEntry& entry = out.arch.layers[i];
    ResolvedLayer rl{entry, cur, cur, std::nullopt, {}};

    if (auto* conv = std::get_if<ConvSpec>(&entry.spec)) {
      if (conv->in_channels != cur.c) {
        throw BuildError(where(i) + "conv expects " + std::to_string(conv->in_channels) + " input channels, got " +
                         std::to_string(cur.c));
      }
      if (conv->out_channels == 0 || conv->kernel_h == 0 || conv->kernel_w == 0) {
        throw BuildError(where(i) + "conv extents must be positive");
      }
      conv->neuron = resolve_neuron(conv->neuron, fallback);
      if (conv->bias == BiasMode::Auto) {
        const bool bn_next =
            i + 1 < arch.layers.size() && std::holds_alternative<BatchNormSpec>(arch.layers[i + 1].spec);
        conv->bias = bn_next ? BiasMode::Off : BiasMode::On;
      }
      try {
        rl.out = {conv->out_channels, conv_out_extent(cur.h, conv->kernel_h, conv->stride, conv->pad),
                  conv_out_extent(cur.w, conv->kernel_w, conv->stride, conv->pad)};
      } catch (const BuildError& e) {
        throw BuildError(where(i) + e.what());
      }
    } else if (auto* pool = std::get_if<MaxPoolSpec>(&entry.spec)) {
      if (pool->kernel == 0) throw BuildError(where(i) + "pool kernel must be positive");
      rl.out = {cur.c, conv_out_extent(cur.h, pool->kernel, pool->stride, pool->pad),
                conv_out_extent(cur.w, pool->kernel, pool->stride, pool->pad)};
    } else if (std::holds_alternative<GapSpec>(entry.spec)) {
      rl.out = {cur.c, 1, 1};
    } else if (auto* dense = std::get_if<DenseSpec>(&entry.spec)) {
      if (dense->out == 0) throw BuildError(where(i) + "dense output must be positive");
      rl.out = {dense->out, 1, 1};
    } else if (auto* res = std::get_if<ResidualSpec>(&entry.spec)) {
      auto it = named.find(res->from);
      if (it == named.end()) throw BuildError(where(i) + "residual source '" + res->from + "' is not defined earlier");
      const FeatureShape src = it->second;
      rl.shortcut_in = src;
      switch (res->shortcut) {
        case Shortcut::Identity:
          if (!(src == cur)) throw BuildError(where(i) + "identity residual with mismatched shapes");
          break;
        case Shortcut::Pad:
          if (src.c > cur.c || cur.h == 0 || src.h % cur.h != 0 || src.w % cur.w != 0 ||
              src.h / cur.h != src.w / cur.w) {
            throw BuildError(where(i) + "pad residual cannot map source shape onto the main path");
          }
          break;
        case Shortcut::Projection: {
          if (src.h % cur.h != 0 || src.w % cur.w != 0 || src.h / cur.h != src.w / cur.w) {
            throw BuildError(where(i) + "projection residual stride is not integral");
          }
          ConvSpec proj;
          proj.in_channels = src.c;
          proj.out_channels = cur.c;
          proj.stride = src.h / cur.h;
          proj.neuron = resolve_neuron(res->projection_neuron, fallback);
          proj.bias = BiasMode::Off;
          res->projection_neuron = proj.neuron;
          rl.projection = proj;
          break;
        }
      }
    } else if (std::holds_alternative<BinaryLogitSpec>(entry.spec)) {
      rl.out = {2, 1, 1};
    }

    rl.entry = entry;
    if (!entry.name.empty()) {
      if (named.count(entry.name)) throw BuildError(where(i) + "duplicate entry name '" + entry.name + "'");
      named[entry.name] = rl.out;
    }
    cur = rl.out;
    out.layers.push_back(std::move(rl));
  }
  out.output = cur;
  return out;
}

// ---------------------------------------------------------------------------
// Presets
// ---------------------------------------------------------------------------

inline ConvSpec conv3x3(std::size_t in, std::size_t out, std::size_t stride = 1) {
  ConvSpec c;
  c.in_channels = in;
  c.out_channels = out;
  c.kernel_h = c.kernel_w = 3;
  c.stride = stride;
  c.pad = 1;
  return c;
}

/// CIFAR ResNet of depth 6n+2 with parameter-free (padding) shortcuts.
inline ArchDescriptor resnet_cifar(std::size_t depth, std::size_t classes = 10) {
  if (depth < 8 || (depth - 2) % 6 != 0) throw BuildError("CIFAR ResNet depth must be 6n+2");
  const std::size_t blocks = (depth - 2) / 6;
  ArchDescriptor a;
  a.input = {3, 32, 32};
  a.add(conv3x3(3, 16)).add(BatchNormSpec{}).add(ReluSpec{}, "stem");
  std::string prev = "stem";
  std::size_t in = 16;
  const std::array<std::size_t, 3> widths{16, 32, 64};
  for (std::size_t s = 0; s < widths.size(); ++s) {
    for (std::size_t b = 0; b < blocks; ++b) {
      const std::size_t stride = (s > 0 && b == 0) ? 2 : 1;
      const std::size_t w = widths[s];
      a.add(conv3x3(in, w, stride)).add(BatchNormSpec{}).add(ReluSpec{});
      a.add(conv3x3(w, w)).add(BatchNormSpec{});
      a.add(ResidualSpec{prev, (in == w && stride == 1) ? Shortcut::Identity : Shortcut::Pad, {}});
      std::string name = "s" + std::to_string(s + 1) + "b" + std::to_string(b + 1);
      a.add(ReluSpec{}, name);
      prev = std::move(name);
      in = w;
    }
  }
  a.add(GapSpec{}).add(DenseSpec{classes});
  return a;
}

/// ImageNet ResNet-18/34 (basic blocks, 1x1 projection shortcuts).
inline ArchDescriptor resnet_imagenet(std::size_t depth, std::size_t classes = 1000) {
  std::array<std::size_t, 4> blocks{};
  if (depth == 18) {
    blocks = {2, 2, 2, 2};
  } else if (depth == 34) {
    blocks = {3, 4, 6, 3};
  } else {
    throw BuildError("ImageNet ResNet preset supports depth 18 or 34");
  }
  ArchDescriptor a;
  a.input = {3, 224, 224};
  ConvSpec stem;
  stem.in_channels = 3;
  stem.out_channels = 64;
  stem.kernel_h = stem.kernel_w = 7;
  stem.stride = 2;
  stem.pad = 3;
  a.add(stem).add(BatchNormSpec{}).add(ReluSpec{}).add(MaxPoolSpec{3, 2, 1}, "stem");
  std::string prev = "stem";
  std::size_t in = 64;
  const std::array<std::size_t, 4> widths{64, 128, 256, 512};
  for (std::size_t s = 0; s < widths.size(); ++s) {
    for (std::size_t b = 0; b < blocks[s]; ++b) {
      const std::size_t stride = (s > 0 && b == 0) ? 2 : 1;
      const std::size_t w = widths[s];
      a.add(conv3x3(in, w, stride)).add(BatchNormSpec{}).add(ReluSpec{});
      a.add(conv3x3(w, w)).add(BatchNormSpec{});
      a.add(ResidualSpec{prev, (in == w && stride == 1) ? Shortcut::Identity : Shortcut::Projection, {}});
      std::string name = "s" + std::to_string(s + 1) + "b" + std::to_string(b + 1);
      a.add(ReluSpec{}, name);
      prev = std::move(name);
      in = w;
    }
  }
  a.add(GapSpec{}).add(DenseSpec{classes});
  return a;
}

/// Three conv layers over a 3x8x8 input; small enough for exhaustive
/// finite-difference checks.
inline ArchDescriptor toy3() {
  ArchDescriptor a;
  a.input = {3, 8, 8};
  a.add(conv3x3(3, 8)).add(BatchNormSpec{}).add(ReluSpec{});
  a.add(conv3x3(8, 8, 2)).add(BatchNormSpec{}).add(ReluSpec{});
  a.add(conv3x3(8, 8)).add(BatchNormSpec{}).add(ReluSpec{});
  a.add(GapSpec{}).add(DenseSpec{4});
  return a;
}

/// Four conv layers over 1x16x16 images, four classes.
inline ArchDescriptor shapes4(std::size_t width = 16) {
  ArchDescriptor a;
  a.input = {1, 16, 16};
  a.add(conv3x3(1, width)).add(BatchNormSpec{}).add(ReluSpec{});
  a.add(conv3x3(width, width)).add(BatchNormSpec{}).add(ReluSpec{});
  a.add(conv3x3(width, 2 * width, 2)).add(BatchNormSpec{}).add(ReluSpec{});
  a.add(conv3x3(2 * width, 2 * width)).add(BatchNormSpec{}).add(ReluSpec{});
  a.add(GapSpec{}).add(DenseSpec{4});
  return a;
}

/// One neuron over a flat input followed by a sigmoid (two-logit) head.
/// A quadratic neuron of rank k occupies k+1 channels; the head reads y.
inline ArchDescriptor single_neuron(std::size_t features, NeuronSpec neuron) {
  ArchDescriptor a;
  a.input = {features, 1, 1};
  ConvSpec c;
  c.in_channels = features;
  c.out_channels = neuron.kind == NeuronKind::Quadratic ? neuron.k + 1 : 1;
  c.neuron = neuron;
  c.bias = BiasMode::On;
  a.add(c).add(BinaryLogitSpec{});
  return a;
}

inline std::vector<std::string> preset_names() {
  return {"resnet20-cifar", "resnet32-cifar", "resnet44-cifar",  "resnet56-cifar", "resnet110-cifar",
          "resnet18-imagenet", "resnet34-imagenet", "toy3", "shapes4", "shapes4-narrow", "single-neuron"};
}

inline std::optional<ArchDescriptor> preset(const std::string& name, NeuronSpec neuron = NeuronSpec::linear()) {
  if (name == "resnet20-cifar") return resnet_cifar(20);
  if (name == "resnet32-cifar") return resnet_cifar(32);
  if (name == "resnet44-cifar") return resnet_cifar(44);
  if (name == "resnet56-cifar") return resnet_cifar(56);
  if (name == "resnet110-cifar") return resnet_cifar(110);
  if (name == "resnet18-imagenet") return resnet_imagenet(18);
  if (name == "resnet34-imagenet") return resnet_imagenet(34);
  if (name == "toy3") return toy3();
  if (name == "shapes4") return shapes4(16);
  if (name == "shapes4-narrow") return shapes4(8);
  if (name == "single-neuron") return single_neuron(2, neuron);
  return std::nullopt;
}

// ---------------------------------------------------------------------------
// JSON form (used by config files and embedded in checkpoints)
// ---------------------------------------------------------------------------

namespace arch_json {

using nlohmann::json;

inline std::string kind_name(NeuronKind k) {
  switch (k) {
    case NeuronKind::Default: return "default";
    case NeuronKind::Linear: return "linear";
    case NeuronKind::Quadratic: return "quadratic";
    case NeuronKind::Product: return "product";
  }
  return "default";
}

inline NeuronKind parse_kind(const std::string& s) {
  if (s == "default") return NeuronKind::Default;
  if (s == "linear") return NeuronKind::Linear;
  if (s == "quadratic") return NeuronKind::Quadratic;
  if (s == "product") return NeuronKind::Product;
  throw ParseError("unknown neuron kind '" + s + "'");
}

inline json neuron_to_json(const NeuronSpec& n) {
  json j{{"kind", kind_name(n.kind)}};
  if (n.k) j["k"] = n.k;
  return j;
}

inline void check_keys(const json& j, std::initializer_list<const char*> allowed, const std::string& what) {
  if (!j.is_object()) throw ParseError(what + " must be a JSON object");
  for (const auto& [key, _] : j.items()) {
    bool ok = false;
    for (const char* a : allowed) ok = ok || key == a;
    if (!ok) throw ParseError("unknown key '" + key + "' in " + what);
  }
}

inline NeuronSpec neuron_from_json(const json& j) {
  if (j.is_string()) return NeuronSpec{parse_kind(j.get<std::string>()), 0};
  check_keys(j, {"kind", "k"}, "neuron");
  NeuronSpec n{parse_kind(j.at("kind").get<std::string>()), j.value("k", std::size_t{0})};
  return n;
}

inline json to_json(const ArchDescriptor& a) {
  json layers = json::array();
  for (const auto& e : a.layers) {
    json j = std::visit(
        [](const auto& s) -> json {
          using T = std::decay_t<decltype(s)>;
          if constexpr (std::is_same_v<T, ConvSpec>) {
            return json{{"type", "conv"},
                        {"in", s.in_channels},
                        {"out", s.out_channels},
                        {"kernel", {s.kernel_h, s.kernel_w}},
                        {"stride", s.stride},
                        {"pad", s.pad},
                        {"neuron", neuron_to_json(s.neuron)},
                        {"bias", s.bias == BiasMode::Auto ? "auto" : (s.bias == BiasMode::On ? "on" : "off")}};
          } else if constexpr (std::is_same_v<T, BatchNormSpec>) {
            return json{{"type", "batchnorm"}};
          } else if constexpr (std::is_same_v<T, ReluSpec>) {
            return json{{"type", "relu"}};
          } else if constexpr (std::is_same_v<T, MaxPoolSpec>) {
            return json{{"type", "maxpool"}, {"kernel", s.kernel}, {"stride", s.stride}, {"pad", s.pad}};
          } else if constexpr (std::is_same_v<T, GapSpec>) {
            return json{{"type", "gap"}};
          } else if constexpr (std::is_same_v<T, DenseSpec>) {
            return json{{"type", "dense"}, {"out", s.out}};
          } else if constexpr (std::is_same_v<T, ResidualSpec>) {
            const char* sc = s.shortcut == Shortcut::Identity ? "identity"
                             : s.shortcut == Shortcut::Pad    ? "pad"
                                                              : "projection";
            json r{{"type", "residual"}, {"from", s.from}, {"shortcut", sc}};
            if (s.shortcut == Shortcut::Projection) r["neuron"] = neuron_to_json(s.projection_neuron);
            return r;
          } else {
            return json{{"type", "binary_logit"}};
          }
        },
        e.spec);
    if (!e.name.empty()) j["name"] = e.name;
    layers.push_back(std::move(j));
  }
  return json{{"input", {a.input.c, a.input.h, a.input.w}}, {"layers", std::move(layers)}};
}

inline ArchDescriptor from_json(const json& j) {
  try {
    check_keys(j, {"input", "layers"}, "architecture");
    ArchDescriptor a;
    const auto in = j.at("input").get<std::vector<std::size_t>>();
    if (in.size() != 3) throw ParseError("architecture input must be [channels, height, width]");
    a.input = {in[0], in[1], in[2]};
    for (const auto& l : j.at("layers")) {
      const std::string type = l.at("type").get<std::string>();
      LayerEntry e;
      e.name = l.value("name", std::string{});
      if (type == "conv") {
        check_keys(l, {"type", "name", "in", "out", "kernel", "stride", "pad", "neuron", "bias"}, "conv layer");
        ConvSpec c;
        c.in_channels = l.at("in").get<std::size_t>();
        c.out_channels = l.at("out").get<std::size_t>();
        const json& kernel = l.at("kernel");
        if (kernel.is_array()) {
          const auto ks = kernel.get<std::vector<std::size_t>>();
          if (ks.size() != 2) throw ParseError("conv kernel must be [h, w]");
          c.kernel_h = ks[0];
          c.kernel_w = ks[1];
        } else {
          c.kernel_h = c.kernel_w = kernel.get<std::size_t>();
        }
        c.stride = l.value("stride", std::size_t{1});
        c.pad = l.value("pad", std::size_t{0});
        if (l.contains("neuron")) c.neuron = neuron_from_json(l.at("neuron"));
        const std::string bias = l.value("bias", std::string{"auto"});
        if (bias == "auto") c.bias = BiasMode::Auto;
        else if (bias == "on") c.bias = BiasMode::On;
        else if (bias == "off") c.bias = BiasMode::Off;
        else throw ParseError("conv bias must be auto, on or off");
        e.spec = c;
      } else if (type == "batchnorm") {
        check_keys(l, {"type", "name"}, "batchnorm layer");
        e.spec = BatchNormSpec{};
      } else if (type == "relu") {
        check_keys(l, {"type", "name"}, "relu layer");
        e.spec = ReluSpec{};
      } else if (type == "maxpool") {
        check_keys(l, {"type", "name", "kernel", "stride", "pad"}, "maxpool layer");
        e.spec = MaxPoolSpec{l.at("kernel").get<std::size_t>(), l.value("stride", std::size_t{2}),
                             l.value("pad", std::size_t{0})};
      } else if (type == "gap") {
        check_keys(l, {"type", "name"}, "gap layer");
        e.spec = GapSpec{};
      } else if (type == "dense") {
        check_keys(l, {"type", "name", "out"}, "dense layer");
        e.spec = DenseSpec{l.at("out").get<std::size_t>()};
      } else if (type == "residual") {
        check_keys(l, {"type", "name", "from", "shortcut", "neuron"}, "residual layer");
        ResidualSpec r;
        r.from = l.at("from").get<std::string>();
        const std::string sc = l.value("shortcut", std::string{"identity"});
        if (sc == "identity") r.shortcut = Shortcut::Identity;
        else if (sc == "pad") r.shortcut = Shortcut::Pad;
        else if (sc == "projection") r.shortcut = Shortcut::Projection;
        else throw ParseError("unknown residual shortcut '" + sc + "'");
        if (l.contains("neuron")) r.projection_neuron = neuron_from_json(l.at("neuron"));
        e.spec = r;
      } else if (type == "binary_logit") {
        check_keys(l, {"type", "name"}, "binary_logit layer");
        e.spec = BinaryLogitSpec{};
      } else {
        throw ParseError("unknown layer type '" + type + "'");
      }
      a.layers.push_back(std::move(e));
    }
    return a;
  } catch (const json::exception& e) {
    throw ParseError(std::string("architecture JSON: ") + e.what());
  }
}

}  // namespace arch_json

}  // namespace qnn
