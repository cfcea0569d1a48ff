#pragma once

#include <CLI11.hpp>

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "qnn/qnn.hpp"

// Command-line front end. `run` is the whole program minus argv handling so
// tests can drive it in-process.

namespace qnn::cli {

using nlohmann::json;
namespace fs = std::filesystem;

enum ExitCode : int { kOk = 0, kCheckFailed = 1, kInputError = 2, kInstability = 3 };

struct GradCheckConfig {
  double eps = 1e-5;
  std::size_t batch_size = 4;
  double tolerance = 1e-4;
  std::size_t max_params = 10000;
};

struct ExportConfig {
  std::string checkpoint;
  std::size_t layer = 0;
  std::optional<std::size_t> sample;
  std::string image;
};

struct RunConfig {
  std::string arch_name = "toy3";
  std::optional<ArchDescriptor> arch_inline;
  NeuronSpec neuron = NeuronSpec::quadratic(3);
  OptimConfig optim;
  DatasetSpec dataset;
  bool dataset_seed_set = false;
  std::uint64_t seed = 0;
  std::string out;
  std::vector<std::size_t> ks;
  std::size_t repetitions = 5;
  std::size_t histogram_every = 1;
  GradCheckConfig grad_check;
  std::string fault_injection = "none";  // none | conv-backward
  ExportConfig export_;

  std::uint64_t dataset_seed() const { return dataset_seed_set ? dataset.seed : seed; }

  /// Descriptor for a rank; `k` only matters for presets whose shape depends
  /// on the neuron (single-neuron).
  ArchDescriptor arch(NeuronSpec n) const {
    if (arch_inline) return *arch_inline;
    if (auto a = preset(arch_name, n)) return *a;
    throw ParseError("unknown architecture '" + arch_name + "'");
  }
  ArchDescriptor arch() const { return arch(neuron); }
};

namespace detail {

inline void require_file(const std::string& path, const std::string& what) {
  if (path.empty()) throw ParseError(what + " path is empty");
  if (!fs::exists(path)) throw ParseError(what + " '" + path + "' does not exist");
}

inline DatasetKind parse_dataset_kind(const std::string& s) {
  if (s == "synthetic-circle") return DatasetKind::Circle;
  if (s == "synthetic-xor") return DatasetKind::Xor;
  if (s == "synthetic-shapes") return DatasetKind::Shapes;
  if (s == "idx-images") return DatasetKind::IdxImages;
  if (s == "csv-vectors") return DatasetKind::CsvVectors;
  throw ParseError("unknown dataset kind '" + s + "'");
}

template <typename T>
T get(const json& j, const char* key, const std::string& where) {
  try {
    return j.at(key).get<T>();
  } catch (const json::exception&) {
    throw ParseError(where + "." + key + " has the wrong type");
  }
}

inline void parse_optim(const json& j, OptimConfig& o) {
  arch_json::check_keys(j, {"lr_main", "lr_lambda", "momentum", "weight_decay", "schedule", "batch_size", "epochs",
                            "lambda_weight_decay", "clip_norm", "max_steps"},
                        "optim");
  if (j.contains("lr_main")) o.lr_main = get<double>(j, "lr_main", "optim");
  if (j.contains("lr_lambda")) o.lr_lambda = get<double>(j, "lr_lambda", "optim");
  if (j.contains("momentum")) o.momentum = get<double>(j, "momentum", "optim");
  if (j.contains("weight_decay")) o.weight_decay = get<double>(j, "weight_decay", "optim");
  if (j.contains("batch_size")) o.batch_size = get<std::size_t>(j, "batch_size", "optim");
  if (j.contains("epochs")) o.epochs = get<std::size_t>(j, "epochs", "optim");
  if (j.contains("lambda_weight_decay")) o.lambda_weight_decay = get<bool>(j, "lambda_weight_decay", "optim");
  if (j.contains("clip_norm")) o.clip_norm = get<double>(j, "clip_norm", "optim");
  if (j.contains("max_steps")) o.max_steps = get<std::size_t>(j, "max_steps", "optim");
  if (j.contains("schedule")) {
    o.schedule.clear();
    for (const json& e : j.at("schedule")) {
      if (!e.is_array() || e.size() != 2) throw ParseError("optim.schedule entries must be [epoch, multiplier]");
      o.schedule.emplace_back(e[0].get<std::size_t>(), e[1].get<double>());
    }
  }
}

inline void parse_dataset(const json& j, RunConfig& c) {
  arch_json::check_keys(j, {"kind", "train_size", "test_size", "seed", "normalize", "noise", "train_images",
                            "train_labels", "test_images", "test_labels", "train_path", "test_path"},
                        "dataset");
  DatasetSpec& d = c.dataset;
  if (j.contains("kind")) d.kind = parse_dataset_kind(get<std::string>(j, "kind", "dataset"));
  if (j.contains("train_size")) d.train_size = get<std::size_t>(j, "train_size", "dataset");
  if (j.contains("test_size")) d.test_size = get<std::size_t>(j, "test_size", "dataset");
  if (j.contains("seed")) {
    d.seed = get<std::uint64_t>(j, "seed", "dataset");
    c.dataset_seed_set = true;
  }
  if (j.contains("normalize")) d.normalize = get<bool>(j, "normalize", "dataset");
  if (j.contains("noise")) d.noise = get<double>(j, "noise", "dataset");
  for (auto [key, field] : {std::pair{"train_images", &d.train_images}, std::pair{"train_labels", &d.train_labels},
                            std::pair{"test_images", &d.test_images}, std::pair{"test_labels", &d.test_labels},
                            std::pair{"train_path", &d.train_path}, std::pair{"test_path", &d.test_path}}) {
    if (j.contains(key)) *field = get<std::string>(j, key, "dataset");
  }
  if (d.kind == DatasetKind::IdxImages) {
    require_file(d.train_images, "dataset.train_images");
    require_file(d.train_labels, "dataset.train_labels");
    require_file(d.test_images, "dataset.test_images");
    require_file(d.test_labels, "dataset.test_labels");
  } else if (d.kind == DatasetKind::CsvVectors) {
    require_file(d.train_path, "dataset.train_path");
    require_file(d.test_path, "dataset.test_path");
  }
}

inline ArchDescriptor read_arch_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ParseError("cannot open architecture file " + path);
  try {
    return arch_json::from_json(json::parse(is));
  } catch (const json::parse_error& e) {
    throw ParseError(path + ": " + e.what());
  }
}

}  // namespace detail

/// Parses a config document. Unknown keys anywhere are rejected.
inline RunConfig parse_config(const json& j) {
  arch_json::check_keys(j, {"arch", "neuron", "k", "optim", "dataset", "seed", "out", "ks", "repetitions",
                            "histogram_every", "grad_check", "fault_injection", "export"},
                        "config");
  RunConfig c;
  if (j.contains("arch")) {
    const json& a = j.at("arch");
    if (a.is_object()) {
      c.arch_inline = arch_json::from_json(a);
    } else if (a.is_string()) {
      c.arch_name = a.get<std::string>();
      if (!preset(c.arch_name, NeuronSpec::quadratic(1))) {
        detail::require_file(c.arch_name, "architecture");
        c.arch_inline = detail::read_arch_file(c.arch_name);
      }
    } else {
      throw ParseError("config.arch must be a preset name, a file path or a descriptor object");
    }
  }
  std::size_t k = 3;
  if (j.contains("k")) k = detail::get<std::size_t>(j, "k", "config");
  if (k < 1) throw ParseError("config.k must be at least 1");
  NeuronKind kind = NeuronKind::Quadratic;
  if (j.contains("neuron")) kind = arch_json::parse_kind(detail::get<std::string>(j, "neuron", "config"));
  if (kind == NeuronKind::Default) throw ParseError("config.neuron must be linear, quadratic or product");
  c.neuron = kind == NeuronKind::Quadratic ? NeuronSpec::quadratic(k) : NeuronSpec{kind, 0};
  if (j.contains("optim")) detail::parse_optim(j.at("optim"), c.optim);
  if (j.contains("dataset")) detail::parse_dataset(j.at("dataset"), c);
  if (j.contains("seed")) c.seed = detail::get<std::uint64_t>(j, "seed", "config");
  if (j.contains("out")) c.out = detail::get<std::string>(j, "out", "config");
  if (j.contains("ks")) {
    c.ks = detail::get<std::vector<std::size_t>>(j, "ks", "config");
    for (std::size_t v : c.ks)
      if (v < 1) throw ParseError("config.ks entries must be at least 1");
  }
  if (j.contains("repetitions")) c.repetitions = detail::get<std::size_t>(j, "repetitions", "config");
  if (j.contains("histogram_every")) c.histogram_every = detail::get<std::size_t>(j, "histogram_every", "config");
  if (j.contains("grad_check")) {
    const json& g = j.at("grad_check");
    arch_json::check_keys(g, {"eps", "batch_size", "tolerance", "max_params"}, "grad_check");
    if (g.contains("eps")) c.grad_check.eps = detail::get<double>(g, "eps", "grad_check");
    if (g.contains("batch_size")) c.grad_check.batch_size = detail::get<std::size_t>(g, "batch_size", "grad_check");
    if (g.contains("tolerance")) c.grad_check.tolerance = detail::get<double>(g, "tolerance", "grad_check");
    if (g.contains("max_params")) c.grad_check.max_params = detail::get<std::size_t>(g, "max_params", "grad_check");
  }
  if (j.contains("fault_injection")) {
    c.fault_injection = detail::get<std::string>(j, "fault_injection", "config");
    if (c.fault_injection != "none" && c.fault_injection != "conv-backward") {
      throw ParseError("config.fault_injection must be 'none' or 'conv-backward'");
    }
  }
  if (j.contains("export")) {
    const json& e = j.at("export");
    arch_json::check_keys(e, {"checkpoint", "layer", "sample", "image"}, "export");
    if (e.contains("checkpoint")) c.export_.checkpoint = detail::get<std::string>(e, "checkpoint", "export");
    if (e.contains("layer")) c.export_.layer = detail::get<std::size_t>(e, "layer", "export");
    if (e.contains("sample")) c.export_.sample = detail::get<std::size_t>(e, "sample", "export");
    if (e.contains("image")) c.export_.image = detail::get<std::string>(e, "image", "export");
  }
  return c;
}

inline RunConfig load_config(const std::string& path) {
  detail::require_file(path, "config file");
  std::ifstream is(path);
  if (!is) throw ParseError("cannot open config file " + path);
  json j;
  try {
    j = json::parse(is);
  } catch (const json::parse_error& e) {
    throw ParseError(path + ": " + e.what());
  }
  return parse_config(j);
}

// ---------------------------------------------------------------------------
// Shared helpers
// ---------------------------------------------------------------------------

namespace detail {

struct Outputs {
  fs::path dir;
  bool force = false;

  /// Resolves `name` under the output directory, refusing to clobber.
  fs::path claim(const std::string& name) const {
    fs::path p = dir / name;
    if (fs::exists(p) && !force) throw ParseError(p.string() + " already exists (use --force to overwrite)");
    return p;
  }
  void ensure() const {
    if (!dir.empty()) fs::create_directories(dir);
  }
};

inline Outputs outputs(const RunConfig& c, bool force, const char* command) {
  if (c.out.empty()) throw ParseError(std::string(command) + " needs an output directory (--out or config.out)");
  return Outputs{c.out, force};
}

inline std::ofstream open_out(const fs::path& p) {
  std::ofstream os(p, std::ios::binary | std::ios::trunc);
  if (!os) throw ParseError("cannot open " + p.string() + " for writing");
  return os;
}

inline void check_data_fits(const Network& net, const TrainTest& tt) {
  const FeatureShape in = net.input_shape();
  if (tt.train.sample_size() != in.size()) {
    throw ParseError("dataset samples have " + std::to_string(tt.train.sample_size()) +
                     " values, architecture expects " + std::to_string(in.size()));
  }
  if (tt.train.classes > net.output_shape().c) {
    throw ParseError("dataset has " + std::to_string(tt.train.classes) + " classes, network emits " +
                     std::to_string(net.output_shape().c) + " logits");
  }
}

inline Tensor as_input(const Dataset& d, FeatureShape s) {
  return d.x.reshaped({d.size(), s.c, s.h, s.w});
}

struct TrainRun {
  Network net;
  FitResult fit;
};

/// One seeded training run: init from `seed`, shuffle from a forked stream.
inline TrainRun train_once(const RunConfig& c, NeuronSpec neuron, const TrainTest& tt, std::uint64_t seed,
                           bool histograms) {
  Rng base(seed);
  Rng init_rng = base.fork();
  Rng shuffle_rng = base.fork();
  Network net = build(c.arch(neuron), neuron, init_rng);
  check_data_fits(net, tt);
  const FeatureShape in = net.input_shape();
  Dataset train{as_input(tt.train, in), tt.train.labels, tt.train.classes};
  Dataset test{as_input(tt.test, in), tt.test.labels, tt.test.classes};
  OptimConfig o = c.optim;
  o.seed = seed;
  FitResult r = fit(net, train, test, o, shuffle_rng, FitOptions{histograms, c.histogram_every});
  return TrainRun{std::move(net), std::move(r)};
}

inline std::string fixed(double v, int prec) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(prec) << v;
  return os.str();
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Commands
// ---------------------------------------------------------------------------

inline int cmd_grad_check(const RunConfig& c, std::ostream& out, std::ostream& err) {
  Rng rng(c.seed);
  Network net = build(c.arch(), c.neuron, rng);
  const std::size_t count = net.parameter_count();
  if (count > c.grad_check.max_params) {
    err << "grad-check: network has " << count << " parameters, limit is " << c.grad_check.max_params << '\n';
    return kInputError;
  }
  if (c.grad_check.batch_size < 2) throw ParseError("grad_check.batch_size must be at least 2");

  // Give lambda non-zero values so the quadratic paths carry gradient.
  for (ConvLayer* conv : net.all_convs()) {
    for (double& v : conv->lambda.data()) v = rng.normal(0.0, 0.5);
    for (double& v : conv->bias.data()) v = rng.normal(0.0, 0.1);
    if (c.fault_injection == "conv-backward") conv->corrupt_backward = true;
  }
  const FeatureShape in = net.input_shape();
  Tensor x({c.grad_check.batch_size, in.c, in.h, in.w});
  for (double& v : x.data()) v = rng.normal();
  std::vector<int> labels(c.grad_check.batch_size);
  for (int& l : labels) l = static_cast<int>(rng.below(net.output_shape().c));

  const GradCheckResult r = grad_check(net, x, labels, c.grad_check.eps);
  out << "parameters " << count << ", eps " << c.grad_check.eps << '\n';
  for (const TensorCheck& t : r.tensors) {
    out << "  " << std::left << std::setw(24) << t.name << " max_rel_error " << std::scientific << std::setprecision(3)
        << t.max_rel_error << std::defaultfloat << '\n';
  }
  const bool ok = r.max_rel_error <= c.grad_check.tolerance;
  out << "max_rel_error " << std::scientific << std::setprecision(3) << r.max_rel_error << std::defaultfloat << " ("
      << r.worst_tensor << ") " << (ok ? "PASS" : "FAIL") << '\n';
  return ok ? kOk : kCheckFailed;
}

inline int cmd_cost_report(const RunConfig& c, bool force, std::ostream& out) {
  const std::size_t k = c.neuron.kind == NeuronKind::Quadratic ? c.neuron.k : 1;
  const ArchDescriptor arch = c.arch();
  const CostReport rep = network_cost(arch, k);
  const std::string title = (c.arch_inline ? std::string("custom architecture") : c.arch_name) + ", k=" +
                            std::to_string(k);
  if (c.out.empty()) {
    write_cost_csv(rep, out);
    write_cost_text(rep, out, title);
    return kOk;
  }
  const detail::Outputs o{c.out, force};
  const fs::path csv = o.claim("cost_report.csv"), txt = o.claim("cost_report.txt");
  o.ensure();
  {
    auto os = detail::open_out(csv);
    write_cost_csv(rep, os);
  }
  {
    auto os = detail::open_out(txt);
    write_cost_text(rep, os, title);
  }
  write_cost_text(rep, out, title);
  return kOk;
}

inline int cmd_train(const RunConfig& c, bool force, std::ostream& out) {
  const detail::Outputs o = detail::outputs(c, force, "train");
  const fs::path metrics = o.claim("metrics.csv"), hist = o.claim("histograms.csv"), model = o.claim("model.qnet");
  DatasetSpec ds = c.dataset;
  ds.seed = c.dataset_seed();
  const TrainTest tt = load_dataset(ds);
  detail::TrainRun run = detail::train_once(c, c.neuron, tt, c.seed, true);
  o.ensure();
  {
    auto os = detail::open_out(metrics);
    write_metrics_csv(run.fit.metrics, os);
  }
  {
    auto os = detail::open_out(hist);
    write_histogram_csv(run.fit.histograms, os);
  }
  save_checkpoint(run.net, model.string());
  out << "steps " << run.fit.steps << '\n'
      << "final test loss " << detail::fixed(run.fit.final_test.loss, 6) << '\n'
      << "final test accuracy " << detail::fixed(run.fit.final_test.accuracy, 4) << '\n';
  return kOk;
}

struct SweepRow {
  std::size_t k = 0;
  double mean = 0.0, std = 0.0;
  std::vector<double> accuracies;
};

/// Sample standard deviation (n - 1 denominator); 0 for a single value.
inline std::pair<double, double> mean_std(const std::vector<double>& v) {
  double m = 0.0;
  for (double a : v) m += a;
  m /= static_cast<double>(v.size());
  if (v.size() < 2) return {m, 0.0};
  double s = 0.0;
  for (double a : v) s += (a - m) * (a - m);
  return {m, std::sqrt(s / static_cast<double>(v.size() - 1))};
}

inline int cmd_sweep_rank(const RunConfig& c, bool force, std::ostream& out, std::ostream& err) {
  if (c.ks.empty()) {
    err << "sweep-rank: config.ks is empty\n";
    return kInputError;
  }
  if (c.repetitions < 1) throw ParseError("config.repetitions must be at least 1");
  const detail::Outputs o = detail::outputs(c, force, "sweep-rank");
  const fs::path sweep = o.claim("sweep.csv"), runs = o.claim("sweep_runs.csv");
  DatasetSpec ds = c.dataset;
  ds.seed = c.dataset_seed();
  const TrainTest tt = load_dataset(ds);

  std::vector<SweepRow> rows;
  for (std::size_t k : c.ks) {
    SweepRow row{k, 0.0, 0.0, {}};
    for (std::size_t rep = 0; rep < c.repetitions; ++rep) {
      const auto run = detail::train_once(c, NeuronSpec::quadratic(k), tt, c.seed + rep, false);
      row.accuracies.push_back(run.fit.final_test.accuracy);
    }
    std::tie(row.mean, row.std) = mean_std(row.accuracies);
    out << "k=" << k << " mean_acc " << detail::fixed(row.mean, 4) << " std " << detail::fixed(row.std, 4) << '\n';
    rows.push_back(std::move(row));
  }
  o.ensure();
  {
    auto os = detail::open_out(sweep);
    os << "k,mean_acc,std\n";
    for (const SweepRow& r : rows) os << r.k << ',' << fmt_real(r.mean) << ',' << fmt_real(r.std) << '\n';
  }
  {
    auto os = detail::open_out(runs);
    os << "k,repetition,seed,test_accuracy\n";
    for (const SweepRow& r : rows)
      for (std::size_t i = 0; i < r.accuracies.size(); ++i)
        os << r.k << ',' << i << ',' << (c.seed + i) << ',' << fmt_real(r.accuracies[i]) << '\n';
  }
  return kOk;
}

/// Linear (w^T x + b) and quadratic ((1/k) sum lam f^2) response maps of
/// one conv layer, evaluated at every output position.
struct ResponseMap {
  std::size_t neuron = 0;
  std::string part;  // linear | quadratic
  std::size_t h = 0, w = 0;
  std::vector<double> values;
};

inline std::vector<ResponseMap> layer_responses(Network& net, std::size_t layer, const Tensor& x) {
  if (layer >= net.size()) {
    throw ParseError("layer " + std::to_string(layer) + " is out of range (network has " +
                     std::to_string(net.size()) + " layers)");
  }
  if (!std::holds_alternative<ConvLayer>(net.layer(layer))) {
    throw ParseError("layer " + std::to_string(layer) + " is not a conv layer");
  }
  const ConvLayer& conv = net.conv(layer);
  if (conv.kind() == NeuronKind::Product) throw ParseError("response export does not cover product neurons");
  const Tensor input = net.forward_until(x, layer);
  const FeatureShape in = conv.input_shape();
  const Tensor patch = im2col(input.reshaped({in.c, in.h, in.w}), conv.spec());
  const std::size_t n = patch.rows(), npos = patch.cols();
  const std::size_t oh = conv.geometry().out_h, ow = conv.geometry().out_w;

  std::vector<double> col(n);
  std::vector<ResponseMap> maps;
  for (std::size_t j = 0; j < conv.neuron_count(); ++j) {
    const bool quad = j < conv.quad_neurons();
    ResponseMap lin{j, "linear", oh, ow, std::vector<double>(npos)};
    ResponseMap q{j, "quadratic", oh, ow, std::vector<double>(npos)};
    const std::size_t row = conv.bias_channel(j);
    const double b = conv.has_bias() ? conv.bias[j] : 0.0;
    std::optional<QuadNeuronParams> p;
    if (quad) p = conv.neuron(j);
    for (std::size_t pos = 0; pos < npos; ++pos) {
      for (std::size_t l = 0; l < n; ++l) col[l] = patch(l, pos);
      lin.values[pos] = dot(std::span<const double>(&conv.weight(row, 0), n), col) + b;
      if (quad) q.values[pos] = quad_response(*p, col);
    }
    maps.push_back(std::move(lin));
    if (quad) maps.push_back(std::move(q));
  }
  return maps;
}

inline int cmd_export_response(const RunConfig& c, bool force, std::ostream& out) {
  const ExportConfig& e = c.export_;
  detail::require_file(e.checkpoint, "checkpoint");
  if (e.image.empty() == !e.sample.has_value()) throw ParseError("export-response needs exactly one of --image or --sample");
  const detail::Outputs o = detail::outputs(c, force, "export-response");
  Network net = load_checkpoint(e.checkpoint);
  const FeatureShape in = net.input_shape();

  Tensor x({1, in.c, in.h, in.w});
  std::optional<std::vector<bool>> mask;
  if (!e.image.empty()) {
    detail::require_file(e.image, "image");
    const Pgm img = read_pgm(e.image);
    if (in.c != 1 || img.height != in.h || img.width != in.w) {
      throw ParseError(e.image + ": image is " + std::to_string(img.width) + "x" + std::to_string(img.height) +
                       ", network expects " + std::to_string(in.c) + "x" + std::to_string(in.h) + "x" +
                       std::to_string(in.w));
    }
    std::copy(img.pixels.begin(), img.pixels.end(), x.data().begin());
  } else {
    DatasetSpec ds = c.dataset;
    ds.seed = c.dataset_seed();
    const TrainTest tt = load_dataset(ds);
    if (*e.sample >= tt.test.size()) throw ParseError("sample index is beyond the test split");
    if (tt.test.sample_size() != in.size()) throw ParseError("dataset samples do not fit the checkpoint's input");
    const std::size_t s = tt.test.sample_size();
    std::copy_n(tt.test.x.data().begin() + static_cast<std::ptrdiff_t>(*e.sample * s), s, x.data().begin());
    if (ds.kind == DatasetKind::Shapes) {
      std::vector<ShapeSample> samples;
      synthetic_shapes(ds.train_size + ds.test_size, ds.seed, ds.noise, &samples);
      mask = shape_mask(samples[ds.train_size + *e.sample]);
    }
  }

  const auto maps = layer_responses(net, e.layer, x);
  std::vector<fs::path> pgms;
  for (const ResponseMap& m : maps)
    pgms.push_back(o.claim("layer" + std::to_string(e.layer) + "_neuron" + std::to_string(m.neuron) + "_" + m.part +
                           ".pgm"));
  const fs::path csv = o.claim("responses.csv"), input_pgm = o.claim("input.pgm");
  const fs::path mask_pgm = mask ? o.claim("mask.pgm") : fs::path{};
  o.ensure();
  for (std::size_t i = 0; i < maps.size(); ++i) write_pgm(pgms[i].string(), maps[i].values, maps[i].h, maps[i].w);
  {
    auto os = detail::open_out(csv);
    os << "neuron,part,row,col,value\n";
    for (const ResponseMap& m : maps)
      for (std::size_t r = 0; r < m.h; ++r)
        for (std::size_t cc = 0; cc < m.w; ++cc)
          os << m.neuron << ',' << m.part << ',' << r << ',' << cc << ',' << fmt_real(m.values[r * m.w + cc]) << '\n';
  }
  if (in.c == 1) write_pgm(input_pgm.string(), x.data(), in.h, in.w);
  if (mask) {
    std::vector<double> mv(mask->begin(), mask->end());
    write_pgm(mask_pgm.string(), mv, kShapeSide, kShapeSide);
  }
  out << "wrote " << maps.size() << " response maps for layer " << e.layer << " to " << o.dir.string() << '\n';
  return kOk;
}

// ---------------------------------------------------------------------------
// Entry point
// ---------------------------------------------------------------------------

/// Runs one command. `args` excludes the program name.
inline int run(std::vector<std::string> args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Efficient quadratic neurons: gradient checks, cost reports, training and response maps", "qnn"};
  app.require_subcommand(1);
  std::string config_path, out_dir, checkpoint, image;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> k, layer, sample;
  bool force = false;

  const auto common = [&](CLI::App* sub) {
    sub->add_option("--config", config_path, "JSON run configuration");
    sub->add_option("--seed", seed, "seed for initialization, shuffling and synthetic data");
    sub->add_option("--out", out_dir, "output directory");
    sub->add_option("--k", k, "rank of the quadratic neurons");
    sub->add_flag("--force", force, "overwrite existing outputs");
  };
  CLI::App* grad = app.add_subcommand("grad-check", "finite-difference check of every analytic gradient");
  CLI::App* cost = app.add_subcommand("cost-report", "parameter and MAC overhead versus a linear network");
  CLI::App* train = app.add_subcommand("train", "train a network and write metrics, histograms and a checkpoint");
  CLI::App* sweep = app.add_subcommand("sweep-rank", "train at several ranks and summarize test accuracy");
  CLI::App* resp = app.add_subcommand("export-response", "write linear and quadratic response maps of a layer");
  for (CLI::App* s : {grad, cost, train, sweep, resp}) common(s);
  resp->add_option("--checkpoint", checkpoint, "QNET1 checkpoint");
  resp->add_option("--layer", layer, "network layer index of a conv layer");
  resp->add_option("--image", image, "input image (binary PGM)");
  resp->add_option("--sample", sample, "index into the configured test split");

  std::reverse(args.begin(), args.end());
  try {
    app.parse(std::move(args));
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kOk : kInputError;
  }

  try {
    RunConfig c = config_path.empty() ? RunConfig{} : load_config(config_path);
    if (seed) c.seed = *seed;
    if (!out_dir.empty()) c.out = out_dir;
    if (k) {
      if (*k < 1) throw ParseError("--k must be at least 1");
      c.neuron = NeuronSpec::quadratic(*k);
    }
    if (!checkpoint.empty()) c.export_.checkpoint = checkpoint;
    if (layer) c.export_.layer = *layer;
    if (!image.empty()) {
      c.export_.image = image;
      c.export_.sample.reset();
    }
    if (sample) {
      c.export_.sample = *sample;
      c.export_.image.clear();
    }
    c.optim.validate();

    if (grad->parsed()) return cmd_grad_check(c, out, err);
    if (cost->parsed()) return cmd_cost_report(c, force, out);
    if (train->parsed()) return cmd_train(c, force, out);
    if (sweep->parsed()) return cmd_sweep_rank(c, force, out, err);
    return cmd_export_response(c, force, out);
  } catch (const InstabilityError& e) {
    err << "numerical instability: " << e.what() << '\n';
    return kInstability;
  } catch (const ConvergenceError& e) {
    err << "numerical instability: " << e.what() << '\n';
    return kInstability;
  } catch (const Error& e) {
    err << "error: " << e.what() << '\n';
    return kInputError;
  } catch (const nlohmann::json::exception& e) {
    err << "config error: " << e.what() << '\n';
    return kInputError;
  } catch (const fs::filesystem_error& e) {
    err << "file error: " << e.what() << '\n';
    return kInputError;
  }
}

}  // namespace qnn::cli
