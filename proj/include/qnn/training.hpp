#pragma once

#include <cmath>
#include <iomanip>
#include <limits>
#include <numeric>
#include <ostream>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "qnn/data.hpp"
#include "qnn/init.hpp"
#include "qnn/network.hpp"

namespace qnn {

struct OptimConfig {
  double lr_main = 0.1;
  double lr_lambda = 1e-4;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  std::vector<std::pair<std::size_t, double>> schedule;  // (epoch, multiplier), cumulative
  std::size_t batch_size = 128;
  std::size_t epochs = 1;
  std::uint64_t seed = 0;
  bool lambda_weight_decay = true;
  double clip_norm = 0.0;  // global-norm clip; 0 disables
  std::size_t max_steps = 0;  // 0: no cap

  void validate() const {
    if (!(lr_main > 0.0) || !(lr_lambda > 0.0)) throw DomainError("optim: learning rates must be positive");
    if (lr_lambda > lr_main) throw DomainError("optim: lr_lambda must not exceed lr_main");
    if (!(momentum >= 0.0 && momentum < 1.0)) throw DomainError("optim: momentum must lie in [0, 1)");
    if (weight_decay < 0.0) throw DomainError("optim: weight_decay must be non-negative");
    if (batch_size < 1) throw DomainError("optim: batch_size must be positive");
    if (clip_norm < 0.0) throw DomainError("optim: clip_norm must be non-negative");
  }

  double multiplier(std::size_t epoch) const {
    double m = 1.0;
    for (const auto& [e, mult] : schedule)
      if (epoch >= e) m *= mult;
    return m;
  }
  double lr_main_at(std::size_t epoch) const { return lr_main * multiplier(epoch); }
  double lr_lambda_at(std::size_t epoch) const { return lr_lambda * multiplier(epoch); }
};

struct ParamGroup {
  ParamKind kind = ParamKind::Main;
  std::vector<ParamRef> params;
  std::vector<Tensor> velocity;
};

/// Splits trainable tensors into the main group and the lambda group.
inline std::vector<ParamGroup> make_groups(Network& net) {
  std::vector<ParamGroup> groups(2);
  groups[0].kind = ParamKind::Main;
  groups[1].kind = ParamKind::Lambda;
  for (const ParamRef& p : net.params()) {
    ParamGroup& g = groups[p.kind == ParamKind::Lambda ? 1 : 0];
    g.params.push_back(p);
    g.velocity.emplace_back(p.value->shape());
  }
  return groups;
}

/// v <- momentum * v + (grad + wd * param); param <- param - lr * v, with the
/// lambda group stepping at lr_lambda under the same schedule.
inline void sgd_step(std::vector<ParamGroup>& groups, const OptimConfig& cfg, std::size_t epoch) {
  double sq = 0.0;
  for (const ParamGroup& g : groups)
    for (const ParamRef& p : g.params)
      for (double v : p.grad->data()) {
        if (!std::isfinite(v)) throw InstabilityError("non-finite gradient in " + p.name);
        sq += v * v;
      }
  const double norm = std::sqrt(sq);
  const double clip = (cfg.clip_norm > 0.0 && norm > cfg.clip_norm) ? cfg.clip_norm / norm : 1.0;

  for (ParamGroup& g : groups) {
    const bool lam = g.kind == ParamKind::Lambda;
    const double lr = lam ? cfg.lr_lambda_at(epoch) : cfg.lr_main_at(epoch);
    const double wd = (lam && !cfg.lambda_weight_decay) ? 0.0 : cfg.weight_decay;
    for (std::size_t i = 0; i < g.params.size(); ++i) {
      auto value = g.params[i].value->data();
      auto grad = g.params[i].grad->data();
      auto vel = g.velocity[i].data();
      for (std::size_t j = 0; j < value.size(); ++j) {
        vel[j] = cfg.momentum * vel[j] + (clip * grad[j] + wd * value[j]);
        value[j] -= lr * vel[j];
      }
    }
  }
}

struct LossResult {
  double loss = 0.0;
  Tensor grad;  // same shape as the logits
};

/// Mean softmax cross-entropy over a batch of logits (N, C[, 1, 1]).
/// Gradient is (softmax - onehot) / N.
inline LossResult cross_entropy(const Tensor& logits, std::span<const int> labels) {
  if (logits.rank() < 2 || logits.dim(0) != labels.size()) throw ShapeError("cross_entropy: batch size mismatch");
  const std::size_t n = labels.size(), c = logits.size() / n;
  LossResult r{0.0, Tensor(logits.shape())};
  for (std::size_t i = 0; i < n; ++i) {
    const double* z = logits.data().data() + i * c;
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= c) throw DomainError("cross_entropy: label out of range");
    const double mx = *std::max_element(z, z + c);
    double se = 0.0;
    for (std::size_t j = 0; j < c; ++j) se += std::exp(z[j] - mx);
    const double lse = mx + std::log(se);
    r.loss += lse - z[labels[i]];
    for (std::size_t j = 0; j < c; ++j) {
      const double p = std::exp(z[j] - lse);
      r.grad[i * c + j] = (p - (static_cast<int>(j) == labels[i] ? 1.0 : 0.0)) / static_cast<double>(n);
    }
  }
  r.loss /= static_cast<double>(n);
  return r;
}

inline LossResult cross_entropy(const Tensor& logits, int label) {
  const Tensor batch = logits.reshaped({1, logits.size()});
  const int labels[1] = {label};
  LossResult r = cross_entropy(batch, labels);
  r.grad = r.grad.reshaped(logits.shape());
  return r;
}

inline double accuracy(const Tensor& logits, std::span<const int> labels) {
  if (labels.empty()) return 0.0;
  const std::size_t n = labels.size(), c = logits.size() / n;
  std::size_t hits = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double* z = logits.data().data() + i * c;
    if (static_cast<int>(std::max_element(z, z + c) - z) == labels[i]) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(n);
}

// ---------------------------------------------------------------------------
// Gradient check
// ---------------------------------------------------------------------------

struct TensorCheck {
  std::string name;
  double max_rel_error = 0.0;
};

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::string worst_tensor;
  std::vector<TensorCheck> tensors;
};

inline constexpr double kGradCheckFloor = 1e-6;

/// |a - n| / max(|a|, |n|, floor).
inline double relative_error(double analytic, double numeric, double floor = kGradCheckFloor) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

/// Central differences of the training-mode batch loss for every element of
/// every trainable tensor, against the analytic backward pass.
inline GradCheckResult grad_check(Network& net, const Tensor& x, std::span<const int> labels, double eps) {
  if (!(eps > 0.0)) throw DomainError("grad_check: eps must be positive");
  net.zero_grad();
  const LossResult base = cross_entropy(net.forward(x, true), labels);
  net.backward(base.grad);
  const auto loss_at = [&]() { return cross_entropy(net.forward(x, true), labels).loss; };

  GradCheckResult out;
  for (const ParamRef& p : net.params()) {
    TensorCheck tc{p.name, 0.0};
    auto v = p.value->data();
    for (std::size_t i = 0; i < v.size(); ++i) {
      const double orig = v[i];
      v[i] = orig + eps;
      const double lp = loss_at();
      v[i] = orig - eps;
      const double lm = loss_at();
      v[i] = orig;
      const double numeric = (lp - lm) / (2.0 * eps);
      tc.max_rel_error = std::max(tc.max_rel_error, relative_error((*p.grad)[i], numeric));
    }
    if (tc.max_rel_error >= out.max_rel_error) {
      out.max_rel_error = tc.max_rel_error;
      out.worst_tensor = p.name;
    }
    out.tensors.push_back(std::move(tc));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Histograms and metrics
// ---------------------------------------------------------------------------

inline constexpr std::size_t kHistogramBins = 64;

struct HistogramRow {
  std::size_t epoch = 0;
  std::size_t layer = 0;
  std::string kind;  // lambda | w
  std::size_t bin = 0;
  double lo = 0.0, hi = 0.0;
  std::size_t count = 0;

  // Bin interval excludes zero.
  bool away_from_zero() const { return lo > 0.0 || hi <= 0.0; }
};

/// 64 uniform bins spanning [min, max]; a degenerate range v becomes
/// [v - 0.5, v + 0.5]. The last bin is closed.
inline std::vector<HistogramRow> histogram(std::span<const double> values, std::size_t epoch, std::size_t layer,
                                           const std::string& kind) {
  if (values.empty()) return {};
  double lo = *std::min_element(values.begin(), values.end());
  double hi = *std::max_element(values.begin(), values.end());
  if (hi == lo) {
    lo -= 0.5;
    hi += 0.5;
  }
  const double width = (hi - lo) / static_cast<double>(kHistogramBins);
  std::vector<HistogramRow> rows(kHistogramBins);
  for (std::size_t b = 0; b < kHistogramBins; ++b) {
    rows[b] = HistogramRow{epoch, layer, kind, b, lo + width * static_cast<double>(b),
                           b + 1 == kHistogramBins ? hi : lo + width * static_cast<double>(b + 1), 0};
  }
  for (double v : values) {
    auto b = static_cast<std::size_t>(std::floor((v - lo) / width));
    rows[std::min(b, kHistogramBins - 1)].count++;
  }
  return rows;
}

/// Lambda values and linear weights w (y rows of quadratic neurons, fill
/// rows, or all rows of a linear layer) for every top-level conv entry.
inline std::vector<HistogramRow> record_histograms(Network& net, std::size_t epoch) {
  std::vector<HistogramRow> out;
  for (std::size_t idx : net.conv_indices()) {
    const ConvLayer& c = net.conv(idx);
    if (c.kind() == NeuronKind::Product) continue;
    if (!c.lambda.empty()) {
      auto rows = histogram(c.lambda.data(), epoch, idx, "lambda");
      out.insert(out.end(), rows.begin(), rows.end());
    }
    std::vector<double> w;
    const std::size_t n = c.geometry().patch();
    const std::size_t stride = c.kind() == NeuronKind::Quadratic ? c.rank() + 1 : 1;
    const std::size_t quad_rows = c.quad_neurons() * stride;
    for (std::size_t r = 0; r < c.weight.rows(); ++r) {
      if (r < quad_rows && r % stride != 0) continue;
      for (std::size_t l = 0; l < n; ++l) w.push_back(c.weight(r, l));
    }
    auto rows = histogram(w, epoch, idx, "w");
    out.insert(out.end(), rows.begin(), rows.end());
  }
  return out;
}

inline std::string fmt_real(double v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

inline void write_histogram_csv(const std::vector<HistogramRow>& rows, std::ostream& os) {
  os << "epoch,layer,kind,bin,lo,hi,count\n";
  for (const HistogramRow& r : rows) {
    os << r.epoch << ',' << r.layer << ',' << r.kind << ',' << r.bin << ',' << fmt_real(r.lo) << ','
       << fmt_real(r.hi) << ',' << r.count << '\n';
  }
}

struct MetricRow {
  std::size_t epoch = 0;
  std::size_t step = 0;
  std::string split;
  double loss = 0.0;
  double accuracy = 0.0;
  double lr_main = 0.0;
  double lr_lambda = 0.0;
};

inline void write_metrics_csv(const std::vector<MetricRow>& rows, std::ostream& os) {
  os << "epoch,step,split,loss,accuracy,lr_main,lr_lambda\n";
  for (const MetricRow& r : rows) {
    os << r.epoch << ',' << r.step << ',' << r.split << ',' << fmt_real(r.loss) << ',' << fmt_real(r.accuracy)
       << ',' << fmt_real(r.lr_main) << ',' << fmt_real(r.lr_lambda) << '\n';
  }
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

struct EvalResult {
  double loss = 0.0;
  double accuracy = 0.0;
};

inline EvalResult evaluate(Network& net, const Dataset& data, std::size_t chunk = 256) {
  EvalResult r;
  std::size_t hits = 0;
  for (std::size_t start = 0; start < data.size(); start += chunk) {
    const std::size_t end = std::min(data.size(), start + chunk);
    std::vector<std::size_t> idx(end - start);
    std::iota(idx.begin(), idx.end(), start);
    auto [x, y] = data.gather(idx);
    const Tensor logits = net.forward(x, false);
    const LossResult l = cross_entropy(logits, y);
    r.loss += l.loss * static_cast<double>(idx.size());
    hits += static_cast<std::size_t>(std::lround(accuracy(logits, y) * static_cast<double>(idx.size())));
  }
  r.loss /= static_cast<double>(data.size());
  r.accuracy = static_cast<double>(hits) / static_cast<double>(data.size());
  if (!std::isfinite(r.loss)) throw InstabilityError("non-finite evaluation loss");
  return r;
}

struct FitOptions {
  bool histograms = false;
  std::size_t histogram_every = 1;  // epochs
};

struct FitResult {
  std::vector<MetricRow> metrics;
  std::vector<HistogramRow> histograms;
  EvalResult final_test;
  std::size_t steps = 0;
};

/// Mini-batch SGD. The training order is reshuffled every epoch from
/// `shuffle_rng`; a trailing batch of one sample is dropped (batchnorm needs
/// two). Metrics are recorded per epoch for both splits.
inline FitResult fit(Network& net, const Dataset& train, const Dataset& test, const OptimConfig& cfg,
                     Rng& shuffle_rng, const FitOptions& opt = {}) {
  cfg.validate();
  auto groups = make_groups(net);
  FitResult res;
  if (opt.histograms) res.histograms = record_histograms(net, 0);

  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  bool done = false;
  for (std::size_t epoch = 0; epoch < cfg.epochs && !done; ++epoch) {
    shuffle_rng.shuffle(order);
    double loss_sum = 0.0, acc_sum = 0.0;
    std::size_t seen = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      if (end - start < 2) break;
      auto [x, y] = train.gather(std::span<const std::size_t>(order).subspan(start, end - start));
      net.zero_grad();
      const Tensor logits = net.forward(x, true);
      const LossResult l = cross_entropy(logits, y);
      if (!std::isfinite(l.loss)) {
        throw InstabilityError("non-finite training loss at epoch " + std::to_string(epoch) + ", step " +
                               std::to_string(res.steps));
      }
      net.backward(l.grad);
      sgd_step(groups, cfg, epoch);
      ++res.steps;
      loss_sum += l.loss * static_cast<double>(y.size());
      acc_sum += accuracy(logits, y) * static_cast<double>(y.size());
      seen += y.size();
      if (cfg.max_steps && res.steps >= cfg.max_steps) {
        done = true;
        break;
      }
    }
    const double lr_m = cfg.lr_main_at(epoch), lr_l = cfg.lr_lambda_at(epoch);
    if (seen) {
      res.metrics.push_back({epoch + 1, res.steps, "train", loss_sum / static_cast<double>(seen),
                             acc_sum / static_cast<double>(seen), lr_m, lr_l});
    }
    const EvalResult t = evaluate(net, test);
    res.metrics.push_back({epoch + 1, res.steps, "test", t.loss, t.accuracy, lr_m, lr_l});
    res.final_test = t;
    if (opt.histograms && ((epoch + 1) % std::max<std::size_t>(opt.histogram_every, 1) == 0 || done ||
                           epoch + 1 == cfg.epochs)) {
      auto h = record_histograms(net, epoch + 1);
      res.histograms.insert(res.histograms.end(), h.begin(), h.end());
    }
  }
  return res;
}

}  // namespace qnn
