#pragma once

#include <cstdint>
#include <iomanip>
#include <ostream>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "qnn/arch.hpp"
#include "qnn/neurons.hpp"

namespace qnn {

/// Parameter and MAC counts of one layer for the width-matched linear
/// baseline and for the deployed neuron kind. Bias terms are counted as
/// parameters only when the layer has them, and never as MACs.
struct CostRow {
  std::string layer;
  std::string kind;  // conv | proj | batchnorm | dense
  std::int64_t n = 0;
  std::int64_t out_channels = 0;
  std::int64_t m_quadratic = 0;
  std::int64_t r_linear = 0;
  std::int64_t params_linear_baseline = 0;
  std::int64_t params_quadratic = 0;
  std::int64_t macs_linear_baseline = 0;
  std::int64_t macs_quadratic = 0;
};

inline double increase_pct(std::int64_t quadratic, std::int64_t baseline) {
  if (baseline == 0) return 0.0;
  const std::int64_t delta = quadratic - baseline;
  return 100.0 * static_cast<double>(delta) / static_cast<double>(baseline);
}

struct CostReport {
  std::vector<CostRow> rows;
  CostRow totals;
  double param_increase_pct = 0.0;
  double mac_increase_pct = 0.0;
};

/// Per-output-channel complexity (n + k/(k+1), n + 2k/(k+1)).
inline std::pair<double, double> averaged_complexity(std::int64_t n, std::int64_t k) {
  if (n < 1 || k < 1) throw DomainError("averaged_complexity: n and k must be positive");
  const double kd = static_cast<double>(k), nd = static_cast<double>(n);
  return {nd + kd / (kd + 1.0), nd + 2.0 * kd / (kd + 1.0)};
}

/// Cost of one conv layer producing an out_h x out_w map. A default
/// neuron entry is costed as quadratic(k).
inline CostRow layer_cost(const ConvSpec& spec, std::size_t k, std::size_t out_h, std::size_t out_w) {
  const NeuronSpec neuron = resolve_neuron(spec.neuron, NeuronSpec::quadratic(k));
  const std::int64_t n = static_cast<std::int64_t>(spec.fan_in());
  const std::int64_t out = static_cast<std::int64_t>(spec.out_channels);
  const std::int64_t positions = static_cast<std::int64_t>(out_h * out_w);
  const bool bias = spec.bias == BiasMode::On;

  CostRow row;
  row.kind = "conv";
  row.n = n;
  row.out_channels = out;
  row.params_linear_baseline = out * n + (bias ? out : 0);
  row.macs_linear_baseline = out * n * positions;

  switch (neuron.kind) {
    case NeuronKind::Quadratic: {
      const std::int64_t kk = static_cast<std::int64_t>(neuron.k);
      const std::int64_t m = out / (kk + 1);
      const std::int64_t r = out - m * (kk + 1);
      row.m_quadratic = m;
      row.r_linear = r;
      if (m > 0) {
        const NeuronCost nc = neuron_cost(n, kk);
        row.params_quadratic = m * nc.params + r * n + (bias ? m + r : 0);
        row.macs_quadratic = (m * nc.macs + r * n) * positions;
      } else {
        row.params_quadratic = row.params_linear_baseline;
        row.macs_quadratic = row.macs_linear_baseline;
      }
      break;
    }
    case NeuronKind::Product:
      row.params_quadratic = out * 3 * n + (bias ? out : 0);
      row.macs_quadratic = out * (3 * n + 1) * positions;
      break;
    default:
      row.r_linear = out;
      row.params_quadratic = row.params_linear_baseline;
      row.macs_quadratic = row.macs_linear_baseline;
      break;
  }
  return row;
}

inline CostRow layer_cost(const ConvSpec& spec, std::size_t k, FeatureShape out) {
  return layer_cost(spec, k, out.h, out.w);
}

namespace detail {

inline CostRow batchnorm_cost(FeatureShape s) {
  CostRow row;
  row.kind = "batchnorm";
  row.out_channels = static_cast<std::int64_t>(s.c);
  row.params_linear_baseline = row.params_quadratic = 2 * static_cast<std::int64_t>(s.c);
  // Folded scale-and-shift: one MAC per element.
  row.macs_linear_baseline = row.macs_quadratic = static_cast<std::int64_t>(s.size());
  return row;
}

}  // namespace detail

inline CostReport finalize(std::vector<CostRow> rows) {
  CostReport rep;
  rep.rows = std::move(rows);
  rep.totals.layer = "total";
  for (const CostRow& r : rep.rows) {
    rep.totals.params_linear_baseline += r.params_linear_baseline;
    rep.totals.params_quadratic += r.params_quadratic;
    rep.totals.macs_linear_baseline += r.macs_linear_baseline;
    rep.totals.macs_quadratic += r.macs_quadratic;
    rep.totals.m_quadratic += r.m_quadratic;
    rep.totals.r_linear += r.r_linear;
  }
  rep.param_increase_pct = increase_pct(rep.totals.params_quadratic, rep.totals.params_linear_baseline);
  rep.mac_increase_pct = increase_pct(rep.totals.macs_quadratic, rep.totals.macs_linear_baseline);
  return rep;
}

/// Aggregates conv (including residual projections), batchnorm and dense
/// costs. Batchnorm and dense rows are identical in both columns.
inline CostReport network_cost(const ArchDescriptor& arch, std::size_t k) {
  const ResolvedArch ra = resolve(arch, NeuronSpec::quadratic(k));
  std::vector<CostRow> rows;
  for (std::size_t i = 0; i < ra.layers.size(); ++i) {
    const ResolvedLayer& rl = ra.layers[i];
    const std::string id = std::to_string(i);
    if (const auto* conv = std::get_if<ConvSpec>(&rl.entry.spec)) {
      CostRow row = layer_cost(*conv, k, rl.out);
      row.layer = id;
      rows.push_back(row);
    } else if (std::holds_alternative<BatchNormSpec>(rl.entry.spec)) {
      CostRow row = detail::batchnorm_cost(rl.in);
      row.layer = id;
      rows.push_back(row);
    } else if (const auto* dense = std::get_if<DenseSpec>(&rl.entry.spec)) {
      CostRow row;
      row.layer = id;
      row.kind = "dense";
      row.n = static_cast<std::int64_t>(rl.in.size());
      row.out_channels = static_cast<std::int64_t>(dense->out);
      row.params_linear_baseline = row.params_quadratic = row.out_channels * (row.n + 1);
      row.macs_linear_baseline = row.macs_quadratic = row.out_channels * row.n;
      rows.push_back(row);
    } else if (rl.projection) {
      CostRow row = layer_cost(*rl.projection, k, rl.out);
      row.layer = id;
      row.kind = "proj";
      rows.push_back(row);
      CostRow bn = detail::batchnorm_cost(rl.out);
      bn.layer = id;
      rows.push_back(bn);
    }
  }
  return finalize(std::move(rows));
}

inline void write_cost_csv(const CostReport& rep, std::ostream& os) {
  os << "layer,kind,n,out_channels,m_quadratic,r_linear,params_linear_baseline,params_quadratic,"
        "macs_linear_baseline,macs_quadratic,param_increase_pct,mac_increase_pct\n";
  const auto line = [&](const CostRow& r) {
    std::ostringstream ps, ms;
    ps << std::fixed << std::setprecision(6)
       << increase_pct(r.params_quadratic, r.params_linear_baseline);
    ms << std::fixed << std::setprecision(6) << increase_pct(r.macs_quadratic, r.macs_linear_baseline);
    os << r.layer << ',' << r.kind << ',' << r.n << ',' << r.out_channels << ',' << r.m_quadratic << ','
       << r.r_linear << ',' << r.params_linear_baseline << ',' << r.params_quadratic << ','
       << r.macs_linear_baseline << ',' << r.macs_quadratic << ',' << ps.str() << ',' << ms.str() << '\n';
  };
  for (const CostRow& r : rep.rows) line(r);
  line(rep.totals);
}

inline void write_cost_text(const CostReport& rep, std::ostream& os, const std::string& title) {
  os << title << '\n'
     << "  params  baseline " << rep.totals.params_linear_baseline << "  quadratic " << rep.totals.params_quadratic
     << "  increase " << std::fixed << std::setprecision(4) << rep.param_increase_pct << "%\n"
     << "  MACs    baseline " << rep.totals.macs_linear_baseline << "  quadratic " << rep.totals.macs_quadratic
     << "  increase " << std::fixed << std::setprecision(4) << rep.mac_increase_pct << "%\n"
     << "  quadratic neurons " << rep.totals.m_quadratic << ", linear neurons " << rep.totals.r_linear << '\n';
}

}  // namespace qnn
