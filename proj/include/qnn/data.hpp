#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <numbers>
#include <sstream>
#include <string>
#include <vector>

#include "qnn/rng.hpp"
#include "qnn/tensor.hpp"

namespace qnn {

/// Samples as an (N, C, H, W) tensor with integer labels in [0, classes).
struct Dataset {
  Tensor x;
  std::vector<int> labels;
  std::size_t classes = 0;

  std::size_t size() const { return labels.size(); }
  std::size_t sample_size() const { return x.size() / labels.size(); }

  std::pair<Tensor, std::vector<int>> gather(std::span<const std::size_t> idx) const {
    const std::size_t s = sample_size();
    Shape shape = x.shape();
    shape[0] = idx.size();
    Tensor out(shape);
    std::vector<int> y(idx.size());
    for (std::size_t i = 0; i < idx.size(); ++i) {
      std::copy_n(x.data().data() + idx[i] * s, s, out.data().data() + i * s);
      y[i] = labels[idx[i]];
    }
    return {std::move(out), std::move(y)};
  }
};

struct TrainTest {
  Dataset train, test;
};

enum class DatasetKind { Circle, Xor, Shapes, IdxImages, CsvVectors };

struct DatasetSpec {
  DatasetKind kind = DatasetKind::Circle;
  std::size_t train_size = 1000;
  std::size_t test_size = 1000;
  std::uint64_t seed = 0;
  bool normalize = true;
  double noise = 0.1;  // synthetic-shapes pixel noise
  std::string train_images, train_labels, test_images, test_labels;  // idx-images
  std::string train_path, test_path;                                  // csv-vectors
};

// Radius whose disk covers half of [-1, 1]^2.
inline const double kCircleRadius = std::sqrt(2.0 / std::numbers::pi);

namespace detail {

inline Dataset make_points(std::size_t count, Rng& rng, bool circle) {
  Dataset d{Tensor({std::max<std::size_t>(count, 1), 2, 1, 1}), std::vector<int>(count), 2};
  for (std::size_t i = 0; i < count; ++i) {
    const double a = rng.uniform(-1.0, 1.0), b = rng.uniform(-1.0, 1.0);
    d.x[2 * i] = a;
    d.x[2 * i + 1] = b;
    d.labels[i] = circle ? (a * a + b * b < kCircleRadius * kCircleRadius ? 1 : 0) : (a * b > 0.0 ? 1 : 0);
  }
  return d;
}

}  // namespace detail

inline Dataset synthetic_circle(std::size_t count, std::uint64_t seed) {
  Rng rng(seed);
  return detail::make_points(count, rng, true);
}

inline Dataset synthetic_xor(std::size_t count, std::uint64_t seed) {
  Rng rng(seed);
  return detail::make_points(count, rng, false);
}

// ---------------------------------------------------------------------------
// synthetic-shapes: 16x16 single-channel disk / ring / square / cross
// ---------------------------------------------------------------------------

inline constexpr std::size_t kShapeSide = 16;
inline constexpr int kShapeClasses = 4;

struct ShapeSample {
  int label = 0;
  double cx = 0, cy = 0, scale = 0;
};

inline bool shape_contains(const ShapeSample& s, double px, double py) {
  const double dx = px - s.cx, dy = py - s.cy;
  const double dist = std::sqrt(dx * dx + dy * dy);
  switch (s.label) {
    case 0: return dist <= s.scale;
    case 1: return dist <= s.scale && dist >= s.scale - 1.5;
    case 2: return std::abs(dx) <= 0.8 * s.scale && std::abs(dy) <= 0.8 * s.scale;
    default:
      return (std::abs(dx) <= 1.0 && std::abs(dy) <= s.scale) || (std::abs(dy) <= 1.0 && std::abs(dx) <= s.scale);
  }
}

/// Object mask (row-major, kShapeSide^2) for a generated sample.
inline std::vector<bool> shape_mask(const ShapeSample& s) {
  std::vector<bool> m(kShapeSide * kShapeSide);
  for (std::size_t r = 0; r < kShapeSide; ++r)
    for (std::size_t c = 0; c < kShapeSide; ++c)
      m[r * kShapeSide + c] = shape_contains(s, static_cast<double>(c), static_cast<double>(r));
  return m;
}

inline ShapeSample draw_shape(Rng& rng) {
  ShapeSample s;
  s.label = static_cast<int>(rng.below(kShapeClasses));
  s.cx = rng.uniform(5.5, 9.5);
  s.cy = rng.uniform(5.5, 9.5);
  s.scale = rng.uniform(3.0, 5.0);
  return s;
}

inline void render_shape(const ShapeSample& s, double noise, Rng& rng, double* out) {
  for (std::size_t r = 0; r < kShapeSide; ++r)
    for (std::size_t c = 0; c < kShapeSide; ++c) {
      const double v = shape_contains(s, static_cast<double>(c), static_cast<double>(r)) ? 1.0 : 0.0;
      out[r * kShapeSide + c] = v + (noise > 0.0 ? rng.normal(0.0, noise) : 0.0);
    }
}

inline Dataset synthetic_shapes(std::size_t count, std::uint64_t seed, double noise = 0.1,
                                std::vector<ShapeSample>* samples = nullptr) {
  Rng rng(seed);
  Dataset d{Tensor({std::max<std::size_t>(count, 1), 1, kShapeSide, kShapeSide}), std::vector<int>(count),
            kShapeClasses};
  if (samples) samples->clear();
  for (std::size_t i = 0; i < count; ++i) {
    const ShapeSample s = draw_shape(rng);
    render_shape(s, noise, rng, d.x.data().data() + i * kShapeSide * kShapeSide);
    d.labels[i] = s.label;
    if (samples) samples->push_back(s);
  }
  return d;
}

// ---------------------------------------------------------------------------
// File formats
// ---------------------------------------------------------------------------

namespace detail {

inline std::vector<unsigned char> read_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ParseError("cannot open " + path);
  return std::vector<unsigned char>(std::istreambuf_iterator<char>(is), {});
}

inline std::uint32_t be32(const std::vector<unsigned char>& b, std::size_t off, const std::string& path) {
  if (off + 4 > b.size()) throw ParseError(path + ": truncated IDX header at byte " + std::to_string(off));
  return (std::uint32_t{b[off]} << 24) | (std::uint32_t{b[off + 1]} << 16) | (std::uint32_t{b[off + 2]} << 8) |
         std::uint32_t{b[off + 3]};
}

}  // namespace detail

/// IDX file of unsigned bytes: big-endian magic 0x0000 08 <ndims>, then
/// ndims u32 extents, then the payload.
struct IdxArray {
  std::vector<std::size_t> dims;
  std::vector<unsigned char> data;
};

inline IdxArray read_idx(const std::string& path) {
  const auto bytes = detail::read_file(path);
  const std::uint32_t magic = detail::be32(bytes, 0, path);
  if ((magic >> 8) != 0x08 || (magic & 0xff) == 0) {
    throw ParseError(path + ": bad IDX magic at byte 0 (expected unsigned-byte type 0x08)");
  }
  IdxArray a;
  const std::size_t nd = magic & 0xff;
  std::size_t total = 1;
  for (std::size_t i = 0; i < nd; ++i) {
    a.dims.push_back(detail::be32(bytes, 4 + 4 * i, path));
    total *= a.dims.back();
  }
  const std::size_t off = 4 + 4 * nd;
  if (bytes.size() != off + total) {
    throw ParseError(path + ": IDX payload has " + std::to_string(bytes.size() - std::min(bytes.size(), off)) +
                     " bytes starting at byte " + std::to_string(off) + ", expected " + std::to_string(total));
  }
  a.data.assign(bytes.begin() + static_cast<std::ptrdiff_t>(off), bytes.end());
  return a;
}

inline Dataset load_idx(const std::string& images, const std::string& labels) {
  const IdxArray im = read_idx(images);
  const IdxArray lb = read_idx(labels);
  if (im.dims.size() != 3 && im.dims.size() != 4) throw ParseError(images + ": expected 3 or 4 IDX dimensions");
  if (lb.dims.size() != 1 || lb.dims[0] != im.dims[0]) throw ParseError(labels + ": label count does not match images");
  const std::size_t n = im.dims[0];
  const std::size_t c = im.dims.size() == 4 ? im.dims[1] : 1;
  const std::size_t h = im.dims[im.dims.size() - 2], w = im.dims.back();
  Dataset d;
  d.x = Tensor({n, c, h, w});
  for (std::size_t i = 0; i < im.data.size(); ++i) d.x[i] = im.data[i] / 255.0;
  d.labels.resize(n);
  int max_label = 0;
  for (std::size_t i = 0; i < n; ++i) {
    d.labels[i] = lb.data[i];
    max_label = std::max(max_label, d.labels[i]);
  }
  d.classes = static_cast<std::size_t>(max_label) + 1;
  return d;
}

/// Header-less CSV rows: features..., integer label.
inline Dataset load_csv_vectors(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ParseError("cannot open " + path);
  std::vector<double> feats;
  std::vector<int> labels;
  std::size_t width = 0;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty() || line == "\r") continue;
    if (line.back() == '\r') line.pop_back();
    std::vector<std::string> fields;
    std::stringstream ss(line);
    std::string f;
    while (std::getline(ss, f, ',')) fields.push_back(f);
    if (fields.size() < 2) throw ParseError(path + ": line " + std::to_string(lineno) + " needs features and a label");
    if (width == 0) width = fields.size() - 1;
    if (fields.size() - 1 != width) throw ParseError(path + ": line " + std::to_string(lineno) + " has a different width");
    for (std::size_t i = 0; i < fields.size(); ++i) {
      std::size_t used = 0;
      double v = 0.0;
      try {
        v = std::stod(fields[i], &used);
      } catch (const std::exception&) {
        used = 0;
      }
      while (used < fields[i].size() && std::isspace(static_cast<unsigned char>(fields[i][used]))) ++used;
      if (used == 0 || used != fields[i].size() || !std::isfinite(v)) {
        throw ParseError(path + ": line " + std::to_string(lineno) + ", field " + std::to_string(i + 1) +
                         " is not numeric: '" + fields[i] + "'");
      }
      if (i + 1 == fields.size()) {
        if (v < 0 || v != std::floor(v)) throw ParseError(path + ": line " + std::to_string(lineno) + " label must be a non-negative integer");
        labels.push_back(static_cast<int>(v));
      } else {
        feats.push_back(v);
      }
    }
  }
  if (labels.empty()) throw ParseError(path + ": no rows");
  Dataset d;
  d.x = Tensor({labels.size(), width, 1, 1}, std::move(feats));
  d.labels = std::move(labels);
  d.classes = static_cast<std::size_t>(*std::max_element(d.labels.begin(), d.labels.end())) + 1;
  return d;
}

struct Normalization {
  std::vector<double> mean, inv_std;

  void apply(Tensor& x) const {
    const std::size_t f = mean.size();
    for (std::size_t i = 0; i < x.size(); ++i) x[i] = (x[i] - mean[i % f]) * inv_std[i % f];
  }
};

/// Per-feature zero-mean / unit-variance statistics of a training split.
inline Normalization fit_normalization(const Dataset& train) {
  const std::size_t f = train.sample_size(), n = train.size();
  Normalization z{std::vector<double>(f, 0.0), std::vector<double>(f, 1.0)};
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < f; ++j) z.mean[j] += train.x[i * f + j];
  for (double& m : z.mean) m /= static_cast<double>(n);
  std::vector<double> var(f, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < f; ++j) {
      const double d = train.x[i * f + j] - z.mean[j];
      var[j] += d * d;
    }
  for (std::size_t j = 0; j < f; ++j) {
    const double sd = std::sqrt(var[j] / static_cast<double>(n));
    z.inv_std[j] = sd > 1e-12 ? 1.0 / sd : 1.0;
  }
  return z;
}

namespace detail {

inline std::pair<Dataset, Dataset> split(const Dataset& all, std::size_t train_size) {
  std::vector<std::size_t> a(train_size), b(all.size() - train_size);
  std::iota(a.begin(), a.end(), std::size_t{0});
  std::iota(b.begin(), b.end(), train_size);
  auto [xa, ya] = all.gather(a);
  auto [xb, yb] = all.gather(b);
  return {Dataset{std::move(xa), std::move(ya), all.classes}, Dataset{std::move(xb), std::move(yb), all.classes}};
}

}  // namespace detail

/// Builds the train/test pair. Synthetic kinds draw both splits from one
/// seeded stream (train first), so they are disjoint samples.
inline TrainTest load_dataset(const DatasetSpec& spec, Normalization* stats = nullptr) {
  TrainTest tt;
  switch (spec.kind) {
    case DatasetKind::Circle:
    case DatasetKind::Xor:
    case DatasetKind::Shapes: {
      if (spec.train_size < 1 || spec.test_size < 1) throw ParseError("dataset sizes must be positive");
      const std::size_t total = spec.train_size + spec.test_size;
      Dataset all = spec.kind == DatasetKind::Circle ? synthetic_circle(total, spec.seed)
                    : spec.kind == DatasetKind::Xor  ? synthetic_xor(total, spec.seed)
                                                     : synthetic_shapes(total, spec.seed, spec.noise);
      auto [a, b] = detail::split(all, spec.train_size);
      tt.train = std::move(a);
      tt.test = std::move(b);
      break;
    }
    case DatasetKind::IdxImages:
      tt.train = load_idx(spec.train_images, spec.train_labels);
      tt.test = load_idx(spec.test_images, spec.test_labels);
      break;
    case DatasetKind::CsvVectors:
      tt.train = load_csv_vectors(spec.train_path);
      tt.test = load_csv_vectors(spec.test_path);
      break;
  }
  if (tt.train.sample_size() != tt.test.sample_size()) throw ParseError("train and test samples differ in size");
  tt.train.classes = tt.test.classes = std::max(tt.train.classes, tt.test.classes);
  if (spec.normalize) {
    const Normalization z = fit_normalization(tt.train);
    z.apply(tt.train.x);
    z.apply(tt.test.x);
    if (stats) *stats = z;
  } else if (stats) {
    const std::size_t f = tt.train.sample_size();
    *stats = Normalization{std::vector<double>(f, 0.0), std::vector<double>(f, 1.0)};
  }
  return tt;
}

// ---------------------------------------------------------------------------
// PGM (P5) images
// ---------------------------------------------------------------------------

/// Writes a map min-max normalized to 0..255; constant maps become 0.
inline void write_pgm(const std::string& path, std::span<const double> values, std::size_t h, std::size_t w) {
  if (values.size() != h * w) throw ShapeError("write_pgm: value count does not match extent");
  double lo = values[0], hi = values[0];
  for (double v : values) {
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw ParseError("cannot open " + path + " for writing");
  os << "P5\n" << w << ' ' << h << "\n255\n";
  for (double v : values) {
    const double t = hi > lo ? (v - lo) / (hi - lo) : 0.0;
    os.put(static_cast<char>(static_cast<unsigned char>(std::lround(t * 255.0))));
  }
}

struct Pgm {
  std::size_t width = 0, height = 0;
  std::vector<double> pixels;  // scaled to [0, 1]
};

inline Pgm read_pgm(const std::string& path) {
  const auto bytes = detail::read_file(path);
  std::size_t pos = 0;
  const auto token = [&]() {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(bytes[pos])) {
        ++pos;
      } else {
        break;
      }
    }
    std::string t;
    while (pos < bytes.size() && !std::isspace(bytes[pos])) t.push_back(static_cast<char>(bytes[pos++]));
    return t;
  };
  if (token() != "P5") throw ParseError(path + ": not a binary PGM (P5) at byte 0");
  Pgm p;
  try {
    p.width = std::stoul(token());
    p.height = std::stoul(token());
    const unsigned long maxval = std::stoul(token());
    if (maxval == 0 || maxval > 255) throw ParseError(path + ": only 8-bit PGM is supported");
    ++pos;
    if (bytes.size() - pos != p.width * p.height) {
      throw ParseError(path + ": pixel payload at byte " + std::to_string(pos) + " has the wrong length");
    }
    for (std::size_t i = 0; i < p.width * p.height; ++i) p.pixels.push_back(bytes[pos + i] / static_cast<double>(maxval));
  } catch (const std::invalid_argument&) {
    throw ParseError(path + ": malformed PGM header near byte " + std::to_string(pos));
  }
  return p;
}

}  // namespace qnn
