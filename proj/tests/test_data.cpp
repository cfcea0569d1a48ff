#include <gtest/gtest.h>

#include <fstream>

#include "support.hpp"

using namespace qnn;
using namespace qnn::testing;

namespace {

void write_bytes(const std::string& path, const std::vector<unsigned char>& bytes) {
  std::ofstream os(path, std::ios::binary);
  os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

void write_text(const std::string& path, const std::string& text) { std::ofstream(path) << text; }

std::vector<unsigned char> idx_header(unsigned char ndims, std::vector<std::uint32_t> dims) {
  std::vector<unsigned char> b = {0, 0, 0x08, ndims};
  for (std::uint32_t d : dims)
    for (int s = 24; s >= 0; s -= 8) b.push_back(static_cast<unsigned char>(d >> s));
  return b;
}

std::string message_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.what();
  }
  return {};
}

}  // namespace

TEST(Synthetic, CircleIsBalancedAndLabelledByRadius) {
  const Dataset d = synthetic_circle(1000, 7);
  ASSERT_EQ(d.size(), 1000u);
  EXPECT_EQ(d.classes, 2u);
  std::size_t inside = 0;
  for (std::size_t i = 0; i < d.size(); ++i) {
    const double a = d.x[2 * i], b = d.x[2 * i + 1];
    ASSERT_LE(std::abs(a), 1.0);
    ASSERT_LE(std::abs(b), 1.0);
    ASSERT_EQ(d.labels[i], a * a + b * b < kCircleRadius * kCircleRadius ? 1 : 0);
    inside += d.labels[i];
  }
  EXPECT_NEAR(static_cast<double>(inside) / 1000.0, 0.5, 0.1);
}

TEST(Synthetic, XorLabels) {
  const Dataset d = synthetic_xor(500, 3);
  std::size_t ones = 0;
  for (std::size_t i = 0; i < d.size(); ++i) {
    ASSERT_EQ(d.labels[i], d.x[2 * i] * d.x[2 * i + 1] > 0.0 ? 1 : 0);
    ones += d.labels[i];
  }
  EXPECT_NEAR(static_cast<double>(ones) / 500.0, 0.5, 0.1);
}

TEST(Synthetic, SeedsAreReproducible) {
  EXPECT_EQ(synthetic_circle(50, 1).x, synthetic_circle(50, 1).x);
  EXPECT_NE(synthetic_circle(50, 1).x, synthetic_circle(50, 2).x);
  EXPECT_EQ(synthetic_shapes(20, 4).x, synthetic_shapes(20, 4).x);
}

TEST(Synthetic, ShapesMatchTheirMasks) {
  std::vector<ShapeSample> samples;
  const Dataset d = synthetic_shapes(200, 5, 0.0, &samples);
  ASSERT_EQ(samples.size(), 200u);
  EXPECT_EQ(d.x.shape(), (Shape{200, 1, 16, 16}));
  std::vector<std::size_t> per_class(kShapeClasses);
  for (std::size_t i = 0; i < d.size(); ++i) {
    const auto mask = shape_mask(samples[i]);
    ASSERT_EQ(d.labels[i], samples[i].label);
    ++per_class[static_cast<std::size_t>(d.labels[i])];
    std::size_t on = 0;
    for (std::size_t p = 0; p < mask.size(); ++p) {
      ASSERT_EQ(d.x[i * 256 + p], mask[p] ? 1.0 : 0.0);
      on += mask[p];
    }
    ASSERT_GT(on, 0u);
    ASSERT_LT(on, 256u);
  }
  for (std::size_t c : per_class) EXPECT_GT(c, 20u);
}

TEST(Dataset, SplitsAreDisjointDraws) {
  DatasetSpec s;
  s.train_size = 30;
  s.test_size = 20;
  s.seed = 9;
  s.normalize = false;
  const TrainTest tt = load_dataset(s);
  const Dataset all = synthetic_circle(50, 9);
  EXPECT_EQ(tt.train.size(), 30u);
  EXPECT_EQ(tt.test.size(), 20u);
  for (std::size_t i = 0; i < 40; ++i) EXPECT_EQ(tt.test.x[i], all.x[60 + i]);
}

TEST(Dataset, NormalizationUsesTrainStatistics) {
  DatasetSpec s;
  s.kind = DatasetKind::Shapes;
  s.train_size = 300;
  s.test_size = 50;
  s.seed = 2;
  Normalization z;
  const TrainTest tt = load_dataset(s, &z);
  const std::size_t f = tt.train.sample_size();
  ASSERT_EQ(z.mean.size(), f);
  for (std::size_t j = 0; j < f; ++j) {
    double m = 0.0, v = 0.0;
    for (std::size_t i = 0; i < tt.train.size(); ++i) m += tt.train.x[i * f + j];
    m /= 300.0;
    for (std::size_t i = 0; i < tt.train.size(); ++i) v += std::pow(tt.train.x[i * f + j] - m, 2);
    ASSERT_NEAR(m, 0.0, 1e-10);
    ASSERT_NEAR(v / 300.0, 1.0, 1e-9);
  }
  // The test split goes through the same affine map.
  s.normalize = false;
  const TrainTest raw = load_dataset(s);
  for (std::size_t i = 0; i < raw.test.x.size(); ++i)
    ASSERT_NEAR(tt.test.x[i], (raw.test.x[i] - z.mean[i % f]) * z.inv_std[i % f], 1e-12);
}

TEST(Idx, RoundTrip) {
  TempDir dir("idx");
  auto images = idx_header(3, {2, 2, 3});
  for (unsigned char v : {0, 51, 102, 153, 204, 255, 255, 0, 0, 0, 0, 0}) images.push_back(v);
  auto labels = idx_header(1, {2});
  labels.push_back(1);
  labels.push_back(4);
  write_bytes(dir.str("im"), images);
  write_bytes(dir.str("lb"), labels);
  const Dataset d = load_idx(dir.str("im"), dir.str("lb"));
  EXPECT_EQ(d.x.shape(), (Shape{2, 1, 2, 3}));
  EXPECT_EQ(d.labels, (std::vector<int>{1, 4}));
  EXPECT_EQ(d.classes, 5u);
  EXPECT_DOUBLE_EQ(d.x[1], 0.2);
  EXPECT_DOUBLE_EQ(d.x[6], 1.0);
}

TEST(Idx, BadMagicAndTruncation) {
  TempDir dir("idxbad");
  auto images = idx_header(3, {1, 2, 2});
  images[2] = 0x0D;  // float payload type
  for (int i = 0; i < 4; ++i) images.push_back(0);
  write_bytes(dir.str("im"), images);
  const std::string msg = message_of([&] { read_idx(dir.str("im")); });
  EXPECT_NE(msg.find("magic"), std::string::npos) << msg;
  EXPECT_NE(msg.find("byte 0"), std::string::npos) << msg;

  auto shortfile = idx_header(3, {1, 2, 2});
  shortfile.push_back(0);
  write_bytes(dir.str("short"), shortfile);
  EXPECT_THROW(read_idx(dir.str("short")), ParseError);
  write_bytes(dir.str("hdr"), {0, 0, 8});
  EXPECT_THROW(read_idx(dir.str("hdr")), ParseError);
  EXPECT_THROW(read_idx(dir.str("missing")), ParseError);
}

TEST(Csv, ParsesRowsAndSkipsBlankLines) {
  TempDir dir("csv");
  write_text(dir.str("a.csv"), "0.5,-1,0\n\n2,3e-1,1\r\n");
  const Dataset d = load_csv_vectors(dir.str("a.csv"));
  EXPECT_EQ(d.x.shape(), (Shape{2, 2, 1, 1}));
  EXPECT_EQ(d.x.values(), (std::vector<double>{0.5, -1.0, 2.0, 0.3}));
  EXPECT_EQ(d.labels, (std::vector<int>{0, 1}));
}

TEST(Csv, ErrorsNameTheLine) {
  TempDir dir("csvbad");
  write_text(dir.str("a.csv"), "1,2,0\n1,abc,1\n");
  std::string msg = message_of([&] { load_csv_vectors(dir.str("a.csv")); });
  EXPECT_NE(msg.find("line 2"), std::string::npos) << msg;
  EXPECT_NE(msg.find("abc"), std::string::npos) << msg;

  write_text(dir.str("b.csv"), "1,2,0\n1,2,1\n1,2,3,0\n");
  msg = message_of([&] { load_csv_vectors(dir.str("b.csv")); });
  EXPECT_NE(msg.find("line 3"), std::string::npos) << msg;

  write_text(dir.str("c.csv"), "1,2,0.5\n");
  EXPECT_THROW(load_csv_vectors(dir.str("c.csv")), ParseError);
  write_text(dir.str("d.csv"), "");
  EXPECT_THROW(load_csv_vectors(dir.str("d.csv")), ParseError);
}

TEST(Pgm, RoundTrip) {
  TempDir dir("pgm");
  std::vector<double> v(12);
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<double>(i * 23) / 253.0;
  write_pgm(dir.str("a.pgm"), v, 3, 4);
  const Pgm p = read_pgm(dir.str("a.pgm"));
  EXPECT_EQ(p.width, 4u);
  EXPECT_EQ(p.height, 3u);
  ASSERT_EQ(p.pixels.size(), 12u);
  for (std::size_t i = 0; i < 12; ++i) EXPECT_NEAR(p.pixels[i], v[i], 0.5 / 255.0);
}

TEST(Pgm, ConstantMapIsZeroAndHeaderErrors) {
  TempDir dir("pgmbad");
  write_pgm(dir.str("c.pgm"), std::vector<double>(6, 3.5), 2, 3);
  for (double px : read_pgm(dir.str("c.pgm")).pixels) EXPECT_EQ(px, 0.0);
  write_text(dir.str("p2.pgm"), "P2\n1 1\n255\n0\n");
  EXPECT_THROW(read_pgm(dir.str("p2.pgm")), ParseError);
  write_text(dir.str("short.pgm"), "P5\n2 2\n255\nab");
  EXPECT_THROW(read_pgm(dir.str("short.pgm")), ParseError);
  EXPECT_THROW(write_pgm(dir.str("x.pgm"), std::vector<double>(5), 2, 3), ShapeError);
}
