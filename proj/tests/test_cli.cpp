#include <gtest/gtest.h>

#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "qnn/cli.hpp"
#include "support.hpp"

using namespace qnn;
using namespace qnn::testing;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  int code = -1;
  std::string out, err;
};

Outcome invoke(std::vector<std::string> args) {
  std::ostringstream out, err;
  Outcome o;
  o.code = cli::run(std::move(args), out, err);
  o.out = out.str();
  o.err = err.str();
  return o;
}

std::string write_config(const TempDir& dir, const std::string& name, const nlohmann::json& j) {
  const std::string path = dir.str(name);
  std::ofstream(path) << j.dump(2);
  return path;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  return std::string(std::istreambuf_iterator<char>(is), {});
}

nlohmann::json tiny_train() {
  return {{"arch", "shapes4-narrow"},
          {"k", 3},
          {"seed", 5},
          {"optim", {{"lr_main", 0.05}, {"lr_lambda", 0.01}, {"batch_size", 16}, {"epochs", 2}}},
          {"dataset", {{"kind", "synthetic-shapes"}, {"train_size", 48}, {"test_size", 16}}}};
}

std::string save_fresh_checkpoint(const TempDir& dir) {
  Rng rng(1);
  Network net = build(shapes4(8), 3, rng);
  const std::string path = dir.str("fresh.qnet");
  save_checkpoint(net, path);
  return path;
}

}  // namespace

TEST(Cli, MissingConfigIsInputError) {
  const Outcome o = invoke({"train", "--config", "/nonexistent/config.json", "--out", "/tmp/never"});
  EXPECT_EQ(o.code, 2);
  EXPECT_NE(o.err.find("config.json"), std::string::npos);
}

TEST(Cli, UsageErrors) {
  EXPECT_EQ(invoke({}).code, 2);
  EXPECT_EQ(invoke({"frobnicate"}).code, 2);
  EXPECT_EQ(invoke({"train", "--bogus"}).code, 2);
  EXPECT_EQ(invoke({"cost-report", "--k", "0"}).code, 2);
  const Outcome help = invoke({"--help"});
  EXPECT_EQ(help.code, 0);
  EXPECT_NE(help.out.find("export-response"), std::string::npos);
}

TEST(Cli, UnknownConfigKeysRejected) {
  TempDir dir("cli_keys");
  for (const nlohmann::json& j : {nlohmann::json{{"arhc", "toy3"}}, nlohmann::json{{"optim", {{"lr", 0.1}}}},
                                  nlohmann::json{{"dataset", {{"kind", "synthetic-circle"}, {"size", 3}}}},
                                  nlohmann::json{{"dataset", {{"kind", "imagenet"}}}},
                                  nlohmann::json{{"arch", "no-such-arch"}}, nlohmann::json{{"k", "three"}}}) {
    const Outcome o = invoke({"cost-report", "--config", write_config(dir, "c.json", j)});
    EXPECT_EQ(o.code, 2) << j.dump();
    EXPECT_FALSE(o.err.empty()) << j.dump();
  }
  std::ofstream(dir.str("bad.json")) << "{ not json";
  EXPECT_EQ(invoke({"cost-report", "--config", dir.str("bad.json")}).code, 2);
}

TEST(Cli, InvalidOptimizerRatesRejected) {
  TempDir dir("cli_optim");
  const auto path = write_config(dir, "c.json", {{"optim", {{"lr_main", 0.01}, {"lr_lambda", 0.1}}}});
  EXPECT_EQ(invoke({"grad-check", "--config", path}).code, 2);
}

TEST(Cli, GradCheckPassesAndDetectsFaults) {
  TempDir dir("cli_grad");
  const Outcome ok = invoke({"grad-check", "--seed", "3"});
  EXPECT_EQ(ok.code, 0) << ok.out << ok.err;
  EXPECT_NE(ok.out.find("PASS"), std::string::npos);

  const auto path = write_config(dir, "fault.json", {{"fault_injection", "conv-backward"}});
  const Outcome bad = invoke({"grad-check", "--config", path});
  EXPECT_EQ(bad.code, 1);
  EXPECT_NE(bad.out.find("FAIL"), std::string::npos);

  const auto big = write_config(dir, "big.json", {{"arch", "resnet20-cifar"}});
  EXPECT_EQ(invoke({"grad-check", "--config", big}).code, 2);
}

TEST(Cli, CostReportToStdoutAndFiles) {
  TempDir dir("cli_cost");
  const Outcome o = invoke({"cost-report", "--k", "9", "--config",
                            write_config(dir, "c.json", {{"arch", "resnet20-cifar"}})});
  EXPECT_EQ(o.code, 0);
  EXPECT_NE(o.out.find("increase 0.2035%"), std::string::npos) << o.out;

  const std::string out = dir.str("report");
  EXPECT_EQ(invoke({"cost-report", "--out", out}).code, 0);
  EXPECT_TRUE(fs::exists(fs::path(out) / "cost_report.csv"));
  EXPECT_TRUE(fs::exists(fs::path(out) / "cost_report.txt"));
  EXPECT_EQ(invoke({"cost-report", "--out", out}).code, 2);
  EXPECT_EQ(invoke({"cost-report", "--out", out, "--force"}).code, 0);
}

TEST(Cli, CostReportAcceptsArchitectureFile) {
  TempDir dir("cli_archfile");
  const std::string arch = dir.str("arch.json");
  std::ofstream(arch) << arch_json::to_json(toy3()).dump();
  const Outcome o = invoke({"cost-report", "--config", write_config(dir, "c.json", {{"arch", arch}})});
  EXPECT_EQ(o.code, 0) << o.err;
  EXPECT_NE(o.out.find("custom architecture"), std::string::npos);
}

TEST(Cli, TrainWritesArtifactsAndIsReproducible) {
  TempDir dir("cli_train");
  const std::string cfg = write_config(dir, "c.json", tiny_train());
  const Outcome a = invoke({"train", "--config", cfg, "--out", dir.str("a")});
  ASSERT_EQ(a.code, 0) << a.err;
  EXPECT_NE(a.out.find("final test accuracy"), std::string::npos);
  const Outcome b = invoke({"train", "--config", cfg, "--out", dir.str("b")});
  ASSERT_EQ(b.code, 0) << b.err;
  EXPECT_EQ(a.out, b.out);
  for (const char* f : {"metrics.csv", "histograms.csv", "model.qnet"}) {
    const std::string x = slurp(fs::path(dir.str("a")) / f);
    EXPECT_FALSE(x.empty()) << f;
    EXPECT_EQ(x, slurp(fs::path(dir.str("b")) / f)) << f;
  }
  EXPECT_EQ(slurp(fs::path(dir.str("a")) / "metrics.csv").rfind("epoch,step,split,loss,accuracy,lr_main,lr_lambda\n", 0),
            0u);
  // A different seed changes the run.
  const Outcome c = invoke({"train", "--config", cfg, "--out", dir.str("c"), "--seed", "6"});
  ASSERT_EQ(c.code, 0);
  EXPECT_NE(slurp(fs::path(dir.str("a")) / "model.qnet"), slurp(fs::path(dir.str("c")) / "model.qnet"));
}

TEST(Cli, TrainRefusesToOverwrite) {
  TempDir dir("cli_overwrite");
  const std::string cfg = write_config(dir, "c.json", tiny_train());
  ASSERT_EQ(invoke({"train", "--config", cfg, "--out", dir.str("run")}).code, 0);
  const std::string before = slurp(fs::path(dir.str("run")) / "model.qnet");
  const Outcome again = invoke({"train", "--config", cfg, "--out", dir.str("run"), "--seed", "9"});
  EXPECT_EQ(again.code, 2);
  EXPECT_NE(again.err.find("--force"), std::string::npos);
  EXPECT_EQ(slurp(fs::path(dir.str("run")) / "model.qnet"), before);
  EXPECT_EQ(invoke({"train", "--config", cfg, "--out", dir.str("run"), "--force"}).code, 0);
  EXPECT_EQ(invoke({"train", "--config", cfg}).code, 2);  // no output directory
}

TEST(Cli, TrainRejectsMismatchedData) {
  TempDir dir("cli_mismatch");
  nlohmann::json j = tiny_train();
  j["dataset"] = {{"kind", "synthetic-circle"}, {"train_size", 10}, {"test_size", 10}};
  EXPECT_EQ(invoke({"train", "--config", write_config(dir, "c.json", j), "--out", dir.str("o")}).code, 2);
}

TEST(Cli, SweepRank) {
  TempDir dir("cli_sweep");
  nlohmann::json j = tiny_train();
  j["ks"] = nlohmann::json::array();
  EXPECT_EQ(invoke({"sweep-rank", "--config", write_config(dir, "empty.json", j), "--out", dir.str("e")}).code, 2);

  j["ks"] = {1, 2};
  j["repetitions"] = 2;
  const Outcome o = invoke({"sweep-rank", "--config", write_config(dir, "c.json", j), "--out", dir.str("s")});
  ASSERT_EQ(o.code, 0) << o.err;
  std::istringstream sweep(slurp(fs::path(dir.str("s")) / "sweep.csv"));
  std::string line;
  std::getline(sweep, line);
  EXPECT_EQ(line, "k,mean_acc,std");
  std::size_t rows = 0;
  while (std::getline(sweep, line)) ++rows;
  EXPECT_EQ(rows, 2u);
  const std::string runs = slurp(fs::path(dir.str("s")) / "sweep_runs.csv");
  EXPECT_EQ(runs.rfind("k,repetition,seed,test_accuracy\n", 0), 0u);
  EXPECT_NE(runs.find("\n2,1,6,"), std::string::npos) << runs;
}

TEST(Cli, SampleStandardDeviation) {
  const auto [m, s] = cli::mean_std({1.0, 2.0, 3.0, 4.0});
  EXPECT_DOUBLE_EQ(m, 2.5);
  EXPECT_DOUBLE_EQ(s, std::sqrt(5.0 / 3.0));
  EXPECT_EQ(cli::mean_std({0.7}).second, 0.0);
}

TEST(Cli, ExportResponseArguments) {
  TempDir dir("cli_export_args");
  const std::string ckpt = save_fresh_checkpoint(dir);
  const std::vector<double> zeros(256, 0.0);
  write_pgm(dir.str("zero.pgm"), zeros, 16, 16);
  const auto base = std::vector<std::string>{"export-response", "--checkpoint", ckpt, "--out", dir.str("o")};
  auto with = [&](std::vector<std::string> extra) {
    std::vector<std::string> a = base;
    a.insert(a.end(), extra.begin(), extra.end());
    return invoke(a).code;
  };
  EXPECT_EQ(with({"--layer", "999", "--image", dir.str("zero.pgm")}), 2);
  EXPECT_EQ(with({"--layer", "1", "--image", dir.str("zero.pgm")}), 2);  // batchnorm
  EXPECT_EQ(with({"--layer", "0"}), 2);                                  // no input
  EXPECT_EQ(with({"--layer", "0", "--image", dir.str("missing.pgm")}), 2);
  write_pgm(dir.str("small.pgm"), std::vector<double>(64, 0.0), 8, 8);
  EXPECT_EQ(with({"--layer", "0", "--image", dir.str("small.pgm")}), 2);
  EXPECT_EQ(invoke({"export-response", "--checkpoint", dir.str("none.qnet"), "--out", dir.str("p"), "--layer", "0",
                    "--image", dir.str("zero.pgm")})
                .code,
            2);
}

TEST(Cli, ZeroImageGivesConstantMapsAndZeroLambdaGivesZeroQuadratic) {
  TempDir dir("cli_export");
  const std::string ckpt = save_fresh_checkpoint(dir);
  write_pgm(dir.str("zero.pgm"), std::vector<double>(256, 0.0), 16, 16);
  const Outcome o = invoke({"export-response", "--checkpoint", ckpt, "--layer", "0", "--image", dir.str("zero.pgm"),
                            "--out", dir.str("o")});
  ASSERT_EQ(o.code, 0) << o.err;
  const fs::path out = dir.str("o");
  EXPECT_TRUE(fs::exists(out / "layer0_neuron0_linear.pgm"));
  EXPECT_TRUE(fs::exists(out / "layer0_neuron0_quadratic.pgm"));
  EXPECT_TRUE(fs::exists(out / "input.pgm"));

  std::istringstream csv(slurp(out / "responses.csv"));
  std::string line;
  std::getline(csv, line);
  EXPECT_EQ(line, "neuron,part,row,col,value");
  std::map<std::string, std::set<std::string>> values;
  std::size_t rows = 0;
  while (std::getline(csv, line)) {
    ++rows;
    std::vector<std::string> f;
    std::stringstream ss(line);
    for (std::string t; std::getline(ss, t, ',');) f.push_back(t);
    ASSERT_EQ(f.size(), 5u);
    values[f[0] + "/" + f[1]].insert(f[4]);
    if (f[1] == "quadratic") EXPECT_EQ(std::stod(f[4]), 0.0);
  }
  Network net = load_checkpoint(ckpt);
  const ConvLayer& conv = net.conv(0);
  EXPECT_EQ(rows, (2 * conv.quad_neurons() + conv.fill_neurons()) * 256u);
  for (const auto& [key, vals] : values) EXPECT_EQ(vals.size(), 1u) << key;
}

TEST(Cli, ExportFromTestSampleWritesMask) {
  TempDir dir("cli_export_sample");
  const std::string ckpt = save_fresh_checkpoint(dir);
  const std::string cfg = write_config(dir, "c.json", tiny_train());
  const Outcome o = invoke({"export-response", "--config", cfg, "--checkpoint", ckpt, "--layer", "0", "--sample", "3",
                            "--out", dir.str("o")});
  ASSERT_EQ(o.code, 0) << o.err;
  EXPECT_TRUE(fs::exists(fs::path(dir.str("o")) / "mask.pgm"));
  EXPECT_EQ(invoke({"export-response", "--config", cfg, "--checkpoint", ckpt, "--layer", "0", "--sample", "16", "--out",
                    dir.str("p")})
                .code,
            2);
}

TEST(Cli, LayerResponsesMatchNeuronParts) {
  Rng rng(4);
  Network net = build(shapes4(8), 3, rng);
  ConvLayer& conv = net.conv(0);
  for (double& v : conv.lambda.data()) v = rng.normal();
  Tensor x({1, 1, 16, 16});
  for (double& v : x.data()) v = rng.normal();
  const auto maps = cli::layer_responses(net, 0, x);
  const Tensor y = conv.forward(x);
  // For neuron j the two parts sum to the layer's y channel.
  for (std::size_t j = 0; j < conv.quad_neurons(); ++j) {
    const auto& lin = maps[2 * j];
    const auto& quad = maps[2 * j + 1];
    ASSERT_EQ(lin.part, "linear");
    ASSERT_EQ(quad.part, "quadratic");
    for (std::size_t p = 0; p < 256; ++p)
      EXPECT_NEAR(lin.values[p] + quad.values[p], y[(j * 4) * 256 + p], 1e-12);
  }
}
