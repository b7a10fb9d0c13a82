#include "ccnn/run_config.hpp"
#include "test_util.hpp"

#include <gtest/gtest.h>
#include <json.hpp>

#include <sys/wait.h>

#include <array>
#include <cstdio>
#include <fstream>

using namespace ccnn;
using ccnn::testing::TempDir;
using json = nlohmann::json;
namespace fs = std::filesystem;

namespace {

struct CliRun {
  int code = -1;
  std::string output;  // stdout and stderr
};

CliRun run_cli(const std::string& args) {
  const std::string cmd = std::string("'") + CCNN_CLI_PATH + "' " + args + " 2>&1";
  CliRun r;
  FILE* p = popen(cmd.c_str(), "r");
  if (!p) return r;
  std::array<char, 4096> buf{};
  while (std::size_t n = std::fread(buf.data(), 1, buf.size(), p)) r.output.append(buf.data(), n);
  const int status = pclose(p);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

std::string q(const fs::path& p) { return "'" + p.string() + "'"; }

json read_json(const fs::path& p) {
  std::ifstream in(p);
  return json::parse(in);
}

void write_file(const fs::path& p, const std::string& text) {
  std::ofstream out(p);
  out << text;
}

/// A tiny 3-class dataset on disk plus a trained one-layer model.
class CliFixture : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    tmp_ = new TempDir("ccnn-cli");
    Dataset d = ccnn::testing::random_dataset({1, 8, 8}, 40, 3, 21);
    for (std::size_t i = 0; i < d.size(); ++i) d.labels[i] = int(i % 3);
    write_idx(d, dir() / "x.idx3", dir() / "y.idx1");
    write_file(dir() / "tiny.ini", tiny_config());
    train_run_ = new CliRun(run_cli("train -c " + q(dir() / "tiny.ini") + " -o " + q(dir() / "run")));
  }
  static void TearDownTestSuite() {
    delete train_run_;
    delete tmp_;
  }

  static const fs::path& dir() { return tmp_->path(); }
  static fs::path model() { return dir() / "run" / "model.ccnn"; }
  static std::string data_args() { return "-f idx -d " + q(dir() / "x.idx3") + "," + q(dir() / "y.idx1") + " --num-classes 3"; }

  static std::string tiny_config() {
    return "[dataset]\nformat = idx\ntrain = x.idx3, y.idx1\nnum_classes = 3\nsplit = 0.6, 0.2, 0.2\n"
           "[layer1]\npatch = 3\npool = 2\nkernel = gaussian\ngamma = 1\nm = 30\nr = 3\nR = 5, 20\n"
           "[optimizer]\nepochs = 3\nbatch = 8\n";
  }

  static TempDir* tmp_;
  static CliRun* train_run_;
};

TempDir* CliFixture::tmp_ = nullptr;
CliRun* CliFixture::train_run_ = nullptr;

}  // namespace

TEST_F(CliFixture, TrainWritesModelMetricsAndSummary) {
  ASSERT_EQ(train_run_->code, 0) << train_run_->output;
  EXPECT_TRUE(fs::exists(model()));
  const fs::path metrics = dir() / "run" / "metrics.csv";
  ASSERT_TRUE(fs::exists(metrics));
  std::ifstream in(metrics);
  std::string header, row;
  std::getline(in, header);
  EXPECT_EQ(header, "stage,radius,epoch,objective,train_error,nuclear_norm,effective_rank,wall_ms");
  std::vector<std::string> rows;
  while (std::getline(in, row)) rows.push_back(row);
  ASSERT_EQ(rows.size(), 4u);  // the starting point A = 0, then one row per epoch
  const auto fields = detail::split_list(rows[0]);
  ASSERT_EQ(fields.size(), 8u);
  EXPECT_EQ(fields[2], "0");
  EXPECT_NEAR(std::stod(fields[3]), std::log(3.0), 1e-9);

  const json s = read_json(dir() / "run" / "summary.json");
  EXPECT_EQ(s["depth"], 1);
  EXPECT_TRUE(s["test_error"].is_number());
  EXPECT_EQ(s["layers"][0]["r"], 3);
  EXPECT_EQ(s["layers"][0]["radius_trials"].size(), 2u);
  int chosen = 0;
  for (const auto& t : s["layers"][0]["radius_trials"]) chosen += t["chosen"].get<bool>();
  EXPECT_EQ(chosen, 1);
  EXPECT_NE(train_run_->output.find("test error"), std::string::npos);
}

TEST_F(CliFixture, TrainingIsReproducible) {
  ASSERT_EQ(train_run_->code, 0);
  const CliRun again = run_cli("train -c " + q(dir() / "tiny.ini") + " -o " + q(dir() / "again"));
  ASSERT_EQ(again.code, 0) << again.output;
  const CcnnModel a = load_model(model());
  const CcnnModel b = load_model(dir() / "again" / "model.ccnn");
  EXPECT_EQ(a.top.A, b.top.A);
}

TEST_F(CliFixture, EvalMatchesLibraryAndWritesJson) {
  ASSERT_EQ(train_run_->code, 0);
  const CliRun r = run_cli("eval -m " + q(model()) + " " + data_args() + " --json " + q(dir() / "eval.json"));
  ASSERT_EQ(r.code, 0) << r.output;
  const json j = read_json(dir() / "eval.json");
  const EvalResult expected = evaluate(load_model(model()), load_idx(dir() / "x.idx3", dir() / "y.idx1"));
  EXPECT_EQ(j["n"], 40);
  EXPECT_DOUBLE_EQ(j["error"].get<double>(), expected.error);
  Index total = 0;
  for (const auto& row : j["confusion"])
    for (const auto& c : row) total += c.get<Index>();
  EXPECT_EQ(total, 40);
}

TEST_F(CliFixture, ConstantPredictorHasNinetyPercentErrorOnTenBalancedClasses) {
  ASSERT_EQ(train_run_->code, 0);
  Dataset d = ccnn::testing::random_dataset({1, 8, 8}, 50, 10, 3);
  for (std::size_t i = 0; i < d.size(); ++i) d.labels[i] = int(i % 10);
  write_idx(d, dir() / "ten.idx3", dir() / "ten.idx1");
  CcnnModel m = load_model(model());
  m.d2 = 10;
  m.top.A = Matrix::Zero(m.top.A.rows(), m.layers.back().pool.P_prime * 10);
  save_model(m, dir() / "zero.ccnn");
  const CliRun r = run_cli("eval -m " + q(dir() / "zero.ccnn") + " -f idx -d " + q(dir() / "ten.idx3") + "," +
                        q(dir() / "ten.idx1") + " --json " + q(dir() / "zero.json"));
  ASSERT_EQ(r.code, 0) << r.output;
  EXPECT_DOUBLE_EQ(read_json(dir() / "zero.json")["error"].get<double>(), 0.9);
}

TEST_F(CliFixture, InspectReportsShapesAndSpectrum) {
  ASSERT_EQ(train_run_->code, 0);
  const CliRun r = run_cli("inspect -m " + q(model()) + " --json " + q(dir() / "inspect.json"));
  ASSERT_EQ(r.code, 0) << r.output;
  const json j = read_json(dir() / "inspect.json");
  const CcnnModel m = load_model(model());
  EXPECT_EQ(j["layers"][0]["input"], json::array({1, 8, 8}));
  EXPECT_EQ(j["layers"][0]["output"], json::array({3, 3, 3}));
  EXPECT_EQ(j["layers"][0]["patches"], 36);
  double sum = 0;
  for (const auto& s : j["predictor"]["singular_values"]) sum += s.get<double>();
  EXPECT_NEAR(sum, j["predictor"]["nuclear_norm"].get<double>(), 1e-9);
  EXPECT_NEAR(sum, nuclear_norm(m.top.A), 1e-9);
  EXPECT_LE(sum, m.top.radius * (1 + 1e-9));
}

TEST_F(CliFixture, InspectOfZeroPredictorShowsZeroSpectrum) {
  ASSERT_EQ(train_run_->code, 0);
  CcnnModel m = load_model(model());
  m.top.A.setZero();
  m.top.radius = 0;
  save_model(m, dir() / "zero-radius.ccnn");
  const CliRun r = run_cli("inspect -m " + q(dir() / "zero-radius.ccnn") + " --json " + q(dir() / "zi.json"));
  ASSERT_EQ(r.code, 0) << r.output;
  const json j = read_json(dir() / "zi.json");
  ASSERT_FALSE(j["predictor"]["singular_values"].empty());
  for (const auto& s : j["predictor"]["singular_values"]) EXPECT_EQ(s.get<double>(), 0.0);
  EXPECT_EQ(j["predictor"]["nuclear_norm"].get<double>(), 0.0);
}

TEST_F(CliFixture, FeaturesExportsTopLayerOutputs) {
  ASSERT_EQ(train_run_->code, 0);
  const CliRun r = run_cli("features -m " + q(model()) + " " + data_args() + " --limit 3 --out " + q(dir() / "f.ccnf") +
                        " --labels-out " + q(dir() / "f.idx1"));
  ASSERT_EQ(r.code, 0) << r.output;
  const auto maps = read_features(dir() / "f.ccnf");
  ASSERT_EQ(maps.size(), 3u);
  EXPECT_EQ(maps[0].shape, (ImageShape{3, 3, 3}));
  const CcnnModel m = load_model(model());
  const Dataset d = load_idx(dir() / "x.idx3", dir() / "y.idx1");
  EXPECT_EQ(maps[1].pixels, m.conv_output(d.images[1]).pixels);
  const Dataset feats = load_feature_dataset(dir() / "f.ccnf", dir() / "f.idx1", 3);
  EXPECT_EQ(feats.labels, (std::vector<int>{d.labels[0], d.labels[1], d.labels[2]}));

  const CliRun bad = run_cli("features -m " + q(model()) + " " + data_args() + " --out " + q(dir() / "nodir" / "f.ccnf"));
  EXPECT_EQ(bad.code, 2) << bad.output;
}

TEST_F(CliFixture, InvalidGammaExitsWithConfigError) {
  const CliRun r = run_cli("train -c " + q(dir() / "tiny.ini") + " -s layer1.gamma=0 -o " + q(dir() / "g0"));
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.output.find("layer1.gamma"), std::string::npos) << r.output;
  EXPECT_FALSE(fs::exists(dir() / "g0" / "model.ccnn"));
}

TEST_F(CliFixture, DepthZeroConfigExitsWithConfigError) {
  write_file(dir() / "empty.ini", "[dataset]\nformat = idx\ntrain = x.idx3, y.idx1\n");
  const CliRun r = run_cli("train -c " + q(dir() / "empty.ini"));
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.output.find("no layers"), std::string::npos) << r.output;
}

TEST_F(CliFixture, ShapeMismatchExitsWithConfigError) {
  const CliRun r = run_cli("train -c " + q(dir() / "tiny.ini") + " -s layer1.patch=11 -o " + q(dir() / "big"));
  EXPECT_EQ(r.code, 1) << r.output;
  EXPECT_NE(r.output.find("does not fit"), std::string::npos) << r.output;
}

TEST_F(CliFixture, MissingAndCorruptFilesExitWithDataError) {
  const CliRun missing = run_cli("train -c " + q(dir() / "tiny.ini") + " -s dataset.train=nope.idx3,y.idx1 -o " +
                              q(dir() / "m"));
  EXPECT_EQ(missing.code, 2) << missing.output;
  EXPECT_EQ(run_cli("inspect -m " + q(dir() / "absent.ccnn")).code, 2);

  ASSERT_EQ(train_run_->code, 0);
  auto bytes = io::read_all(model());
  bytes[bytes.size() / 2] ^= 0x10;
  io::write_all(dir() / "corrupt.ccnn", bytes);
  const CliRun corrupt = run_cli("eval -m " + q(dir() / "corrupt.ccnn") + " " + data_args());
  EXPECT_EQ(corrupt.code, 2);
  EXPECT_NE(corrupt.output.find("checksum"), std::string::npos) << corrupt.output;
}

TEST_F(CliFixture, DivergenceExitsWithNumericalError) {
  write_file(dir() / "diverge.ini",
             "[dataset]\ntrain = x.idx3, y.idx1\nnum_classes = 3\n"
             "[layer1]\npatch = 3\nkernel = linear\ncontrast = none\nR = 1\nr = 2\n"
             "[optimizer]\nprojection = none\nloss = squared\ndecay = constant\neta0 = 1e8\nbatch = 1\n");
  const CliRun r = run_cli("train -c " + q(dir() / "diverge.ini") + " -o " + q(dir() / "div"));
  EXPECT_EQ(r.code, 3) << r.output;
  EXPECT_NE(r.output.find("non-finite"), std::string::npos) << r.output;
}

TEST_F(CliFixture, UsageErrorsExitWithConfigError) {
  EXPECT_EQ(run_cli("").code, 1);
  EXPECT_EQ(run_cli("frobnicate").code, 1);
  EXPECT_EQ(run_cli("train").code, 1);
  EXPECT_EQ(run_cli("train -p no-such-preset").code, 1);
  EXPECT_EQ(run_cli("--help").code, 0);
}

TEST(CliPreset, MnistPresetOnSubsetReportsTestError) {
  const fs::path data = CCNN_TEST_DATA_DIR;
  TempDir tmp("ccnn-preset");
  const CliRun r = run_cli("train -p mnist-ccnn1 -s dataset.train=" + (data / "mnist5k-images.idx3").string() + "," +
                        (data / "mnist5k-labels.idx1").string() +
                        " -s dataset.train_limit=2000 -s dataset.split=0.5,0.25,0.25 -s layer1.m=100 -s layer1.R=30"
                        " -s optimizer.epochs=2 -o " +
                        q(tmp.path()));
  ASSERT_EQ(r.code, 0) << r.output;
  EXPECT_TRUE(fs::exists(tmp / "model.ccnn"));
  EXPECT_TRUE(fs::exists(tmp / "metrics.csv"));
  const json s = read_json(tmp / "summary.json");
  ASSERT_TRUE(s["test_error"].is_number());
  EXPECT_EQ(s["test"]["n"], 500);
  EXPECT_LT(s["test_error"].get<double>(), 0.5);
}
