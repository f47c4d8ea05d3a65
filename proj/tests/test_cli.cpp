#include "dcrf/harness.hpp"
#include "dcrf/serialize.hpp"

#include <gtest/gtest.h>

#include <sys/wait.h>

#include <filesystem>
#include <sstream>

using namespace dcrf;
namespace fs = std::filesystem;

namespace {

struct Result {
  int code = -1;
  std::string out;
  std::string err;
};

fs::path scratch() {
  const fs::path dir = fs::temp_directory_path() / "dcrf_test_cli";
  fs::create_directories(dir);
  return dir;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

Result run(const std::string& args) {
  const fs::path out = scratch() / "stdout.txt", err = scratch() / "stderr.txt";
  const std::string cmd = std::string("\"") + DCRF_CLI_PATH + "\" " + args + " >\"" + out.string() + "\" 2>\"" +
                          err.string() + "\"";
  const int status = std::system(cmd.c_str());
  return Result{WIFEXITED(status) ? WEXITSTATUS(status) : -1, slurp(out), slurp(err)};
}

std::string path(const std::string& name) { return (scratch() / name).string(); }

// Synthetic regression file shared by the train/evaluate tests.
const std::string& regression_file() {
  static const std::string file = [] {
    const std::string p = path("reg.libsvm");
    const Result r = run("gen-data synthetic --n 400 --r 0.5 --gamma 1 --seed 3 --out " + p);
    EXPECT_EQ(r.code, 0) << r.err;
    return p;
  }();
  return file;
}

}  // namespace

TEST(Cli, PlanPrintsFastRateExample) {
  const Result r = run("plan --n 10000 --r 1 --gamma 0");
  ASSERT_EQ(r.code, 0) << r.err;
  const Json j = Json::parse(r.out);
  EXPECT_NEAR(j["lambda"].get<double>(), 0.01, 1e-14);
  EXPECT_EQ(j["M"], 100);
  EXPECT_EQ(j["m"], 100);
  EXPECT_DOUBLE_EQ(j["rate_exponent"].get<double>(), -1.0);
  EXPECT_NE(r.err.find("config"), std::string::npos);
}

TEST(Cli, UsageErrorsExitOne) {
  EXPECT_EQ(run("plan --n 100 --bogus 1").code, 1);
  EXPECT_EQ(run("").code, 1);
  EXPECT_EQ(run("frobnicate").code, 1);
  EXPECT_EQ(run("train /nonexistent/file --out x").code, 1);
}

TEST(Cli, RuntimeErrorsExitTwoAndNameTheStage) {
  const Result r = run("plan --n 100 --nstar 50");
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("dcrf: error in theory"), std::string::npos) << r.err;
  const std::string bad = path("bad.csv");
  std::ofstream(bad) << "1,2,3\n1,zz,3\n";
  const Result t = run("train " + bad + " --format csv --out " + path("m.json"));
  EXPECT_EQ(t.code, 2);
  EXPECT_NE(t.err.find("error in data"), std::string::npos) << t.err;
  EXPECT_NE(t.err.find("line 2"), std::string::npos) << t.err;
}

TEST(Cli, HeavilyRegularizedModelPredictsZero) {
  const std::string model = path("zero.json");
  const Result t = run("train " + regression_file() + " --lambda 1e8 --features 20 --partitions 2 --seed 1 --out " + model);
  ASSERT_EQ(t.code, 0) << t.err;
  const Result e = run("evaluate " + model + " " + regression_file());
  ASSERT_EQ(e.code, 0) << e.err;
  const Dataset ds = load_dataset(regression_file(), FileFormat::libsvm);
  const double second_moment = ds.targets().squaredNorm() / static_cast<double>(ds.size());
  EXPECT_NEAR(Json::parse(e.out)["mse"].get<double>(), second_moment, 1e-6 * second_moment);
}

TEST(Cli, TrainIsByteDeterministic) {
  const std::string a = path("a.json"), b = path("b.json");
  const std::string args = "train " + regression_file() + " --lambda 1e-3 --features 30 --partitions 4 --seed 7 ";
  ASSERT_EQ(run(args + "--workers 1 --out " + a).code, 0);
  ASSERT_EQ(run(args + "--workers 3 --out " + b).code, 0);
  EXPECT_EQ(slurp(a), slurp(b));
  const std::string c = path("c.json");
  ASSERT_EQ(run("train " + regression_file() + " --lambda 1e-3 --features 30 --partitions 4 --seed 8 --out " + c).code, 0);
  EXPECT_NE(slurp(a), slurp(c));
}

TEST(Cli, ModelEmbedsConfigAndSeed) {
  const std::string model = path("cfg.json");
  ASSERT_EQ(run("train " + regression_file() + " --lambda 0.01 --features 12 --partitions 3 --bandwidth 2 --seed 11 --out " +
                model)
                .code,
            0);
  const Json j = read_json_file(model);
  EXPECT_EQ(j["format"], "dcrf-model/1");
  EXPECT_EQ(j["config"]["seed"], 11);
  EXPECT_EQ(j["config"]["features"], 12);
  EXPECT_EQ(j["config"]["partitions"], 3);
  EXPECT_DOUBLE_EQ(j["config"]["bandwidth"].get<double>(), 2.0);
  EXPECT_EQ(j["model"]["partition_sizes"].size(), 3u);
}

TEST(Cli, SerializationRoundTripIsExact) {
  const Dataset ds = load_dataset(regression_file(), FileFormat::libsvm);
  const FeatureMap fm = sample_uniform_features(ds.dim(), 25, KernelSpec::gaussian(0.8), 5);
  const AveragedModel model = train_dc_rf(ds, partition(ds, 3, 1), fm, RidgeConfig{1e-3});
  const std::string text = to_json(ModelFile{model, fm, 1e-3, Json::object()}).dump(2);
  const ModelFile back = model_file_from_json(Json::parse(text));
  EXPECT_EQ(back.model.weights, model.weights);
  EXPECT_EQ(back.feature_map.id(), fm.id());
  EXPECT_EQ(predict(back.model, back.feature_map, ds.points()), predict(model, fm, ds.points()));

  Json tampered = Json::parse(text);
  tampered["feature_map"]["phases"][0] = 0.5;
  EXPECT_THROW(model_file_from_json(tampered), InvalidArgument);
}

TEST(Cli, EvaluateMatchesInProcessPrediction) {
  const std::string model = path("inproc.json");
  ASSERT_EQ(run("train " + regression_file() + " --lambda 1e-3 --features 16 --partitions 2 --seed 4 --out " + model).code, 0);
  const ModelFile mf = model_file_from_json(read_json_file(model));
  const Dataset ds = load_dataset(regression_file(), FileFormat::libsvm);
  const double mse = prediction_error(predict(mf.model, mf.feature_map, ds.points()), ds.targets(), false);
  const Result e = run("evaluate " + model + " " + regression_file());
  ASSERT_EQ(e.code, 0);
  EXPECT_EQ(Json::parse(e.out)["mse"].get<double>(), mse);
}

TEST(Cli, SweepOutputsAreByteDeterministic) {
  const std::string cfg = path("sweep.json");
  std::ofstream(cfg) << R"({"task": "sweep_m", "dataset": {"n_train": 200, "n_test": 50, "d": 3, "spectrum_size": 8},
                           "grids": {"m": [1, 4], "M": [16], "lambda": [0.001]}, "repetitions": 2})";
  const std::string args = "sweep --config " + cfg + " --seed 9 --workers 2 --out " + path("s");
  ASSERT_EQ(run(args).code, 0);
  const std::string first = slurp(path("s.metrics.csv"));
  ASSERT_EQ(run(args).code, 0);
  EXPECT_EQ(first, slurp(path("s.metrics.csv")));
  EXPECT_NE(first.find("\"seed\":9"), std::string::npos);
  EXPECT_TRUE(fs::exists(path("s.summary.json")));
}

TEST(Cli, SweepWithFailingCellExitsTwo) {
  const std::string cfg = path("fail.json");
  std::ofstream(cfg) << R"({"task": "sweep_m", "dataset": {"n_train": 20, "n_test": 5, "d": 2, "spectrum_size": 8},
                           "grids": {"m": [1, 50], "M": [4]}, "repetitions": 1})";
  const Result r = run("sweep --config " + cfg + " --out " + path("f"));
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("m=50"), std::string::npos) << r.err;
  EXPECT_TRUE(fs::exists(path("f.metrics.csv")));
}

TEST(Cli, DecomposeAndFeaturesRun) {
  const std::string cfg = path("dec.json");
  std::ofstream(cfg) << R"({"d": 16, "replicates": 2})";
  const Result d = run("decompose --n 256 --r 0.5 --gamma 0.5 --features 20 --seed 2 --config " + cfg);
  ASSERT_EQ(d.code, 0) << d.err;
  const Json j = Json::parse(d.out);
  EXPECT_TRUE(j["within_bound"].get<bool>());
  EXPECT_EQ(j["config"]["seed"], 2);

  const Result f = run("features " + regression_file() + " --features 32 --lambda 0.01 --seed 1");
  ASSERT_EQ(f.code, 0) << f.err;
  const Json fj = Json::parse(f.out);
  EXPECT_GT(fj["effective_dimension"].get<double>(), 0.0);
  EXPECT_GT(fj["f_infinity_surrogate"].get<double>(), 0.0);
}

TEST(Cli, CurveFitsRate) {
  const std::string cfg = path("curve.json");
  std::ofstream(cfg) << R"({"task": "learning_curve", "dataset": {"n_test": 10, "d": 32, "noise_sigma": 0.5},
                           "features": {"family": "projection"}, "grids": {"N": [64, 128, 256]}, "repetitions": 1})";
  const Result r = run("curve --config " + cfg + " --out " + path("c"));
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_TRUE(Json::parse(r.out).contains("fit"));
}
