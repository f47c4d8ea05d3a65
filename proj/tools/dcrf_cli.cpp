// dcrf: command-line front end for distributed random-feature ridge regression.
//
// Exit codes: 0 success, 1 usage error, 2 runtime error.

#include "dcrf/dcrf.hpp"

#include "CLI11.hpp"

#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

namespace {

using dcrf::Index;
using dcrf::Json;

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Where a runtime failure happened, for the error message.
std::string g_stage = "cli";

void announce(const std::string& command, const Json& resolved) {
  std::cerr << "dcrf " << command << " config: " << resolved.dump() << '\n';
}

Json load_config(const std::string& path) {
  if (path.empty()) return Json::object();
  Json j = dcrf::read_json_file(path);
  if (!j.is_object()) throw UsageError("--config must hold a JSON object");
  return j;
}

void check_keys(const Json& j, std::initializer_list<const char*> keys, const std::string& command) {
  for (const auto& [k, v] : j.items()) {
    bool known = false;
    for (const char* key : keys) known = known || k == key;
    if (!known) throw UsageError("unknown key '" + k + "' in --config for " + command);
  }
}

void emit(const Json& j, const std::string& out) {
  if (!out.empty()) dcrf::write_json_file(out, j);
  std::cout << j.dump(2) << '\n';
}

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

// ---------------------------------------------------------------------------

struct Common {
  std::uint64_t seed = 0;
  unsigned workers = dcrf::default_workers();
  std::string out;
  std::string config;
  std::string format = "libsvm";
  std::optional<Index> limit;
};

void write_dataset(const std::string& path, const dcrf::Dataset& ds, dcrf::FileFormat format, const Json& header) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw dcrf::InvalidArgument("cannot write '" + path + "'");
  f << "# " << header.dump() << '\n';
  for (Index i = 0; i < ds.size(); ++i) {
    if (format == dcrf::FileFormat::csv) {
      for (Index c = 0; c < ds.dim(); ++c) f << fmt(ds.points()(i, c)) << ',';
      f << fmt(ds.targets()(i)) << '\n';
    } else {
      f << fmt(ds.targets()(i));
      for (Index c = 0; c < ds.dim(); ++c) f << ' ' << c + 1 << ':' << fmt(ds.points()(i, c));
      f << '\n';
    }
  }
  if (!f) throw dcrf::InvalidArgument("failed writing '" + path + "'");
}

int cmd_gen_data(const std::string& kind, Index n, double r, double gamma, const Common& c) {
  if (c.out.empty()) throw UsageError("gen-data needs --out");
  const Json extra = load_config(c.config);
  const auto format = dcrf::parse_file_format(c.format);
  g_stage = "data";
  if (kind == "covtype") {
    check_keys(extra, {}, "gen-data covtype");
    const Json resolved{{"kind", kind}, {"rows", n}, {"seed", c.seed}, {"out", c.out}};
    announce("gen-data", resolved);
    if (format != dcrf::FileFormat::libsvm) throw UsageError("the covtype-style corpus is written as libsvm");
    dcrf::write_covtype_like(c.out, n, c.seed);
    emit(resolved, "");
    return 0;
  }
  if (kind != "synthetic") throw UsageError("gen-data kind must be 'synthetic' or 'covtype'");
  check_keys(extra, {"n_test", "d", "noise_sigma", "spectrum_size", "source_decay"}, "gen-data synthetic");
  dcrf::SyntheticSpec spec;
  spec.n_train = n;
  spec.r = r;
  spec.gamma = gamma;
  spec.seed = c.seed;
  spec.n_test = extra.value("n_test", spec.n_test);
  spec.d = extra.value("d", spec.d);
  spec.spectrum_size = extra.value("spectrum_size", std::max(spec.spectrum_size, spec.d));
  spec.noise_sigma = extra.value("noise_sigma", spec.noise_sigma);
  spec.source_decay = extra.value("source_decay", spec.source_decay);
  const Json resolved{{"kind", kind},
                      {"n_train", spec.n_train},
                      {"n_test", spec.n_test},
                      {"d", spec.d},
                      {"r", spec.r},
                      {"gamma", spec.gamma},
                      {"noise_sigma", spec.noise_sigma},
                      {"spectrum_size", spec.spectrum_size},
                      {"source_decay", spec.source_decay},
                      {"seed", spec.seed},
                      {"format", c.format},
                      {"out", c.out}};
  announce("gen-data", resolved);
  const dcrf::SyntheticData sd = dcrf::generate_synthetic(spec);
  write_dataset(c.out, sd.train, format, resolved);
  write_dataset(c.out + ".test", sd.test, format, resolved);
  Json summary = resolved;
  summary["flags"] = sd.flags;
  summary["files"] = {c.out, c.out + ".test"};
  emit(summary, "");
  return 0;
}

int cmd_plan(Index n, std::optional<Index> nstar, double r, double gamma, double alpha, const Common& c) {
  const Json extra = load_config(c.config);
  check_keys(extra, {"safety_c", "operator_norm"}, "plan");
  const double safety = extra.value("safety_c", 1.0);
  std::optional<double> op;
  if (extra.contains("operator_norm")) op = extra["operator_norm"].get<double>();
  const Index n_star = nstar.value_or(n);
  announce("plan", Json{{"N", n}, {"N_star", n_star}, {"r", r}, {"gamma", gamma}, {"alpha", alpha},
                        {"safety_c", safety}});
  g_stage = "theory";
  emit(dcrf::to_json(dcrf::plan_parameters(n, n_star, dcrf::RateParams{r, gamma, alpha}, safety, op)), c.out);
  return 0;
}

dcrf::Dataset load_data(const std::string& path, const Common& c, bool csv_header) {
  g_stage = "data";
  dcrf::LoadOptions opts;
  opts.csv_header = csv_header;
  return dcrf::load_dataset(path, dcrf::parse_file_format(c.format), c.limit, c.seed, opts);
}

int cmd_train(const std::string& data, double lambda, Index M, Index m, double bandwidth, const Common& c) {
  if (c.out.empty()) throw UsageError("train needs --out for the model file");
  const Json extra = load_config(c.config);
  check_keys(extra, {"family", "csv_header"}, "train");
  const auto family = dcrf::parse_feature_family(extra.value("family", std::string("fourier")));
  const bool csv_header = extra.value("csv_header", false);
  const Json resolved{{"data", data},   {"format", c.format}, {"limit", c.limit ? Json(*c.limit) : Json(nullptr)},
                      {"csv_header", csv_header}, {"lambda", lambda}, {"features", M},
                      {"partitions", m}, {"bandwidth", bandwidth}, {"family", dcrf::to_string(family)},
                      {"seed", c.seed}};
  announce("train", resolved);
  const dcrf::Dataset ds = load_data(data, c, csv_header);
  g_stage = "features";
  const auto kernel = family == dcrf::FeatureFamily::fourier ? dcrf::KernelSpec::gaussian(bandwidth)
                                                              : dcrf::KernelSpec::linear();
  const dcrf::FeatureMap fm =
      dcrf::sample_uniform_features(ds.dim(), M, kernel, dcrf::mix_seed(c.seed, 0x464dULL), family);
  g_stage = "solver";
  const dcrf::Partitioning part = dcrf::partition(ds, m, dcrf::mix_seed(c.seed, 0x5041ULL));
  const dcrf::AveragedModel model = dcrf::train_dc_rf(ds, part, fm, dcrf::RidgeConfig{lambda}, c.workers);
  dcrf::write_json_file(c.out, dcrf::to_json(dcrf::ModelFile{model, fm, lambda, resolved}));
  const dcrf::Vector pred = dcrf::predict(model, fm, ds.points(), c.workers);
  Json summary{{"model", c.out}, {"feature_map_id", fm.id()}, {"train_mse", dcrf::prediction_error(pred, ds.targets(), false)}};
  if (dcrf::is_classification(ds)) summary["train_accuracy"] = 1.0 - dcrf::prediction_error(pred, ds.targets(), true);
  emit(summary, "");
  return 0;
}

int cmd_evaluate(const std::string& model_path, const std::string& data, const Common& c) {
  const Json extra = load_config(c.config);
  check_keys(extra, {"csv_header"}, "evaluate");
  const bool csv_header = extra.value("csv_header", false);
  announce("evaluate", Json{{"model", model_path}, {"data", data}, {"format", c.format},
                            {"limit", c.limit ? Json(*c.limit) : Json(nullptr)}, {"seed", c.seed}});
  g_stage = "serialize";
  const dcrf::ModelFile mf = dcrf::model_file_from_json(dcrf::read_json_file(model_path));
  const dcrf::Dataset ds = load_data(data, c, csv_header);
  g_stage = "solver";
  const dcrf::Vector pred = dcrf::predict(mf.model, mf.feature_map, ds.points(), c.workers);
  Json result{{"model", model_path}, {"data", data}, {"n", ds.size()},
              {"mse", dcrf::prediction_error(pred, ds.targets(), false)}};
  if (dcrf::is_classification(ds)) result["accuracy"] = 1.0 - dcrf::prediction_error(pred, ds.targets(), true);
  result["model_config"] = mf.config;
  emit(result, c.out);
  return 0;
}

int run_harness(const std::string& command, Json cfg_json, const Common& c, bool seed_set, bool workers_set) {
  if (seed_set) cfg_json["seed"] = c.seed;
  if (workers_set) cfg_json["workers"] = c.workers;
  if (!c.out.empty()) cfg_json["output"] = c.out;
  g_stage = "harness";
  const dcrf::ExperimentConfig cfg = dcrf::experiment_config_from_json(cfg_json);
  if (cfg.output.empty()) throw UsageError(command + " needs an output prefix (--out or \"output\" in the config)");
  announce(command, dcrf::to_json(cfg));
  const dcrf::RunRecord rec = dcrf::run_experiment(cfg);
  dcrf::write_run_outputs(rec, cfg.output);
  for (const auto& f : rec.failures)
    std::cerr << "dcrf " << command << ": harness cell '" << f.cell << "' repetition " << f.repetition
              << " failed: " << f.message << '\n';
  Json summary{{"metrics", cfg.output + ".metrics.csv"},
               {"timings", cfg.output + ".timings.csv"},
               {"summary", cfg.output + ".summary.json"},
               {"failures", static_cast<Index>(rec.failures.size())}};
  if (rec.fit) summary["fit"] = {{"slope", rec.fit->slope}, {"stderr", rec.fit->stderr_slope}};
  std::cout << summary.dump(2) << '\n';
  return rec.failures.empty() ? 0 : 2;
}

int cmd_decompose(Index n, std::optional<Index> nstar, double r, double gamma, double alpha,
                  std::optional<double> lambda, std::optional<Index> M, std::optional<Index> m,
                  std::optional<double> bandwidth, const Common& c) {
  const Json extra = load_config(c.config);
  check_keys(extra,
             {"d", "spectrum_size", "noise_sigma", "source_decay", "family", "safety_c", "replicates", "eval_size",
              "population_factor", "kernel_cap"},
             "decompose");
  dcrf::SyntheticSpec spec;
  spec.n_train = n;
  spec.r = r;
  spec.gamma = gamma;
  spec.seed = c.seed;
  spec.d = extra.value("d", Index{64});
  spec.spectrum_size = extra.value("spectrum_size", std::max<Index>(64, spec.d));
  spec.noise_sigma = extra.value("noise_sigma", 0.5);
  spec.source_decay = extra.value("source_decay", spec.source_decay);
  const auto family = dcrf::parse_feature_family(extra.value("family", std::string("projection")));
  dcrf::DecompositionSizes sizes;
  sizes.replicates = extra.value("replicates", sizes.replicates);
  sizes.eval_size = extra.value("eval_size", sizes.eval_size);
  sizes.population_factor = extra.value("population_factor", sizes.population_factor);
  sizes.kernel_cap = extra.value("kernel_cap", sizes.kernel_cap);

  g_stage = "theory";
  dcrf::ParamPlan plan = dcrf::plan_parameters(n, nstar.value_or(n), dcrf::RateParams{r, gamma, alpha},
                                               extra.value("safety_c", 1.0));
  if (lambda) plan.lambda = *lambda;
  if (M) plan.M = *M;
  if (m) plan.m = *m;
  const double bw = bandwidth.value_or(1.0);
  const Json resolved{{"N", plan.N}, {"N_star", plan.N_star}, {"r", r}, {"gamma", gamma}, {"alpha", alpha},
                      {"lambda", plan.lambda}, {"features", plan.M}, {"partitions", plan.m},
                      {"d", spec.d}, {"spectrum_size", spec.spectrum_size}, {"noise_sigma", spec.noise_sigma},
                      {"source_decay", spec.source_decay}, {"family", dcrf::to_string(family)}, {"bandwidth", bw},
                      {"replicates", sizes.replicates}, {"seed", c.seed}};
  announce("decompose", resolved);
  const auto kernel = family == dcrf::FeatureFamily::fourier ? dcrf::KernelSpec::gaussian(bw) : dcrf::KernelSpec::linear();
  g_stage = "features";
  const dcrf::FeatureMap fm = dcrf::sample_uniform_features(spec.d, plan.M, kernel, dcrf::mix_seed(c.seed, 0x464dULL), family);
  g_stage = "theory";
  const dcrf::ErrorDecomposition e = dcrf::decompose_errors(spec, plan, fm, sizes, dcrf::mix_seed(c.seed, 0x4445ULL), c.workers);
  emit(Json{{"config", resolved}, {"plan", dcrf::to_json(plan)}, {"decomposition", dcrf::to_json(e)},
            {"within_bound", e.within_bound()}},
       c.out);
  return 0;
}

int cmd_features(const std::optional<std::string>& data, Index M, double bandwidth, std::optional<double> lambda,
                 const Common& c) {
  const Json extra = load_config(c.config);
  check_keys(extra, {"d", "family", "csv_header"}, "features");
  const auto family = dcrf::parse_feature_family(extra.value("family", std::string("fourier")));
  std::optional<dcrf::Dataset> ds;
  if (data) ds = load_data(*data, c, extra.value("csv_header", false));
  if (!ds && !extra.contains("d")) throw UsageError("features needs a DATA file or \"d\" in --config");
  const Index d = ds ? ds->dim() : extra["d"].get<Index>();
  const Json resolved{{"data", data ? Json(*data) : Json(nullptr)}, {"d", d}, {"features", M},
                      {"bandwidth", bandwidth}, {"family", dcrf::to_string(family)},
                      {"lambda", lambda ? Json(*lambda) : Json(nullptr)}, {"seed", c.seed}};
  announce("features", resolved);
  g_stage = "features";
  const auto kernel = family == dcrf::FeatureFamily::fourier ? dcrf::KernelSpec::gaussian(bandwidth)
                                                              : dcrf::KernelSpec::linear();
  const dcrf::FeatureMap fm = dcrf::sample_uniform_features(d, M, kernel, dcrf::mix_seed(c.seed, 0x464dULL), family);
  Json result{{"config", resolved}, {"feature_map", dcrf::to_json(fm)}};
  if (ds && lambda) {
    g_stage = "theory";
    result["f_infinity_surrogate"] = dcrf::estimate_f_infinity(fm, ds->points(), *lambda);
    if (ds->size() <= dcrf::kDenseGuard)
      result["effective_dimension"] = dcrf::empirical_effective_dimension(ds->points(), fm, *lambda);
  }
  if (!c.out.empty()) dcrf::write_json_file(c.out, result);
  Json brief = result;
  brief.erase("feature_map");
  brief["feature_map_id"] = fm.id();
  std::cout << brief.dump(2) << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Distributed kernel ridge regression with random features"};
  app.require_subcommand(1);
  Common c;

  auto add_common = [&c](CLI::App* sub, bool data_flags) {
    sub->add_option("--seed", c.seed, "Base random seed");
    sub->add_option("--workers", c.workers, "Worker threads")->check(CLI::PositiveNumber);
    sub->add_option("--out", c.out, "Output path");
    sub->add_option("--config", c.config, "JSON config file")->check(CLI::ExistingFile);
    if (data_flags) {
      sub->add_option("--format", c.format, "Input format")->check(CLI::IsMember({"csv", "libsvm"}));
      sub->add_option("--limit", c.limit, "Uniform subsample size")->check(CLI::PositiveNumber);
    }
  };

  Index n = 0;
  std::optional<Index> nstar, features_opt, partitions_opt;
  double r = 0.5, gamma = 1.0, alpha = 1.0;
  std::optional<double> lambda_opt, bandwidth_opt;
  double lambda = 1e-3, bandwidth = 1.0;
  Index features = 100, partitions = 1;
  std::string kind, data, model_path;
  std::optional<std::string> data_opt;

  auto* gen = app.add_subcommand("gen-data", "Write a synthetic or covtype-style dataset");
  gen->add_option("kind", kind, "synthetic | covtype")->required()->check(CLI::IsMember({"synthetic", "covtype"}));
  gen->add_option("--n", n, "Training rows")->required()->check(CLI::PositiveNumber);
  gen->add_option("--r", r, "Regularity r");
  gen->add_option("--gamma", gamma, "Capacity gamma");
  gen->add_option("--format", c.format, "Output format")->check(CLI::IsMember({"csv", "libsvm"}));
  gen->add_option("--seed", c.seed);
  gen->add_option("--out", c.out)->required();
  gen->add_option("--config", c.config)->check(CLI::ExistingFile);

  auto* plan = app.add_subcommand("plan", "Print (lambda, M, m) for given sizes and rates");
  plan->add_option("--n", n, "Labeled size N")->required();
  plan->add_option("--nstar", nstar, "Total size N* (default N)");
  plan->add_option("--r", r)->default_val(0.5);
  plan->add_option("--gamma", gamma)->default_val(1.0);
  plan->add_option("--alpha", alpha)->default_val(1.0);
  plan->add_option("--out", c.out);
  plan->add_option("--config", c.config)->check(CLI::ExistingFile);

  auto* train = app.add_subcommand("train", "Fit a distributed RF model and write it as JSON");
  train->add_option("data", data, "Training data file")->required()->check(CLI::ExistingFile);
  train->add_option("--lambda", lambda)->check(CLI::PositiveNumber);
  train->add_option("--features", features, "Feature count M")->check(CLI::PositiveNumber);
  train->add_option("--partitions", partitions, "Partition count m")->check(CLI::PositiveNumber);
  train->add_option("--bandwidth", bandwidth)->check(CLI::PositiveNumber);
  add_common(train, true);

  auto* eval = app.add_subcommand("evaluate", "Score a model file on a dataset");
  eval->add_option("model", model_path, "Model JSON")->required()->check(CLI::ExistingFile);
  eval->add_option("data", data, "Data file")->required()->check(CLI::ExistingFile);
  add_common(eval, true);

  auto* sweep = app.add_subcommand("sweep", "Run a harness experiment from a JSON config");
  add_common(sweep, false);
  sweep->get_option("--config")->required();

  auto* curve = app.add_subcommand("curve", "Run a learning-curve experiment and fit its rate");
  add_common(curve, false);
  curve->get_option("--config")->required();

  auto* decomp = app.add_subcommand("decompose", "Estimate the five-term excess-risk decomposition");
  decomp->add_option("--n", n, "Labeled size N")->required();
  decomp->add_option("--nstar", nstar);
  decomp->add_option("--r", r)->default_val(0.5);
  decomp->add_option("--gamma", gamma)->default_val(1.0);
  decomp->add_option("--alpha", alpha)->default_val(1.0);
  decomp->add_option("--lambda", lambda_opt)->check(CLI::PositiveNumber);
  decomp->add_option("--features", features_opt)->check(CLI::PositiveNumber);
  decomp->add_option("--partitions", partitions_opt)->check(CLI::PositiveNumber);
  decomp->add_option("--bandwidth", bandwidth_opt)->check(CLI::PositiveNumber);
  add_common(decomp, false);

  auto* feats = app.add_subcommand("features", "Sample a feature map; with data, report N(lambda) and F_inf");
  feats->add_option("data", data_opt, "Optional data file")->check(CLI::ExistingFile);
  feats->add_option("--features", features)->check(CLI::PositiveNumber);
  feats->add_option("--bandwidth", bandwidth)->check(CLI::PositiveNumber);
  feats->add_option("--lambda", lambda_opt)->check(CLI::PositiveNumber);
  add_common(feats, true);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (*gen) return cmd_gen_data(kind, n, r, gamma, c);
    if (*plan) return cmd_plan(n, nstar, r, gamma, alpha, c);
    if (*train) return cmd_train(data, lambda, features, partitions, bandwidth, c);
    if (*eval) return cmd_evaluate(model_path, data, c);
    if (*sweep || *curve) {
      Json cfg = load_config(c.config);
      const bool is_curve = static_cast<bool>(*curve);
      if (is_curve) {
        if (!cfg.contains("task")) cfg["task"] = "learning_curve";
        if (cfg["task"] != "learning_curve") throw UsageError("curve runs learning_curve configs only");
      }
      CLI::App* sub = is_curve ? curve : sweep;
      return run_harness(is_curve ? "curve" : "sweep", std::move(cfg), c, sub->count("--seed") > 0,
                         sub->count("--workers") > 0);
    }
    if (*decomp)
      return cmd_decompose(n, nstar, r, gamma, alpha, lambda_opt, features_opt, partitions_opt, bandwidth_opt, c);
    if (*feats) return cmd_features(data_opt, features, bandwidth, lambda_opt, c);
  } catch (const UsageError& e) {
    std::cerr << "dcrf: usage error: " << e.what() << '\n';
    return 1;
  } catch (const dcrf::InvalidArgument& e) {
    std::cerr << "dcrf: error in " << g_stage << ": invalid argument: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "dcrf: error in " << g_stage << ": " << e.what() << '\n';
    return 2;
  }
  return 1;
}
