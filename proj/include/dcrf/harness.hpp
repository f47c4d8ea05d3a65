#ifndef DCRF_HARNESS_HPP
#define DCRF_HARNESS_HPP

#include "dcrf/common.hpp"
#include "dcrf/data.hpp"
#include "dcrf/features.hpp"
#include "dcrf/serialize.hpp"
#include "dcrf/solver.hpp"
#include "dcrf/theory.hpp"

#include <cstdio>
#include <fstream>
#include <map>
#include <numeric>
#include <optional>
#include <set>
#include <string>
#include <utility>
#include <vector>

namespace dcrf {

enum class Task { sweep_m, sweep_M, learning_curve, semi_supervised, leverage_compare, decompose };

inline std::string to_string(Task t) {
  switch (t) {
    case Task::sweep_m: return "sweep_m";
    case Task::sweep_M: return "sweep_M";
    case Task::learning_curve: return "learning_curve";
    case Task::semi_supervised: return "semi_supervised";
    case Task::leverage_compare: return "leverage_compare";
    case Task::decompose: return "decompose";
  }
  return "?";
}

inline Task parse_task(std::string_view s) {
  for (Task t : {Task::sweep_m, Task::sweep_M, Task::learning_curve, Task::semi_supervised, Task::leverage_compare,
                 Task::decompose})
    if (to_string(t) == s) return t;
  throw InvalidArgument("unknown task '" + std::string(s) + "'");
}

enum class SourceKind { synthetic, file, covtype_like };

struct DatasetSource {
  SourceKind kind = SourceKind::synthetic;
  SyntheticSpec synthetic;  // synthetic: its seed is replaced per repetition
  std::string path;
  FileFormat format = FileFormat::libsvm;
  std::optional<Index> limit;
  double test_fraction = 0.2;
  Index rows = 30000;  // covtype_like corpus size
};

struct Grids {
  std::vector<Index> N, N_star, m, M;
  std::vector<double> lambda, bandwidth;
  std::vector<double> M_fraction;  // leverage_compare: leverage M as fractions of the uniform M
};

struct ExperimentConfig {
  Task task = Task::sweep_m;
  DatasetSource dataset;
  FeatureFamily family = FeatureFamily::fourier;
  double bandwidth = 1.0;
  Grids grids;
  RateParams rates;
  double safety_c = 1.0;
  std::optional<double> nstar_exponent;
  Index repetitions = 10;
  Index cv_folds = 10;
  bool cross_validate = false;
  Index pool_factor = 20;
  Index leverage_rows = 1000;
  DecompositionSizes decomposition;
  Index drop_smallest = 0;
  std::uint64_t seed = 0;
  unsigned workers = 1;
  std::string output;

  void validate() const {
    require(repetitions >= 1, "repetitions must be at least 1");
    require(cv_folds >= 2, "cv_folds must be at least 2");
    require(workers >= 1, "workers must be at least 1");
    require(pool_factor >= 1 && leverage_rows >= 1, "leverage settings must be positive");
    require(drop_smallest >= 0, "drop_smallest must be nonnegative");
    require(safety_c > 0.0, "safety_c must be positive");
    rates.validate();
    if (dataset.kind == SourceKind::synthetic) {
      dataset.synthetic.validate();
    } else {
      require(family == FeatureFamily::fourier, "file corpora use Gaussian random Fourier features");
      require(dataset.test_fraction > 0.0 && dataset.test_fraction < 1.0, "test_fraction must lie in (0, 1)");
    }
    if (family != FeatureFamily::fourier)
      require(dataset.kind == SourceKind::synthetic, "linear feature families need synthetic data");
    switch (task) {
      case Task::sweep_m:
        require(!grids.m.empty(), "sweep_m needs a nonempty m grid");
        break;
      case Task::sweep_M:
        require(!grids.M.empty(), "sweep_M needs a nonempty M grid");
        break;
      case Task::learning_curve:
        require(!grids.N.empty(), "learning_curve needs a nonempty N grid");
        break;
      case Task::semi_supervised:
      case Task::leverage_compare:
      case Task::decompose:
        require(dataset.kind == SourceKind::synthetic, to_string(task) + " needs synthetic data");
        break;
    }
    if (task == Task::semi_supervised) require(!grids.m.empty(), "semi_supervised needs a nonempty m grid");
    if (task == Task::leverage_compare) require(!grids.M_fraction.empty(), "leverage_compare needs M_fraction");
    for (double f : grids.M_fraction) require(f > 0.0 && f <= 1.0, "M_fraction entries must lie in (0, 1]");
    for (double l : grids.lambda) require(l > 0.0, "lambda grid entries must be positive");
    for (double b : grids.bandwidth) require(b > 0.0, "bandwidth grid entries must be positive");
    for (Index v : grids.m) require(v >= 1, "m grid entries must be positive");
    for (Index v : grids.M) require(v >= 1, "M grid entries must be positive");
    for (Index v : grids.N) require(v >= 2, "N grid entries must be at least 2");
    if (cross_validate)
      require(!grids.lambda.empty() && !grids.bandwidth.empty(), "cross validation needs lambda and bandwidth grids");
  }
};

// ---------------------------------------------------------------------------
// Config <-> JSON.

namespace detail {

template <typename T>
std::vector<T> json_list(const Json& j, const char* key) {
  if (!j.contains(key)) return {};
  require(j[key].is_array(), std::string(key) + " must be an array");
  return j[key].get<std::vector<T>>();
}

inline void reject_unknown(const Json& j, std::initializer_list<const char*> keys, const std::string& where) {
  require(j.is_object(), where + " must be an object");
  for (const auto& [k, v] : j.items()) {
    bool known = false;
    for (const char* key : keys) known = known || k == key;
    if (!known) throw InvalidArgument("unknown key '" + k + "' in " + where);
  }
}

}  // namespace detail

inline ExperimentConfig experiment_config_from_json(const Json& j) {
  detail::reject_unknown(j,
                         {"task", "dataset", "features", "grids", "rates", "nstar_exponent", "repetitions", "cv_folds",
                          "cross_validate", "leverage", "decomposition", "fit", "seed", "workers", "output"},
                         "config");
  ExperimentConfig c;
  try {
    c.task = parse_task(j.at("task").get<std::string>());
    if (j.contains("dataset")) {
      const Json& d = j["dataset"];
      detail::reject_unknown(d,
                             {"kind", "n_train", "n_test", "d", "r", "gamma", "noise_sigma", "spectrum_size",
                              "source_decay", "path", "format", "limit", "test_fraction", "rows"},
                             "dataset");
      const std::string kind = d.value("kind", std::string("synthetic"));
      if (kind == "synthetic") c.dataset.kind = SourceKind::synthetic;
      else if (kind == "file") c.dataset.kind = SourceKind::file;
      else if (kind == "covtype_like") c.dataset.kind = SourceKind::covtype_like;
      else throw InvalidArgument("unknown dataset kind '" + kind + "'");
      auto& s = c.dataset.synthetic;
      s.n_train = d.value("n_train", s.n_train);
      s.n_test = d.value("n_test", s.n_test);
      s.d = d.value("d", s.d);
      s.r = d.value("r", s.r);
      s.gamma = d.value("gamma", s.gamma);
      s.noise_sigma = d.value("noise_sigma", s.noise_sigma);
      s.spectrum_size = d.value("spectrum_size", std::max(s.spectrum_size, s.d));
      s.source_decay = d.value("source_decay", s.source_decay);
      c.dataset.path = d.value("path", std::string{});
      c.dataset.format = parse_file_format(d.value("format", std::string("libsvm")));
      if (d.contains("limit") && !d["limit"].is_null()) c.dataset.limit = d["limit"].get<Index>();
      c.dataset.test_fraction = d.value("test_fraction", 0.2);
      c.dataset.rows = d.value("rows", c.dataset.rows);
      c.rates.r = s.r;
      c.rates.gamma = s.gamma;
    }
    if (j.contains("features")) {
      const Json& f = j["features"];
      detail::reject_unknown(f, {"family", "bandwidth"}, "features");
      c.family = parse_feature_family(f.value("family", std::string("fourier")));
      c.bandwidth = f.value("bandwidth", 1.0);
    }
    if (j.contains("grids")) {
      const Json& g = j["grids"];
      detail::reject_unknown(g, {"N", "N_star", "m", "M", "lambda", "bandwidth", "M_fraction"}, "grids");
      c.grids.N = detail::json_list<Index>(g, "N");
      c.grids.N_star = detail::json_list<Index>(g, "N_star");
      c.grids.m = detail::json_list<Index>(g, "m");
      c.grids.M = detail::json_list<Index>(g, "M");
      c.grids.lambda = detail::json_list<double>(g, "lambda");
      c.grids.bandwidth = detail::json_list<double>(g, "bandwidth");
      c.grids.M_fraction = detail::json_list<double>(g, "M_fraction");
    }
    if (j.contains("rates")) {
      const Json& r = j["rates"];
      detail::reject_unknown(r, {"r", "gamma", "alpha", "safety_c"}, "rates");
      c.rates.r = r.value("r", c.rates.r);
      c.rates.gamma = r.value("gamma", c.rates.gamma);
      c.rates.alpha = r.value("alpha", c.rates.alpha);
      c.safety_c = r.value("safety_c", c.safety_c);
    }
    if (j.contains("nstar_exponent") && !j["nstar_exponent"].is_null())
      c.nstar_exponent = j["nstar_exponent"].get<double>();
    c.repetitions = j.value("repetitions", c.repetitions);
    c.cv_folds = j.value("cv_folds", c.cv_folds);
    c.cross_validate = j.value("cross_validate", c.cross_validate);
    if (j.contains("leverage")) {
      const Json& l = j["leverage"];
      detail::reject_unknown(l, {"pool_factor", "data_rows"}, "leverage");
      c.pool_factor = l.value("pool_factor", c.pool_factor);
      c.leverage_rows = l.value("data_rows", c.leverage_rows);
    }
    if (j.contains("decomposition")) {
      const Json& d = j["decomposition"];
      detail::reject_unknown(d, {"replicates", "eval_size", "population_factor", "kernel_cap"}, "decomposition");
      c.decomposition.replicates = d.value("replicates", c.decomposition.replicates);
      c.decomposition.eval_size = d.value("eval_size", c.decomposition.eval_size);
      c.decomposition.population_factor = d.value("population_factor", c.decomposition.population_factor);
      c.decomposition.kernel_cap = d.value("kernel_cap", c.decomposition.kernel_cap);
    }
    if (j.contains("fit")) {
      detail::reject_unknown(j["fit"], {"drop_smallest"}, "fit");
      c.drop_smallest = j["fit"].value("drop_smallest", c.drop_smallest);
    }
    c.seed = j.value("seed", c.seed);
    c.workers = j.value("workers", c.workers);
    c.output = j.value("output", c.output);
  } catch (const Json::exception& e) {
    throw InvalidArgument(std::string("malformed config: ") + e.what());
  }
  c.validate();
  return c;
}

inline Json to_json(const ExperimentConfig& c) {
  Json ds;
  const auto& s = c.dataset.synthetic;
  switch (c.dataset.kind) {
    case SourceKind::synthetic:
      ds = Json{{"kind", "synthetic"},         {"n_train", s.n_train}, {"n_test", s.n_test},
                {"d", s.d},                    {"r", s.r},             {"gamma", s.gamma},
                {"noise_sigma", s.noise_sigma}, {"spectrum_size", s.spectrum_size},
                {"source_decay", s.source_decay}};
      break;
    case SourceKind::file:
    case SourceKind::covtype_like:
      ds = Json{{"kind", c.dataset.kind == SourceKind::file ? "file" : "covtype_like"},
                {"path", c.dataset.path},
                {"format", c.dataset.format == FileFormat::libsvm ? "libsvm" : "csv"},
                {"limit", c.dataset.limit ? Json(*c.dataset.limit) : Json(nullptr)},
                {"test_fraction", c.dataset.test_fraction}};
      if (c.dataset.kind == SourceKind::covtype_like) ds["rows"] = c.dataset.rows;
      break;
  }
  return Json{{"task", to_string(c.task)},
              {"dataset", ds},
              {"features", {{"family", to_string(c.family)}, {"bandwidth", c.bandwidth}}},
              {"grids",
               {{"N", c.grids.N},
                {"N_star", c.grids.N_star},
                {"m", c.grids.m},
                {"M", c.grids.M},
                {"lambda", c.grids.lambda},
                {"bandwidth", c.grids.bandwidth},
                {"M_fraction", c.grids.M_fraction}}},
              {"rates", {{"r", c.rates.r}, {"gamma", c.rates.gamma}, {"alpha", c.rates.alpha}, {"safety_c", c.safety_c}}},
              {"nstar_exponent", c.nstar_exponent ? Json(*c.nstar_exponent) : Json(nullptr)},
              {"repetitions", c.repetitions},
              {"cv_folds", c.cv_folds},
              {"cross_validate", c.cross_validate},
              {"leverage", {{"pool_factor", c.pool_factor}, {"data_rows", c.leverage_rows}}},
              {"decomposition",
               {{"replicates", c.decomposition.replicates},
                {"eval_size", c.decomposition.eval_size},
                {"population_factor", c.decomposition.population_factor},
                {"kernel_cap", c.decomposition.kernel_cap}}},
              {"fit", {{"drop_smallest", c.drop_smallest}}},
              {"seed", c.seed},
              {"workers", c.workers},
              {"output", c.output}};
}

// ---------------------------------------------------------------------------
// Covtype-style corpus.

/// Writes a deterministic binary classification corpus shaped like covtype in
/// libsvm format: 10 continuous columns on raw scales, a 4-way and a 40-way
/// one-hot block, labels in {1, 2} from a nonlinear rule with noise.
inline void write_covtype_like(const std::string& path, Index rows, std::uint64_t seed) {
  require(rows >= 1, "corpus needs at least one row");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InvalidArgument("cannot write '" + path + "'");
  Rng rng = make_rng(seed, 0x434f56ULL);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> unif(0.0, 1.0);

  Rng effects_rng = make_rng(seed, 0x454646ULL);
  std::vector<double> soil_effect(40), wild_effect(4);
  for (auto& e : soil_effect) e = 0.8 * normal(effects_rng);
  for (auto& e : wild_effect) e = 0.6 * normal(effects_rng);

  const double offsets[10] = {2950, 155, 14, 270, 45, 2350, 212, 223, 142, 1980};
  const double scales[10] = {280, 110, 7.5, 210, 58, 1560, 27, 20, 38, 1320};
  char buf[64];
  for (Index i = 0; i < rows; ++i) {
    double z[10];
    for (double& v : z) v = normal(rng);
    z[4] = 0.6 * z[3] + 0.8 * z[4];
    z[7] = -0.5 * z[6] + 0.87 * z[7];
    const auto wild = static_cast<int>(std::min(3.0, std::floor(4.0 * unif(rng) * (0.75 + 0.25 * std::tanh(z[0])))));
    const int soil = static_cast<int>(std::min(39.0, std::floor(40.0 * unif(rng))));
    const double score = 1.4 * std::sin(1.3 * z[0]) + 0.9 * z[1] * z[2] - 0.5 * (z[3] * z[3] - 1.0) + 0.6 * z[5] +
                         0.5 * std::tanh(2.0 * z[6]) * z[9] + wild_effect[static_cast<std::size_t>(wild)] +
                         soil_effect[static_cast<std::size_t>(soil)] + 0.5 * normal(rng);
    out << (score > 0.0 ? 2 : 1);
    for (int c = 0; c < 10; ++c) {
      std::snprintf(buf, sizeof(buf), " %d:%.6g", c + 1, offsets[c] + scales[c] * z[c]);
      out << buf;
    }
    out << ' ' << 11 + wild << ":1 " << 15 + soil << ":1\n";
  }
  if (!out) throw InvalidArgument("failed writing '" + path + "'");
}

// ---------------------------------------------------------------------------
// Cross validation.

struct CvResult {
  double best_lambda = 0.0;
  double best_bandwidth = 0.0;
  double best_error = 0.0;
  Index skipped_folds = 0;
  std::vector<std::string> flags;
  std::vector<std::tuple<double, double, double>> table;  // (lambda, bandwidth, mean validation error)
};

inline bool is_classification(const Dataset& ds) { return ds.has_flag("binary_labels"); }

inline double prediction_error(const Vector& pred, const Vector& y, bool classification) {
  if (classification) {
    Index wrong = 0;
    for (Index i = 0; i < y.size(); ++i) wrong += ((pred(i) >= 0.0 ? 1.0 : -1.0) != y(i)) ? 1 : 0;
    return static_cast<double>(wrong) / static_cast<double>(y.size());
  }
  return (pred - y).squaredNorm() / static_cast<double>(y.size());
}

/// k-fold selection of (lambda, bandwidth) for an m = 1 RF model with M
/// Gaussian random Fourier features. The frequency draw is shared across
/// bandwidths (rescaled), so candidates differ only in their parameters. Ties
/// go to the larger lambda, then the larger bandwidth. Folds whose training
/// targets are constant are skipped and flagged.
inline CvResult cross_validate(const Dataset& ds, std::vector<double> lambda_grid, std::vector<double> bandwidth_grid,
                               Index M, Index folds, std::uint64_t seed, unsigned workers = 1) {
  require(folds >= 2, "cross validation needs at least two folds");
  require(folds <= ds.size(), "more folds than data points");
  require(!lambda_grid.empty() && !bandwidth_grid.empty(), "cross validation grids must be nonempty");
  require(M >= 1, "feature count must be positive");
  for (double l : lambda_grid) require(l > 0.0 && std::isfinite(l), "lambda grid entries must be positive");
  std::sort(lambda_grid.begin(), lambda_grid.end());
  lambda_grid.erase(std::unique(lambda_grid.begin(), lambda_grid.end()), lambda_grid.end());
  std::sort(bandwidth_grid.begin(), bandwidth_grid.end());
  bandwidth_grid.erase(std::unique(bandwidth_grid.begin(), bandwidth_grid.end()), bandwidth_grid.end());

  const bool classification = is_classification(ds);
  const Partitioning fold_of = partition(ds, folds, mix_seed(seed, 0x464f4c44ULL));
  std::vector<bool> usable(static_cast<std::size_t>(folds), true);
  CvResult res;
  for (Index f = 0; f < folds; ++f) {
    double lo = INFINITY, hi = -INFINITY;
    for (Index i = 0; i < ds.size(); ++i) {
      if (fold_of.assignment()[static_cast<std::size_t>(i)] == f) continue;
      lo = std::min(lo, ds.targets()(i));
      hi = std::max(hi, ds.targets()(i));
    }
    if (!(hi > lo)) {
      usable[static_cast<std::size_t>(f)] = false;
      ++res.skipped_folds;
    }
  }
  if (res.skipped_folds > 0) res.flags.emplace_back("degenerate_folds_skipped");
  if (res.skipped_folds == folds) throw InvalidArgument("every cross-validation fold is degenerate");

  bool have_best = false;
  for (double bw : bandwidth_grid) {
    const FeatureMap fm = sample_uniform_features(ds.dim(), M, KernelSpec::gaussian(bw), mix_seed(seed, 0x4356ULL));
    const Matrix phi = apply_features(fm, ds.points(), workers);
    std::vector<double> err(lambda_grid.size(), 0.0);
    Index used = 0;
    for (Index f = 0; f < folds; ++f) {
      if (!usable[static_cast<std::size_t>(f)]) continue;
      const auto& val = fold_of.block(f);
      std::vector<Index> train;
      train.reserve(static_cast<std::size_t>(ds.size()) - val.size());
      for (Index i = 0; i < ds.size(); ++i)
        if (fold_of.assignment()[static_cast<std::size_t>(i)] != f) train.push_back(i);
      const Matrix ftr = phi(train, Eigen::all);
      const Matrix fval = phi(val, Eigen::all);
      const Vector yval = ds.targets()(val);
      const double inv_n = 1.0 / static_cast<double>(train.size());
      Matrix gram = Matrix::Zero(M, M);
      gram.selfadjointView<Eigen::Lower>().rankUpdate(ftr.transpose(), inv_n);
      const Vector rhs = inv_n * (ftr.transpose() * ds.targets()(train));
      for (std::size_t l = 0; l < lambda_grid.size(); ++l) {
        Matrix sys = gram;
        sys.diagonal().array() += lambda_grid[l];
        Eigen::LLT<Matrix, Eigen::Lower> llt(sys);
        if (llt.info() != Eigen::Success) throw NumericalError("cross-validation ridge system failed", INFINITY);
        err[l] += prediction_error(fval * llt.solve(rhs), yval, classification);
      }
      ++used;
    }
    for (std::size_t l = 0; l < lambda_grid.size(); ++l) {
      const double lam = lambda_grid[l];
      const double e = err[l] / static_cast<double>(used);
      res.table.emplace_back(lam, bw, e);
      // Grids are ascending, so ">=" on equal error moves toward larger lambda, then larger bandwidth.
      if (!have_best || e < res.best_error ||
          (e == res.best_error && (lam > res.best_lambda || (lam == res.best_lambda && bw >= res.best_bandwidth)))) {
        res.best_error = e;
        res.best_lambda = lam;
        res.best_bandwidth = bw;
        have_best = true;
      }
    }
  }
  return res;
}

// ---------------------------------------------------------------------------
// Run records.

struct CellKey {
  std::string label;
  Index N = 0, N_star = 0, m = 0, M = 0;
  double lambda = 0.0, bandwidth = 0.0;
};

struct RepResult {
  Index repetition = 0;
  std::uint64_t seed = 0;
  std::map<std::string, double> metrics;
  std::map<std::string, double> timings;
};

struct CellResult {
  CellKey key;
  std::vector<RepResult> reps;
};

struct CellFailure {
  std::string cell;
  Index repetition = 0;
  std::string message;
};

struct Summary {
  double mean = 0.0, stddev = 0.0, median = 0.0;
  Index count = 0;
};

inline Summary summarize(std::vector<double> v) {
  Summary s;
  s.count = static_cast<Index>(v.size());
  if (v.empty()) return s;
  for (double x : v) s.mean += x;
  s.mean /= static_cast<double>(v.size());
  if (v.size() > 1) {
    double ss = 0.0;
    for (double x : v) ss += (x - s.mean) * (x - s.mean);
    s.stddev = std::sqrt(ss / static_cast<double>(v.size() - 1));
  }
  std::sort(v.begin(), v.end());
  const std::size_t h = v.size() / 2;
  s.median = v.size() % 2 ? v[h] : 0.5 * (v[h - 1] + v[h]);
  return s;
}

struct RunRecord {
  ExperimentConfig config;
  std::vector<CellResult> cells;
  std::vector<CellFailure> failures;
  std::optional<RateFit> fit;
  std::optional<CvResult> cv;
  std::vector<std::string> flags;

  const CellResult* find(std::string_view label) const {
    for (const auto& c : cells)
      if (c.key.label == label) return &c;
    return nullptr;
  }

  Summary metric(const CellResult& cell, const std::string& name) const {
    std::vector<double> v;
    for (const auto& r : cell.reps)
      if (auto it = r.metrics.find(name); it != r.metrics.end()) v.push_back(it->second);
    return summarize(std::move(v));
  }

  Summary timing(const CellResult& cell, const std::string& name) const {
    std::vector<double> v;
    for (const auto& r : cell.reps)
      if (auto it = r.timings.find(name); it != r.timings.end()) v.push_back(it->second);
    return summarize(std::move(v));
  }
};

// ---------------------------------------------------------------------------
// Task runners.

namespace detail {

inline std::uint64_t rep_seed(std::uint64_t base, Index rep) { return mix_seed(base, 0x52455000ULL + static_cast<std::uint64_t>(rep)); }

inline std::string fmt_num(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

/// |f - f_H|^2 under the input law, exact for linear feature families.
inline double exact_excess_risk(const SyntheticTarget& target, const FeatureMap& fm, const Vector& w) {
  const Vector scale = fm.importance_weights() / std::sqrt(static_cast<double>(fm.size()));
  const Vector coef = fm.frequencies().transpose() * scale.cwiseProduct(w);
  const Vector diff = coef - target.coefficients;
  return diff.cwiseAbs2().dot(target.eigenvalues);
}

struct Problem {
  Dataset train;
  Dataset test;
  Vector truth;  // regression reference on the test points
  std::optional<SyntheticTarget> target;
  bool classification = false;
};

inline std::map<std::string, double> score(const Problem& p, const FeatureMap& fm, const Vector& w, unsigned workers) {
  std::map<std::string, double> out;
  const Vector pred = apply_features(fm, p.test.points(), workers) * w;
  out["test_mse"] = prediction_error(pred, p.test.targets(), false);
  if (p.classification) {
    const double err = prediction_error(pred, p.test.targets(), true);
    out["error_rate"] = err;
    out["accuracy"] = 1.0 - err;
  } else if (p.target && fm.family() != FeatureFamily::fourier) {
    out["excess_risk"] = exact_excess_risk(*p.target, fm, w);
  } else {
    out["excess_risk"] = prediction_error(pred, p.truth, false);
  }
  return out;
}

inline std::map<std::string, double> timing_map(const TrainTimings& t, double train_seconds) {
  return {{"feature_seconds", t.feature_seconds},
          {"solve_critical_seconds", t.solve_critical_path()},
          {"solve_total_seconds", t.solve_total()},
          {"reduce_seconds", t.reduce_seconds},
          {"train_seconds", train_seconds}};
}

inline SyntheticSpec rep_spec(const ExperimentConfig& cfg, Index rep, std::optional<Index> n_train = std::nullopt) {
  SyntheticSpec s = cfg.dataset.synthetic;
  s.seed = rep_seed(cfg.seed, rep);
  if (n_train) s.n_train = *n_train;
  return s;
}

inline Problem synthetic_problem(const SyntheticSpec& spec) {
  SyntheticData sd = generate_synthetic(spec);
  return Problem{std::move(sd.train), std::move(sd.test), std::move(sd.truth), std::move(sd.target), false};
}

inline KernelSpec kernel_for(FeatureFamily family, double bandwidth) {
  return family == FeatureFamily::fourier ? KernelSpec::gaussian(bandwidth) : KernelSpec::linear();
}

class Runner {
 public:
  explicit Runner(const ExperimentConfig& cfg) : cfg_(cfg) { record_.config = cfg; }

  RunRecord run() {
    switch (cfg_.task) {
      case Task::sweep_m:
      case Task::sweep_M: sweep(); break;
      case Task::learning_curve: learning_curve(); break;
      case Task::semi_supervised: semi_supervised(); break;
      case Task::leverage_compare: leverage_compare(); break;
      case Task::decompose: decompose(); break;
    }
    return std::move(record_);
  }

 private:
  const ExperimentConfig& cfg_;
  RunRecord record_;

  CellResult& cell(const CellKey& key) {
    for (auto& c : record_.cells)
      if (c.key.label == key.label) return c;
    record_.cells.push_back(CellResult{key, {}});
    return record_.cells.back();
  }

  template <typename Fn>
  void attempt(const CellKey& key, Index rep, Fn&& fn) {
    CellResult& c = cell(key);
    try {
      RepResult r = fn();
      r.repetition = rep;
      c.reps.push_back(std::move(r));
    } catch (const std::exception& e) {
      record_.failures.push_back(CellFailure{key.label, rep, e.what()});
    }
  }

  // Shared corpus for file-backed sweeps: loaded and split once.
  std::optional<Problem> corpus_;

  const Problem& corpus() {
    if (corpus_) return *corpus_;
    std::string path = cfg_.dataset.path;
    if (cfg_.dataset.kind == SourceKind::covtype_like) {
      if (path.empty()) path = (cfg_.output.empty() ? std::string("dcrf") : cfg_.output) + ".corpus.libsvm";
      write_covtype_like(path, cfg_.dataset.rows, cfg_.seed);
    }
    const Dataset all = load_dataset(path, cfg_.dataset.format, cfg_.dataset.limit, cfg_.seed);
    for (const auto& f : all.flags())
      if (std::find(record_.flags.begin(), record_.flags.end(), f) == record_.flags.end()) record_.flags.push_back(f);
    auto [train, test] = train_test_split(all, cfg_.dataset.test_fraction, cfg_.seed);
    Vector truth = test.targets();
    corpus_ = Problem{std::move(train), std::move(test), std::move(truth), std::nullopt, is_classification(all)};
    return *corpus_;
  }

  void sweep() {
    const bool file = cfg_.dataset.kind != SourceKind::synthetic;
    const Index n_train = file ? corpus().train.size() : cfg_.dataset.synthetic.n_train;
    double lambda = cfg_.grids.lambda.empty() ? 1e-3 : cfg_.grids.lambda.front();
    double bandwidth = cfg_.grids.bandwidth.empty() ? cfg_.bandwidth : cfg_.grids.bandwidth.front();
    const Index default_M = static_cast<Index>(std::ceil(std::sqrt(static_cast<double>(n_train)) - 1e-12));
    if (cfg_.cross_validate) {
      const Problem p = file ? corpus() : synthetic_problem(rep_spec(cfg_, 0));
      const Index M = cfg_.grids.M.empty() ? default_M : cfg_.grids.M.front();
      record_.cv = cross_validate(p.train, cfg_.grids.lambda, cfg_.grids.bandwidth, M, cfg_.cv_folds,
                                  mix_seed(cfg_.seed, 0x4356ULL), cfg_.workers);
      lambda = record_.cv->best_lambda;
      bandwidth = record_.cv->best_bandwidth;
    }
    const std::vector<Index> ms = cfg_.task == Task::sweep_m ? cfg_.grids.m
                                                             : std::vector<Index>{cfg_.grids.m.empty() ? 1 : cfg_.grids.m.front()};
    const std::vector<Index> Ms = cfg_.task == Task::sweep_M
                                      ? cfg_.grids.M
                                      : std::vector<Index>{cfg_.grids.M.empty() ? default_M : cfg_.grids.M.front()};
    const KernelSpec kernel = kernel_for(cfg_.family, bandwidth);

    for (Index rep = 0; rep < cfg_.repetitions; ++rep) {
      const std::uint64_t seed = rep_seed(cfg_.seed, rep);
      std::optional<Problem> synth;
      if (!file) {
        try {
          synth = synthetic_problem(rep_spec(cfg_, rep));
        } catch (const std::exception& e) {
          record_.failures.push_back(CellFailure{"data", rep, e.what()});
          continue;
        }
      }
      const Problem& p = file ? corpus() : *synth;
      for (Index M : Ms) {
        for (Index m : ms) {
          const CellKey key{(cfg_.task == Task::sweep_m ? "m=" + std::to_string(m) : "M=" + std::to_string(M)),
                            p.train.size(), p.train.size(), m, M, lambda, kernel.bandwidth};
          attempt(key, rep, [&] {
            const auto t0 = Clock::now();
            const FeatureMap fm = sample_uniform_features(p.train.dim(), M, kernel, mix_seed(seed, 0x464dULL), cfg_.family);
            const Partitioning part = partition(p.train, m, mix_seed(seed, 0x5041ULL));
            const DcFit fit = train_dc_rf_detailed(p.train, part, fm, RidgeConfig{lambda}, cfg_.workers);
            const double train_seconds = seconds_since(t0);
            return RepResult{rep, seed, score(p, fm, fit.model.weights, cfg_.workers), timing_map(fit.timings, train_seconds)};
          });
        }
      }
    }
  }

  Index n_star_for(Index n, std::size_t grid_index) const {
    if (!cfg_.grids.N_star.empty()) {
      const Index v = cfg_.grids.N_star[std::min(grid_index, cfg_.grids.N_star.size() - 1)];
      require(v >= n, "N_star must be at least N");
      return v;
    }
    if (cfg_.nstar_exponent) return std::max<Index>(n, std::llround(std::pow(static_cast<double>(n), *cfg_.nstar_exponent)));
    return n;
  }

  void learning_curve() {
    std::vector<Index> ns = cfg_.grids.N;
    for (Index rep = 0; rep < cfg_.repetitions; ++rep) {
      const std::uint64_t seed = rep_seed(cfg_.seed, rep);
      const Index n_max = *std::max_element(ns.begin(), ns.end());
      std::optional<Problem> full;
      std::optional<Matrix> unlabeled_pool;
      try {
        full = synthetic_problem(rep_spec(cfg_, rep, n_max));
      } catch (const std::exception& e) {
        record_.failures.push_back(CellFailure{"data", rep, e.what()});
        continue;
      }
      for (std::size_t gi = 0; gi < ns.size(); ++gi) {
        const Index n = ns[gi];
        const Index n_star = n_star_for(n, gi);
        const ParamPlan plan = plan_parameters(n, n_star, cfg_.rates, cfg_.safety_c);
        const CellKey key{"N=" + std::to_string(n), n, n_star, plan.m, plan.M, plan.lambda,
                          cfg_.family == FeatureFamily::fourier ? cfg_.bandwidth : 0.0};
        attempt(key, rep, [&] {
          std::vector<Index> rows(static_cast<std::size_t>(n));
          std::iota(rows.begin(), rows.end(), Index{0});
          Problem p{full->train.subset(rows), full->test, full->truth, full->target, false};
          const KernelSpec kernel = kernel_for(cfg_.family, cfg_.bandwidth);
          const FeatureMap fm = sample_uniform_features(p.train.dim(), plan.M, kernel, mix_seed(seed, 0x464dULL), cfg_.family);
          const auto t0 = Clock::now();
          DcFit fit;
          if (n_star > n) {
            Rng u_rng = make_rng(seed, 0x554eULL);
            const Matrix u = p.target->sample_points(n_star - n, u_rng);
            fit = train_dc_rf_detailed(merge_unlabeled(p.train, u, plan.m, mix_seed(seed, 0x5041ULL)), fm,
                                       RidgeConfig{plan.lambda}, cfg_.workers);
          } else {
            fit = train_dc_rf_detailed(p.train, partition(p.train, plan.m, mix_seed(seed, 0x5041ULL)), fm,
                                       RidgeConfig{plan.lambda}, cfg_.workers);
          }
          const double train_seconds = seconds_since(t0);
          return RepResult{rep, seed, score(p, fm, fit.model.weights, cfg_.workers), timing_map(fit.timings, train_seconds)};
        });
      }
    }
    std::vector<std::pair<double, double>> pts;
    for (const auto& c : record_.cells) {
      const Summary s = record_.metric(c, "excess_risk");
      if (s.count > 0) pts.emplace_back(static_cast<double>(c.key.N), s.mean);
    }
    pts = drop_smallest_n(std::move(pts), static_cast<std::size_t>(cfg_.drop_smallest));
    if (pts.size() >= 3) {
      try {
        record_.fit = fit_rate(pts);
      } catch (const std::exception& e) {
        record_.failures.push_back(CellFailure{"fit", 0, e.what()});
      }
    }
  }

  void semi_supervised() {
    const Index n = cfg_.grids.N.empty() ? cfg_.dataset.synthetic.n_train : cfg_.grids.N.front();
    const Index n_star = n_star_for(n, 0);
    const ParamPlan plan = plan_parameters(n, n, cfg_.rates, cfg_.safety_c);
    const double lambda = cfg_.grids.lambda.empty() ? plan.lambda : cfg_.grids.lambda.front();
    const Index M = cfg_.grids.M.empty() ? plan.M : cfg_.grids.M.front();
    const KernelSpec kernel = kernel_for(cfg_.family, cfg_.bandwidth);
    for (Index rep = 0; rep < cfg_.repetitions; ++rep) {
      const std::uint64_t seed = rep_seed(cfg_.seed, rep);
      std::optional<Problem> p;
      try {
        p = synthetic_problem(rep_spec(cfg_, rep, n));
      } catch (const std::exception& e) {
        record_.failures.push_back(CellFailure{"data", rep, e.what()});
        continue;
      }
      Rng u_rng = make_rng(seed, 0x554eULL);
      const Matrix u = p->target->sample_points(n_star - n, u_rng);
      const FeatureMap fm = sample_uniform_features(p->train.dim(), M, kernel, mix_seed(seed, 0x464dULL), cfg_.family);
      for (Index m : cfg_.grids.m) {
        const std::uint64_t part_seed = mix_seed(seed, 0x5041ULL);
        attempt(CellKey{"supervised/m=" + std::to_string(m), n, n, m, M, lambda, kernel.bandwidth}, rep, [&] {
          const auto t0 = Clock::now();
          const DcFit fit = train_dc_rf_detailed(p->train, partition(p->train, m, part_seed), fm, RidgeConfig{lambda},
                                                 cfg_.workers);
          return RepResult{rep, seed, score(*p, fm, fit.model.weights, cfg_.workers),
                           timing_map(fit.timings, seconds_since(t0))};
        });
        attempt(CellKey{"semi/m=" + std::to_string(m), n, n_star, m, M, lambda, kernel.bandwidth}, rep, [&] {
          const auto t0 = Clock::now();
          const DcFit fit =
              train_dc_rf_detailed(merge_unlabeled(p->train, u, m, part_seed), fm, RidgeConfig{lambda}, cfg_.workers);
          return RepResult{rep, seed, score(*p, fm, fit.model.weights, cfg_.workers),
                           timing_map(fit.timings, seconds_since(t0))};
        });
      }
    }
  }

  void leverage_compare() {
    const Index n = cfg_.grids.N.empty() ? cfg_.dataset.synthetic.n_train : cfg_.grids.N.front();
    RateParams uniform_rates = cfg_.rates;
    uniform_rates.alpha = 1.0;
    const ParamPlan plan = plan_parameters(n, n, uniform_rates, cfg_.safety_c);
    const double lambda = cfg_.grids.lambda.empty() ? plan.lambda : cfg_.grids.lambda.front();
    const Index m = cfg_.grids.m.empty() ? 1 : cfg_.grids.m.front();
    const Index m_uniform = cfg_.grids.M.empty() ? plan.M : cfg_.grids.M.front();
    const KernelSpec kernel = kernel_for(cfg_.family, cfg_.bandwidth);
    for (Index rep = 0; rep < cfg_.repetitions; ++rep) {
      const std::uint64_t seed = rep_seed(cfg_.seed, rep);
      std::optional<Problem> p;
      try {
        p = synthetic_problem(rep_spec(cfg_, rep, n));
      } catch (const std::exception& e) {
        record_.failures.push_back(CellFailure{"data", rep, e.what()});
        continue;
      }
      const std::uint64_t part_seed = mix_seed(seed, 0x5041ULL);
      attempt(CellKey{"uniform", n, n, m, m_uniform, lambda, kernel.bandwidth}, rep, [&] {
        const auto t0 = Clock::now();
        const FeatureMap fm = sample_uniform_features(p->train.dim(), m_uniform, kernel, mix_seed(seed, 0x464dULL), cfg_.family);
        const DcFit fit = train_dc_rf_detailed(p->train, partition(p->train, m, part_seed), fm, RidgeConfig{lambda}, cfg_.workers);
        return RepResult{rep, seed, score(*p, fm, fit.model.weights, cfg_.workers), timing_map(fit.timings, seconds_since(t0))};
      });
      for (double frac : cfg_.grids.M_fraction) {
        const Index M = std::max<Index>(1, static_cast<Index>(std::floor(frac * static_cast<double>(m_uniform) + 1e-9)));
        attempt(CellKey{"leverage/M=" + std::to_string(M), n, n, m, M, lambda, kernel.bandwidth}, rep, [&] {
          const auto t0 = Clock::now();
          const std::uint64_t s = mix_seed(seed, 0x4c4556ULL + static_cast<std::uint64_t>(M));
          const FeatureMap pool = sample_uniform_features(p->train.dim(), cfg_.pool_factor * M, kernel, s, cfg_.family);
          // Leverage is estimated on a seeded subsample of the training inputs.
          const Index rows = std::min(cfg_.leverage_rows, p->train.size());
          std::vector<Index> sub(static_cast<std::size_t>(p->train.size()));
          std::iota(sub.begin(), sub.end(), Index{0});
          Rng rng = make_rng(s, 2);
          std::shuffle(sub.begin(), sub.end(), rng);
          sub.resize(static_cast<std::size_t>(rows));
          std::sort(sub.begin(), sub.end());
          const FeatureMap fm = resample_leverage_features(pool, p->train.points()(sub, Eigen::all), M, lambda, mix_seed(s, 3));
          const DcFit fit = train_dc_rf_detailed(p->train, partition(p->train, m, part_seed), fm, RidgeConfig{lambda}, cfg_.workers);
          return RepResult{rep, seed, score(*p, fm, fit.model.weights, cfg_.workers), timing_map(fit.timings, seconds_since(t0))};
        });
      }
    }
  }

  void decompose() {
    const Index n = cfg_.grids.N.empty() ? cfg_.dataset.synthetic.n_train : cfg_.grids.N.front();
    const Index n_star = n_star_for(n, 0);
    const ParamPlan base = plan_parameters(n, n_star, cfg_.rates, cfg_.safety_c);
    std::vector<double> lambdas = cfg_.grids.lambda.empty() ? std::vector<double>{base.lambda} : cfg_.grids.lambda;
    const std::vector<Index> ms = cfg_.grids.m.empty() ? std::vector<Index>{base.m} : cfg_.grids.m;
    const Index M = cfg_.grids.M.empty() ? base.M : cfg_.grids.M.front();
    const KernelSpec kernel = kernel_for(cfg_.family, cfg_.bandwidth);
    for (Index rep = 0; rep < cfg_.repetitions; ++rep) {
      const std::uint64_t seed = rep_seed(cfg_.seed, rep);
      SyntheticSpec spec = rep_spec(cfg_, rep, n);
      for (Index m : ms) {
        for (double lam : lambdas) {
          ParamPlan plan = base;
          plan.lambda = lam;
          plan.m = m;
          plan.M = M;
          attempt(CellKey{"m=" + std::to_string(m) + "/lambda=" + fmt_num(lam), n, n_star, m, M, lam, kernel.bandwidth},
                  rep, [&] {
                    const auto t0 = Clock::now();
                    const FeatureMap fm = sample_uniform_features(spec.d, M, kernel, mix_seed(seed, 0x464dULL), cfg_.family);
                    const ErrorDecomposition e =
                        decompose_errors(spec, plan, fm, cfg_.decomposition, mix_seed(seed, 0x4445ULL), cfg_.workers);
                    std::map<std::string, double> metrics{{"variance", e.variance},
                                                          {"empirical_error", e.empirical_error},
                                                          {"distributed_error", e.distributed_error},
                                                          {"rf_error", e.rf_error},
                                                          {"approximation_error", e.approximation_error},
                                                          {"excess_risk", e.total_excess_risk},
                                                          {"bound", e.bound()}};
                    return RepResult{rep, seed, std::move(metrics), {{"train_seconds", seconds_since(t0)}}};
                  });
        }
      }
    }
  }
};

}  // namespace detail

/// Runs every cell of the configured grid for every repetition. Repetition k
/// draws all of its randomness from a seed derived from (config seed, k), so a
/// rerun reproduces every metric. A failing cell is recorded and skipped.
inline RunRecord run_experiment(const ExperimentConfig& cfg) {
  cfg.validate();
  return detail::Runner(cfg).run();
}

// ---------------------------------------------------------------------------
// Output.

/// Column set of the metrics and timings CSVs.
inline constexpr const char* kCsvHeader = "row_type,cell,N,N_star,m,M,lambda,bandwidth,repetition,seed,metric,value";

namespace detail {

inline void csv_row(std::ostream& out, const std::string& type, const CellKey& k, const std::string& rep,
                    const std::string& seed, const std::string& metric, double value) {
  out << type << ',' << k.label << ',' << k.N << ',' << k.N_star << ',' << k.m << ',' << k.M << ',' << fmt_num(k.lambda)
      << ',' << fmt_num(k.bandwidth) << ',' << rep << ',' << seed << ',' << metric << ',' << fmt_num(value) << '\n';
}

template <typename Get>
void write_long_csv(std::ostream& out, const RunRecord& rec, Get&& get) {
  out << "# config: " << to_json(rec.config).dump() << '\n';
  out << kCsvHeader << '\n';
  for (const auto& c : rec.cells) {
    std::set<std::string> names;
    for (const auto& r : c.reps) {
      for (const auto& [name, value] : get(r)) {
        csv_row(out, "rep", c.key, std::to_string(r.repetition), std::to_string(r.seed), name, value);
        names.insert(name);
      }
    }
    for (const auto& name : names) {
      std::vector<double> v;
      for (const auto& r : c.reps)
        if (auto it = get(r).find(name); it != get(r).end()) v.push_back(it->second);
      const Summary s = summarize(v);
      csv_row(out, "mean", c.key, "", "", name, s.mean);
      csv_row(out, "std", c.key, "", "", name, s.stddev);
      csv_row(out, "median", c.key, "", "", name, s.median);
    }
  }
}

}  // namespace detail

/// Per-repetition and aggregate (mean, std, median) metric rows. Contains no
/// timings, so reruns with the same config are byte-identical.
inline void write_metrics_csv(std::ostream& out, const RunRecord& rec) {
  detail::write_long_csv(out, rec, [](const RepResult& r) -> const std::map<std::string, double>& { return r.metrics; });
}

inline void write_timings_csv(std::ostream& out, const RunRecord& rec) {
  detail::write_long_csv(out, rec, [](const RepResult& r) -> const std::map<std::string, double>& { return r.timings; });
}

inline Json summary_json(const RunRecord& rec) {
  Json cells = Json::array();
  for (const auto& c : rec.cells) {
    std::set<std::string> names;
    for (const auto& r : c.reps)
      for (const auto& [name, v] : r.metrics) names.insert(name);
    Json metrics = Json::object();
    for (const auto& name : names) {
      const Summary s = rec.metric(c, name);
      metrics[name] = Json{{"mean", s.mean}, {"std", s.stddev}, {"median", s.median}, {"count", s.count}};
    }
    cells.push_back(Json{{"cell", c.key.label},
                         {"N", c.key.N},
                         {"N_star", c.key.N_star},
                         {"m", c.key.m},
                         {"M", c.key.M},
                         {"lambda", c.key.lambda},
                         {"bandwidth", c.key.bandwidth},
                         {"repetitions", static_cast<Index>(c.reps.size())},
                         {"metrics", metrics}});
  }
  Json failures = Json::array();
  for (const auto& f : rec.failures)
    failures.push_back(Json{{"cell", f.cell}, {"repetition", f.repetition}, {"message", f.message}});
  Json j{{"config", to_json(rec.config)}, {"cells", cells}, {"failures", failures}, {"flags", rec.flags}};
  if (rec.fit)
    j["fit"] = Json{{"slope", rec.fit->slope},
                    {"intercept", rec.fit->intercept},
                    {"stderr", rec.fit->stderr_slope},
                    {"points", rec.fit->points}};
  if (rec.cv)
    j["cross_validation"] = Json{{"best_lambda", rec.cv->best_lambda},
                                 {"best_bandwidth", rec.cv->best_bandwidth},
                                 {"best_error", rec.cv->best_error},
                                 {"skipped_folds", rec.cv->skipped_folds},
                                 {"flags", rec.cv->flags}};
  return j;
}

/// Writes <prefix>.metrics.csv, <prefix>.timings.csv and <prefix>.summary.json.
inline void write_run_outputs(const RunRecord& rec, const std::string& prefix) {
  require(!prefix.empty(), "output prefix must be nonempty");
  auto open = [](const std::string& path) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw InvalidArgument("cannot write '" + path + "'");
    return f;
  };
  {
    auto f = open(prefix + ".metrics.csv");
    write_metrics_csv(f, rec);
  }
  {
    auto f = open(prefix + ".timings.csv");
    write_timings_csv(f, rec);
  }
  write_json_file(prefix + ".summary.json", summary_json(rec));
}

}  // namespace dcrf

#endif  // DCRF_HARNESS_HPP
