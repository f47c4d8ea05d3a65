#ifndef DCRF_SOLVER_HPP
#define DCRF_SOLVER_HPP

#include "dcrf/common.hpp"
#include "dcrf/data.hpp"
#include "dcrf/features.hpp"

#include <chrono>
#include <span>
#include <string>
#include <utility>
#include <variant>
#include <vector>

namespace dcrf {

struct RidgeConfig {
  double lambda = 1e-3;

  void validate() const { require(std::isfinite(lambda) && lambda > 0.0, "lambda must be finite and positive"); }
};

/// Ridge solution on one partition in feature space.
struct LocalModel {
  Vector weights;
  std::string feature_map_id;
  Index partition_index = 0;
  Index n_local = 0;
};

/// One-shot weighted average of local models sharing a feature map.
struct AveragedModel {
  Vector weights;
  Index m = 1;
  std::string feature_map_id;
  std::vector<Index> partition_sizes;
};

/// Kernel-space KRR oracle: alphas solve (K + lambda N I) alpha = y.
struct ExactKrrModel {
  Vector alphas;
  Matrix train_points;
  KernelSpec kernel;
  double lambda = 0.0;
  double relative_residual = 0.0;
};

/// Minimizer of (1/n) sum (<w, phi_i> - y_i)^2 + lambda |w|^2 for a feature
/// matrix with rows phi_i, via Cholesky of (F^T F / n + lambda I).
inline LocalModel solve_local(const Eigen::Ref<const Matrix>& features, const Eigen::Ref<const Vector>& targets,
                              const RidgeConfig& cfg, std::string feature_map_id = {}, Index partition_index = 0) {
  cfg.validate();
  const Index n = features.rows();
  const Index m_features = features.cols();
  require(n >= 1, "local solve needs at least one sample");
  require(targets.size() == n, "target count must equal feature rows");
  require(features.allFinite() && targets.allFinite(), "local problem contains non-finite values");

  const double inv_n = 1.0 / static_cast<double>(n);
  Matrix gram = Matrix::Zero(m_features, m_features);
  gram.selfadjointView<Eigen::Lower>().rankUpdate(features.transpose(), inv_n);
  gram.diagonal().array() += cfg.lambda;
  const Vector rhs = inv_n * (features.transpose() * targets);

  Eigen::LLT<Matrix, Eigen::Lower> llt(gram);
  if (llt.info() != Eigen::Success) {
    const double rcond = Eigen::LDLT<Matrix, Eigen::Lower>(gram).rcond();
    throw NumericalError("Cholesky of the local ridge system failed", rcond > 0.0 ? 1.0 / rcond : INFINITY);
  }
  Vector w = llt.solve(rhs);
  if (!w.allFinite()) throw NumericalError("local ridge solution is not finite", 1.0 / llt.rcond());
  return LocalModel{std::move(w), std::move(feature_map_id), partition_index, n};
}

/// Size-proportional average sum_j (n_j / N) w_j, accumulated as a running
/// weighted mean in partition order so identical locals average to themselves
/// exactly. Equal sizes reduce to the plain 1/m mean.
inline AveragedModel average_models(std::span<const LocalModel> locals) {
  require(!locals.empty(), "averaging needs at least one local model");
  const auto& first = locals.front();
  AveragedModel out{first.weights, static_cast<Index>(locals.size()), first.feature_map_id, {}};
  out.partition_sizes.reserve(locals.size());
  double seen = 0.0;
  for (const auto& local : locals) {
    if (local.feature_map_id != first.feature_map_id || local.weights.size() != first.weights.size())
      throw InvalidArgument("cannot average models built on different feature maps");
    require(local.n_local >= 1, "local model without samples");
    out.partition_sizes.push_back(local.n_local);
    if (seen == 0.0) {
      seen = static_cast<double>(local.n_local);
      continue;
    }
    seen += static_cast<double>(local.n_local);
    out.weights += (static_cast<double>(local.n_local) / seen) * (local.weights - out.weights);
  }
  return out;
}

inline Vector predict(const Vector& weights, const FeatureMap& fm, const Eigen::Ref<const Matrix>& points,
                      unsigned workers = 1) {
  require(weights.size() == fm.size(), "weight length does not match the feature count");
  return apply_features(fm, points, workers) * weights;
}

inline Vector predict(const AveragedModel& model, const FeatureMap& fm, const Eigen::Ref<const Matrix>& points,
                      unsigned workers = 1) {
  if (!model.feature_map_id.empty() && model.feature_map_id != fm.id())
    throw InvalidArgument("model was trained on feature map " + model.feature_map_id + ", not " + fm.id());
  return predict(model.weights, fm, points, workers);
}

inline Vector predict(const LocalModel& model, const FeatureMap& fm, const Eigen::Ref<const Matrix>& points,
                      unsigned workers = 1) {
  if (!model.feature_map_id.empty() && model.feature_map_id != fm.id())
    throw InvalidArgument("model was trained on feature map " + model.feature_map_id + ", not " + fm.id());
  return predict(model.weights, fm, points, workers);
}

inline ExactKrrModel solve_exact_krr(const Dataset& train, const KernelSpec& kernel, double lambda) {
  RidgeConfig{lambda}.validate();
  const Index n = train.size();
  if (n > kDenseGuard)
    throw GuardExceeded("exact KRR is a desk-scale oracle; N=" + std::to_string(n) + " exceeds " +
                        std::to_string(kDenseGuard));
  Matrix k = exact_kernel_matrix(kernel, train.points(), train.points());
  const Matrix system = k + lambda * static_cast<double>(n) * Matrix::Identity(n, n);
  Eigen::LLT<Matrix> llt(system);
  if (llt.info() != Eigen::Success) throw NumericalError("kernel system not positive definite", 1.0 / llt.rcond());
  Vector alpha = llt.solve(train.targets());
  const double ynorm = train.targets().norm();
  const double residual = (system * alpha - train.targets()).norm();
  return ExactKrrModel{std::move(alpha), train.points(), kernel, lambda, ynorm > 0.0 ? residual / ynorm : residual};
}

inline Vector predict(const ExactKrrModel& model, const Eigen::Ref<const Matrix>& points) {
  require(points.cols() == model.train_points.cols(), "dimension mismatch");
  return exact_kernel_matrix(model.kernel, points, model.train_points) * model.alphas;
}

/// Wall-clock breakdown of one distributed fit.
struct TrainTimings {
  double feature_seconds = 0.0;  // feature evaluation summed over partitions
  std::vector<double> local_solve_seconds;  // per partition
  double reduce_seconds = 0.0;

  /// Longest local solve: what m parallel workers would wait for.
  double solve_critical_path() const {
    return local_solve_seconds.empty() ? 0.0
                                       : *std::max_element(local_solve_seconds.begin(), local_solve_seconds.end());
  }
  double solve_total() const {
    double s = 0.0;
    for (double t : local_solve_seconds) s += t;
    return s;
  }
};

struct DcFit {
  std::vector<LocalModel> locals;
  AveragedModel model;
  TrainTimings timings;
};

namespace detail {

using Clock = std::chrono::steady_clock;

inline double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

inline DcFit fit_partitions(const Dataset& data, const Partitioning& part, const FeatureMap& fm,
                            const RidgeConfig& cfg, unsigned workers) {
  cfg.validate();
  require(part.total() == data.size(), "partitioning does not cover the dataset");
  require(fm.dim() == data.dim(), "feature map dimension does not match the data");
  const Index m = part.count();
  DcFit fit;
  fit.locals.resize(static_cast<std::size_t>(m));
  std::vector<double> feature_time(static_cast<std::size_t>(m), 0.0);
  fit.timings.local_solve_seconds.assign(static_cast<std::size_t>(m), 0.0);

  parallel_for(m, workers, [&](Index j) {
    const auto& rows = part.block(j);
    auto t0 = Clock::now();
    Matrix x(static_cast<Index>(rows.size()), data.dim());
    Vector y(static_cast<Index>(rows.size()));
    for (std::size_t i = 0; i < rows.size(); ++i) {
      x.row(static_cast<Index>(i)) = data.points().row(rows[i]);
      y(static_cast<Index>(i)) = data.targets()(rows[i]);
    }
    const Matrix features = apply_features(fm, x);
    feature_time[static_cast<std::size_t>(j)] = seconds_since(t0);
    t0 = Clock::now();
    try {
      fit.locals[static_cast<std::size_t>(j)] = solve_local(features, y, cfg, fm.id(), j);
    } catch (const NumericalError& e) {
      throw NumericalError("partition " + std::to_string(j) + ": " + e.what(), e.condition_estimate());
    }
    fit.timings.local_solve_seconds[static_cast<std::size_t>(j)] = seconds_since(t0);
  });

  for (double t : feature_time) fit.timings.feature_seconds += t;
  const auto t0 = Clock::now();
  fit.model = average_models(fit.locals);
  fit.timings.reduce_seconds = seconds_since(t0);
  return fit;
}

}  // namespace detail

/// Divide-and-conquer ridge regression in random-feature space: one local solve
/// per partition (run on up to `workers` threads) and a single averaging step.
/// The result does not depend on the worker count.
inline DcFit train_dc_rf_detailed(const Dataset& data, const Partitioning& part, const FeatureMap& fm,
                                  const RidgeConfig& cfg, unsigned workers = 1) {
  return detail::fit_partitions(data, part, fm, cfg, workers);
}

/// Semi-supervised variant: local problems run on the merged points with the
/// rescaled labels y*.
inline DcFit train_dc_rf_detailed(const MergedDataset& merged, const FeatureMap& fm, const RidgeConfig& cfg,
                                  unsigned workers = 1) {
  return detail::fit_partitions(merged.base(), merged.partitioning(), fm, cfg, workers);
}

inline AveragedModel train_dc_rf(const Dataset& data, const Partitioning& part, const FeatureMap& fm,
                                 const RidgeConfig& cfg, unsigned workers = 1) {
  return train_dc_rf_detailed(data, part, fm, cfg, workers).model;
}

inline AveragedModel train_dc_rf(const MergedDataset& merged, const FeatureMap& fm, const RidgeConfig& cfg,
                                 unsigned workers = 1) {
  return train_dc_rf_detailed(merged, fm, cfg, workers).model;
}

}  // namespace dcrf

#endif  // DCRF_SOLVER_HPP
