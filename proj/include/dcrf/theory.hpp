#ifndef DCRF_THEORY_HPP
#define DCRF_THEORY_HPP

#include "dcrf/common.hpp"
#include "dcrf/data.hpp"
#include "dcrf/features.hpp"
#include "dcrf/solver.hpp"

#include <fstream>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace dcrf {

/// Regularity r, capacity gamma and compatibility alpha. alpha = 1 is the
/// data-independent feature case, alpha = gamma the favorable one.
struct RateParams {
  double r = 0.5;
  double gamma = 1.0;
  double alpha = 1.0;

  void validate() const {
    require(r >= 0.5 && r <= 1.0, "r must lie in [1/2, 1]");
    require(gamma >= 0.0 && gamma <= 1.0, "gamma must lie in [0, 1]");
    require(alpha >= 0.0 && alpha <= 1.0, "alpha must lie in [0, 1]");
  }
};

struct ParamPlan {
  double lambda = 0.0;
  Index M = 1;
  Index m = 1;
  double rate_exponent = 0.0;
  Index N = 0;
  Index N_star = 0;
  RateParams params;
  double safety_c = 1.0;
  double M_exponent = 0.0;
  double m_exponent = 0.0;         // exponent of the labeled-only bound on m
  std::optional<double> n0;        // local sample threshold, known only when |L| is
};

struct ErrorDecomposition {
  double variance = 0.0;
  double empirical_error = 0.0;
  double distributed_error = 0.0;
  double rf_error = 0.0;
  double approximation_error = 0.0;
  double total_excess_risk = 0.0;
  Index replicates = 0;

  double bound() const {
    return 6.0 * variance + 6.0 * empirical_error + 3.0 * distributed_error + 3.0 * rf_error +
           3.0 * approximation_error;
  }
  bool within_bound(double slack = 0.1) const { return total_excess_risk <= (1.0 + slack) * bound(); }
};

/// sum_k s_k / (s_k + lambda).
inline double effective_dimension(std::span<const double> eigenvalues, double lambda) {
  require(lambda > 0.0, "lambda must be positive");
  double sum = 0.0;
  for (double s : eigenvalues) {
    require(s >= 0.0 && std::isfinite(s), "eigenvalues must be finite and nonnegative");
    sum += s / (s + lambda);
  }
  return sum;
}

inline double effective_dimension(const Vector& eigenvalues, double lambda) {
  return effective_dimension(std::span<const double>(eigenvalues.data(), static_cast<std::size_t>(eigenvalues.size())),
                             lambda);
}

namespace detail {

inline Vector clamped_eigenvalues(const Matrix& sym) {
  Eigen::SelfAdjointEigenSolver<Matrix> eig(sym, Eigen::EigenvaluesOnly);
  if (eig.info() != Eigen::Success) throw NumericalError("eigendecomposition failed", INFINITY);
  return eig.eigenvalues().cwiseMax(0.0);
}

inline void check_dense_guard(Index n) {
  if (n > kDenseGuard)
    throw GuardExceeded("dense eigendecomposition refused: n=" + std::to_string(n) + " exceeds " +
                        std::to_string(kDenseGuard));
}

}  // namespace detail

/// Effective dimension of the normalized kernel matrix K / n.
inline double empirical_effective_dimension(const Eigen::Ref<const Matrix>& sample, const KernelSpec& kernel,
                                            double lambda) {
  require(sample.rows() >= 1, "sample must be nonempty");
  detail::check_dense_guard(sample.rows());
  const Matrix k = exact_kernel_matrix(kernel, sample, sample) / static_cast<double>(sample.rows());
  return effective_dimension(detail::clamped_eigenvalues(k), lambda);
}

/// Effective dimension of the normalized feature Gram Phi Phi^T / n, computed on
/// whichever of the n x n and M x M forms is smaller.
inline double empirical_effective_dimension(const Eigen::Ref<const Matrix>& sample, const FeatureMap& fm,
                                            double lambda) {
  require(sample.rows() >= 1, "sample must be nonempty");
  detail::check_dense_guard(sample.rows());
  const Matrix z = apply_features(fm, sample) / std::sqrt(static_cast<double>(sample.rows()));
  const Matrix g = z.rows() <= z.cols() ? Matrix(z * z.transpose()) : Matrix(z.transpose() * z);
  return effective_dimension(detail::clamped_eigenvalues(g), lambda);
}

/// Finite-pool surrogate of F_inf: P times the largest ridge leverage score of
/// the pool on `data`. A single feature gives s / (s + lambda) with s its
/// empirical second moment.
inline double estimate_f_infinity(const FeatureMap& pool, const Eigen::Ref<const Matrix>& data, double lambda) {
  const Vector scores = ridge_leverage_scores(pool, data, lambda);
  return static_cast<double>(pool.size()) * scores.maxCoeff();
}

namespace detail {

// Guards floor/ceil of a real power against representation error.
inline Index floor_guarded(double x) { return static_cast<Index>(std::floor(x * (1.0 + 1e-12))); }
inline Index ceil_guarded(double x) { return static_cast<Index>(std::ceil(x * (1.0 - 1e-12))); }

}  // namespace detail

/// Hyperparameter rule for (S)KRR-DC-RF:
///   lambda = N^{-1/(2r+gamma)}
///   M      = ceil(c N^{((2r-1)(gamma-alpha+1)+alpha)/(2r+gamma)})
///   m      = floor(min(N^{(2r+2gamma-1)/(2r+gamma)}, N* N^{(-gamma-1)/(2r+gamma)}) / c), within [1, N]
/// `operator_norm` (|L|, when known) adds n0 = (4 / (3 |L|))^{2r+gamma}.
inline ParamPlan plan_parameters(Index N, Index N_star, const RateParams& params, double safety_c = 1.0,
                                 std::optional<double> operator_norm = std::nullopt) {
  params.validate();
  require(N >= 2, "N must be at least 2");
  require(N_star >= N, "N_star must be at least N");
  require(safety_c > 0.0 && std::isfinite(safety_c), "safety multiplier must be positive");
  const double r = params.r, g = params.gamma, a = params.alpha;
  const double denom = 2.0 * r + g;
  const double n = static_cast<double>(N);

  ParamPlan plan;
  plan.N = N;
  plan.N_star = N_star;
  plan.params = params;
  plan.safety_c = safety_c;
  plan.lambda = std::pow(n, -1.0 / denom);
  plan.M_exponent = ((2.0 * r - 1.0) * (g - a + 1.0) + a) / denom;
  plan.M = std::max<Index>(1, detail::ceil_guarded(safety_c * std::pow(n, plan.M_exponent)));
  plan.m_exponent = (2.0 * r + 2.0 * g - 1.0) / denom;
  const double bound_labeled = std::pow(n, plan.m_exponent);
  const double bound_total = static_cast<double>(N_star) * std::pow(n, (-g - 1.0) / denom);
  plan.m = std::clamp<Index>(detail::floor_guarded(std::min(bound_labeled, bound_total) / safety_c), 1, N);
  plan.rate_exponent = -2.0 * r / denom;
  if (operator_norm) {
    require(*operator_norm > 0.0, "operator norm must be positive");
    plan.n0 = std::pow(4.0 / (3.0 * *operator_norm), denom);
  }
  return plan;
}

// ---------------------------------------------------------------------------
// Error decomposition on synthetic problems.

struct DecompositionSizes {
  Index replicates = 10;
  Index eval_size = 5000;        // held-out sample for rho-norms (fourier features)
  Index population_factor = 10;  // fresh-sample multiple for population solutions (fourier features)
  Index kernel_cap = 4000;       // largest kernel solve used for f_lambda (fourier features)
};

namespace detail {

// Functions are embedded in a space where |f|_rho^2 is a fixed quadratic form:
// coefficient vectors under diag(mu) for linear feature families (exact), or
// values on an evaluation sample under the mean square otherwise.
struct RhoSpace {
  bool exact = false;
  Vector mu;          // exact: input covariance diagonal
  Matrix lift;        // exact: d x M map from feature weights to input coefficients
  Matrix eval_phi;    // sampled: features on the evaluation sample
  Vector f_h;
  Vector f_lambda;
  Vector f_lambda_m;

  Vector embed(const Vector& w) const { return exact ? Vector(lift * w) : Vector(eval_phi * w); }
  double norm2(const Vector& v) const {
    return exact ? v.cwiseAbs2().dot(mu) : v.squaredNorm() / static_cast<double>(v.size());
  }
};

inline RhoSpace build_rho_space(const SyntheticTarget& target, const FeatureMap& fm, double lambda, Index n_star,
                                const DecompositionSizes& sizes, std::uint64_t seed) {
  RhoSpace space;
  const Vector& mu = target.eigenvalues;
  if (fm.family() != FeatureFamily::fourier) {
    space.exact = true;
    space.mu = mu;
    // phi(x) = B x with B = diag(w / sqrt(M)) Omega.
    const Matrix b = (fm.importance_weights() / std::sqrt(static_cast<double>(fm.size()))).asDiagonal() *
                     fm.frequencies();
    space.lift = b.transpose();
    space.f_h = target.coefficients;
    space.f_lambda = (mu.array() / (mu.array() + lambda) * target.coefficients.array()).matrix();
    const Matrix sb = mu.asDiagonal() * b.transpose();  // Sigma B^T
    Matrix cov = b * sb;
    cov.diagonal().array() += lambda;
    const Vector rhs = sb.transpose() * target.coefficients;
    Eigen::LLT<Matrix> llt(cov);
    if (llt.info() != Eigen::Success) throw NumericalError("population feature system not positive definite", INFINITY);
    space.f_lambda_m = space.lift * llt.solve(rhs);
    return space;
  }

  Rng eval_rng = make_rng(seed, 0x4556414cULL);
  const Matrix eval_x = target.sample_points(sizes.eval_size, eval_rng);
  space.eval_phi = apply_features(fm, eval_x);
  space.f_h = target.evaluate(eval_x);

  Rng pop_rng = make_rng(seed, 0x504f50ULL);
  const Matrix pop_x = target.sample_points(sizes.population_factor * n_star, pop_rng);
  const Vector pop_y = target.evaluate(pop_x);
  const LocalModel pop_rf = solve_local(apply_features(fm, pop_x), pop_y, RidgeConfig{lambda});
  space.f_lambda_m = space.eval_phi * pop_rf.weights;

  const Index nk = std::min(pop_x.rows(), sizes.kernel_cap);
  const Dataset kernel_train(pop_x.topRows(nk), pop_y.head(nk));
  const ExactKrrModel krr = solve_exact_krr(kernel_train, fm.kernel(), lambda);
  space.f_lambda = predict(krr, eval_x);
  return space;
}

}  // namespace detail

/// Monte-Carlo estimate of the five terms bounding the excess risk of the
/// (semi-supervised) divide-and-conquer RF estimator, averaged over replicates:
///
///   variance    (1/m^2) sum_j |f^_j - f~_j|^2
///   empirical   (1/m^2) sum_j |f~_j - f_lambda^M|^2
///   distributed (1/m)   sum_j |f~_j - f_lambda^M|^2
///   rf          |f_lambda^M - f_lambda|^2
///   approx      |f_lambda - f_H|^2
///
/// f^_j is the local fit on noisy rescaled labels, f~_j the fit on the same
/// points labeled by f_H. The problem size comes from the plan (N labeled,
/// N_star total, m, lambda); the input law and f_H come from `spec`.
inline ErrorDecomposition decompose_errors(const SyntheticSpec& spec, const ParamPlan& plan, const FeatureMap& fm,
                                           const DecompositionSizes& sizes, std::uint64_t seed,
                                           unsigned workers = 1) {
  spec.validate();
  require(plan.N >= 1 && plan.N_star >= plan.N && plan.m >= 1 && plan.m <= plan.N, "invalid plan");
  require(sizes.replicates >= 1 && sizes.eval_size >= 1 && sizes.population_factor >= 1, "invalid Monte-Carlo sizes");
  require(fm.dim() == spec.d, "feature map dimension does not match the synthetic spec");
  const SyntheticTarget target = make_synthetic_target(spec);
  const RidgeConfig cfg{plan.lambda};
  const detail::RhoSpace space = detail::build_rho_space(target, fm, plan.lambda, plan.N_star, sizes, seed);

  ErrorDecomposition out;
  out.replicates = sizes.replicates;
  out.rf_error = space.norm2(space.f_lambda_m - space.f_lambda);
  out.approximation_error = space.norm2(space.f_lambda - space.f_h);

  const double m = static_cast<double>(plan.m);
  for (Index t = 0; t < sizes.replicates; ++t) {
    const std::uint64_t rep = mix_seed(seed, static_cast<std::uint64_t>(t) + 1);
    Rng x_rng = make_rng(rep, synthetic_stream::train_points);
    Rng noise_rng = make_rng(rep, synthetic_stream::train_noise);
    Rng u_rng = make_rng(rep, 0x554eULL);
    const Matrix x = target.sample_points(plan.N, x_rng);
    const Vector clean = target.evaluate(x);
    const Dataset labeled(x, clean + target.sample_noise(plan.N, noise_rng));
    const Matrix unlabeled = target.sample_points(plan.N_star - plan.N, u_rng);
    const MergedDataset merged = merge_unlabeled(labeled, unlabeled, plan.m, mix_seed(rep, 0x5041ULL));

    const DcFit noisy = train_dc_rf_detailed(merged, fm, cfg, workers);
    const Dataset clean_all = merged.base().with_targets(target.evaluate(merged.base().points()));
    const DcFit denoised = train_dc_rf_detailed(clean_all, merged.partitioning(), fm, cfg, workers);

    double var = 0.0, emp = 0.0;
    for (Index j = 0; j < plan.m; ++j) {
      const Vector hat = space.embed(noisy.locals[static_cast<std::size_t>(j)].weights);
      const Vector tilde = space.embed(denoised.locals[static_cast<std::size_t>(j)].weights);
      var += space.norm2(hat - tilde);
      emp += space.norm2(tilde - space.f_lambda_m);
    }
    out.variance += var / (m * m);
    out.empirical_error += emp / (m * m);
    out.distributed_error += emp / m;
    out.total_excess_risk += space.norm2(space.embed(noisy.model.weights) - space.f_h);
  }
  const double reps = static_cast<double>(sizes.replicates);
  out.variance /= reps;
  out.empirical_error /= reps;
  out.distributed_error /= reps;
  out.total_excess_risk /= reps;
  return out;
}

// ---------------------------------------------------------------------------
// Power-law fits.

struct RateFit {
  double slope = 0.0;
  double intercept = 0.0;
  double stderr_slope = 0.0;
  Index points = 0;
};

/// Least squares of log(risk) on log(N).
inline RateFit fit_rate(std::span<const std::pair<double, double>> results) {
  require(results.size() >= 3, "rate fit needs at least three points");
  const auto k = static_cast<double>(results.size());
  double mx = 0.0, my = 0.0;
  for (const auto& [n, risk] : results) {
    require(n > 0.0 && std::isfinite(n), "sample sizes must be positive");
    if (!(risk > 0.0) || !std::isfinite(risk)) throw InvalidArgument("excess risks must be positive and finite");
    mx += std::log(n);
    my += std::log(risk);
  }
  mx /= k;
  my /= k;
  double sxx = 0.0, sxy = 0.0;
  for (const auto& [n, risk] : results) {
    sxx += (std::log(n) - mx) * (std::log(n) - mx);
    sxy += (std::log(n) - mx) * (std::log(risk) - my);
  }
  require(sxx > 0.0, "rate fit needs at least two distinct N");
  RateFit fit;
  fit.points = static_cast<Index>(results.size());
  fit.slope = sxy / sxx;
  fit.intercept = my - fit.slope * mx;
  double ssr = 0.0;
  for (const auto& [n, risk] : results) {
    const double e = std::log(risk) - fit.intercept - fit.slope * std::log(n);
    ssr += e * e;
  }
  fit.stderr_slope = results.size() > 2 ? std::sqrt(ssr / (k - 2.0) / sxx) : 0.0;
  return fit;
}

/// Drops every point whose N is among the `drop_smallest` smallest distinct N.
inline std::vector<std::pair<double, double>> drop_smallest_n(std::vector<std::pair<double, double>> points,
                                                              std::size_t drop_smallest) {
  std::vector<double> ns;
  for (const auto& p : points) ns.push_back(p.first);
  std::sort(ns.begin(), ns.end());
  ns.erase(std::unique(ns.begin(), ns.end()), ns.end());
  if (drop_smallest == 0 || ns.empty()) return points;
  const double cut = ns[std::min(drop_smallest, ns.size()) - 1];
  std::erase_if(points, [cut](const auto& p) { return p.first <= cut; });
  return points;
}

/// Reads (N, risk) pairs from CSV. Accepts the harness metrics layout (rows with
/// row_type "mean" and metric "excess_risk") or a plain two-column file.
/// Lines starting with '#' are ignored.
inline std::vector<std::pair<double, double>> read_rate_csv(std::istream& in, const std::string& metric = "excess_risk") {
  std::vector<std::pair<double, double>> out;
  std::string line;
  std::size_t lineno = 0;
  std::vector<std::string> header;
  auto split_cells = [](const std::string& s) {
    std::vector<std::string> cells;
    std::string cell;
    std::istringstream ss(s);
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    return cells;
  };
  auto column = [&](std::string_view name) -> std::ptrdiff_t {
    const auto it = std::find(header.begin(), header.end(), name);
    return it == header.end() ? -1 : it - header.begin();
  };
  auto to_double = [&](const std::string& s) {
    const std::string_view v = detail::trim(s);
    return detail::parse_double(v, lineno);
  };
  while (std::getline(in, line)) {
    ++lineno;
    if (detail::trim(line).empty() || line.front() == '#') continue;
    auto cells = split_cells(line);
    if (header.empty()) {
      const std::string_view first = detail::trim(cells.front());
      if (!first.empty() && (std::isalpha(static_cast<unsigned char>(first.front())) || first.front() == '_')) {
        for (auto& c : cells) c = std::string(detail::trim(c));
        header = std::move(cells);
        continue;
      }
      header = {"N", "risk"};
    }
    if (cells.size() != header.size())
      throw FormatError("expected " + std::to_string(header.size()) + " columns", lineno);
    const auto i_metric = column("metric");
    if (i_metric >= 0) {
      const auto i_type = column("row_type"), i_n = column("N"), i_value = column("value");
      if (i_type < 0 || i_n < 0 || i_value < 0) throw FormatError("metrics CSV lacks row_type, N or value", lineno);
      if (detail::trim(cells[static_cast<std::size_t>(i_type)]) != "mean" ||
          detail::trim(cells[static_cast<std::size_t>(i_metric)]) != metric)
        continue;
      out.emplace_back(to_double(cells[static_cast<std::size_t>(i_n)]),
                       to_double(cells[static_cast<std::size_t>(i_value)]));
    } else {
      out.emplace_back(to_double(cells[0]), to_double(cells[1]));
    }
  }
  return out;
}

inline std::vector<std::pair<double, double>> read_rate_csv(const std::string& path,
                                                            const std::string& metric = "excess_risk") {
  std::ifstream in(path);
  if (!in) throw InvalidArgument("cannot open '" + path + "'");
  return read_rate_csv(in, metric);
}

}  // namespace dcrf

#endif  // DCRF_THEORY_HPP
