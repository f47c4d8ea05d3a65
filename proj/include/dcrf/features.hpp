#ifndef DCRF_FEATURES_HPP
#define DCRF_FEATURES_HPP

#include "dcrf/common.hpp"

#include <numbers>
#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace dcrf {

enum class KernelKind { gaussian, linear };

/// Shift-invariant Gaussian kernel exp(-|x - x'|^2 / (2 bandwidth^2)), or the
/// plain inner product (used by the synthetic spectral construction).
struct KernelSpec {
  KernelKind kind = KernelKind::gaussian;
  double bandwidth = 1.0;

  static KernelSpec gaussian(double bandwidth) { return {KernelKind::gaussian, bandwidth}; }
  static KernelSpec linear() { return {KernelKind::linear, 1.0}; }

  void validate() const {
    require(std::isfinite(bandwidth) && bandwidth > 0.0, "kernel bandwidth must be finite and positive");
  }
  bool operator==(const KernelSpec&) const = default;
};

inline std::string to_string(KernelKind k) { return k == KernelKind::gaussian ? "gaussian" : "linear"; }

inline KernelKind parse_kernel_kind(std::string_view s) {
  if (s == "gaussian") return KernelKind::gaussian;
  if (s == "linear") return KernelKind::linear;
  throw InvalidArgument("unknown kernel '" + std::string(s) + "'");
}

/// How psi(x, omega) is formed from a frequency row.
///   fourier:    sqrt(2) cos(omega . x + b), omega ~ Normal(0, I / bandwidth^2)  -> Gaussian kernel
///   projection: omega . x, omega ~ Normal(0, I)                              -> linear kernel
///   coordinate: omega . x, omega = sqrt(d) e_k with k uniform                -> linear kernel
enum class FeatureFamily { fourier, projection, coordinate };

inline std::string to_string(FeatureFamily f) {
  switch (f) {
    case FeatureFamily::fourier: return "fourier";
    case FeatureFamily::projection: return "projection";
    case FeatureFamily::coordinate: return "coordinate";
  }
  return "?";
}

inline FeatureFamily parse_feature_family(std::string_view s) {
  if (s == "fourier") return FeatureFamily::fourier;
  if (s == "projection") return FeatureFamily::projection;
  if (s == "coordinate") return FeatureFamily::coordinate;
  throw InvalidArgument("unknown feature family '" + std::string(s) + "'");
}

inline FeatureFamily default_family(const KernelSpec& k) {
  return k.kind == KernelKind::gaussian ? FeatureFamily::fourier : FeatureFamily::projection;
}

inline KernelKind kernel_of(FeatureFamily f) {
  return f == FeatureFamily::fourier ? KernelKind::gaussian : KernelKind::linear;
}

/// Frozen random feature parameters defining phi_M.
///
/// Feature j evaluates to importance_weights[j] * psi(x, omega_j) / sqrt(M).
/// Uniformly sampled maps carry unit weights; leverage-resampled maps carry
/// 1 / sqrt(P q_j) so that <phi(x), phi(x')> stays unbiased for the pool kernel.
class FeatureMap {
 public:
  FeatureMap(FeatureFamily family, KernelSpec kernel, Matrix frequencies, Vector phases, Vector importance_weights,
             std::uint64_t seed, std::vector<std::string> flags = {})
      : family_(family),
        kernel_(kernel),
        frequencies_(std::move(frequencies)),
        phases_(std::move(phases)),
        weights_(std::move(importance_weights)),
        seed_(seed),
        flags_(std::move(flags)) {
    kernel_.validate();
    require(kernel_.kind == kernel_of(family_), "feature family does not match the kernel");
    require(frequencies_.rows() >= 1 && frequencies_.cols() >= 1, "feature map needs M >= 1 and d >= 1");
    require(phases_.size() == frequencies_.rows() && weights_.size() == frequencies_.rows(),
            "phases and weights must have one entry per feature");
    require(frequencies_.allFinite(), "frequencies must be finite");
    for (Index j = 0; j < size(); ++j) {
      require(phases_(j) >= 0.0 && phases_(j) < 2.0 * std::numbers::pi, "phases must lie in [0, 2pi)");
      require(weights_(j) > 0.0 && std::isfinite(weights_(j)), "importance weights must be positive");
    }
    if (family_ == FeatureFamily::coordinate) {
      coordinates_.resize(static_cast<std::size_t>(size()));
      for (Index j = 0; j < size(); ++j) {
        Index k = -1;
        for (Index c = 0; c < dim(); ++c) {
          if (frequencies_(j, c) != 0.0) {
            require(k < 0, "coordinate features need exactly one nonzero frequency entry");
            k = c;
          }
        }
        require(k >= 0, "coordinate features need exactly one nonzero frequency entry");
        coordinates_[static_cast<std::size_t>(j)] = k;
      }
    }
    id_ = "fm-" + hex64(fnv1a(weights_.data(), sizeof(double) * static_cast<std::size_t>(weights_.size()),
                              fnv1a(phases_.data(), sizeof(double) * static_cast<std::size_t>(phases_.size()),
                                    hash_matrix(frequencies_, seed_ ^ static_cast<std::uint64_t>(family_)))));
  }

  FeatureFamily family() const noexcept { return family_; }
  const KernelSpec& kernel() const noexcept { return kernel_; }
  double bandwidth() const noexcept { return kernel_.bandwidth; }
  const Matrix& frequencies() const noexcept { return frequencies_; }
  const Vector& phases() const noexcept { return phases_; }
  const Vector& importance_weights() const noexcept { return weights_; }
  std::uint64_t seed() const noexcept { return seed_; }
  const std::vector<std::string>& flags() const noexcept { return flags_; }
  bool has_flag(std::string_view f) const { return std::find(flags_.begin(), flags_.end(), f) != flags_.end(); }
  /// Content-derived identifier; models reference their feature map by it.
  const std::string& id() const noexcept { return id_; }
  Index size() const noexcept { return frequencies_.rows(); }
  Index dim() const noexcept { return frequencies_.cols(); }
  /// Column index used by feature j of a coordinate map.
  Index coordinate(Index j) const { return coordinates_.at(static_cast<std::size_t>(j)); }

  /// Upper bound on |psi(x, omega)| for this family, where one exists (kappa * sqrt(2) for cosines).
  std::optional<double> psi_bound() const {
    if (family_ == FeatureFamily::fourier) return std::numbers::sqrt2;
    return std::nullopt;
  }

 private:
  FeatureFamily family_;
  KernelSpec kernel_;
  Matrix frequencies_;
  Vector phases_;
  Vector weights_;
  std::uint64_t seed_;
  std::vector<std::string> flags_;
  std::vector<Index> coordinates_;
  std::string id_;
};

/// Draws M features from the kernel's spectral distribution.
///
/// Rows are drawn one feature at a time (frequency then phase), so the first
/// M features of a larger draw with the same seed are identical.
inline FeatureMap sample_uniform_features(Index d, Index m_features, const KernelSpec& kernel, std::uint64_t seed,
                                          std::optional<FeatureFamily> family = std::nullopt) {
  require(d >= 1, "dimension must be positive");
  require(m_features >= 1, "feature count must be positive");
  kernel.validate();
  const FeatureFamily fam = family.value_or(default_family(kernel));
  require(kernel.kind == kernel_of(fam), "feature family does not match the kernel");

  Rng rng = make_rng(seed, 0x46454154ULL);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> phase(0.0, 2.0 * std::numbers::pi);
  std::uniform_int_distribution<Index> column(0, d - 1);

  Matrix omega = Matrix::Zero(m_features, d);
  Vector b = Vector::Zero(m_features);
  for (Index j = 0; j < m_features; ++j) {
    switch (fam) {
      case FeatureFamily::fourier:
        for (Index c = 0; c < d; ++c) omega(j, c) = normal(rng) / kernel.bandwidth;
        b(j) = phase(rng);
        if (b(j) >= 2.0 * std::numbers::pi) b(j) = 0.0;
        break;
      case FeatureFamily::projection:
        for (Index c = 0; c < d; ++c) omega(j, c) = normal(rng);
        break;
      case FeatureFamily::coordinate:
        omega(j, column(rng)) = std::sqrt(static_cast<double>(d));
        break;
    }
  }
  return FeatureMap(fam, kernel, std::move(omega), std::move(b), Vector::Ones(m_features), seed);
}

namespace detail {

inline constexpr Index kFeatureRowBlock = 256;

// psi(x, omega_j) for a block of rows, before weights and the 1/sqrt(M) factor.
inline Matrix raw_features(const FeatureMap& fm, const Eigen::Ref<const Matrix>& x) {
  if (fm.family() == FeatureFamily::coordinate) {
    Matrix z(x.rows(), fm.size());
    for (Index j = 0; j < fm.size(); ++j) z.col(j) = fm.frequencies()(j, fm.coordinate(j)) * x.col(fm.coordinate(j));
    return z;
  }
  Matrix z = x * fm.frequencies().transpose();
  if (fm.family() == FeatureFamily::fourier) {
    z.rowwise() += fm.phases().transpose();
    z = std::numbers::sqrt2 * z.array().cos();
  }
  return z;
}

}  // namespace detail

/// Evaluates phi_M on each row of `points`, giving an n x M matrix.
///
/// Rows are processed in fixed blocks of 256, so the result is bit-identical
/// for any worker count.
inline Matrix apply_features(const FeatureMap& fm, const Eigen::Ref<const Matrix>& points, unsigned workers = 1) {
  if (points.cols() != fm.dim())
    throw InvalidArgument("feature map expects d=" + std::to_string(fm.dim()) + ", got " +
                          std::to_string(points.cols()));
  const Index n = points.rows();
  Matrix out(n, fm.size());
  const Vector scale = fm.importance_weights() / std::sqrt(static_cast<double>(fm.size()));
  const Index blocks = (n + detail::kFeatureRowBlock - 1) / detail::kFeatureRowBlock;
  parallel_for(blocks, workers, [&](Index b) {
    const Index start = b * detail::kFeatureRowBlock;
    const Index rows = std::min(detail::kFeatureRowBlock, n - start);
    out.middleRows(start, rows) = detail::raw_features(fm, points.middleRows(start, rows)) * scale.asDiagonal();
  });
  return out;
}

/// Dense kernel matrix between the rows of a (n x d) and b (p x d).
inline Matrix exact_kernel_matrix(const KernelSpec& kernel, const Eigen::Ref<const Matrix>& a,
                                  const Eigen::Ref<const Matrix>& b) {
  kernel.validate();
  require(a.cols() == b.cols(), "kernel arguments must share dimension d");
  if (kernel.kind == KernelKind::linear) return a * b.transpose();
  const double scale = -0.5 / (kernel.bandwidth * kernel.bandwidth);
  Matrix k(a.rows(), b.rows());
  for (Index j = 0; j < b.rows(); ++j)
    for (Index i = 0; i < a.rows(); ++i) k(i, j) = std::exp(scale * (a.row(i) - b.row(j)).squaredNorm());
  return k;
}

/// Empirical ridge leverage of each pool feature on `data`.
///
/// With z_i the i-th column of apply_features(pool, data) / sqrt(n), returns
/// l_i = z_i^T (Z Z^T + lambda I)^{-1} z_i. The scores sum to the effective
/// dimension of the pool kernel's normalized Gram matrix at lambda. The smaller
/// of the n x n and P x P systems is factorized.
inline Vector ridge_leverage_scores(const FeatureMap& pool, const Eigen::Ref<const Matrix>& data, double lambda) {
  require(lambda > 0.0 && std::isfinite(lambda), "lambda must be positive");
  require(data.rows() >= 1, "leverage scores need data");
  const Index n = data.rows();
  const Index p = pool.size();
  const Matrix z = apply_features(pool, data) / std::sqrt(static_cast<double>(n));

  auto factor = [](Matrix g, double lam) {
    const Index dim = g.rows();
    g.diagonal().array() += lam;
    Eigen::LLT<Matrix> llt(g);
    if (llt.info() != Eigen::Success) {
      g.diagonal().array() += 1e-10 * g.trace() / static_cast<double>(dim);
      llt.compute(g);
      if (llt.info() != Eigen::Success) throw NumericalError("leverage system not positive definite", INFINITY);
    }
    return llt;
  };

  Vector scores(p);
  if (n <= p) {
    Matrix g = Matrix::Zero(n, n);
    g.selfadjointView<Eigen::Lower>().rankUpdate(z);
    const auto llt = factor(g.selfadjointView<Eigen::Lower>(), lambda);
    const Matrix y = llt.matrixL().solve(z);
    scores = y.colwise().squaredNorm().transpose();
  } else {
    Matrix g = Matrix::Zero(p, p);
    g.selfadjointView<Eigen::Lower>().rankUpdate(z.transpose());
    const Matrix gram = g.selfadjointView<Eigen::Lower>();
    const auto llt = factor(gram, lambda);
    // diag((G + lambda)^{-1} G)
    const Matrix sol = llt.solve(gram);
    scores = sol.diagonal();
  }
  return scores.cwiseMax(0.0);
}

/// Resamples M features from `pool` with probability proportional to their
/// ridge leverage on `data`, reweighting by 1 / sqrt(P q_i).
///
/// When every score is zero the draw falls back to uniform probabilities and
/// the map carries the "leverage_uniform_fallback" flag.
inline FeatureMap resample_leverage_features(const FeatureMap& pool, const Eigen::Ref<const Matrix>& data,
                                             Index m_features, double lambda, std::uint64_t seed) {
  require(m_features >= 1, "feature count must be positive");
  require(pool.size() >= m_features, "pool must hold at least M features");
  const Index p = pool.size();
  const Vector scores = ridge_leverage_scores(pool, data, lambda);
  const double total = scores.sum();

  std::vector<std::string> flags{"leverage_resampled"};
  Vector q(p);
  if (!(total > 0.0) || !std::isfinite(total)) {
    q.setConstant(1.0 / static_cast<double>(p));
    flags.emplace_back("leverage_uniform_fallback");
  } else {
    q = scores / total;
  }

  Rng rng = make_rng(seed, 0x4c4556ULL);
  std::discrete_distribution<Index> pick(q.data(), q.data() + q.size());
  Matrix omega(m_features, pool.dim());
  Vector b(m_features), w(m_features);
  for (Index j = 0; j < m_features; ++j) {
    const Index i = pick(rng);
    omega.row(j) = pool.frequencies().row(i);
    b(j) = pool.phases()(i);
    w(j) = pool.importance_weights()(i) / std::sqrt(static_cast<double>(p) * q(i));
  }
  return FeatureMap(pool.family(), pool.kernel(), std::move(omega), std::move(b), std::move(w), seed,
                    std::move(flags));
}

}  // namespace dcrf

#endif  // DCRF_FEATURES_HPP
