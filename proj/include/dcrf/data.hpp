#ifndef DCRF_DATA_HPP
#define DCRF_DATA_HPP

#include "dcrf/common.hpp"

#include <cerrno>
#include <charconv>
#include <cstdlib>
#include <fstream>
#include <map>
#include <numeric>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace dcrf {

/// A labeled sample: N points in R^d and N real targets.
///
/// Immutable after construction. `flags` carries non-fatal conditions raised
/// while producing the data (e.g. "limit_exceeds_rows", "binary_labels").
class Dataset {
 public:
  Dataset(Matrix points, Vector targets, std::string id = {}, std::vector<std::string> flags = {})
      : points_(std::move(points)), targets_(std::move(targets)), id_(std::move(id)), flags_(std::move(flags)) {
    require(points_.rows() >= 1 && points_.cols() >= 1, "dataset needs at least one row and one column");
    require(targets_.size() == points_.rows(), "target count must equal the number of points");
    require(points_.allFinite() && targets_.allFinite(), "dataset contains non-finite entries");
  }

  const Matrix& points() const noexcept { return points_; }
  const Vector& targets() const noexcept { return targets_; }
  const std::string& id() const noexcept { return id_; }
  const std::vector<std::string>& flags() const noexcept { return flags_; }
  bool has_flag(std::string_view f) const {
    return std::find(flags_.begin(), flags_.end(), f) != flags_.end();
  }
  Index size() const noexcept { return points_.rows(); }
  Index dim() const noexcept { return points_.cols(); }

  /// Rows in the given order.
  Dataset subset(std::span<const Index> rows, std::string id = {}) const {
    Matrix p(static_cast<Index>(rows.size()), dim());
    Vector t(static_cast<Index>(rows.size()));
    for (std::size_t i = 0; i < rows.size(); ++i) {
      p.row(static_cast<Index>(i)) = points_.row(rows[i]);
      t(static_cast<Index>(i)) = targets_(rows[i]);
    }
    return Dataset(std::move(p), std::move(t), id.empty() ? id_ : std::move(id), flags_);
  }

  Dataset with_targets(Vector targets) const { return Dataset(points_, std::move(targets), id_, flags_); }

  std::uint64_t content_hash() const noexcept {
    return fnv1a(targets_.data(), sizeof(double) * static_cast<std::size_t>(targets_.size()),
                 hash_matrix(points_));
  }

 private:
  Matrix points_;
  Vector targets_;
  std::string id_;
  std::vector<std::string> flags_;
};

/// Assignment of N items to m disjoint, nonempty blocks.
class Partitioning {
 public:
  Partitioning(Index m, std::vector<Index> assignment) : m_(m), assignment_(std::move(assignment)) {
    require(m_ >= 1, "partition count must be positive");
    blocks_.assign(static_cast<std::size_t>(m_), {});
    for (std::size_t i = 0; i < assignment_.size(); ++i) {
      const Index j = assignment_[i];
      require(j >= 0 && j < m_, "partition index out of range");
      blocks_[static_cast<std::size_t>(j)].push_back(static_cast<Index>(i));
    }
    for (const auto& b : blocks_) require(!b.empty(), "every partition must be nonempty");
  }

  Index count() const noexcept { return m_; }
  Index total() const noexcept { return static_cast<Index>(assignment_.size()); }
  const std::vector<Index>& assignment() const noexcept { return assignment_; }
  /// Member indices of block j, ascending.
  const std::vector<Index>& block(Index j) const { return blocks_.at(static_cast<std::size_t>(j)); }
  Index block_size(Index j) const { return static_cast<Index>(block(j).size()); }

  bool operator==(const Partitioning& o) const { return m_ == o.m_ && assignment_ == o.assignment_; }

 private:
  Index m_;
  std::vector<Index> assignment_;
  std::vector<std::vector<Index>> blocks_;
};

namespace detail {

// Near-equal split of a seeded permutation of [0, n) into m blocks; the first
// n mod m blocks receive one extra item.
inline std::vector<Index> split_assignment(Index n, Index m, std::uint64_t seed) {
  std::vector<Index> perm(static_cast<std::size_t>(n));
  std::iota(perm.begin(), perm.end(), Index{0});
  Rng rng = make_rng(seed, 0x5041525449ULL);
  std::shuffle(perm.begin(), perm.end(), rng);
  std::vector<Index> assignment(static_cast<std::size_t>(n));
  const Index base = n / m;
  const Index extra = n % m;
  Index pos = 0;
  for (Index j = 0; j < m; ++j) {
    const Index size = base + (j < extra ? 1 : 0);
    for (Index k = 0; k < size; ++k) assignment[static_cast<std::size_t>(perm[static_cast<std::size_t>(pos++)])] = j;
  }
  return assignment;
}

}  // namespace detail

/// Random near-equal partition of `n` items into `m` blocks, deterministic in `seed`.
inline Partitioning partition(Index n, Index m, std::uint64_t seed) {
  require(m >= 1, "partition count must be positive");
  if (m > n) throw InvalidArgument("partition count m=" + std::to_string(m) + " exceeds N=" + std::to_string(n));
  return Partitioning(m, detail::split_assignment(n, m, seed));
}

inline Partitioning partition(const Dataset& ds, Index m, std::uint64_t seed) { return partition(ds.size(), m, seed); }

/// Labeled data merged with unlabeled points, partition by partition.
///
/// Rows of `base()` are the labeled rows in their original order followed by
/// the unlabeled rows. Within partition j the labeled targets are scaled by
/// n*_j / n_j and unlabeled targets are zero, so the rescaled first moment over
/// the n*_j merged points equals the labeled first moment over n_j points.
class MergedDataset {
 public:
  MergedDataset(Dataset base, Index labeled_count, Partitioning partitioning, std::vector<Index> labeled_per_partition,
                std::vector<Index> total_per_partition)
      : base_(std::move(base)),
        labeled_count_(labeled_count),
        partitioning_(std::move(partitioning)),
        labeled_per_partition_(std::move(labeled_per_partition)),
        total_per_partition_(std::move(total_per_partition)) {
    require(partitioning_.total() == base_.size(), "merged partitioning must cover every merged point");
  }

  const Dataset& base() const noexcept { return base_; }
  const Partitioning& partitioning() const noexcept { return partitioning_; }
  Index labeled_count() const noexcept { return labeled_count_; }
  Index unlabeled_count() const noexcept { return base_.size() - labeled_count_; }
  bool is_labeled(Index row) const noexcept { return row < labeled_count_; }
  /// n_j, the labeled points of partition j.
  const std::vector<Index>& labeled_per_partition() const noexcept { return labeled_per_partition_; }
  /// n*_j, all points of partition j.
  const std::vector<Index>& total_per_partition() const noexcept { return total_per_partition_; }

 private:
  Dataset base_;
  Index labeled_count_;
  Partitioning partitioning_;
  std::vector<Index> labeled_per_partition_;
  std::vector<Index> total_per_partition_;
};

inline MergedDataset merge_unlabeled(const Dataset& labeled, const Eigen::Ref<const Matrix>& unlabeled, Index m,
                                     std::uint64_t seed) {
  require(labeled.size() >= 1, "labeled set must be nonempty");
  require(unlabeled.rows() == 0 || unlabeled.cols() == labeled.dim(), "unlabeled points must share dimension d");
  require(unlabeled.allFinite(), "unlabeled points contain non-finite entries");
  const Index n_lab = labeled.size();
  const Index n_unl = unlabeled.rows();
  if (m > n_lab) throw InvalidArgument("partition count exceeds labeled size");

  const auto lab_assign = detail::split_assignment(n_lab, m, seed);
  std::vector<Index> unl_assign;
  if (n_unl > 0) unl_assign = detail::split_assignment(n_unl, std::min(m, n_unl), mix_seed(seed, 0x554e4cULL));

  std::vector<Index> n_j(static_cast<std::size_t>(m), 0), nstar_j(static_cast<std::size_t>(m), 0);
  for (Index a : lab_assign) ++n_j[static_cast<std::size_t>(a)];
  nstar_j = n_j;
  for (Index a : unl_assign) ++nstar_j[static_cast<std::size_t>(a)];

  Matrix points(n_lab + n_unl, labeled.dim());
  points.topRows(n_lab) = labeled.points();
  if (n_unl > 0) points.bottomRows(n_unl) = unlabeled;
  Vector y = Vector::Zero(n_lab + n_unl);
  for (Index i = 0; i < n_lab; ++i) {
    const auto j = static_cast<std::size_t>(lab_assign[static_cast<std::size_t>(i)]);
    y(i) = n_unl == 0 ? labeled.targets()(i)
                      : static_cast<double>(nstar_j[j]) / static_cast<double>(n_j[j]) * labeled.targets()(i);
  }
  std::vector<Index> assignment = lab_assign;
  assignment.insert(assignment.end(), unl_assign.begin(), unl_assign.end());

  std::string id = labeled.id() + "+unlabeled" + std::to_string(n_unl);
  return MergedDataset(Dataset(std::move(points), std::move(y), std::move(id), labeled.flags()), n_lab,
                       Partitioning(m, std::move(assignment)), std::move(n_j), std::move(nstar_j));
}

// ---------------------------------------------------------------------------
// Synthetic data with a prescribed operator spectrum.

/// Spectral construction of a regression problem with known regularity r and
/// capacity gamma.
///
/// Inputs are Gaussian vectors in R^d with independent coordinates of variance
/// mu_k = k^{-1/gamma} (all ones when gamma = 0). Under the linear kernel the
/// integral operator then has eigenvalues exactly mu_k with eigenfunctions
/// x_k / sqrt(mu_k), and the target f_H = L^r g is the linear function with
/// coefficients mu_k^{r - 1/2} g_k. The source coefficients g_k are independent
/// Normal(0, k^{-(1 + 2 source_decay)}), which keeps ||g|| bounded as the
/// truncation level grows.
struct SyntheticSpec {
  Index n_train = 1000;
  Index n_test = 1000;
  Index d = 64;
  double r = 0.5;
  double gamma = 1.0;
  double noise_sigma = 0.1;
  Index spectrum_size = 64;
  std::uint64_t seed = 0;
  double source_decay = 0.25;

  void validate() const {
    require(n_train >= 1 && n_test >= 0, "synthetic sizes must be positive");
    require(d >= 1, "dimension must be positive");
    require(r >= 0.5 && r <= 1.0, "regularity r must lie in [1/2, 1]");
    require(gamma >= 0.0 && gamma <= 1.0, "capacity gamma must lie in [0, 1]");
    require(noise_sigma >= 0.0 && std::isfinite(noise_sigma), "noise_sigma must be finite and nonnegative");
    require(spectrum_size >= 8, "spectrum size must be at least 8");
    require(d <= spectrum_size, "ambient dimension cannot exceed the spectrum size");
    require(source_decay >= 0.0, "source decay must be nonnegative");
  }
};

/// Closed-form description of a synthetic problem: f_H(x) = <coefficients, x>
/// with x ~ Normal(0, diag(eigenvalues)).
struct SyntheticTarget {
  Vector eigenvalues;
  Vector coefficients;
  double noise_sigma = 0.0;

  Index dim() const noexcept { return eigenvalues.size(); }

  Vector evaluate(const Eigen::Ref<const Matrix>& points) const {
    require(points.cols() == dim(), "dimension mismatch evaluating synthetic target");
    return points * coefficients;
  }

  /// n fresh inputs; rows are drawn in order, so smaller draws are prefixes of larger ones.
  Matrix sample_points(Index n, Rng& rng) const {
    std::normal_distribution<double> normal(0.0, 1.0);
    const Vector scale = eigenvalues.cwiseSqrt();
    Matrix x(n, dim());
    for (Index i = 0; i < n; ++i)
      for (Index k = 0; k < dim(); ++k) x(i, k) = scale(k) * normal(rng);
    return x;
  }

  Vector sample_noise(Index n, Rng& rng) const {
    Vector e = Vector::Zero(n);
    if (noise_sigma == 0.0) return e;
    std::normal_distribution<double> normal(0.0, noise_sigma);
    for (Index i = 0; i < n; ++i) e(i) = normal(rng);
    return e;
  }

  /// Second moment of the input distribution (the linear-kernel covariance operator).
  Vector covariance_diagonal() const { return eigenvalues; }
};

inline Vector synthetic_spectrum(Index size, double gamma) {
  Vector mu(size);
  for (Index k = 0; k < size; ++k) mu(k) = gamma > 0.0 ? std::pow(static_cast<double>(k + 1), -1.0 / gamma) : 1.0;
  return mu;
}

struct SyntheticData {
  Dataset train;
  Dataset test;
  Vector truth;  // noiseless f_H on the test points
  SyntheticTarget target;
  std::vector<std::string> flags;
};

// Stream tags for the independent random components of a synthetic draw.
namespace synthetic_stream {
inline constexpr std::uint64_t source = 1, train_points = 2, train_noise = 3, test_points = 4, test_noise = 5;
}

inline SyntheticTarget make_synthetic_target(const SyntheticSpec& spec) {
  spec.validate();
  const Vector mu = synthetic_spectrum(spec.d, spec.gamma);
  Rng rng = make_rng(spec.seed, synthetic_stream::source);
  std::normal_distribution<double> normal(0.0, 1.0);
  Vector beta(spec.d);
  for (Index k = 0; k < spec.d; ++k) {
    const double g = normal(rng) * std::pow(static_cast<double>(k + 1), -(0.5 + spec.source_decay));
    beta(k) = std::pow(mu(k), spec.r - 0.5) * g;
  }
  return SyntheticTarget{mu, beta, spec.noise_sigma};
}

/// Draws train/test sets for `spec`. Equal specs give bit-identical output, and
/// a spec that differs only in n_train or n_test yields prefixes of the same rows.
inline SyntheticData generate_synthetic(const SyntheticSpec& spec) {
  SyntheticTarget target = make_synthetic_target(spec);
  std::vector<std::string> flags;
  if (spec.gamma == 0.0) flags.emplace_back("flat_spectrum_r_unidentifiable");
  if (spec.d < spec.spectrum_size) flags.emplace_back("spectrum_truncated_to_d");

  Rng train_rng = make_rng(spec.seed, synthetic_stream::train_points);
  Rng train_noise_rng = make_rng(spec.seed, synthetic_stream::train_noise);
  Rng test_rng = make_rng(spec.seed, synthetic_stream::test_points);
  Rng test_noise_rng = make_rng(spec.seed, synthetic_stream::test_noise);

  Matrix xtr = target.sample_points(spec.n_train, train_rng);
  Vector ytr = target.evaluate(xtr) + target.sample_noise(spec.n_train, train_noise_rng);
  const Index n_test = std::max<Index>(spec.n_test, 1);
  Matrix xte = target.sample_points(n_test, test_rng);
  Vector truth = target.evaluate(xte);
  Vector yte = truth + target.sample_noise(n_test, test_noise_rng);

  const std::string id = "synthetic-r" + std::to_string(spec.r) + "-g" + std::to_string(spec.gamma) + "-s" +
                         std::to_string(spec.seed);
  return SyntheticData{Dataset(std::move(xtr), std::move(ytr), id + "-train", flags),
                       Dataset(std::move(xte), std::move(yte), id + "-test", flags), std::move(truth),
                       std::move(target), flags};
}

// ---------------------------------------------------------------------------
// File ingestion.

enum class FileFormat { libsvm, csv };

inline FileFormat parse_file_format(std::string_view s) {
  if (s == "libsvm") return FileFormat::libsvm;
  if (s == "csv") return FileFormat::csv;
  throw InvalidArgument("unknown format '" + std::string(s) + "' (expected csv or libsvm)");
}

struct LoadOptions {
  bool csv_header = false;
  bool standardize = true;
  /// Feature count for libsvm; inferred from the largest index when unset.
  std::optional<Index> dim;
};

namespace detail {

inline double parse_double(std::string_view tok, std::size_t line) {
  double v = 0.0;
  const auto* first = tok.data();
  const auto* last = tok.data() + tok.size();
  auto [ptr, ec] = std::from_chars(first, last, v);
  if (ec != std::errc() || ptr != last || !std::isfinite(v))
    throw FormatError("cannot parse number '" + std::string(tok) + "'", line);
  return v;
}

inline std::vector<std::string_view> split(std::string_view s, char sep) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (start <= s.size()) {
    const std::size_t end = s.find(sep, start);
    out.push_back(s.substr(start, end == std::string_view::npos ? std::string_view::npos : end - start));
    if (end == std::string_view::npos) break;
    start = end + 1;
  }
  return out;
}

inline std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t' || s.front() == '\r')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r' || s.back() == '\n'))
    s.remove_suffix(1);
  return s;
}

struct RawRows {
  std::vector<std::vector<std::pair<Index, double>>> features;  // (0-based column, value)
  std::vector<double> labels;
  Index dim = 0;
};

inline RawRows read_libsvm(std::istream& in) {
  RawRows raw;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    std::string_view s = trim(line);
    if (const auto hash = s.find('#'); hash != std::string_view::npos) s = trim(s.substr(0, hash));
    if (s.empty()) continue;
    std::vector<std::pair<Index, double>> row;
    bool first = true;
    std::size_t pos = 0;
    while (pos < s.size()) {
      while (pos < s.size() && (s[pos] == ' ' || s[pos] == '\t')) ++pos;
      if (pos >= s.size()) break;
      std::size_t end = pos;
      while (end < s.size() && s[end] != ' ' && s[end] != '\t') ++end;
      const std::string_view tok = s.substr(pos, end - pos);
      pos = end;
      if (first) {
        raw.labels.push_back(parse_double(tok, lineno));
        first = false;
        continue;
      }
      const auto colon = tok.find(':');
      if (colon == std::string_view::npos) throw FormatError("expected idx:value, got '" + std::string(tok) + "'", lineno);
      long long idx = 0;
      const auto idx_tok = tok.substr(0, colon);
      auto [p, ec] = std::from_chars(idx_tok.data(), idx_tok.data() + idx_tok.size(), idx);
      if (ec != std::errc() || p != idx_tok.data() + idx_tok.size() || idx < 1)
        throw FormatError("invalid feature index '" + std::string(idx_tok) + "' (indices are 1-based)", lineno);
      row.emplace_back(static_cast<Index>(idx - 1), parse_double(tok.substr(colon + 1), lineno));
      raw.dim = std::max(raw.dim, static_cast<Index>(idx));
    }
    raw.features.push_back(std::move(row));
  }
  return raw;
}

inline RawRows read_csv(std::istream& in, bool header) {
  RawRows raw;
  std::string line;
  std::size_t lineno = 0;
  Index width = -1;
  bool seen_header = false;
  while (std::getline(in, line)) {
    ++lineno;
    const std::string_view s = trim(line);
    if (s.empty() || s.front() == '#') continue;
    if (header && !seen_header) {
      seen_header = true;
      continue;
    }
    const auto cells = split(s, ',');
    if (cells.size() < 2) throw FormatError("csv row needs at least one feature and a target", lineno);
    if (width < 0) width = static_cast<Index>(cells.size());
    if (static_cast<Index>(cells.size()) != width)
      throw FormatError("expected " + std::to_string(width) + " columns, found " + std::to_string(cells.size()), lineno);
    std::vector<std::pair<Index, double>> row;
    row.reserve(cells.size() - 1);
    for (std::size_t c = 0; c + 1 < cells.size(); ++c)
      row.emplace_back(static_cast<Index>(c), parse_double(trim(cells[c]), lineno));
    raw.labels.push_back(parse_double(trim(cells.back()), lineno));
    raw.features.push_back(std::move(row));
  }
  raw.dim = std::max<Index>(width - 1, 0);
  return raw;
}

}  // namespace detail

/// Per-column z-scoring in place; constant columns become zero.
inline void standardize_columns(Matrix& x) {
  const double n = static_cast<double>(x.rows());
  for (Index c = 0; c < x.cols(); ++c) {
    const double mean = x.col(c).sum() / n;
    x.col(c).array() -= mean;
    const double sd = std::sqrt(x.col(c).squaredNorm() / n);
    if (sd > 0.0 && std::isfinite(sd))
      x.col(c) /= sd;
    else
      x.col(c).setZero();
  }
}

/// Reads a libsvm or csv corpus.
///
/// With `limit` set, draws that many rows uniformly without replacement
/// (seeded); a limit above the row count keeps every row and raises the
/// "limit_exceeds_rows" flag. Two-valued labels are mapped to {-1, +1}
/// (smaller value to -1). Columns are standardized after subsampling.
inline Dataset load_dataset(const std::string& path, FileFormat format, std::optional<Index> limit = std::nullopt,
                            std::uint64_t seed = 0, const LoadOptions& options = {}) {
  std::ifstream in(path);
  if (!in) throw InvalidArgument("cannot open '" + path + "'");
  detail::RawRows raw = format == FileFormat::libsvm ? detail::read_libsvm(in) : detail::read_csv(in, options.csv_header);
  const auto rows = static_cast<Index>(raw.labels.size());
  if (rows == 0) throw FormatError("no data rows", 1);
  Index d = raw.dim;
  if (options.dim) {
    if (*options.dim < raw.dim) throw InvalidArgument("requested dimension is smaller than the largest feature index");
    d = *options.dim;
  }
  if (d == 0) throw FormatError("no feature columns", 1);

  std::vector<std::string> flags;
  std::vector<Index> keep(static_cast<std::size_t>(rows));
  std::iota(keep.begin(), keep.end(), Index{0});
  if (limit) {
    require(*limit >= 1, "limit must be positive");
    if (*limit > rows) {
      flags.emplace_back("limit_exceeds_rows");
    } else if (*limit < rows) {
      Rng rng = make_rng(seed, 0x4c4f4144ULL);
      // Partial Fisher-Yates: the first `limit` slots form a uniform sample.
      for (Index i = 0; i < *limit; ++i) {
        std::uniform_int_distribution<Index> pick(i, rows - 1);
        std::swap(keep[static_cast<std::size_t>(i)], keep[static_cast<std::size_t>(pick(rng))]);
      }
      keep.resize(static_cast<std::size_t>(*limit));
      std::sort(keep.begin(), keep.end());
    }
  }

  const auto n = static_cast<Index>(keep.size());
  Matrix x = Matrix::Zero(n, d);
  Vector y(n);
  for (Index i = 0; i < n; ++i) {
    const auto src = static_cast<std::size_t>(keep[static_cast<std::size_t>(i)]);
    for (const auto& [c, v] : raw.features[src]) x(i, c) = v;
    y(i) = raw.labels[src];
  }

  const std::set<double> distinct(raw.labels.begin(), raw.labels.end());
  if (distinct.size() == 2) {
    const double lo = *distinct.begin();
    for (Index i = 0; i < n; ++i) y(i) = y(i) == lo ? -1.0 : 1.0;
    flags.emplace_back("binary_labels");
  }
  if (options.standardize) standardize_columns(x);

  std::string id = path;
  if (limit) id += "#limit=" + std::to_string(*limit) + ",seed=" + std::to_string(seed);
  return Dataset(std::move(x), std::move(y), std::move(id), std::move(flags));
}

/// Seeded split into (train, test) with round(test_fraction * N) test rows.
inline std::pair<Dataset, Dataset> train_test_split(const Dataset& ds, double test_fraction, std::uint64_t seed) {
  require(test_fraction > 0.0 && test_fraction < 1.0, "test fraction must lie in (0, 1)");
  const Index n = ds.size();
  const auto n_test = static_cast<Index>(std::llround(test_fraction * static_cast<double>(n)));
  require(n_test >= 1 && n_test < n, "split leaves an empty side");
  std::vector<Index> perm(static_cast<std::size_t>(n));
  std::iota(perm.begin(), perm.end(), Index{0});
  Rng rng = make_rng(seed, 0x53504c4954ULL);
  std::shuffle(perm.begin(), perm.end(), rng);
  std::vector<Index> test(perm.begin(), perm.begin() + n_test), train(perm.begin() + n_test, perm.end());
  std::sort(test.begin(), test.end());
  std::sort(train.begin(), train.end());
  return {ds.subset(train, ds.id() + "/train"), ds.subset(test, ds.id() + "/test")};
}

}  // namespace dcrf

#endif  // DCRF_DATA_HPP
