#include "dcrf/features.hpp"
#include "dcrf/theory.hpp"

#include <gtest/gtest.h>

#include <numbers>

using namespace dcrf;

namespace {

Matrix grid_points(Index count, Index d, std::uint64_t seed) {
  Rng rng(seed);
  std::uniform_real_distribution<double> u(-1.5, 1.5);
  Matrix x(count, d);
  for (Index i = 0; i < count; ++i)
    for (Index c = 0; c < d; ++c) x(i, c) = u(rng);
  return x;
}

// Sup over all pairs of the grid of |K_M - K|, averaged over `maps` draws.
double mean_sup_error(const Matrix& grid, Index M, int maps, std::uint64_t seed) {
  const KernelSpec k = KernelSpec::gaussian(1.0);
  const Matrix exact = exact_kernel_matrix(k, grid, grid);
  double total = 0.0;
  for (int t = 0; t < maps; ++t) {
    const Matrix phi = apply_features(sample_uniform_features(grid.cols(), M, k, mix_seed(seed, t)), grid);
    total += (phi * phi.transpose() - exact).cwiseAbs().maxCoeff();
  }
  return total / maps;
}

}  // namespace

TEST(SampleUniform, SingleFeatureIsReproducible) {
  const KernelSpec k = KernelSpec::gaussian(1.0);
  const FeatureMap a = sample_uniform_features(1, 1, k, 5), b = sample_uniform_features(1, 1, k, 5);
  EXPECT_EQ(a.frequencies(), b.frequencies());
  EXPECT_EQ(a.phases(), b.phases());
  EXPECT_EQ(a.id(), b.id());
  EXPECT_NE(a.id(), sample_uniform_features(1, 1, k, 6).id());
}

TEST(SampleUniform, FrequencyMeanNearZero) {
  const FeatureMap fm = sample_uniform_features(2, 10000, KernelSpec::gaussian(1.0), 17);
  const auto& w = fm.frequencies();
  const double n = static_cast<double>(w.size());
  const double mean = w.mean();
  const double sd = std::sqrt((w.array() - mean).square().sum() / (n - 1.0));
  EXPECT_LE(std::abs(mean), 3.0 * sd / std::sqrt(n));
  EXPECT_TRUE((fm.phases().array() >= 0.0).all());
  EXPECT_TRUE((fm.phases().array() < 2.0 * std::numbers::pi).all());
  EXPECT_TRUE((fm.importance_weights().array() == 1.0).all());
}

TEST(SampleUniform, BandwidthScalesFrequencies) {
  auto sd = [](const Matrix& w) {
    const double m = w.mean();
    return std::sqrt((w.array() - m).square().sum() / static_cast<double>(w.size() - 1));
  };
  const double s1 = sd(sample_uniform_features(2, 10000, KernelSpec::gaussian(1.0), 3).frequencies());
  const double s2 = sd(sample_uniform_features(2, 10000, KernelSpec::gaussian(2.0), 4).frequencies());
  EXPECT_NEAR(s2 / s1, 0.5, 0.05 * 0.5);
}

TEST(SampleUniform, SmallerMapsArePrefixes) {
  const KernelSpec k = KernelSpec::gaussian(0.7);
  const FeatureMap big = sample_uniform_features(3, 50, k, 9), small = sample_uniform_features(3, 20, k, 9);
  EXPECT_EQ(small.frequencies(), big.frequencies().topRows(20));
  EXPECT_EQ(small.phases(), big.phases().head(20));
}

TEST(FeatureMapType, ValidatesFields) {
  const KernelSpec k = KernelSpec::gaussian(1.0);
  EXPECT_THROW(FeatureMap(FeatureFamily::fourier, k, Matrix::Zero(1, 1), Vector::Constant(1, 7.0), Vector::Ones(1), 0),
               InvalidArgument);
  EXPECT_THROW(FeatureMap(FeatureFamily::fourier, k, Matrix::Zero(1, 1), Vector::Zero(1), Vector::Zero(1), 0),
               InvalidArgument);
  EXPECT_THROW(FeatureMap(FeatureFamily::projection, k, Matrix::Zero(1, 1), Vector::Zero(1), Vector::Ones(1), 0),
               InvalidArgument);
  EXPECT_THROW(KernelSpec::gaussian(0.0).validate(), InvalidArgument);
}

TEST(ApplyFeatures, ZeroFrequencyGivesSqrtTwo) {
  const FeatureMap fm(FeatureFamily::fourier, KernelSpec::gaussian(1.0), Matrix::Zero(1, 3), Vector::Zero(1),
                      Vector::Ones(1), 0);
  const Matrix phi = apply_features(fm, Matrix::Random(4, 3));
  for (Index i = 0; i < 4; ++i) EXPECT_DOUBLE_EQ(phi(i, 0), std::numbers::sqrt2);
}

TEST(ApplyFeatures, SelfInnerProductIsOneOnAverage) {
  Matrix x(1, 2);
  x << 0.3, -0.8;
  double mean = 0.0;
  for (int t = 0; t < 50; ++t) {
    const Matrix phi = apply_features(sample_uniform_features(2, 200, KernelSpec::gaussian(1.0), 100 + t), x);
    mean += phi.row(0).squaredNorm() / 50.0;
  }
  EXPECT_NEAR(mean, 1.0, 0.02);
}

TEST(ApplyFeatures, MatchesGaussianKernelAtUnitDistance) {
  Matrix x(2, 1);
  x << 0.25, 1.25;
  double mean = 0.0;
  for (int t = 0; t < 50; ++t) {
    const Matrix phi = apply_features(sample_uniform_features(1, 500, KernelSpec::gaussian(1.0), 200 + t), x);
    mean += phi.row(0).dot(phi.row(1)) / 50.0;
  }
  EXPECT_NEAR(mean, std::exp(-0.5), 0.02);
}

TEST(ApplyFeatures, DimensionMismatchThrows) {
  const FeatureMap fm = sample_uniform_features(3, 5, KernelSpec::gaussian(1.0), 0);
  EXPECT_THROW(apply_features(fm, Matrix::Zero(2, 4)), InvalidArgument);
}

TEST(ApplyFeatures, BoundedBySqrtTwo) {
  const Index M = 300;
  const FeatureMap fm = sample_uniform_features(4, M, KernelSpec::gaussian(0.5), 1);
  const Matrix raw = apply_features(fm, Matrix::Random(500, 4) * 10.0) * std::sqrt(static_cast<double>(M));
  EXPECT_LE(raw.cwiseAbs().maxCoeff(), std::numbers::sqrt2 * (1.0 + 1e-12));
}

TEST(ApplyFeatures, IndependentOfWorkerCount) {
  const FeatureMap fm = sample_uniform_features(5, 64, KernelSpec::gaussian(1.0), 2);
  const Matrix x = Matrix::Random(1000, 5);
  EXPECT_EQ(apply_features(fm, x, 1), apply_features(fm, x, 4));
}

TEST(ApplyFeatures, LinearFamiliesReproduceLinearKernel) {
  const Matrix x = Matrix::Random(6, 4);
  const Matrix exact = exact_kernel_matrix(KernelSpec::linear(), x, x);
  for (FeatureFamily fam : {FeatureFamily::projection, FeatureFamily::coordinate}) {
    Matrix mean = Matrix::Zero(6, 6);
    for (int t = 0; t < 200; ++t) {
      const Matrix phi = apply_features(sample_uniform_features(4, 200, KernelSpec::linear(), 300 + t, fam), x);
      mean += phi * phi.transpose() / 200.0;
    }
    EXPECT_LE((mean - exact).cwiseAbs().maxCoeff(), 0.05) << to_string(fam);
  }
}

TEST(ExactKernel, DiagonalIsOne) {
  const Matrix x = Matrix::Random(5, 3);
  const Matrix k = exact_kernel_matrix(KernelSpec::gaussian(0.8), x, x);
  for (Index i = 0; i < 5; ++i) EXPECT_DOUBLE_EQ(k(i, i), 1.0);
  EXPECT_TRUE((k.array() > 0.0).all() && (k.array() <= 1.0).all());
}

TEST(ExactKernel, DecaysWithDistance) {
  Matrix a(1, 2), b(6, 2);
  a << 0, 0;
  b << 0, 0, 0.5, 0, 1, 0, 2, 0, 5, 0, 40, 0;
  const Matrix k = exact_kernel_matrix(KernelSpec::gaussian(1.0), a, b);
  for (Index j = 1; j < 6; ++j) EXPECT_LT(k(0, j), k(0, j - 1));
  EXPECT_LT(k(0, 5), 1e-300);
}

TEST(ExactKernel, MatchesScalarLoop) {
  const Matrix a = Matrix::Random(3, 2), b = Matrix::Random(3, 2);
  const double s = 1.7;
  const Matrix k = exact_kernel_matrix(KernelSpec::gaussian(s), a, b);
  for (Index i = 0; i < 3; ++i)
    for (Index j = 0; j < 3; ++j) {
      double d2 = 0.0;
      for (Index c = 0; c < 2; ++c) d2 += (a(i, c) - b(j, c)) * (a(i, c) - b(j, c));
      EXPECT_NEAR(k(i, j), std::exp(-d2 / (2.0 * s * s)), 1e-15);
    }
}

TEST(Unbiasedness, SupGridWithinStatisticalTolerance) {
  const Matrix grid = grid_points(20, 2, 8);
  const KernelSpec k = KernelSpec::gaussian(1.0);
  const Index M = 50;
  const int R = 200;
  Matrix mean = Matrix::Zero(20, 20);
  for (int t = 0; t < R; ++t) {
    const Matrix phi = apply_features(sample_uniform_features(2, M, k, mix_seed(77, t)), grid);
    mean += phi * phi.transpose() / static_cast<double>(R);
  }
  const double sup = (mean - exact_kernel_matrix(k, grid, grid)).cwiseAbs().maxCoeff();
  EXPECT_LE(sup, 3.0 / std::sqrt(static_cast<double>(R * M)));
}

TEST(Unbiasedness, MonteCarloRateHalvesPerQuadrupling) {
  const Matrix grid = grid_points(20, 2, 9);
  const double e1 = mean_sup_error(grid, 100, 20, 1);
  const double e4 = mean_sup_error(grid, 400, 20, 2);
  EXPECT_GE(e4 / e1, 0.35);
  EXPECT_LE(e4 / e1, 0.7);
}

TEST(Leverage, LargeLambdaFollowsSecondMoments) {
  Matrix w(3, 2);
  w << 0.3, -0.2, 1.1, 0.4, -0.7, 2.0;
  Vector b(3);
  b << 0.1, 1.3, 4.0;
  const FeatureMap pool(FeatureFamily::fourier, KernelSpec::gaussian(1.0), w, b, Vector::Ones(3), 0);
  const Matrix x = grid_points(12, 2, 4);
  const double lambda = 1e8;
  const Vector scores = ridge_leverage_scores(pool, x, lambda);
  const Matrix z = apply_features(pool, x) / std::sqrt(12.0);
  for (Index i = 0; i < 3; ++i) EXPECT_NEAR(scores(i) * lambda / z.col(i).squaredNorm(), 1.0, 1e-6);
}

TEST(Leverage, SymmetricConstructionGivesEqualScores) {
  Matrix data(3, 3);
  data << 0.2, 0.9, -0.5, 0.9, -0.5, 0.2, -0.5, 0.2, 0.9;
  const FeatureMap pool(FeatureFamily::projection, KernelSpec::linear(), Matrix::Identity(3, 3), Vector::Zero(3),
                        Vector::Ones(3), 0);
  const Vector s = ridge_leverage_scores(pool, data, 0.05);
  EXPECT_NEAR(s(0), s(1), 1e-12);
  EXPECT_NEAR(s(1), s(2), 1e-12);
}

TEST(Leverage, ScoresSumToEffectiveDimension) {
  for (auto [n, p] : {std::pair<Index, Index>{30, 80}, std::pair<Index, Index>{80, 30}}) {
    const FeatureMap pool = sample_uniform_features(3, p, KernelSpec::gaussian(1.0), 12);
    const Matrix x = grid_points(n, 3, 13);
    const double lambda = 0.01;
    const double total = ridge_leverage_scores(pool, x, lambda).sum();
    const Matrix z = apply_features(pool, x) / std::sqrt(static_cast<double>(n));
    Eigen::SelfAdjointEigenSolver<Matrix> eig(z * z.transpose());
    const Vector ev = eig.eigenvalues().cwiseMax(0.0);
    const double expected = (ev.array() / (ev.array() + lambda)).sum();
    EXPECT_NEAR(total, expected, 1e-8 * expected) << "n=" << n << " P=" << p;
  }
}

TEST(Leverage, DegenerateDataFallsBackToUniform) {
  const FeatureMap pool = sample_uniform_features(2, 10, KernelSpec::linear(), 1, FeatureFamily::projection);
  const FeatureMap fm = resample_leverage_features(pool, Matrix::Zero(5, 2), 4, 0.1, 2);
  EXPECT_TRUE(fm.has_flag("leverage_uniform_fallback"));
  EXPECT_TRUE((fm.importance_weights().array() == 1.0).all());
}

TEST(Leverage, ResamplingIsDeterministicAndReweighted) {
  const FeatureMap pool = sample_uniform_features(2, 100, KernelSpec::gaussian(1.0), 1);
  const Matrix x = grid_points(40, 2, 2);
  const FeatureMap a = resample_leverage_features(pool, x, 10, 0.01, 3);
  const FeatureMap b = resample_leverage_features(pool, x, 10, 0.01, 3);
  EXPECT_EQ(a.id(), b.id());
  EXPECT_TRUE(a.has_flag("leverage_resampled"));
  const Vector s = ridge_leverage_scores(pool, x, 0.01);
  for (Index j = 0; j < a.size(); ++j) {
    Index src = -1;
    for (Index i = 0; i < pool.size(); ++i)
      if (pool.frequencies().row(i) == a.frequencies().row(j) && pool.phases()(i) == a.phases()(j)) src = i;
    ASSERT_GE(src, 0);
    const double q = s(src) / s.sum();
    EXPECT_NEAR(a.importance_weights()(j), 1.0 / std::sqrt(100.0 * q), 1e-12);
  }
  EXPECT_THROW(resample_leverage_features(pool, x, 101, 0.01, 3), InvalidArgument);
}

TEST(Leverage, KernelEstimateStaysComparableToUniform) {
  const Matrix train = grid_points(60, 2, 21), held = grid_points(20, 2, 22);
  const KernelSpec k = KernelSpec::gaussian(1.0);
  const Matrix exact = exact_kernel_matrix(k, held, held);
  const Index M = 40;
  double err_uniform = 0.0, err_leverage = 0.0;
  for (int t = 0; t < 20; ++t) {
    const Matrix pu = apply_features(sample_uniform_features(2, M, k, mix_seed(5, t)), held);
    const FeatureMap pool = sample_uniform_features(2, 20 * M, k, mix_seed(6, t));
    const Matrix pl = apply_features(resample_leverage_features(pool, train, M, 1e-2, mix_seed(7, t)), held);
    err_uniform += (pu * pu.transpose() - exact).cwiseAbs().mean();
    err_leverage += (pl * pl.transpose() - exact).cwiseAbs().mean();
  }
  EXPECT_LE(err_leverage, 2.0 * err_uniform);
}
