#include "dcrf/data.hpp"
#include "dcrf/solver.hpp"

#include <gtest/gtest.h>

using namespace dcrf;

namespace {

double objective(const Matrix& f, const Vector& y, const Vector& w, double lambda) {
  return (f * w - y).squaredNorm() / static_cast<double>(f.rows()) + lambda * w.squaredNorm();
}

Dataset random_dataset(Index n, Index d, std::uint64_t seed) {
  Rng rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  Matrix x(n, d);
  Vector y(n);
  for (Index i = 0; i < n; ++i) {
    for (Index c = 0; c < d; ++c) x(i, c) = normal(rng);
    y(i) = std::sin(x(i, 0)) + 0.1 * normal(rng);
  }
  return Dataset(std::move(x), std::move(y), "random");
}

}  // namespace

TEST(SolveLocal, ScalarClosedForm) {
  Matrix f = Matrix::Zero(1, 3);
  f(0, 0) = 1.0;
  const LocalModel m = solve_local(f, Vector::Ones(1), RidgeConfig{1.0});
  EXPECT_DOUBLE_EQ(m.weights(0), 0.5);
  EXPECT_EQ(m.weights(1), 0.0);
  EXPECT_EQ(m.weights(2), 0.0);
  EXPECT_EQ(m.n_local, 1);
}

TEST(SolveLocal, HeavyRegularizationShrinksToZero) {
  const Matrix f = Matrix::Random(20, 6);
  const Vector y = Vector::Random(20);
  const LocalModel m = solve_local(f, y, RidgeConfig{1e6});
  EXPECT_LE(m.weights.norm(), (f.transpose() * y / 20.0).norm() / 1e6);
}

TEST(SolveLocal, MatchesExplicitInverse) {
  const Matrix f = Matrix::Random(8, 5);
  const Vector y = Vector::Random(8);
  const double lambda = 0.03;
  const Matrix a = f.transpose() * f / 8.0 + lambda * Matrix::Identity(5, 5);
  const Vector expected = a.inverse() * (f.transpose() * y / 8.0);
  const LocalModel m = solve_local(f, y, RidgeConfig{lambda});
  EXPECT_LE((m.weights - expected).norm(), 1e-10 * expected.norm());
}

TEST(SolveLocal, StationarityResidual) {
  const Matrix f = Matrix::Random(200, 30);
  const Vector y = Vector::Random(200);
  const double lambda = 1e-4;
  const LocalModel m = solve_local(f, y, RidgeConfig{lambda});
  const Vector rhs = f.transpose() * y / 200.0;
  const Vector lhs = (f.transpose() * f / 200.0) * m.weights + lambda * m.weights;
  EXPECT_LE((lhs - rhs).norm(), 1e-10 * rhs.norm());
}

TEST(SolveLocal, ObjectiveNotImprovedByPerturbation) {
  const Matrix f = Matrix::Random(40, 7);
  const Vector y = Vector::Random(40);
  const double lambda = 0.01;
  const Vector w = solve_local(f, y, RidgeConfig{lambda}).weights;
  const double best = objective(f, y, w, lambda);
  EXPECT_LE(best, objective(f, y, Vector::Zero(7), lambda));
  Rng rng(3);
  std::normal_distribution<double> normal(0.0, 1.0);
  for (int t = 0; t < 100; ++t) {
    Vector u(7);
    for (Index k = 0; k < 7; ++k) u(k) = normal(rng);
    EXPECT_LE(best, objective(f, y, w + 1e-3 * u.normalized(), lambda));
  }
}

TEST(SolveLocal, RejectsBadInput) {
  EXPECT_THROW(solve_local(Matrix::Ones(2, 2), Vector::Ones(3), RidgeConfig{1.0}), InvalidArgument);
  EXPECT_THROW(solve_local(Matrix::Ones(2, 2), Vector::Ones(2), RidgeConfig{0.0}), InvalidArgument);
  Matrix bad = Matrix::Ones(2, 2);
  bad(1, 1) = std::nan("");
  EXPECT_THROW(solve_local(bad, Vector::Ones(2), RidgeConfig{1.0}), InvalidArgument);
}

TEST(Average, SingleModelIsUnchanged) {
  const LocalModel a{Vector::Random(4), "fm", 0, 7};
  EXPECT_EQ(average_models(std::span(&a, 1)).weights, a.weights);
}

TEST(Average, IdenticalModelsAreIdempotent) {
  const LocalModel a{Vector::Random(4), "fm", 0, 5};
  std::vector<LocalModel> v{a, a, a};
  v[1].n_local = 6;
  EXPECT_EQ(average_models(v).weights, a.weights);
}

TEST(Average, EqualSizesGiveArithmeticMean) {
  std::vector<LocalModel> v{{Vector::Unit(2, 0), "fm", 0, 3}, {Vector::Unit(2, 1), "fm", 1, 3}};
  const AveragedModel avg = average_models(v);
  EXPECT_DOUBLE_EQ(avg.weights(0), 0.5);
  EXPECT_DOUBLE_EQ(avg.weights(1), 0.5);
  EXPECT_EQ(avg.m, 2);
  EXPECT_EQ(avg.partition_sizes, (std::vector<Index>{3, 3}));
}

TEST(Average, UnequalSizesAreProportional) {
  std::vector<LocalModel> v{{Vector::Constant(1, 1.0), "fm", 0, 3}, {Vector::Constant(1, 4.0), "fm", 1, 1}};
  EXPECT_NEAR(average_models(v).weights(0), (3.0 * 1.0 + 4.0) / 4.0, 1e-15);
}

TEST(Average, MixedFeatureMapsThrow) {
  std::vector<LocalModel> v{{Vector::Ones(2), "a", 0, 1}, {Vector::Ones(2), "b", 1, 1}};
  EXPECT_THROW(average_models(v), InvalidArgument);
}

TEST(Predict, ZeroWeightsGiveZero) {
  const FeatureMap fm = sample_uniform_features(2, 10, KernelSpec::gaussian(1.0), 1);
  EXPECT_TRUE(predict(Vector::Zero(10), fm, Matrix::Random(5, 2)).isZero(0.0));
}

TEST(Predict, LinearInWeights) {
  const FeatureMap fm = sample_uniform_features(2, 10, KernelSpec::gaussian(1.0), 1);
  const Matrix x = Matrix::Random(5, 2);
  const LocalModel a{Vector::Random(10), fm.id(), 0, 4}, b{Vector::Random(10), fm.id(), 1, 4};
  const std::vector<LocalModel> both{a, b};
  const Vector avg = predict(average_models(both), fm, x);
  const Vector mean = 0.5 * (predict(a, fm, x) + predict(b, fm, x));
  EXPECT_LE((avg - mean).cwiseAbs().maxCoeff(), 1e-14);
}

TEST(Predict, MatchesScalarLoop) {
  const Index M = 6;
  const FeatureMap fm = sample_uniform_features(3, M, KernelSpec::gaussian(0.9), 4);
  const Matrix x = Matrix::Random(5, 3);
  const Vector w = Vector::Random(M);
  const Vector got = predict(w, fm, x);
  for (Index i = 0; i < 5; ++i) {
    double s = 0.0;
    for (Index j = 0; j < M; ++j) {
      double arg = fm.phases()(j);
      for (Index c = 0; c < 3; ++c) arg += fm.frequencies()(j, c) * x(i, c);
      s += w(j) * std::sqrt(2.0) * std::cos(arg) / std::sqrt(static_cast<double>(M));
    }
    EXPECT_NEAR(got(i), s, 1e-12);
  }
}

TEST(Predict, WrongMapOrDimensionThrows) {
  const FeatureMap fm = sample_uniform_features(2, 4, KernelSpec::gaussian(1.0), 1);
  const FeatureMap other = sample_uniform_features(2, 4, KernelSpec::gaussian(1.0), 2);
  const LocalModel a{Vector::Ones(4), fm.id(), 0, 1};
  EXPECT_THROW(predict(a, other, Matrix::Zero(1, 2)), InvalidArgument);
  EXPECT_THROW(predict(a, fm, Matrix::Zero(1, 3)), InvalidArgument);
  EXPECT_THROW(predict(Vector::Ones(3), fm, Matrix::Zero(1, 2)), InvalidArgument);
}

TEST(ExactKrr, ScalarCase) {
  const Dataset ds(Matrix::Zero(1, 1), Vector::Ones(1));
  const ExactKrrModel m = solve_exact_krr(ds, KernelSpec::gaussian(1.0), 1.0);
  EXPECT_DOUBLE_EQ(m.alphas(0), 0.5);
  EXPECT_DOUBLE_EQ(predict(m, Matrix::Zero(1, 1))(0), 0.5);
}

TEST(ExactKrr, HugeLambdaPredictsZero) {
  const Dataset ds = random_dataset(30, 2, 1);
  const ExactKrrModel m = solve_exact_krr(ds, KernelSpec::gaussian(1.0), 1e12);
  EXPECT_LE(predict(m, Matrix::Random(10, 2)).cwiseAbs().maxCoeff(), 1e-10);
}

TEST(ExactKrr, ResidualSmall) {
  const Dataset ds = random_dataset(50, 3, 2);
  const double lambda = 1e-3;
  const ExactKrrModel m = solve_exact_krr(ds, KernelSpec::gaussian(1.0), lambda);
  const Matrix k = exact_kernel_matrix(KernelSpec::gaussian(1.0), ds.points(), ds.points());
  const Vector r = k * m.alphas + lambda * 50.0 * m.alphas - ds.targets();
  EXPECT_LE(r.norm(), 1e-8 * ds.targets().norm());
  EXPECT_LE(m.relative_residual, 1e-8);
}

TEST(ExactKrr, GuardRefusesLargeProblems) {
  const Dataset ds(Matrix::Zero(kDenseGuard + 1, 1), Vector::Zero(kDenseGuard + 1));
  EXPECT_THROW(solve_exact_krr(ds, KernelSpec::gaussian(1.0), 1.0), GuardExceeded);
}

TEST(TrainDc, SinglePartitionEqualsLocalSolve) {
  const Dataset ds = random_dataset(100, 2, 5);
  const FeatureMap fm = sample_uniform_features(2, 20, KernelSpec::gaussian(1.0), 6);
  const RidgeConfig cfg{1e-3};
  const AveragedModel avg = train_dc_rf(ds, partition(ds, 1, 0), fm, cfg);
  const LocalModel local = solve_local(apply_features(fm, ds.points()), ds.targets(), cfg);
  EXPECT_LE((avg.weights - local.weights).norm(), 1e-12 * local.weights.norm());
  EXPECT_EQ(avg.feature_map_id, fm.id());
}

TEST(TrainDc, EmptyMergeMatchesSupervised) {
  const Dataset ds = random_dataset(90, 2, 7);
  const FeatureMap fm = sample_uniform_features(2, 15, KernelSpec::gaussian(1.0), 8);
  const RidgeConfig cfg{1e-2};
  const MergedDataset merged = merge_unlabeled(ds, Matrix(0, 2), 4, 11);
  EXPECT_EQ(train_dc_rf(merged, fm, cfg).weights, train_dc_rf(ds, partition(ds, 4, 11), fm, cfg).weights);
}

TEST(TrainDc, WorkerCountDoesNotChangeWeights) {
  const Dataset ds = random_dataset(2000, 3, 9);
  const FeatureMap fm = sample_uniform_features(3, 40, KernelSpec::gaussian(1.0), 10);
  const Partitioning part = partition(ds, 16, 12);
  const RidgeConfig cfg{1e-3};
  EXPECT_EQ(train_dc_rf(ds, part, fm, cfg, 1).weights, train_dc_rf(ds, part, fm, cfg, 8).weights);
}

TEST(TrainDc, ReplicatedDataAveragesToEachLocal) {
  const Dataset base = random_dataset(25, 2, 13);
  const Index m = 4;
  std::vector<Index> rows, assignment;
  for (Index j = 0; j < m; ++j)
    for (Index i = 0; i < base.size(); ++i) {
      rows.push_back(i);
      assignment.push_back(j);
    }
  const Dataset ds = base.subset(rows);
  const FeatureMap fm = sample_uniform_features(2, 12, KernelSpec::gaussian(1.0), 14);
  const DcFit fit = train_dc_rf_detailed(ds, Partitioning(m, assignment), fm, RidgeConfig{1e-3});
  for (const auto& local : fit.locals) EXPECT_EQ(fit.model.weights, local.weights);
}

TEST(TrainDc, ReportsTimingsPerPartition) {
  const Dataset ds = random_dataset(300, 2, 15);
  const FeatureMap fm = sample_uniform_features(2, 10, KernelSpec::gaussian(1.0), 16);
  const DcFit fit = train_dc_rf_detailed(ds, partition(ds, 3, 1), fm, RidgeConfig{1e-3});
  ASSERT_EQ(fit.timings.local_solve_seconds.size(), 3u);
  EXPECT_LE(fit.timings.solve_critical_path(), fit.timings.solve_total() + 1e-15);
  EXPECT_GE(fit.timings.feature_seconds, 0.0);
}

TEST(TrainDc, RejectsMismatchedInputs) {
  const Dataset ds = random_dataset(30, 2, 17);
  const FeatureMap fm3 = sample_uniform_features(3, 5, KernelSpec::gaussian(1.0), 1);
  EXPECT_THROW(train_dc_rf(ds, partition(ds, 2, 0), fm3, RidgeConfig{1.0}), InvalidArgument);
  const FeatureMap fm = sample_uniform_features(2, 5, KernelSpec::gaussian(1.0), 1);
  EXPECT_THROW(train_dc_rf(ds, partition(20, 2, 0), fm, RidgeConfig{1.0}), InvalidArgument);
}

TEST(TrainDc, RandomFeaturesApproachExactKrr) {
  const std::vector<Index> grid{50, 200, 800, 3200};
  std::vector<double> err(grid.size(), 0.0);
  const KernelSpec k = KernelSpec::gaussian(1.0);
  const double lambda = 0.05;
  for (std::uint64_t s = 0; s < 10; ++s) {
    SyntheticSpec spec;
    spec.n_train = 300;
    spec.n_test = 200;
    spec.d = 3;
    spec.spectrum_size = 8;
    spec.seed = 100 + s;
    const SyntheticData data = generate_synthetic(spec);
    const Vector exact = predict(solve_exact_krr(data.train, k, lambda), data.test.points());
    for (std::size_t g = 0; g < grid.size(); ++g) {
      const FeatureMap fm = sample_uniform_features(3, grid[g], k, mix_seed(spec.seed, g));
      const AveragedModel model = train_dc_rf(data.train, partition(data.train, 1, 0), fm, RidgeConfig{lambda});
      err[g] += (predict(model, fm, data.test.points()) - exact).squaredNorm() / 200.0 / 10.0;
    }
  }
  for (std::size_t g = 1; g < grid.size(); ++g) EXPECT_LE(err[g], err[g - 1]) << "M=" << grid[g];
}

TEST(TrainDc, MergedFirstMomentMatchesLabeled) {
  const Dataset labeled = random_dataset(60, 2, 18);
  const Matrix unlabeled = Matrix::Random(45, 2);
  const MergedDataset merged = merge_unlabeled(labeled, unlabeled, 3, 19);
  const FeatureMap fm = sample_uniform_features(2, 8, KernelSpec::gaussian(1.0), 20);
  const Matrix phi = apply_features(fm, merged.base().points());
  const Partitioning& part = merged.partitioning();
  for (Index j = 0; j < part.count(); ++j) {
    Vector merged_moment = Vector::Zero(8), labeled_moment = Vector::Zero(8);
    for (Index i : part.block(j)) {
      merged_moment += phi.row(i).transpose() * merged.base().targets()(i);
      if (merged.is_labeled(i)) labeled_moment += phi.row(i).transpose() * labeled.targets()(i);
    }
    merged_moment /= static_cast<double>(merged.total_per_partition()[static_cast<std::size_t>(j)]);
    labeled_moment /= static_cast<double>(merged.labeled_per_partition()[static_cast<std::size_t>(j)]);
    EXPECT_LE((merged_moment - labeled_moment).norm(), 1e-10 * labeled_moment.norm());
  }
}
