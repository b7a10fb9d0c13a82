#include "ccnn/preprocess.hpp"
#include "test_util.hpp"

#include <gtest/gtest.h>

using namespace ccnn;
using ccnn::testing::random_image;
using ccnn::testing::random_matrix;

namespace {

double population_sd(const Eigen::Ref<const Vector>& v) {
  const double mean = v.mean();
  return std::sqrt((v.array() - mean).square().mean());
}

}  // namespace

TEST(FitScale, UnitMaxNormGivesGammaOne) {
  Matrix Z(3, 2);
  Z << 1, 0, 0.3, 0.4, 0, 0.5;
  EXPECT_DOUBLE_EQ(fit_scale(Z).gamma, 1.0);
}

TEST(FitScale, SinglePatchOfNormFour) {
  Matrix Z(1, 2);
  Z << 0, 4;
  EXPECT_DOUBLE_EQ(fit_scale(Z).gamma, 0.25);
}

TEST(FitScale, ScaledPatchesHaveMaxNormOne) {
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    const Matrix Z = random_matrix(50, 9, seed, 3.0);
    const Matrix S = fit_scale(Z).gamma * Z;
    EXPECT_NEAR(S.rowwise().norm().maxCoeff(), 1.0, 1e-14);
  }
}

TEST(FitScale, EmptyThrowsAndZeroIsFloored) {
  EXPECT_THROW(fit_scale(Matrix(0, 3)), ShapeError);
  EXPECT_DOUBLE_EQ(fit_scale(Matrix::Zero(2, 3)).gamma, 1.0 / kNormFloor);
}

TEST(UnitSphere, Examples) {
  Vector z(2);
  z << 3, 4;
  const auto r = unit_sphere_normalize(z);
  EXPECT_FALSE(r.degenerate);
  EXPECT_NEAR(r.z(0), 0.6, 1e-15);
  EXPECT_NEAR(r.z(1), 0.8, 1e-15);

  Vector e = Vector::Zero(5);
  e(2) = 1;
  EXPECT_EQ(unit_sphere_normalize(e).z, e);

  const auto zero = unit_sphere_normalize(Vector::Zero(4));
  EXPECT_TRUE(zero.degenerate);
  EXPECT_EQ(zero.z, Vector::Zero(4));
}

TEST(UnitSphere, ScaleInvariant) {
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    const Vector z = random_matrix(7, 1, seed);
    for (double c : {1e-3, 0.5, 3.0, 1e4}) {
      const Vector a = unit_sphere_normalize(z).z, b = unit_sphere_normalize(c * z).z;
      EXPECT_LE((a - b).cwiseAbs().maxCoeff(), 1e-14);
      EXPECT_NEAR(b.norm(), 1.0, 1e-14);
    }
  }
}

TEST(GlobalContrast, ConstantImageBecomesZero) {
  Image x({2, 4, 4});
  x.pixels.setConstant(0.7f);
  EXPECT_TRUE((global_contrast_normalize(x).pixels.array() == 0.0f).all());
}

TEST(GlobalContrast, StandardizedImageUnchanged) {
  Image x({1, 2, 2});
  x.pixels << 1, -1, 1, -1;  // mean 0, population sd 1
  EXPECT_LE((global_contrast_normalize(x).pixels - x.pixels).cwiseAbs().maxCoeff(), 1e-7);
}

TEST(GlobalContrast, RandomImageHasZeroMeanUnitSd) {
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    const Image y = global_contrast_normalize(random_image({3, 8, 8}, seed));
    const Vector v = y.pixels.cast<double>().reshaped();
    // Pixels are stored in single precision, which bounds the achievable accuracy.
    EXPECT_NEAR(v.mean(), 0.0, 1e-6);
    EXPECT_NEAR(population_sd(v), 1.0, 1e-6);
  }
}

TEST(LocalContrast, Examples) {
  EXPECT_EQ(local_contrast_normalize(Vector::Constant(6, 2.0)), Vector::Zero(6));
  Vector z(4);
  z << 1, -1, -1, 1;
  EXPECT_LE((local_contrast_normalize(z) - z).cwiseAbs().maxCoeff(), 1e-15);
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    const Vector r = local_contrast_normalize(random_matrix(25, 1, seed, 4.0));
    EXPECT_NEAR(r.mean(), 0.0, 1e-12);
    EXPECT_NEAR(population_sd(r), 1.0, 1e-12);
  }
}

TEST(LocalContrast, VarianceRegularizerShrinksFaintPatches) {
  // z = +-1 has variance 1, so dividing by sqrt(1 + 3) halves it.
  Vector z(4);
  z << 1, -1, -1, 1;
  EXPECT_LE((local_contrast_normalize(z, 3.0) - 0.5 * z).cwiseAbs().maxCoeff(), 1e-15);
  // A faint patch stays faint; the unregularized version blows it up to unit variance.
  const Vector faint = 1e-3 * random_matrix(25, 1, 8);
  EXPECT_LT(population_sd(local_contrast_normalize(faint, 0.01)), 0.02);
  EXPECT_NEAR(population_sd(local_contrast_normalize(faint)), 1.0, 1e-9);
  // Regularized output never exceeds unit variance.
  for (std::uint64_t seed = 1; seed <= 10; ++seed)
    EXPECT_LT(population_sd(local_contrast_normalize(random_matrix(9, 1, seed), 0.5)), 1.0);
}

TEST(LocalContrast, RowsMatchSingleVersion) {
  Matrix Z = random_matrix(6, 9, 4);
  const Matrix orig = Z;
  local_contrast_normalize_rows(Z);
  for (Index i = 0; i < 6; ++i)
    EXPECT_LE((Z.row(i).transpose() - local_contrast_normalize(orig.row(i).transpose())).cwiseAbs().maxCoeff(), 1e-15);
}

TEST(Zca, WhiteDataGivesIdentity) {
  // Rows +-e_i: zero mean, covariance exactly I/... rescaled to identity.
  const Index d = 4;
  Matrix Z(2 * d, d);
  Z.setZero();
  for (Index i = 0; i < d; ++i) {
    Z(2 * i, i) = std::sqrt(double(d));
    Z(2 * i + 1, i) = -std::sqrt(double(d));
  }
  const ZcaTransform t = fit_zca(Z, 1e-12);
  EXPECT_LE((t.W - Matrix::Identity(d, d)).cwiseAbs().maxCoeff(), 1e-9);
}

TEST(Zca, ScalarVarianceFour) {
  Matrix Z(2, 1);
  Z << 2, -2;  // variance 4
  const ZcaTransform t = fit_zca(Z, 1e-12);
  EXPECT_NEAR(t.W(0, 0), 0.5, 1e-10);
}

TEST(Zca, RejectsNonPositiveEps) {
  const Matrix Z = random_matrix(10, 3, 1);
  EXPECT_THROW(fit_zca(Z, 0.0), ConfigError);
  EXPECT_THROW(fit_zca(Z, -1.0), ConfigError);
  EXPECT_THROW(fit_zca(Matrix(0, 3), 1e-5), ShapeError);
}

TEST(Zca, WhitenedCovarianceNearIdentity) {
  // Correlated 10-D data.
  const Matrix mix = random_matrix(10, 10, 77);
  const Matrix Z = random_matrix(5000, 10, 78) * mix;
  const ZcaTransform t = fit_zca(Z, 1e-5);
  Matrix W = Z;
  apply_zca_rows(t, W);
  const Matrix c = W.rowwise() - W.colwise().mean();
  const Matrix cov = c.transpose() * c / double(W.rows());
  EXPECT_LE((cov - Matrix::Identity(10, 10)).cwiseAbs().maxCoeff(), 1e-2);
}

TEST(Zca, SymmetricPositiveDefiniteAndWCovWIsIdentity) {
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    const Matrix Z = random_matrix(400, 6, seed) * random_matrix(6, 6, seed + 50);
    const double eps = 1e-6;
    const ZcaTransform t = fit_zca(Z, eps);
    EXPECT_LE((t.W - t.W.transpose()).cwiseAbs().maxCoeff(), 0.0);
    Eigen::SelfAdjointEigenSolver<Matrix> es(t.W);
    EXPECT_GT(es.eigenvalues().minCoeff(), 0.0);
    const Matrix c = Z.rowwise() - Z.colwise().mean();
    const Matrix cov = c.transpose() * c / double(Z.rows());
    // W C W has eigenvalues lambda / (lambda + eps); the smallest lambda sets the gap.
    const double lmin = Eigen::SelfAdjointEigenSolver<Matrix>(cov).eigenvalues().minCoeff();
    EXPECT_LE((t.W * cov * t.W - Matrix::Identity(6, 6)).cwiseAbs().maxCoeff(), eps / (lmin + eps) + 1e-10);
  }
}

TEST(Zca, ApplyIsAffineAndRowVersionMatches) {
  const Matrix Z = random_matrix(100, 5, 9);
  const ZcaTransform t = fit_zca(Z, 1e-5);
  const Vector a = random_matrix(5, 1, 10), b = random_matrix(5, 1, 11);
  // Linear after centering: W((a + b) - mu) = W(a - mu) + W(b - mu) + W mu.
  const Vector lhs = apply_zca(t, a + b);
  const Vector rhs = apply_zca(t, a) + apply_zca(t, b) + t.W * t.mean;
  EXPECT_LE((lhs - rhs).cwiseAbs().maxCoeff(), 1e-12);
  Matrix rows = Z.topRows(3);
  apply_zca_rows(t, rows);
  for (Index i = 0; i < 3; ++i)
    EXPECT_LE((rows.row(i).transpose() - apply_zca(t, Z.row(i).transpose())).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Pipeline, UnitBallAfterFitHoldsForEveryTrainingPatch) {
  const Matrix sample = random_matrix(300, 9, 5, 2.0);
  PreprocessConfig cfg;
  cfg.scaling = Scaling::unit_ball;
  PatchPipeline pipe = fit_pipeline(cfg, sample);
  Matrix w = sample;
  pipe.whiten(w);
  set_scale_from_max_norm(pipe, w.rowwise().norm().maxCoeff());
  Matrix out = sample;
  EXPECT_EQ(pipe.apply(out), 0u);
  EXPECT_LE(out.rowwise().norm().maxCoeff(), 1.0 + 1e-12);
  EXPECT_NEAR(out.rowwise().norm().maxCoeff(), 1.0, 1e-12);
  // Unseen larger patches are clipped into the ball.
  Matrix big = 10.0 * random_matrix(20, 9, 6, 2.0);
  pipe.apply(big);
  EXPECT_LE(big.rowwise().norm().maxCoeff(), 1.0 + 1e-12);
}

TEST(Pipeline, UnitSphereCountsDegeneratePatches) {
  PreprocessConfig cfg;
  cfg.zca = false;
  cfg.scaling = Scaling::unit_sphere;
  const PatchPipeline pipe = fit_pipeline(cfg, random_matrix(10, 4, 1));
  Matrix Z = random_matrix(5, 4, 2);
  Z.row(3).setConstant(0.25);  // constant patch: contrast normalization zeroes it
  EXPECT_EQ(pipe.apply(Z), 1u);
  EXPECT_LE((Z.rowwise().norm().array() - 1.0).abs().maxCoeff(), 1e-12);
  EXPECT_LE((Z.row(3).array() - 0.5).abs().maxCoeff(), 1e-15);
}

TEST(Pipeline, NoneLeavesWhitenedPatches) {
  PreprocessConfig cfg;
  cfg.scaling = Scaling::none;
  cfg.contrast = Contrast::none;
  cfg.zca = false;
  const PatchPipeline pipe = fit_pipeline(cfg, random_matrix(10, 4, 1));
  Matrix Z = random_matrix(5, 4, 3);
  const Matrix orig = Z;
  pipe.apply(Z);
  EXPECT_EQ(Z, orig);
}
