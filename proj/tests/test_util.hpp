#pragma once

// Helpers and independent oracles shared by the unit and acceptance tests.

#include "ccnn/ccnn_core.hpp"

#include <Eigen/Eigenvalues>

#include <cmath>
#include <filesystem>
#include <random>
#include <string>

namespace ccnn::testing {

inline Matrix random_matrix(Index rows, Index cols, std::uint64_t seed, double sd = 1.0) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, sd);
  Matrix M(rows, cols);
  for (Index j = 0; j < cols; ++j)
    for (Index i = 0; i < rows; ++i) M(i, j) = n(rng);
  return M;
}

inline Vector random_unit(Index d, std::mt19937_64& rng) {
  std::normal_distribution<double> n;
  Vector v(d);
  for (Index i = 0; i < d; ++i) v(i) = n(rng);
  return v / v.norm();
}

inline Image random_image(const ImageShape& s, std::uint64_t seed, float lo = 0.0f, float hi = 1.0f) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> u(lo, hi);
  Image x(s);
  for (Index i = 0; i < x.pixels.size(); ++i) x.pixels.data()[i] = u(rng);
  return x;
}

inline Dataset random_dataset(const ImageShape& s, std::size_t n, Index classes, std::uint64_t seed) {
  Dataset d;
  d.num_classes = classes;
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> label(0, int(classes) - 1);
  for (std::size_t i = 0; i < n; ++i) {
    d.images.push_back(random_image(s, seed * 7919 + i));
    d.labels.push_back(label(rng));
  }
  return d;
}

/// Scratch directory removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag = "ccnn") {
    std::random_device rd;
    path_ = std::filesystem::temp_directory_path() / (tag + "-" + std::to_string(rd()) + std::to_string(rd()));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

/// Largest singular value by power iteration on M^T M.
inline double spectral_norm_power(const Matrix& M, int iters = 2000) {
  if (M.size() == 0) return 0.0;
  Vector v = Vector::Ones(M.cols()) / std::sqrt(double(M.cols()));
  v(0) += 0.1;  // avoid starting orthogonal to the top direction
  v.normalize();
  double s = 0.0;
  for (int k = 0; k < iters; ++k) {
    Vector w = M.transpose() * (M * v);
    const double nw = w.norm();
    if (nw == 0.0) return 0.0;
    const double s_new = std::sqrt(nw);
    v = w / nw;
    if (std::abs(s_new - s) <= 1e-15 * s_new) {
      s = s_new;
      break;
    }
    s = s_new;
  }
  return (M * v).norm();
}

struct NuclearOracle {
  Matrix X;
  double theta = 0.0;
  int iterations = 0;
};

/// Nuclear-ball projection computed independently of the library: singular
/// pairs from the eigendecomposition of A^T A, and the threshold theta from
/// projected subgradient ascent on the dual function
///   g(theta) = sum_i min_{x >= 0} [ (x - s_i)^2 / 2 + theta x ] - theta R,
/// whose subgradient is sum_i max(s_i - theta, 0) - R. Steps halve on every
/// sign change; iteration stops once the step falls below `tol`.
inline NuclearOracle nuclear_projection_oracle(const Matrix& A, double R, double tol = 1e-8) {
  Eigen::SelfAdjointEigenSolver<Matrix> es(A.transpose() * A);
  const Vector lam = es.eigenvalues().cwiseMax(0.0);
  const Matrix& V = es.eigenvectors();
  const Vector s = lam.cwiseSqrt();
  NuclearOracle out;
  if (s.sum() <= R) {
    out.X = A;
    return out;
  }
  auto subgrad = [&](double th) { return (s.array() - th).max(0.0).sum() - R; };
  double theta = 0.0;
  double step = s.maxCoeff();
  double prev_sign = 0.0;
  while (step > tol * 1e-3) {
    const double g = subgrad(theta);
    const double sign = g > 0 ? 1.0 : (g < 0 ? -1.0 : 0.0);
    if (sign == 0.0) break;
    if (prev_sign != 0.0 && sign != prev_sign) step *= 0.5;
    theta = std::max(0.0, theta + sign * step);
    prev_sign = sign;
    ++out.iterations;
  }
  out.theta = theta;
  // A = U S V^T with U = A V S^{-1}, so U diag(t) V^T = A V diag(t / s) V^T.
  Vector scale = Vector::Zero(s.size());
  for (Index i = 0; i < s.size(); ++i)
    if (s(i) > 1e-14) scale(i) = std::max(s(i) - theta, 0.0) / s(i);
  out.X = A * V * scale.asDiagonal() * V.transpose();
  return out;
}

/// Optimality certificate for X = projection of A onto {||X||_* <= R}:
/// feasibility plus  R ||A - X||_2 <= <A - X, X> + tol  (normal-cone condition).
inline bool nuclear_kkt_holds(const Matrix& A, const Matrix& X, double R, double tol) {
  const Matrix D = A - X;
  const double nuc = Eigen::JacobiSVD<Matrix>(X).singularValues().sum();
  if (nuc > R * (1 + 1e-9) + tol) return false;
  if (D.norm() <= tol) return true;
  return R * spectral_norm_power(D) <= (D.array() * X.array()).sum() + tol;
}

/// Central finite-difference gradient of f at A.
template <typename F>
Matrix finite_difference(F&& f, const Matrix& A, double h = 1e-6) {
  Matrix G(A.rows(), A.cols());
  Matrix P = A;
  for (Index j = 0; j < A.cols(); ++j)
    for (Index i = 0; i < A.rows(); ++i) {
      const double a = P(i, j);
      P(i, j) = a + h;
      const double fp = f(P);
      P(i, j) = a - h;
      const double fm = f(P);
      P(i, j) = a;
      G(i, j) = (fp - fm) / (2 * h);
    }
  return G;
}

/// Minimizes the full-batch objective over the nuclear ball by projected
/// gradient descent with a fixed step 1/L, L an upper bound on the gradient's
/// Lipschitz constant (logistic loss: ||F||_2^2 / 2 per sample sum).
inline Matrix full_batch_projected_gd(const MatrixF& bank, std::span<const double> targets, Index m, Index P_prime,
                                      const LossSpec& loss, double R, int iterations, Projection proj = Projection::nuclear) {
  const Matrix F = bank.cast<double>();
  const double L = 0.5 * spectral_norm_power(F) * spectral_norm_power(F);
  Matrix A = Matrix::Zero(m, P_prime * loss.d2);
  for (int t = 0; t < iterations; ++t) {
    const ObjectiveGrad og = objective_grad_flat(A, loss.d2, F, targets, loss);
    A = project(A - og.grad / L, proj, R);
  }
  return A;
}

inline double mean_objective(const Matrix& A, const MatrixF& bank, std::span<const double> targets, const LossSpec& loss) {
  return evaluate_objective(A, loss.d2, bank, targets, loss).objective / double(bank.cols());
}

}  // namespace ccnn::testing
