#pragma once

// Kernels on patch vectors, kernel matrices, and the explicit feature maps
// z -> row of Z(x) built from them (exact factorization, Nystrom landmarks,
// random Fourier features). Also the RKHS smoothness constant C_sigma(lambda)
// of an activation's power series under each kernel.

#include "ccnn/common.hpp"

#include <Eigen/Eigenvalues>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace ccnn {

inline constexpr double kDomainTolerance = 1e-6;

enum class KernelKind : std::uint8_t { inverse_poly = 0, gaussian = 1, linear = 2 };

inline std::string to_string(KernelKind k) {
  switch (k) {
    case KernelKind::inverse_poly: return "inverse_poly";
    case KernelKind::gaussian: return "gaussian";
    default: return "linear";
  }
}

struct KernelSpec {
  KernelKind kind = KernelKind::gaussian;
  double gamma = 1.0;  // gaussian only

  static KernelSpec inverse_poly() { return {KernelKind::inverse_poly, 0.0}; }
  static KernelSpec gaussian(double gamma) {
    if (!(gamma > 0)) throw ConfigError("gaussian kernel needs gamma > 0");
    return {KernelKind::gaussian, gamma};
  }
  static KernelSpec linear() { return {KernelKind::linear, 0.0}; }
};

inline void validate(const KernelSpec& spec) {
  if (spec.kind == KernelKind::gaussian && !(spec.gamma > 0))
    throw ConfigError("gaussian kernel needs gamma > 0, got " + std::to_string(spec.gamma));
}

/// Throws DomainError naming the first row that violates the kernel's domain
/// (||z|| <= 1 for inverse_poly, ||z|| = 1 for gaussian).
inline void check_domain(const KernelSpec& spec, const Matrix& patches, const char* what = "patch") {
  if (spec.kind == KernelKind::linear) return;
  for (Index i = 0; i < patches.rows(); ++i) {
    const double n = patches.row(i).norm();
    const bool ok = spec.kind == KernelKind::inverse_poly ? n <= 1.0 + kDomainTolerance
                                                          : std::abs(n - 1.0) <= kDomainTolerance;
    if (!ok)
      throw DomainError(std::string(what) + " " + std::to_string(i) + " has norm " + std::to_string(n) +
                        ", outside the " + to_string(spec.kind) + " kernel domain");
  }
}

inline double kernel_eval(const KernelSpec& spec, const Vector& z, const Vector& zp) {
  if (z.size() != zp.size()) throw ShapeError("kernel arguments differ in length");
  Matrix both(2, z.size());
  both.row(0) = z.transpose();
  both.row(1) = zp.transpose();
  check_domain(spec, both);
  switch (spec.kind) {
    case KernelKind::inverse_poly: return 1.0 / (2.0 - z.dot(zp));
    case KernelKind::gaussian: return std::exp(-spec.gamma * (z - zp).squaredNorm());
    default: return z.dot(zp);
  }
}

/// k(a_i, b_j) for all row pairs; no domain check.
inline Matrix cross_kernel(const KernelSpec& spec, const Matrix& a, const Matrix& b) {
  if (a.cols() != b.cols()) throw ShapeError("cross_kernel: patch lengths differ");
  Matrix G = a * b.transpose();
  switch (spec.kind) {
    case KernelKind::inverse_poly:
      return (2.0 - G.array()).inverse().matrix();
    case KernelKind::gaussian: {
      const Vector na = a.rowwise().squaredNorm();
      const Vector nb = b.rowwise().squaredNorm();
      G = (-2.0 * G).colwise() + na;
      G = G.rowwise() + nb.transpose();
      return (-spec.gamma * G.array().max(0.0)).exp().matrix();
    }
    default: return G;
  }
}

inline Matrix kernel_matrix(const KernelSpec& spec, const Matrix& patches) {
  check_domain(spec, patches);
  Matrix K = cross_kernel(spec, patches, patches);
  return 0.5 * (K + K.transpose());
}

enum class FeatureVariant : std::uint8_t { exact = 0, nystrom = 1, random_features = 2, identity = 3 };

inline std::string to_string(FeatureVariant v) {
  switch (v) {
    case FeatureVariant::exact: return "exact";
    case FeatureVariant::nystrom: return "nystrom";
    case FeatureVariant::random_features: return "random_features";
    default: return "identity";
  }
}

/// A trained map from a patch z to its m-dimensional feature vector.
///
/// exact / nystrom: features = projector * v(z), v(z)_j = k(z, landmark_j),
///   where projector realizes Q^+ (exact) or K_SS^{-1/2} (Nystrom).
/// random_features: sqrt(2/m) cos(omega z + phase).
/// identity: the patch itself (the explicit map of the linear kernel).
struct FeatureMap {
  FeatureVariant variant = FeatureVariant::identity;
  KernelSpec kernel = KernelSpec::linear();
  Index input_dim = 0;
  Index m = 0;
  Matrix landmarks;  // L x d1
  Matrix projector;  // m x L
  Matrix omega;      // m x d1
  Vector phase;      // m
  std::uint64_t seed = 0;

  /// Rows of `patches` (n x d1) to rows of features (n x m).
  Matrix featurize(const Matrix& patches) const {
    if (patches.cols() != input_dim)
      throw ShapeError("feature map expects patches of length " + std::to_string(input_dim) + ", got " +
                       std::to_string(patches.cols()));
    check_domain(kernel, patches);
    switch (variant) {
      case FeatureVariant::identity: return patches;
      case FeatureVariant::random_features: {
        Matrix arg = patches * omega.transpose();
        arg.rowwise() += phase.transpose();
        return std::sqrt(2.0 / double(m)) * arg.array().cos().matrix();
      }
      default: return cross_kernel(kernel, patches, landmarks) * projector.transpose();
    }
  }

  Vector featurize_one(const Vector& z) const {
    Matrix row = z.transpose();
    return featurize(row).row(0).transpose();
  }
};

inline FeatureMap identity_feature_map(Index d1) {
  FeatureMap fm;
  fm.variant = FeatureVariant::identity;
  fm.kernel = KernelSpec::linear();
  fm.input_dim = d1;
  fm.m = d1;
  return fm;
}

struct ExactFactor {
  Matrix Q;     // n x rank, Q Q^T = K
  Matrix pinv;  // rank x n, Q^+
};

inline constexpr double kPsdTolerance = 1e-8;

/// K = Q Q^T by eigendecomposition; negative eigenvalues are clipped and the
/// numerically null directions dropped, so m = numerical rank.
inline ExactFactor factorize_exact(const Matrix& K) {
  if (K.rows() != K.cols()) throw ShapeError("kernel matrix must be square");
  const double scale = std::max(1.0, K.cwiseAbs().maxCoeff());
  if ((K - K.transpose()).cwiseAbs().maxCoeff() > 1e-12 * scale)
    throw ShapeError("kernel matrix is not symmetric");
  Eigen::SelfAdjointEigenSolver<Matrix> es(0.5 * (K + K.transpose()));
  if (es.info() != Eigen::Success) throw NumericalError("kernel eigendecomposition failed");
  const Vector& lam = es.eigenvalues();
  const double cutoff = std::max(1e-12 * std::max(lam.maxCoeff(), 0.0), 1e-300);
  std::vector<Index> keep;
  for (Index i = 0; i < lam.size(); ++i)
    if (lam(i) > cutoff) keep.push_back(i);
  std::stable_sort(keep.begin(), keep.end(), [&](Index a, Index b) { return lam(a) > lam(b); });
  ExactFactor f;
  f.Q.resize(K.rows(), Index(keep.size()));
  f.pinv.resize(Index(keep.size()), K.rows());
  for (Index j = 0; j < Index(keep.size()); ++j) {
    const double s = std::sqrt(lam(keep[j]));
    f.Q.col(j) = es.eigenvectors().col(keep[j]) * s;
    f.pinv.row(j) = es.eigenvectors().col(keep[j]).transpose() / s;
  }
  return f;
}

struct FactorizedFeatures {
  FeatureMap map;
  Matrix Q;  // feature rows of the training patches
};

/// Exact kernel features over the given training patches (m = rank of K).
inline FactorizedFeatures exact_feature_map(const KernelSpec& spec, const Matrix& patches) {
  validate(spec);
  const Matrix K = kernel_matrix(spec, patches);
  ExactFactor f = factorize_exact(K);
  FactorizedFeatures out;
  out.map.variant = FeatureVariant::exact;
  out.map.kernel = spec;
  out.map.input_dim = patches.cols();
  out.map.m = f.Q.cols();
  out.map.landmarks = patches;
  // featurize(z) = Q^+ v(z); on a training patch v is a column of K = Q Q^T.
  out.map.projector = std::move(f.pinv);
  out.Q = std::move(f.Q);
  return out;
}

inline constexpr double kNystromEigenFloor = 1e-10;

/// Nystrom map from explicit landmarks: featurize(z) = K_SS^{+1/2} k(S, z),
/// with eigenvalues below the floor treated as zero.
inline FeatureMap nystrom_from_landmarks(const KernelSpec& spec, const Matrix& landmarks) {
  validate(spec);
  const Matrix Kss = kernel_matrix(spec, landmarks);
  Eigen::SelfAdjointEigenSolver<Matrix> es(Kss);
  if (es.info() != Eigen::Success) throw NumericalError("Nystrom landmark eigendecomposition failed");
  Vector inv_sqrt(es.eigenvalues().size());
  for (Index i = 0; i < inv_sqrt.size(); ++i) {
    const double l = es.eigenvalues()(i);
    inv_sqrt(i) = l > kNystromEigenFloor ? 1.0 / std::sqrt(l) : 0.0;
  }
  FeatureMap fm;
  fm.variant = FeatureVariant::nystrom;
  fm.kernel = spec;
  fm.input_dim = landmarks.cols();
  fm.m = landmarks.rows();
  fm.landmarks = landmarks;
  fm.projector = es.eigenvectors() * inv_sqrt.asDiagonal() * es.eigenvectors().transpose();
  return fm;
}

/// m distinct indices from [0, n), uniform without replacement, in draw order.
inline std::vector<Index> sample_without_replacement(Index n, Index m, std::uint64_t seed) {
  if (m > n) throw ConfigError("cannot sample " + std::to_string(m) + " of " + std::to_string(n) + " items");
  std::mt19937_64 rng(seed);
  std::vector<Index> idx(static_cast<std::size_t>(n));
  std::iota(idx.begin(), idx.end(), Index{0});
  for (Index i = 0; i < m; ++i) {
    std::uniform_int_distribution<Index> pick(i, n - 1);
    std::swap(idx[std::size_t(i)], idx[std::size_t(pick(rng))]);
  }
  idx.resize(std::size_t(m));
  return idx;
}

inline FactorizedFeatures nystrom(const KernelSpec& spec, const Matrix& patches, Index m, std::uint64_t seed) {
  if (m < 1 || m > patches.rows())
    throw ConfigError("Nystrom rank m=" + std::to_string(m) + " must lie in [1, " + std::to_string(patches.rows()) + "]");
  const auto idx = sample_without_replacement(patches.rows(), m, seed);
  Matrix landmarks(m, patches.cols());
  for (Index j = 0; j < m; ++j) landmarks.row(j) = patches.row(idx[std::size_t(j)]);
  FactorizedFeatures out;
  out.map = nystrom_from_landmarks(spec, landmarks);
  out.map.seed = seed;
  out.Q = out.map.featurize(patches);
  return out;
}

/// Random Fourier features for the Gaussian kernel: omega rows ~ N(0, 2 gamma I),
/// phase ~ U[0, 2 pi).
inline FeatureMap random_features(const KernelSpec& spec, Index m, Index d1, std::uint64_t seed) {
  if (spec.kind != KernelKind::gaussian)
    throw ConfigError("random features require the gaussian kernel, got " + to_string(spec.kind));
  validate(spec);
  if (m < 1 || d1 < 1) throw ConfigError("random features need m >= 1 and d1 >= 1");
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, std::sqrt(2.0 * spec.gamma));
  std::uniform_real_distribution<double> uniform(0.0, 2.0 * std::numbers::pi);
  FeatureMap fm;
  fm.variant = FeatureVariant::random_features;
  fm.kernel = spec;
  fm.input_dim = d1;
  fm.m = m;
  fm.seed = seed;
  fm.omega.resize(m, d1);
  fm.phase.resize(m);
  for (Index i = 0; i < m; ++i) {
    for (Index j = 0; j < d1; ++j) fm.omega(i, j) = normal(rng);
    fm.phase(i) = uniform(rng);
  }
  return fm;
}

// ---------------------------------------------------------------------------
// Activation power series and C_sigma(lambda).

enum class ActivationKind : std::uint8_t { polynomial, sin, erf, smoothed_hinge };

struct ActivationSeries {
  ActivationKind kind = ActivationKind::polynomial;
  std::vector<double> coeffs;  // polynomial only: a_0 .. a_l

  static ActivationSeries polynomial(std::vector<double> a) { return {ActivationKind::polynomial, std::move(a)}; }
  static ActivationSeries linear() { return polynomial({0.0, 1.0}); }
  static ActivationSeries quadratic() { return polynomial({0.0, 0.0, 1.0}); }
  static ActivationSeries sine() { return {ActivationKind::sin, {}}; }
  static ActivationSeries erf() { return {ActivationKind::erf, {}}; }
  static ActivationSeries smoothed_hinge() { return {ActivationKind::smoothed_hinge, {}}; }

  bool is_polynomial() const { return kind == ActivationKind::polynomial; }

  /// log|a_j|, or -inf when a_j = 0.
  double log_abs_coeff(Index j) const {
    constexpr double ninf = -std::numeric_limits<double>::infinity();
    const double log_sqrt_pi = 0.5 * std::log(std::numbers::pi);
    switch (kind) {
      case ActivationKind::polynomial:
        return (j < Index(coeffs.size()) && coeffs[std::size_t(j)] != 0.0) ? std::log(std::abs(coeffs[std::size_t(j)]))
                                                                           : ninf;
      case ActivationKind::sin:
        // a_{2k+1} = (-1)^k / (2k+1)!
        return (j % 2 == 1) ? -std::lgamma(double(j) + 1.0) : ninf;
      case ActivationKind::erf: {
        // a_{2k+1} = 2 (-1)^k / (sqrt(pi) k! (2k+1))
        if (j % 2 == 0) return ninf;
        const double k = double((j - 1) / 2);
        return std::log(2.0) - log_sqrt_pi - std::lgamma(k + 1.0) - std::log(2.0 * k + 1.0);
      }
      case ActivationKind::smoothed_hinge: {
        // integral of (erf + 1)/2 from -inf: a_0 = 1/(2 sqrt(pi)), a_1 = 1/2,
        // a_{2k+2} = (-1)^k / (sqrt(pi) k! (2k+1)(2k+2)), odd j >= 3 vanish.
        if (j == 0) return -std::log(2.0) - log_sqrt_pi;
        if (j == 1) return -std::log(2.0);
        if (j % 2 == 1) return ninf;
        const double k = double((j - 2) / 2);
        return -log_sqrt_pi - std::lgamma(k + 1.0) - std::log(2.0 * k + 1.0) - std::log(2.0 * k + 2.0);
      }
    }
    return ninf;
  }

  double coeff(Index j) const {
    if (kind == ActivationKind::polynomial) return j < Index(coeffs.size()) ? coeffs[std::size_t(j)] : 0.0;
    const double mag = std::exp(log_abs_coeff(j));
    if (mag == 0.0) return 0.0;
    switch (kind) {
      case ActivationKind::sin:
      case ActivationKind::erf: return (((j - 1) / 2) % 2 == 0) ? mag : -mag;
      case ActivationKind::smoothed_hinge: return (j <= 1 || ((j - 2) / 2) % 2 == 0) ? mag : -mag;
      default: return mag;
    }
  }

  /// sigma(t) in closed form.
  double operator()(double t) const {
    switch (kind) {
      case ActivationKind::polynomial: {
        double v = 0.0;
        for (auto it = coeffs.rbegin(); it != coeffs.rend(); ++it) v = v * t + *it;
        return v;
      }
      case ActivationKind::sin: return std::sin(t);
      case ActivationKind::erf: return std::erf(t);
      case ActivationKind::smoothed_hinge:
        return 0.5 * t * (1.0 + std::erf(t)) + std::exp(-t * t) / (2.0 * std::sqrt(std::numbers::pi));
    }
    return 0.0;
  }
};

inline constexpr double kSeriesTolerance = 1e-12;

/// RKHS norm bound C_sigma(lambda) of z -> sigma(<w, z>) with ||w|| = lambda:
///   inverse_poly: sqrt(sum_j 2^{j+1} a_j^2 lambda^{2j})
///   gaussian:     sqrt(sum_j j! e^{2 gamma} / (2 gamma)^j a_j^2 lambda^{2j})
/// Infinite series stop once a geometric bound on the tail falls below
/// kSeriesTolerance times the partial sum.
inline double c_sigma(const ActivationSeries& act, const KernelSpec& spec, double lambda) {
  if (lambda < 0) throw ConfigError("c_sigma needs lambda >= 0");
  if (spec.kind == KernelKind::linear) throw ConfigError("c_sigma is defined for the inverse_poly and gaussian kernels");
  if (spec.kind == KernelKind::gaussian) {
    validate(spec);
    if (act.kind == ActivationKind::erf || act.kind == ActivationKind::smoothed_hinge)
      throw DomainError("the gaussian kernel's RKHS does not contain erf or smoothed-hinge filters; C_sigma diverges");
  }
  auto log_weight = [&](Index j) {
    if (spec.kind == KernelKind::inverse_poly) return double(j + 1) * std::log(2.0);
    return std::lgamma(double(j) + 1.0) + 2.0 * spec.gamma - double(j) * std::log(2.0 * spec.gamma);
  };
  auto term = [&](Index j) {
    const double la = act.log_abs_coeff(j);
    if (la == -std::numeric_limits<double>::infinity()) return 0.0;
    if (j > 0 && lambda == 0.0) return 0.0;
    const double lpow = j == 0 ? 0.0 : 2.0 * double(j) * std::log(lambda);
    return std::exp(log_weight(j) + 2.0 * la + lpow);
  };

  double sum = 0.0;
  if (act.is_polynomial()) {
    for (Index j = 0; j < Index(act.coeffs.size()); ++j) {
      const double a = act.coeffs[std::size_t(j)];
      if (a == 0.0) continue;
      const double core = a * a * std::pow(lambda, 2.0 * double(j));
      sum += spec.kind == KernelKind::inverse_poly ? std::ldexp(core, int(j) + 1) : term(j);
    }
    return std::sqrt(sum);
  }
  if (lambda == 0.0) return std::sqrt(term(0));

  constexpr Index kMaxTerms = 100000;
  double prev = 0.0;
  for (Index j = 0; j < kMaxTerms; ++j) {
    const double t = term(j);
    if (!std::isfinite(t)) throw NumericalError("C_sigma series overflowed");
    if (t == 0.0) continue;
    sum += t;
    if (prev > 0.0) {
      const double ratio = t / prev;
      if (ratio < 1.0 && t * ratio / (1.0 - ratio) < kSeriesTolerance * sum) return std::sqrt(sum);
    }
    prev = t;
  }
  throw NumericalError("C_sigma series did not converge");
}

/// Mean spectral norm of the per-image P x P patch kernel matrices. Each entry
/// of `per_image_patches` is one image's (already preprocessed) patch matrix.
inline double estimate_kernel_spectral_norm(const KernelSpec& spec, std::span<const Matrix> per_image_patches) {
  if (per_image_patches.empty()) throw ConfigError("spectral norm estimate needs at least one image");
  double total = 0.0;
  for (const auto& Z : per_image_patches) {
    const Matrix K = kernel_matrix(spec, Z);
    Eigen::SelfAdjointEigenSolver<Matrix> es(K, Eigen::EigenvaluesOnly);
    total += es.eigenvalues().cwiseAbs().maxCoeff();
  }
  return total / double(per_image_patches.size());
}

}  // namespace ccnn
