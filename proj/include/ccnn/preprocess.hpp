#pragma once

// Patch and image normalization: contrast normalization, ZCA whitening and
// the final scaling that puts patches into the kernel's domain (unit ball for
// the inverse polynomial kernel, unit sphere for the Gaussian kernel).

#include "ccnn/common.hpp"
#include "ccnn/patchgrid.hpp"

#include <Eigen/Eigenvalues>

#include <cmath>
#include <optional>
#include <string>

namespace ccnn {

inline constexpr double kSdFloor = 1e-8;
inline constexpr double kNormFloor = 1e-12;

struct ScaleTransform {
  double gamma = 1.0;
};

/// gamma = 1 / max_p ||z_p||, so the largest training patch lands on the unit sphere.
inline ScaleTransform fit_scale(const Matrix& patches) {
  if (patches.rows() == 0) throw ShapeError("fit_scale needs at least one patch");
  const double max_norm = patches.rowwise().norm().maxCoeff();
  return {1.0 / std::max(max_norm, kNormFloor)};
}

struct SphereResult {
  Vector z;
  bool degenerate = false;
};

/// z / ||z||. The zero vector maps to itself with `degenerate` set.
inline SphereResult unit_sphere_normalize(const Vector& z) {
  const double n = z.norm();
  if (n < kNormFloor) return {Vector::Zero(z.size()), true};
  return {z / n, false};
}

namespace detail {

template <typename Derived>
void standardize(Eigen::MatrixBase<Derived>&& v, double var_eps = 0.0) {
  const double n = double(v.size());
  if (n == 0) return;
  const double mean = v.sum() / n;
  v.array() -= mean;
  const double sd = std::sqrt(v.squaredNorm() / n + var_eps);
  v /= std::max(sd, kSdFloor);
}

}  // namespace detail

/// Subtracts the per-image mean and divides by the per-image standard
/// deviation, pooled over all channels.
inline Image global_contrast_normalize(const Image& x) {
  Image out = x;
  Matrix px = x.pixels.cast<double>();
  detail::standardize(px.reshaped());
  out.pixels = px.cast<float>();
  return out;
}

/// (z - mean) / sqrt(var + var_eps); var_eps > 0 keeps faint patches faint.
inline Vector local_contrast_normalize(const Vector& patch, double var_eps = 0.0) {
  Vector out = patch;
  detail::standardize(out.reshaped(), var_eps);
  return out;
}

/// In-place per-row standardization of a patch matrix.
inline void local_contrast_normalize_rows(Matrix& patches, double var_eps = 0.0) {
  for (Index i = 0; i < patches.rows(); ++i) detail::standardize(patches.row(i), var_eps);
}

struct ZcaTransform {
  Vector mean;
  Matrix W;
  double eps = 1e-5;
};

/// W = E (L + eps I)^{-1/2} E^T for the (population) covariance E L E^T of the rows.
inline ZcaTransform fit_zca(const Matrix& patches, double eps) {
  if (!(eps > 0)) throw ConfigError("ZCA eps must be > 0");
  if (patches.rows() == 0) throw ShapeError("fit_zca needs at least one patch");
  ZcaTransform t;
  t.eps = eps;
  t.mean = patches.colwise().mean().transpose();
  const Matrix centered = patches.rowwise() - t.mean.transpose();
  const Matrix cov = (centered.transpose() * centered) / double(patches.rows());
  Eigen::SelfAdjointEigenSolver<Matrix> es(cov);
  if (es.info() != Eigen::Success) throw NumericalError("ZCA eigendecomposition failed");
  const Vector scale = (es.eigenvalues().array().max(0.0) + eps).rsqrt();
  t.W = es.eigenvectors() * scale.asDiagonal() * es.eigenvectors().transpose();
  t.W = (0.5 * (t.W + t.W.transpose())).eval();
  return t;
}

inline Vector apply_zca(const ZcaTransform& t, const Vector& z) { return t.W * (z - t.mean); }

/// Row-wise ZCA on a patch matrix.
inline void apply_zca_rows(const ZcaTransform& t, Matrix& patches) {
  patches = (patches.rowwise() - t.mean.transpose()) * t.W;  // W is symmetric
}

enum class Contrast { none, local };
enum class Scaling { none, unit_ball, unit_sphere };

inline std::string to_string(Contrast c) { return c == Contrast::local ? "local" : "none"; }
inline std::string to_string(Scaling s) {
  switch (s) {
    case Scaling::unit_ball: return "unit_ball";
    case Scaling::unit_sphere: return "unit_sphere";
    default: return "none";
  }
}

struct PreprocessConfig {
  Contrast contrast = Contrast::local;
  double contrast_eps = 0.0;  // added to the patch variance before dividing
  bool zca = true;
  double zca_eps = 1e-5;
  Scaling scaling = Scaling::unit_ball;
};

/// The fitted per-layer patch pipeline: contrast -> ZCA -> scaling.
struct PatchPipeline {
  PreprocessConfig config;
  std::optional<ZcaTransform> zca;
  ScaleTransform scale;

  /// Contrast normalization and whitening only.
  void whiten(Matrix& patches) const {
    if (config.contrast == Contrast::local) local_contrast_normalize_rows(patches, config.contrast_eps);
    if (zca) apply_zca_rows(*zca, patches);
  }

  /// Full pipeline. Unit-ball outputs are clipped to the ball (unseen patches
  /// may exceed the training maximum); degenerate unit-sphere patches become
  /// the constant unit vector. Returns the number of degenerate patches.
  std::size_t apply(Matrix& patches) const {
    std::size_t degenerate = 0;
    whiten(patches);
    switch (config.scaling) {
      case Scaling::none: break;
      case Scaling::unit_ball: {
        patches *= scale.gamma;
        for (Index i = 0; i < patches.rows(); ++i) {
          const double n = patches.row(i).norm();
          if (n > 1.0) patches.row(i) /= n;
        }
        break;
      }
      case Scaling::unit_sphere: {
        const double fill = 1.0 / std::sqrt(double(patches.cols()));
        for (Index i = 0; i < patches.rows(); ++i) {
          const double n = patches.row(i).norm();
          if (n < kNormFloor) {
            patches.row(i).setConstant(fill);
            ++degenerate;
          } else {
            patches.row(i) /= n;
          }
        }
        break;
      }
    }
    return degenerate;
  }
};

/// Fits contrast/ZCA on `sample`; the scale is fitted separately from the
/// maximum whitened norm over the full training set (see set_scale_from_max_norm).
inline PatchPipeline fit_pipeline(const PreprocessConfig& config, Matrix sample) {
  PatchPipeline pipe;
  pipe.config = config;
  if (config.contrast == Contrast::local) local_contrast_normalize_rows(sample, config.contrast_eps);
  if (config.zca) pipe.zca = fit_zca(sample, config.zca_eps);
  return pipe;
}

inline void set_scale_from_max_norm(PatchPipeline& pipe, double max_norm) {
  pipe.scale.gamma = 1.0 / std::max(max_norm, kNormFloor);
}

}  // namespace ccnn
