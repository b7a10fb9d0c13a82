#pragma once

// Convex training of the parameter matrix A = (A_1, ..., A_d2) over pooled
// patch features: losses, l1 / nuclear / Frobenius ball projections, and
// projected minibatch SGD.
//
// Layout: a sample's pooled feature matrix Z (P' x m) is stored as the
// column vec(Z^T) of length m*P'. A is m x (P'*d2) column-major, so block
// A_l is contiguous and tr(Z A_l) = <vec(Z^T), vec(A_l)>; all scores of a
// batch are then one product A.reshaped(m*P', d2)^T * F.

#include "ccnn/common.hpp"

#include <Eigen/SVD>

#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace ccnn {

enum class LossKind : std::uint8_t { multiclass_logistic = 0, squared = 1 };

struct LossSpec {
  LossKind kind = LossKind::multiclass_logistic;
  Index d2 = 2;
};

struct LossValue {
  double value = 0.0;
  Vector grad;  // d/d scores
};

/// Loss of one sample. `target` is the class label for the logistic loss and
/// for the squared loss with d2 > 1 (one-hot target); with d2 == 1 the squared
/// loss regresses onto `target` directly.
inline LossValue loss_and_grad(const LossSpec& spec, const Vector& scores, double target) {
  if (scores.size() != spec.d2)
    throw ShapeError("expected " + std::to_string(spec.d2) + " scores, got " + std::to_string(scores.size()));
  LossValue out;
  if (spec.kind == LossKind::squared && spec.d2 == 1) {
    const double r = scores(0) - target;
    out.value = r * r;
    out.grad = Vector::Constant(1, 2.0 * r);
    return out;
  }
  const double rounded = std::round(target);
  if (rounded != target || rounded < 0 || rounded >= double(spec.d2))
    throw ShapeError("label " + std::to_string(target) + " outside [0, " + std::to_string(spec.d2) + ")");
  const Index y = Index(rounded);
  if (spec.kind == LossKind::squared) {
    Vector r = scores;
    r(y) -= 1.0;
    out.value = r.squaredNorm();
    out.grad = 2.0 * r;
    return out;
  }
  const double mx = scores.maxCoeff();
  const Vector e = (scores.array() - mx).exp().matrix();
  const double z = e.sum();
  out.value = -(scores(y) - mx) + std::log(z);
  out.grad = e / z;
  out.grad(y) -= 1.0;
  return out;
}

struct ParamMatrix {
  Matrix A;  // m x (P' * d2)
  double radius = 0.0;
  Index P_prime = 1;
  Index d2 = 1;

  static ParamMatrix zeros(Index m, Index P_prime, Index d2, double radius) {
    return {Matrix::Zero(m, P_prime * d2), radius, P_prime, d2};
  }
  Index m() const { return A.rows(); }
  auto block(Index l) const { return A.middleCols(l * P_prime, P_prime); }
  auto block(Index l) { return A.middleCols(l * P_prime, P_prime); }
};

/// Scores (d2 x batch) for flattened features F (m*P' x batch).
inline Matrix scores_flat(const Matrix& A, Index d2, const Matrix& F) {
  if (A.size() != F.rows() * d2) throw ShapeError("parameter matrix does not match feature length");
  return A.reshaped(F.rows(), d2).transpose() * F;
}

struct ObjectiveGrad {
  double value = 0.0;
  Matrix grad;  // same shape as A
};

/// Sum of losses over the batch and its gradient w.r.t. A, features given flattened.
inline ObjectiveGrad objective_grad_flat(const Matrix& A, Index d2, const Matrix& F, std::span<const double> targets,
                                         const LossSpec& loss) {
  if (Index(targets.size()) != F.cols()) throw ShapeError("one target per feature column required");
  if (loss.d2 != d2) throw ShapeError("loss output dimension does not match parameter blocks");
  const Matrix S = scores_flat(A, d2, F);
  Matrix G(d2, F.cols());
  ObjectiveGrad out;
  for (Index i = 0; i < F.cols(); ++i) {
    LossValue lv = loss_and_grad(loss, S.col(i), targets[std::size_t(i)]);
    out.value += lv.value;
    G.col(i) = lv.grad;
  }
  const Matrix flat = F * G.transpose();
  out.grad = flat.reshaped(A.rows(), A.cols());
  return out;
}

/// vec(Z^T) for a P' x m matrix Z.
inline Vector flatten_features(const Matrix& Z) { return Z.transpose().reshaped(); }

/// Objective and gradient for explicit per-sample pooled feature matrices Z_i (P' x m).
inline ObjectiveGrad objective_grad(const ParamMatrix& param, std::span<const Matrix> Z, std::span<const double> targets,
                                    const LossSpec& loss) {
  const Index len = param.m() * param.P_prime;
  Matrix F(len, Index(Z.size()));
  for (std::size_t i = 0; i < Z.size(); ++i) {
    if (Z[i].rows() != param.P_prime || Z[i].cols() != param.m())
      throw ShapeError("feature matrix " + std::to_string(i) + " is " + std::to_string(Z[i].rows()) + "x" +
                       std::to_string(Z[i].cols()) + ", expected " + std::to_string(param.P_prime) + "x" +
                       std::to_string(param.m()));
    F.col(Index(i)) = flatten_features(Z[i]);
  }
  return objective_grad_flat(param.A, param.d2, F, targets, loss);
}

// ---------------------------------------------------------------------------
// Projections.

/// Euclidean projection of a nonnegative vector onto {x >= 0, sum x <= R}
/// by the sort / cumulative-sum threshold rule.
inline Vector project_l1(const Vector& v, double R) {
  if (R < 0) throw ConfigError("l1 radius must be >= 0");
  if ((v.array() < 0).any()) throw ConfigError("project_l1 expects a nonnegative vector");
  if (v.sum() <= R) return v;
  std::vector<double> u(v.data(), v.data() + v.size());
  std::sort(u.begin(), u.end(), std::greater<>());
  double cum = u[0];
  double theta = u[0] - R;  // always feasible as the first candidate
  for (std::size_t j = 1; j < u.size(); ++j) {
    cum += u[j];
    const double t = (cum - R) / double(j + 1);
    if (u[j] - t > 0) theta = t;
  }
  return (v.array() - theta).max(0.0).matrix();
}

inline Vector singular_values(const Matrix& A) {
  if (A.size() == 0) return Vector();
  Eigen::BDCSVD<Matrix> svd(A);
  return svd.singularValues();
}

inline double nuclear_norm(const Matrix& A) { return singular_values(A).sum(); }

/// Projection onto {||A||_* <= R}: soft-threshold the singular values.
/// Matrices already inside the ball are returned unchanged.
inline Matrix project_nuclear(const Matrix& A, double R) {
  if (R < 0) throw ConfigError("nuclear radius must be >= 0");
  if (A.size() == 0) return A;
  Eigen::BDCSVD<Matrix> svd(A, Eigen::ComputeThinU | Eigen::ComputeThinV);
  if (svd.info() != Eigen::Success) throw NumericalError("SVD failed during nuclear projection");
  const Vector& s = svd.singularValues();
  if (!s.allFinite()) throw NumericalError("non-finite singular values in nuclear projection");
  if (s.sum() <= R) return A;
  const Vector t = project_l1(s, R);
  Index k = 0;
  while (k < t.size() && t(k) > 0) ++k;
  return svd.matrixU().leftCols(k) * t.head(k).asDiagonal() * svd.matrixV().leftCols(k).transpose();
}

inline Matrix project_frobenius(const Matrix& A, double R) {
  if (R < 0) throw ConfigError("Frobenius radius must be >= 0");
  const double n = A.norm();
  if (n <= R) return A;
  return A * (R / n);
}

/// ||A||_* / ||A||_2.
inline double effective_rank(const Matrix& A) {
  const Vector s = singular_values(A);
  if (s.size() == 0 || s(0) == 0.0) throw NumericalError("effective rank of a zero matrix is undefined");
  return s.sum() / s(0);
}

// ---------------------------------------------------------------------------
// Projected SGD.

enum class Projection : std::uint8_t { nuclear = 0, frobenius = 1, none = 2 };
enum class StepDecay : std::uint8_t { inv_sqrt = 0, constant = 1 };

inline std::string to_string(Projection p) {
  switch (p) {
    case Projection::nuclear: return "nuclear";
    case Projection::frobenius: return "frobenius";
    default: return "none";
  }
}

struct OptConfig {
  Index batch_size = 50;
  int epochs = 10;
  double eta0 = 1.0;
  StepDecay decay = StepDecay::inv_sqrt;
  double decay_steps = 0.0;  // T0; 0 means one epoch worth of steps
  std::uint64_t seed = 1;
  Projection projection = Projection::nuclear;
  double radius = 1.0;
  std::optional<int> early_stop;  // stop after this many epochs
  int projection_stride = 1;
  bool shuffle = true;
};

inline void validate(const OptConfig& c) {
  if (c.batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (c.epochs < 0) throw ConfigError("epochs must be >= 0");
  if (!(c.eta0 > 0)) throw ConfigError("eta0 must be > 0");
  if (c.projection != Projection::none && !(c.radius >= 0)) throw ConfigError("radius must be >= 0");
  if (c.projection_stride < 1) throw ConfigError("projection_stride must be >= 1");
  if (c.early_stop && *c.early_stop < 0) throw ConfigError("early_stop must be >= 0");
}

struct EpochRecord {
  int epoch = 0;
  double objective = 0.0;  // mean loss per training sample
  double train_error = std::numeric_limits<double>::quiet_NaN();
  double nuclear_norm = 0.0;
  double effective_rank = 0.0;  // 0 for the zero matrix
  double wall_ms = 0.0;
};

struct PsgdResult {
  ParamMatrix param;
  std::vector<EpochRecord> records;
};

/// Supplies the flattened training features (m*P' x n) for a given epoch;
/// a per-epoch source allows fresh augmentation each epoch.
using FeatureSource = std::function<const MatrixF&(int epoch)>;

struct ObjectiveSummary {
  double objective = 0.0;
  double error = std::numeric_limits<double>::quiet_NaN();
};

/// Full objective over a feature bank, evaluated in chunks.
inline ObjectiveSummary evaluate_objective(const Matrix& A, Index d2, const MatrixF& bank, std::span<const double> targets,
                                           const LossSpec& loss) {
  constexpr Index kChunk = 256;
  ObjectiveSummary out;
  const bool classify = !(loss.kind == LossKind::squared && d2 == 1);
  Index wrong = 0;
  for (Index lo = 0; lo < bank.cols(); lo += kChunk) {
    const Index cnt = std::min(kChunk, bank.cols() - lo);
    const Matrix F = bank.middleCols(lo, cnt).cast<double>();
    const Matrix S = scores_flat(A, d2, F);
    for (Index i = 0; i < cnt; ++i) {
      const double t = targets[std::size_t(lo + i)];
      out.objective += loss_and_grad(loss, S.col(i), t).value;
      if (classify) {
        Index arg = 0;
        S.col(i).maxCoeff(&arg);
        if (double(arg) != t) ++wrong;
      }
    }
  }
  if (classify && bank.cols() > 0) out.error = double(wrong) / double(bank.cols());
  return out;
}

inline Matrix project(const Matrix& A, Projection p, double R) {
  switch (p) {
    case Projection::nuclear: return project_nuclear(A, R);
    case Projection::frobenius: return project_frobenius(A, R);
    default: return A;
  }
}

/// Projected minibatch SGD from A = 0:
///   A <- Proj_R(A - eta_t * grad of the batch-mean loss),
/// eta_t = eta0 / sqrt(1 + t / T0) under inv_sqrt decay. One record per epoch
/// (epoch 0 is the initial point).
inline PsgdResult psgd(const FeatureSource& source, std::span<const double> targets, Index m, Index P_prime,
                       const LossSpec& loss, const OptConfig& cfg) {
  validate(cfg);
  if (m * P_prime < 1) throw ShapeError("empty parameter matrix");
  const Index n = Index(targets.size());
  if (n < 1) throw ConfigError("psgd needs at least one training sample");
  const double radius = cfg.projection == Projection::none ? std::numeric_limits<double>::infinity() : cfg.radius;
  PsgdResult out{ParamMatrix::zeros(m, P_prime, loss.d2, radius), {}};
  Matrix& A = out.param.A;

  const Index batch = std::min(cfg.batch_size, n);
  const Index steps_per_epoch = (n + batch - 1) / batch;
  const double T0 = cfg.decay_steps > 0 ? cfg.decay_steps : double(steps_per_epoch);
  const int epochs = cfg.early_stop ? std::min(cfg.epochs, *cfg.early_stop) : cfg.epochs;

  std::mt19937_64 rng(cfg.seed);
  std::vector<Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), Index{0});
  const auto start = std::chrono::steady_clock::now();

  auto record = [&](int epoch, const MatrixF& bank) {
    if (bank.rows() != m * P_prime || bank.cols() != n)
      throw ShapeError("feature bank is " + std::to_string(bank.rows()) + "x" + std::to_string(bank.cols()) +
                       ", expected " + std::to_string(m * P_prime) + "x" + std::to_string(n));
    EpochRecord r;
    r.epoch = epoch;
    const auto s = evaluate_objective(A, loss.d2, bank, targets, loss);
    if (!std::isfinite(s.objective))
      throw NumericalError("objective became non-finite at epoch " + std::to_string(epoch) +
                           "; reduce eta0 or check feature scaling");
    r.objective = s.objective / double(n);
    r.train_error = s.error;
    const Vector sv = singular_values(A);
    r.nuclear_norm = sv.sum();
    r.effective_rank = (sv.size() > 0 && sv(0) > 0) ? sv.sum() / sv(0) : 0.0;
    r.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
    out.records.push_back(r);
  };

  record(0, source(0));
  Index t = 0;
  for (int epoch = 1; epoch <= epochs; ++epoch) {
    const MatrixF& bank = source(epoch);
    if (cfg.shuffle) std::shuffle(order.begin(), order.end(), rng);
    for (Index lo = 0; lo < n; lo += batch) {
      const Index cnt = std::min(batch, n - lo);
      Matrix F(bank.rows(), cnt);
      std::vector<double> y(static_cast<std::size_t>(cnt));
      for (Index i = 0; i < cnt; ++i) {
        const Index idx = order[std::size_t(lo + i)];
        F.col(i) = bank.col(idx).cast<double>();
        y[std::size_t(i)] = targets[std::size_t(idx)];
      }
      ObjectiveGrad og = objective_grad_flat(A, loss.d2, F, y, loss);
      const double eta = cfg.decay == StepDecay::inv_sqrt ? cfg.eta0 / std::sqrt(1.0 + double(t) / T0) : cfg.eta0;
      A -= (eta / double(cnt)) * og.grad;
      ++t;
      if (t % cfg.projection_stride == 0) A = project(A, cfg.projection, radius);
    }
    if (t % cfg.projection_stride != 0) A = project(A, cfg.projection, radius);
    record(epoch, bank);
  }
  return out;
}

inline PsgdResult psgd(const MatrixF& bank, std::span<const double> targets, Index m, Index P_prime,
                       const LossSpec& loss, const OptConfig& cfg) {
  return psgd([&bank](int) -> const MatrixF& { return bank; }, targets, m, P_prime, loss, cfg);
}

}  // namespace ccnn
