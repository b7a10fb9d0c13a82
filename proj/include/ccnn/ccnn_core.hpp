#pragma once

// Convexified CNN layers and models: feature construction, convex training of
// the predictor, filter retrieval, layer-wise stacking, prediction and the
// CCNN model file.

#include "ccnn/common.hpp"
#include "ccnn/convex_opt.hpp"
#include "ccnn/dataio.hpp"
#include "ccnn/feature_file.hpp"
#include "ccnn/kernels.hpp"
#include "ccnn/patchgrid.hpp"
#include "ccnn/preprocess.hpp"
#include "ccnn/serialize.hpp"

#include <Eigen/SVD>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace ccnn {

// ---------------------------------------------------------------------------
// Configuration and shape algebra

struct LayerConfig {
  Index patch_side = 5;
  Index stride = 1;
  Index pad = 0;
  Index pool_side = 2;
  Index pool_stride = 2;
  KernelSpec kernel = KernelSpec::gaussian(0.2);
  FeatureVariant approximation = FeatureVariant::random_features;
  Index m = 500;  // ignored by the exact and identity variants
  Index r = 16;
  PreprocessConfig preprocess;
  bool auto_scaling = true;  // pick the scaling from the kernel's domain
  LossKind loss = LossKind::multiclass_logistic;
  OptConfig opt;             // opt.radius is R
  std::vector<double> radius_grid;  // several R candidates: chosen on a validation set
  Index fit_sample = 100000; // patches sampled to fit contrast/ZCA statistics
  std::uint64_t seed = 1;
};

inline Scaling resolve_scaling(const LayerConfig& c) {
  if (!c.auto_scaling) return c.preprocess.scaling;
  switch (c.kernel.kind) {
    case KernelKind::inverse_poly: return Scaling::unit_ball;
    case KernelKind::gaussian: return Scaling::unit_sphere;
    default: return Scaling::none;
  }
}

inline void validate(const LayerConfig& c) {
  validate(c.kernel);
  validate(c.opt);
  if (c.r < 1) throw ConfigError("r must be >= 1");
  if (c.fit_sample < 1) throw ConfigError("fit_sample must be >= 1");
  if (c.opt.projection != Projection::none && !(c.opt.radius > 0)) throw ConfigError("R must be > 0");
  for (double R : c.radius_grid)
    if (!(R > 0)) throw ConfigError("every R candidate must be > 0");
  if (c.preprocess.zca && !(c.preprocess.zca_eps > 0)) throw ConfigError("ZCA eps must be > 0");
  if (!(c.preprocess.contrast_eps >= 0)) throw ConfigError("contrast eps must be >= 0");
  switch (c.approximation) {
    case FeatureVariant::identity:
      if (c.kernel.kind != KernelKind::linear) throw ConfigError("identity features require the linear kernel");
      break;
    case FeatureVariant::random_features:
      if (c.kernel.kind != KernelKind::gaussian) throw ConfigError("random features require the gaussian kernel");
      [[fallthrough]];
    case FeatureVariant::nystrom:
      if (c.m < 1) throw ConfigError("feature dimension m must be >= 1");
      break;
    case FeatureVariant::exact: break;
  }
  const Scaling s = resolve_scaling(c);
  if (c.kernel.kind == KernelKind::gaussian && s != Scaling::unit_sphere)
    throw ConfigError("the gaussian kernel needs unit_sphere scaling");
  if (c.kernel.kind == KernelKind::inverse_poly && s == Scaling::none)
    throw ConfigError("the inverse polynomial kernel needs unit_ball or unit_sphere scaling");
}

struct StageGeometry {
  PatchPlan patches;
  PoolPlan pool;
  ImageShape output;  // r channels over the pooled grid
};

inline StageGeometry plan_stage(const ImageShape& input, const LayerConfig& c) {
  StageGeometry g;
  g.patches = plan_patches(input, c.patch_side, c.stride, c.pad);
  g.pool = build_pool_matrix(g.patches.grid_h, g.patches.grid_w, c.pool_side, c.pool_stride);
  g.output = {c.r, g.pool.out_h, g.pool.out_w};
  return g;
}

/// Checks that the layer stack composes on `input` with d2 labels and returns
/// every stage's geometry. Nothing is computed from data.
inline std::vector<StageGeometry> plan_stack(const ImageShape& input, std::span<const LayerConfig> layers, Index d2) {
  if (layers.empty()) throw ConfigError("at least one layer is required");
  if (d2 < 1) throw ConfigError("label count must be >= 1");
  std::vector<StageGeometry> out;
  ImageShape shape = input;
  for (std::size_t s = 0; s < layers.size(); ++s) {
    const LayerConfig& c = layers[s];
    const std::string where = "layer " + std::to_string(s + 1) + ": ";
    try {
      validate(c);
      out.push_back(plan_stage(shape, c));
    } catch (const ShapeError& e) {
      throw ConfigError(where + "input " + to_string(shape) + " does not fit: " + e.what());
    } catch (const ConfigError& e) {
      throw ConfigError(where + e.what());
    }
    const StageGeometry& g = out.back();
    const Index cols = g.pool.P_prime * d2;
    if (c.r > cols)
      throw ConfigError(where + "r = " + std::to_string(c.r) + " exceeds P'*d2 = " + std::to_string(cols));
    if ((c.approximation == FeatureVariant::random_features || c.approximation == FeatureVariant::nystrom) && c.r > c.m)
      throw ConfigError(where + "r = " + std::to_string(c.r) + " exceeds m = " + std::to_string(c.m));
    if (c.approximation == FeatureVariant::identity && c.r > g.patches.d1)
      throw ConfigError(where + "r = " + std::to_string(c.r) + " exceeds the patch length " + std::to_string(g.patches.d1));
    shape = g.output;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Layers and models

struct CcnnLayer {
  PatchPlan plan;
  PatchPipeline pipeline;
  FeatureMap features;
  PoolPlan pool;
  Matrix U_hat;  // m x r, orthonormal columns

  Index r() const { return U_hat.cols(); }
  Index m() const { return features.m; }
  ImageShape input_shape() const { return plan.input; }
  ImageShape output_shape() const { return {r(), pool.out_h, pool.out_w}; }

  /// Normalized patches of x (P x d1).
  Matrix patches(const Image& x) const {
    if (!(x.shape == plan.input))
      throw ShapeError("layer expects input " + to_string(plan.input) + ", got " + to_string(x.shape));
    Matrix Z = extract_patches(x, plan);
    pipeline.apply(Z);
    return Z;
  }

  /// Z(x): P x m.
  Matrix patch_features(const Image& x) const { return features.featurize(patches(x)); }

  /// G Z(x): P' x m.
  Matrix pooled_features(const Image& x) const { return apply_pool(pool, patch_features(x)); }

  /// H(x) = U_hat^T (G Z(x))^T: r x P'.
  Matrix responses(const Image& x) const { return U_hat.transpose() * pooled_features(x).transpose(); }

  /// H(x) as an r-channel image over the pooled grid.
  Image forward(const Image& x) const { return Image(output_shape(), responses(x).cast<float>()); }
};

struct CcnnModel {
  std::vector<CcnnLayer> layers;  // the last layer also carries the predictor's features
  ParamMatrix top;
  Index d2 = 0;
  std::string metadata = "{}";  // JSON text: seeds, config hash

  bool trained() const { return !layers.empty() && d2 > 0 && top.A.size() > 0; }

  void require_trained() const {
    if (!trained()) throw ConfigError("model is untrained");
  }

  ImageShape input_shape() const {
    require_trained();
    return layers.front().input_shape();
  }

  /// Composes all but the last layer: H_{L-1}(x), the top layer's input.
  Image top_input(const Image& x) const {
    require_trained();
    Image h = x;
    for (std::size_t s = 0; s + 1 < layers.size(); ++s) h = layers[s].forward(h);
    return h;
  }

  /// Z~(x): the top layer's pooled feature matrix, P' x m.
  Matrix top_features(const Image& x) const { return layers.back().pooled_features(top_input(x)); }

  /// scores_l = tr(Z~(x) A_l).
  Vector predict(const Image& x) const {
    const Matrix F = flatten_features(top_features(x));
    return scores_flat(top.A, d2, F).col(0);
  }

  Index classify(const Image& x) const { return argmax(predict(x)); }

  /// Output of the last convolutional layer, H_L(x).
  Image conv_output(const Image& x) const { return layers.back().forward(top_input(x)); }

  /// First maximal index.
  static Index argmax(const Vector& s) {
    Index best = 0;
    for (Index i = 1; i < s.size(); ++i)
      if (s(i) > s(best)) best = i;
    return best;
  }
};

/// d2 x n score matrix for a whole dataset.
inline Matrix predict_all(const CcnnModel& model, const Dataset& d) {
  model.require_trained();
  Matrix S(model.d2, Index(d.size()));
  parallel_for(d.size(), [&](std::size_t i) { S.col(Index(i)) = model.predict(d.images[i]); });
  return S;
}

struct EvalResult {
  double error = 0.0;
  Eigen::MatrixXi confusion;  // rows: true label, cols: predicted label
  std::size_t n = 0;
};

inline EvalResult evaluate(const CcnnModel& model, const Dataset& d) {
  model.require_trained();
  const Index k = std::max<Index>(model.d2, d.num_classes);
  EvalResult out;
  out.n = d.size();
  out.confusion = Eigen::MatrixXi::Zero(k, k);
  if (d.empty()) return out;
  const Matrix S = predict_all(model, d);
  std::size_t wrong = 0;
  for (std::size_t i = 0; i < d.size(); ++i) {
    const Index pred = CcnnModel::argmax(S.col(Index(i)));
    const int truth = d.labels[i];
    if (truth < 0 || truth >= k) throw DataError("label " + std::to_string(truth) + " outside the model's label range");
    ++out.confusion(truth, pred);
    if (pred != truth) ++wrong;
  }
  out.error = double(wrong) / double(d.size());
  return out;
}

// ---------------------------------------------------------------------------
// Filter retrieval

struct Filters {
  Matrix U_hat;  // m x r
  Matrix V_hat;  // (P' d2) x r, V_hat^T = first r rows of Lambda V^T
  Vector singular_values;
  bool tie = false;  // sigma_r == sigma_{r+1}: the retrieval is not unique
};

inline Filters retrieve_filters(const Matrix& A, Index r) {
  const Index k = std::min(A.rows(), A.cols());
  if (r < 1 || r > k)
    throw ConfigError("rank r = " + std::to_string(r) + " must lie in [1, " + std::to_string(k) + "]");
  Eigen::BDCSVD<Matrix> svd(A, Eigen::ComputeThinU | Eigen::ComputeThinV);
  if (svd.info() != Eigen::Success) throw NumericalError("SVD failed during filter retrieval");
  Filters f;
  f.singular_values = svd.singularValues();
  f.U_hat = svd.matrixU().leftCols(r);
  f.V_hat = svd.matrixV().leftCols(r) * f.singular_values.head(r).asDiagonal();
  if (r < k) {
    const double s0 = std::max(f.singular_values(0), std::numeric_limits<double>::min());
    f.tie = f.singular_values(r - 1) - f.singular_values(r) <= 1e-12 * s0;
  }
  if (f.tie)
    log_message("filter retrieval: sigma_" + std::to_string(r) + " = sigma_" + std::to_string(r + 1) + " = " +
                std::to_string(f.singular_values(r)) + ", ties broken by SVD order");
  return f;
}

// ---------------------------------------------------------------------------
// Radius helper

struct RadiusHelper {
  double c_sigma = 0.0;
  double B2 = 1.0;
  Index r = 1;
  Index d2 = 1;

  double radius() const { return c_sigma * B2 * double(r) * std::sqrt(double(d2)); }
};

/// R = C_sigma(B1) B2 r sqrt(d2): the nuclear-norm radius that contains every
/// CNN filter bank with ||w_j|| <= B1 and ||alpha_{l,j}|| <= B2.
inline double radius_from_bounds(const ActivationSeries& act, const KernelSpec& spec, double B1, double B2, Index r,
                                 Index d2) {
  if (!(B1 > 0) || !(B2 > 0)) throw ConfigError("B1 and B2 must be > 0");
  if (r < 1 || d2 < 1) throw ConfigError("r and d2 must be >= 1");
  const RadiusHelper h{c_sigma(act, spec, B1), B2, r, d2};
  const double R = h.radius();
  if (!std::isfinite(R)) throw DomainError("C_sigma diverges for this activation and kernel");
  if (!(R > 0)) throw ConfigError("radius must be > 0 (activation has no non-constant terms)");
  return R;
}

// ---------------------------------------------------------------------------
// Training

using DatasetSource = std::function<Dataset(int epoch)>;

/// Features for one convex stage, ready for the optimizer.
struct StageData {
  StageGeometry geo;
  PatchPipeline pipeline;
  FeatureMap features;
  MatrixF bank;  // (m P') x n, column i = vec((G Z(x_i))^T)
  std::vector<double> targets;
  Index d2 = 1;
  std::size_t degenerate_patches = 0;
};

namespace detail {

inline Matrix processed_patches(const Image& x, const PatchPlan& plan, const PatchPipeline& pipe, std::size_t* degenerate) {
  Matrix Z = extract_patches(x, plan);
  const std::size_t d = pipe.apply(Z);
  if (degenerate) *degenerate += d;
  return Z;
}

/// Patches with the given flat indices (image * P + patch), ascending; whitening
/// applied unless `raw`.
inline Matrix gather_patches(const Dataset& d, const PatchPlan& plan, const PatchPipeline* pipe,
                             std::vector<Index> idx) {
  std::sort(idx.begin(), idx.end());
  const Index P = plan.P;
  Matrix out(Index(idx.size()), plan.d1);
  std::size_t k = 0;
  while (k < idx.size()) {
    const Index img = idx[k] / P;
    Matrix Z = extract_patches(d.images.at(std::size_t(img)), plan);
    if (pipe) pipe->apply(Z);
    for (; k < idx.size() && idx[k] / P == img; ++k) out.row(Index(k)) = Z.row(idx[k] % P);
  }
  return out;
}

}  // namespace detail

/// Flattened pooled features of every image, one column per sample.
inline MatrixF build_feature_bank(const Dataset& d, const PatchPlan& plan, const PatchPipeline& pipe,
                                  const FeatureMap& fmap, const PoolPlan& pool, std::size_t* degenerate = nullptr) {
  MatrixF bank(fmap.m * pool.P_prime, Index(d.size()));
  std::vector<std::size_t> degen(d.size(), 0);
  parallel_for(d.size(), [&](std::size_t i) {
    const Matrix Z = detail::processed_patches(d.images[i], plan, pipe, &degen[i]);
    bank.col(Index(i)) = flatten_features(apply_pool(pool, fmap.featurize(Z))).cast<float>();
  });
  if (degenerate)
    for (auto v : degen) *degenerate += v;
  return bank;
}

/// Fits the layer's preprocessing and feature map on `d` and builds its feature bank.
inline StageData prepare_stage(const Dataset& d, const LayerConfig& c) {
  if (d.empty()) throw ConfigError("training set is empty");
  validate(d);
  StageData out;
  out.d2 = d.num_classes;
  out.geo = plan_stack(d.shape(), std::span(&c, 1), out.d2).front();
  const PatchPlan& plan = out.geo.patches;
  const Index total = Index(d.size()) * plan.P;

  PreprocessConfig pre = c.preprocess;
  pre.scaling = resolve_scaling(c);
  const Matrix sample =
      detail::gather_patches(d, plan, nullptr, sample_without_replacement(total, std::min(c.fit_sample, total), c.seed));
  out.pipeline = fit_pipeline(pre, sample);

  if (pre.scaling == Scaling::unit_ball) {
    std::vector<double> max_norm(d.size(), 0.0);
    parallel_for(d.size(), [&](std::size_t i) {
      Matrix Z = extract_patches(d.images[i], plan);
      out.pipeline.whiten(Z);
      max_norm[i] = Z.rowwise().norm().maxCoeff();
    });
    set_scale_from_max_norm(out.pipeline, *std::max_element(max_norm.begin(), max_norm.end()));
  }

  switch (c.approximation) {
    case FeatureVariant::identity: out.features = identity_feature_map(plan.d1); break;
    case FeatureVariant::random_features: out.features = random_features(c.kernel, c.m, plan.d1, c.seed + 1); break;
    case FeatureVariant::nystrom: {
      if (c.m > total)
        throw ConfigError("Nystrom m = " + std::to_string(c.m) + " exceeds the " + std::to_string(total) +
                          " available training patches");
      const Matrix landmarks =
          detail::gather_patches(d, plan, &out.pipeline, sample_without_replacement(total, c.m, c.seed + 2));
      out.features = nystrom_from_landmarks(c.kernel, landmarks);
      out.features.seed = c.seed + 2;
      break;
    }
    case FeatureVariant::exact: {
      std::vector<Index> all(static_cast<std::size_t>(total));
      std::iota(all.begin(), all.end(), Index{0});
      out.features = exact_feature_map(c.kernel, detail::gather_patches(d, plan, &out.pipeline, std::move(all))).map;
      break;
    }
  }

  out.bank = build_feature_bank(d, plan, out.pipeline, out.features, out.geo.pool, &out.degenerate_patches);
  if (out.degenerate_patches > 0)
    log_message(std::to_string(out.degenerate_patches) + " zero patches mapped to the constant unit vector");
  out.targets = d.targets();
  return out;
}

struct StageResult {
  CcnnLayer layer;
  ParamMatrix A;
  std::vector<EpochRecord> records;
  Filters filters;
};

/// Runs the convex solver on prepared features and retrieves the layer's
/// filters. `augment`, when set, supplies a fresh training set for every epoch
/// (same labels, same order); the fitted preprocessing and features are reused.
inline StageResult fit_stage(const StageData& data, const LayerConfig& c, const DatasetSource& augment = {}) {
  validate(c);
  const Index m = data.features.m;
  const Index Pp = data.geo.pool.P_prime;
  FeatureSource source;
  auto scratch = std::make_shared<MatrixF>();
  if (augment) {
    source = [&, scratch](int epoch) -> const MatrixF& {
      if (epoch == 0) return data.bank;
      const Dataset e = augment(epoch);
      if (e.labels != std::vector<int>(data.targets.begin(), data.targets.end()))
        throw DataError("augmented training set must keep labels and order");
      *scratch = build_feature_bank(e, data.geo.patches, data.pipeline, data.features, data.geo.pool);
      return *scratch;
    };
  } else {
    source = [&](int) -> const MatrixF& { return data.bank; };
  }
  PsgdResult run = psgd(source, data.targets, m, Pp, LossSpec{c.loss, data.d2}, c.opt);

  StageResult out;
  out.records = std::move(run.records);
  out.A = std::move(run.param);
  out.filters = retrieve_filters(out.A.A, c.r);
  out.layer.plan = data.geo.patches;
  out.layer.pipeline = data.pipeline;
  out.layer.features = data.features;
  out.layer.pool = data.geo.pool;
  out.layer.U_hat = out.filters.U_hat;
  return out;
}

inline CcnnModel model_from_stage(const StageResult& s) {
  CcnnModel model;
  model.layers.push_back(s.layer);
  model.top = s.A;
  model.d2 = s.A.d2;
  return model;
}

/// One convex layer plus its predictor.
inline StageResult train_two_layer(const Dataset& d, const LayerConfig& c, const DatasetSource& augment = {}) {
  const StageData data = prepare_stage(augment ? augment(0) : d, c);
  return fit_stage(data, c, augment);
}

/// Same as train_two_layer on any precomputed multi-channel feature images.
inline CcnnModel convexify_on_features(const Dataset& features, const LayerConfig& c) {
  return model_from_stage(train_two_layer(features, c));
}

inline CcnnModel convexify_on_features(const std::filesystem::path& feature_file, const std::filesystem::path& labels,
                                       Index num_classes, const LayerConfig& c) {
  return convexify_on_features(load_feature_dataset(feature_file, labels, num_classes), c);
}

/// H(x) for every image of `d` through the given layers.
inline Dataset forward_dataset(std::span<const CcnnLayer> layers, const Dataset& d) {
  Dataset out;
  out.labels = d.labels;
  out.num_classes = d.num_classes;
  out.provenance = d.provenance;
  out.images.resize(d.size());
  parallel_for(d.size(), [&](std::size_t i) {
    Image h = d.images[i];
    for (const auto& l : layers) h = l.forward(h);
    out.images[i] = std::move(h);
  });
  return out;
}

struct RadiusTrial {
  double radius = 0.0;
  double validation_error = 0.0;
  bool chosen = false;
};

struct MultiLayerOptions {
  std::filesystem::path cache_dir;  // stage inputs H_s(x_i) go through CCNF files here; empty keeps them in memory
  DatasetSource augment;            // per-epoch raw training set, pushed through the trained layers
  const Dataset* validation = nullptr;  // required when a layer lists several R candidates
  std::function<void(std::size_t stage, const StageResult&)> on_stage;
};

struct MultiLayerResult {
  CcnnModel model;
  std::vector<std::vector<EpochRecord>> records;  // per stage
  std::vector<Filters> filters;
  std::vector<std::vector<RadiusTrial>> radius_trials;  // per stage; empty when R was fixed
};

/// Greedy layer-wise training: stage s trains on H_{s-1}(x_i); the predictor
/// of the last stage becomes the model's predictor.
inline MultiLayerResult train_multi_layer(const Dataset& d, std::span<const LayerConfig> configs,
                                          const MultiLayerOptions& opts = {}) {
  if (d.empty()) throw ConfigError("training set is empty");
  plan_stack(d.shape(), configs, d.num_classes);
  if (!opts.cache_dir.empty()) std::filesystem::create_directories(opts.cache_dir);

  for (const auto& c : configs)
    if (c.radius_grid.size() > 1 && (!opts.validation || opts.validation->empty()))
      throw ConfigError("choosing R among several candidates needs a validation set");

  MultiLayerResult out;
  Dataset current = d;
  std::optional<Dataset> val;
  if (opts.validation) val = *opts.validation;
  for (std::size_t s = 0; s < configs.size(); ++s) {
    DatasetSource augment;
    if (opts.augment) {
      const std::vector<CcnnLayer> below = out.model.layers;
      augment = [&opts, below](int epoch) { return forward_dataset(below, opts.augment(epoch)); };
    }
    LayerConfig cfg = configs[s];
    const StageData data = prepare_stage(augment ? augment(0) : current, cfg);
    std::vector<RadiusTrial> trials;
    std::optional<StageResult> best;
    if (cfg.radius_grid.size() > 1) {
      std::size_t best_k = 0;
      for (double R : cfg.radius_grid) {
        cfg.opt.radius = R;
        StageResult candidate = fit_stage(data, cfg, augment);
        const double err = evaluate(model_from_stage(candidate), *val).error;
        trials.push_back({R, err, false});
        if (!best || err < trials[best_k].validation_error) {
          best = std::move(candidate);
          best_k = trials.size() - 1;
        }
      }
      trials[best_k].chosen = true;
      log_message("layer " + std::to_string(s + 1) + ": chose R = " + std::to_string(trials[best_k].radius) +
                  " (validation error " + std::to_string(trials[best_k].validation_error) + ")");
    } else {
      if (cfg.radius_grid.size() == 1) cfg.opt.radius = cfg.radius_grid.front();
      best = fit_stage(data, cfg, augment);
    }
    StageResult stage = std::move(*best);
    out.radius_trials.push_back(std::move(trials));
    if (opts.on_stage) opts.on_stage(s, stage);
    out.model.layers.push_back(stage.layer);
    out.records.push_back(stage.records);
    out.filters.push_back(stage.filters);
    if (s + 1 == configs.size()) {
      out.model.top = stage.A;
      out.model.d2 = stage.A.d2;
      break;
    }
    Dataset next = forward_dataset(std::span(&out.model.layers.back(), 1), current);
    if (val) *val = forward_dataset(std::span(&out.model.layers.back(), 1), *val);
    if (!opts.cache_dir.empty()) {
      const auto path = opts.cache_dir / ("stage" + std::to_string(s + 2) + "_input.ccnf");
      write_features(path, next.images);
      next.images = read_features(path);
    }
    current = std::move(next);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Model file

inline constexpr std::string_view kModelMagic = "CCNN";
inline constexpr std::uint16_t kModelVersion = 1;
inline constexpr std::uint16_t kFlagF32Arrays = 1;

struct SaveOptions {
  io::DType feature_dtype = io::DType::f64;  // f32 halves the feature-map arrays but rounds them
};

namespace detail {

inline void write_layer(io::Writer& w, const CcnnLayer& l, io::DType dt) {
  const ImageShape& in = l.plan.input;
  for (Index v : {in.channels, in.height, in.width, l.plan.patch_side, l.plan.stride, l.plan.pad, l.pool.pool_side,
                  l.pool.pool_stride})
    w.u64(std::uint64_t(v));
  const PatchPipeline& p = l.pipeline;
  w.u8(std::uint8_t(p.config.contrast));
  w.f64(p.config.contrast_eps);
  w.u8(p.zca ? 1 : 0);
  w.f64(p.config.zca_eps);
  w.u8(std::uint8_t(p.config.scaling));
  w.f64(p.scale.gamma);
  if (p.zca) {
    w.matrix(p.zca->mean);
    w.matrix(p.zca->W);
  }
  const FeatureMap& f = l.features;
  w.u8(std::uint8_t(f.variant));
  w.u8(std::uint8_t(f.kernel.kind));
  w.f64(f.kernel.gamma);
  w.u64(std::uint64_t(f.input_dim));
  w.u64(std::uint64_t(f.m));
  w.u64(f.seed);
  w.matrix(f.landmarks, dt);
  w.matrix(f.projector, dt);
  w.matrix(f.omega, dt);
  w.matrix(f.phase, dt);
  w.matrix(l.U_hat);
}

template <typename E>
E read_enum(io::Reader& r, std::uint8_t max, const char* what) {
  const std::uint8_t v = r.u8();
  if (v > max) throw DataError(r.what() + ": invalid " + what + " tag " + std::to_string(v));
  return static_cast<E>(v);
}

inline CcnnLayer read_layer(io::Reader& r) {
  CcnnLayer l;
  std::uint64_t v[8];
  for (auto& x : v) x = r.u64();
  const ImageShape in{Index(v[0]), Index(v[1]), Index(v[2])};
  try {
    l.plan = plan_patches(in, Index(v[3]), Index(v[4]), Index(v[5]));
    l.pool = build_pool_matrix(l.plan.grid_h, l.plan.grid_w, Index(v[6]), Index(v[7]));
  } catch (const std::invalid_argument& e) {
    throw DataError(r.what() + ": inconsistent layer geometry: " + e.what());
  }
  PatchPipeline& p = l.pipeline;
  p.config.contrast = read_enum<Contrast>(r, 1, "contrast");
  p.config.contrast_eps = r.f64();
  const bool zca = r.u8() != 0;
  p.config.zca = zca;
  p.config.zca_eps = r.f64();
  p.config.scaling = read_enum<Scaling>(r, 2, "scaling");
  p.scale.gamma = r.f64();
  if (zca) {
    ZcaTransform t;
    t.eps = p.config.zca_eps;
    t.mean = r.vector();
    t.W = r.matrix();
    if (t.mean.size() != l.plan.d1 || t.W.rows() != l.plan.d1 || t.W.cols() != l.plan.d1)
      throw DataError(r.what() + ": ZCA transform does not match the patch length");
    p.zca = std::move(t);
  }
  FeatureMap& f = l.features;
  f.variant = read_enum<FeatureVariant>(r, 3, "feature variant");
  f.kernel.kind = read_enum<KernelKind>(r, 2, "kernel");
  f.kernel.gamma = r.f64();
  f.input_dim = Index(r.u64());
  f.m = Index(r.u64());
  f.seed = r.u64();
  f.landmarks = r.matrix();
  f.projector = r.matrix();
  f.omega = r.matrix();
  f.phase = r.vector();
  l.U_hat = r.matrix();
  bool ok = f.input_dim == l.plan.d1 && l.U_hat.rows() == f.m;
  switch (f.variant) {
    case FeatureVariant::identity: ok = ok && f.m == f.input_dim; break;
    case FeatureVariant::random_features:
      ok = ok && f.omega.rows() == f.m && f.omega.cols() == f.input_dim && f.phase.size() == f.m;
      break;
    default:
      ok = ok && f.landmarks.cols() == f.input_dim && f.projector.rows() == f.m &&
           f.projector.cols() == f.landmarks.rows();
  }
  if (!ok) throw DataError(r.what() + ": feature map arrays have inconsistent shapes");
  return l;
}

}  // namespace detail

inline std::vector<std::uint8_t> serialize_model(const CcnnModel& model, const SaveOptions& opts = {}) {
  model.require_trained();
  io::Writer w;
  w.bytes(kModelMagic);
  w.u16(kModelVersion);
  w.u16(opts.feature_dtype == io::DType::f32 ? kFlagF32Arrays : 0);
  w.str(model.metadata);
  w.u32(std::uint32_t(model.d2));
  w.u32(std::uint32_t(model.layers.size()));
  for (const auto& l : model.layers) detail::write_layer(w, l, opts.feature_dtype);
  w.f64(model.top.radius);
  w.u64(std::uint64_t(model.top.P_prime));
  w.matrix(model.top.A);
  return w.finish();
}

/// Checks, in order: magic, checksum, format version, then structure.
inline CcnnModel deserialize_model(std::vector<std::uint8_t> bytes, const std::string& what = "model") {
  if (bytes.size() < kModelMagic.size() ||
      std::string_view(reinterpret_cast<const char*>(bytes.data()), kModelMagic.size()) != kModelMagic)
    throw DataError(what + ": not a CCNN model file (bad magic)");
  io::Reader r(std::move(bytes), what);
  r.verify_checksum();
  r.bytes(kModelMagic.size());
  const std::uint16_t version = r.u16();
  if (version != kModelVersion)
    throw UnsupportedVersionError(what + ": unsupported model format version " + std::to_string(version) +
                                  " (this build reads version " + std::to_string(kModelVersion) + ")");
  r.u16();  // flags
  CcnnModel model;
  model.metadata = r.str();
  model.d2 = Index(r.u32());
  const std::uint32_t depth = r.u32();
  if (depth == 0 || model.d2 == 0) throw DataError(what + ": model has no layers or labels");
  for (std::uint32_t s = 0; s < depth; ++s) {
    model.layers.push_back(detail::read_layer(r));
    if (s > 0 && !(model.layers[s].input_shape() == model.layers[s - 1].output_shape()))
      throw DataError(what + ": layer " + std::to_string(s + 1) + " does not compose with the layer below");
  }
  model.top.radius = r.f64();
  model.top.P_prime = Index(r.u64());
  model.top.d2 = model.d2;
  model.top.A = r.matrix();
  const CcnnLayer& last = model.layers.back();
  if (model.top.P_prime != last.pool.P_prime || model.top.A.rows() != last.m() ||
      model.top.A.cols() != model.top.P_prime * model.d2)
    throw DataError(what + ": predictor shape does not match the top layer");
  if (!r.at_end()) throw DataError(what + ": trailing bytes after model");
  return model;
}

inline void save_model(const CcnnModel& model, const std::filesystem::path& path, const SaveOptions& opts = {}) {
  io::write_all(path, serialize_model(model, opts));
}

inline CcnnModel load_model(const std::filesystem::path& path) {
  return deserialize_model(io::read_all(path), path.string());
}

}  // namespace ccnn
