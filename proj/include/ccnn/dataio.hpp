#pragma once

// Dataset containers and readers/writers for MNIST IDX, MNIST-variations
// .amat text, and CIFAR-10 binary batches; seeded splits and crops; and
// synthetic data labelled by a planted two-layer CNN.

#include "ccnn/common.hpp"
#include "ccnn/convex_opt.hpp"
#include "ccnn/patchgrid.hpp"

#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <vector>

namespace ccnn {

struct Dataset {
  std::vector<Image> images;
  std::vector<int> labels;
  Index num_classes = 10;
  std::string provenance;

  std::size_t size() const { return images.size(); }
  bool empty() const { return images.empty(); }
  ImageShape shape() const {
    if (images.empty()) throw DataError("dataset is empty");
    return images.front().shape;
  }
  std::vector<double> targets() const { return {labels.begin(), labels.end()}; }

  Dataset subset(std::span<const std::size_t> idx) const {
    Dataset out;
    out.num_classes = num_classes;
    out.provenance = provenance;
    out.images.reserve(idx.size());
    out.labels.reserve(idx.size());
    for (auto i : idx) {
      out.images.push_back(images.at(i));
      out.labels.push_back(labels.at(i));
    }
    return out;
  }
  Dataset head(std::size_t n) const {
    std::vector<std::size_t> idx(std::min(n, size()));
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    return subset(idx);
  }
};

/// Checks label range and that all images share one shape.
inline void validate(const Dataset& d) {
  if (d.images.size() != d.labels.size()) throw DataError("image and label counts differ");
  for (std::size_t i = 0; i < d.size(); ++i) {
    if (d.labels[i] < 0 || d.labels[i] >= d.num_classes)
      throw DataError("label " + std::to_string(d.labels[i]) + " of sample " + std::to_string(i) + " outside [0, " +
                      std::to_string(d.num_classes) + ")");
    if (!(d.images[i].shape == d.images.front().shape)) throw DataError("sample " + std::to_string(i) + " has a different shape");
  }
}

namespace detail {

inline std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), std::streamsize(bytes.size()));
  if (!out) throw DataError("write failed for " + path.string());
}

inline std::uint32_t read_be32(const std::vector<std::uint8_t>& b, std::size_t off) {
  return (std::uint32_t(b[off]) << 24) | (std::uint32_t(b[off + 1]) << 16) | (std::uint32_t(b[off + 2]) << 8) |
         std::uint32_t(b[off + 3]);
}

inline void put_be32(std::vector<std::uint8_t>& b, std::uint32_t v) {
  for (int s = 24; s >= 0; s -= 8) b.push_back(std::uint8_t(v >> s));
}

inline std::uint8_t to_byte(float v) {
  return std::uint8_t(std::lround(std::clamp(double(v), 0.0, 1.0) * 255.0));
}

}  // namespace detail

inline constexpr std::uint32_t kIdxImagesMagic = 0x00000803;
inline constexpr std::uint32_t kIdxLabelsMagic = 0x00000801;

inline std::vector<int> load_idx_labels(const std::filesystem::path& path) {
  const auto b = detail::read_file(path);
  if (b.size() < 8) throw DataError(path.string() + ": truncated IDX label header");
  if (detail::read_be32(b, 0) != kIdxLabelsMagic) throw DataError(path.string() + ": bad IDX label magic");
  const std::size_t n = detail::read_be32(b, 4);
  if (b.size() < 8 + n) throw DataError(path.string() + ": truncated IDX label payload");
  return {b.begin() + 8, b.begin() + std::ptrdiff_t(8 + n)};
}

/// MNIST IDX pair; pixels scaled by 1/255.
inline Dataset load_idx(const std::filesystem::path& images_path, const std::filesystem::path& labels_path) {
  const auto b = detail::read_file(images_path);
  if (b.size() < 16) throw DataError(images_path.string() + ": truncated IDX image header");
  if (detail::read_be32(b, 0) != kIdxImagesMagic) throw DataError(images_path.string() + ": bad IDX image magic");
  const std::size_t n = detail::read_be32(b, 4);
  const Index rows = detail::read_be32(b, 8);
  const Index cols = detail::read_be32(b, 12);
  const std::size_t px = std::size_t(rows * cols);
  if (b.size() < 16 + n * px) throw DataError(images_path.string() + ": truncated IDX image payload");
  Dataset d;
  d.labels = load_idx_labels(labels_path);
  if (d.labels.size() != n) throw DataError("IDX image and label counts differ");
  d.provenance = "idx:" + images_path.string();
  const ImageShape shape{1, rows, cols};
  d.images.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    Image img(shape);
    for (std::size_t k = 0; k < px; ++k) img.pixels(0, Index(k)) = float(b[16 + i * px + k]) / 255.0f;
    d.images.push_back(std::move(img));
  }
  d.num_classes = 10;
  for (int l : d.labels) d.num_classes = std::max<Index>(d.num_classes, l + 1);
  return d;
}

inline void write_idx_labels(const std::vector<int>& labels, const std::filesystem::path& path) {
  std::vector<std::uint8_t> b;
  detail::put_be32(b, kIdxLabelsMagic);
  detail::put_be32(b, std::uint32_t(labels.size()));
  for (int l : labels) b.push_back(std::uint8_t(l));
  detail::write_file(path, b);
}

/// Writes single-channel images as IDX (pixels quantized to round(255 v)).
inline void write_idx(const Dataset& d, const std::filesystem::path& images_path, const std::filesystem::path& labels_path) {
  const ImageShape s = d.shape();
  if (s.channels != 1) throw DataError("IDX images must be single-channel");
  std::vector<std::uint8_t> b;
  detail::put_be32(b, kIdxImagesMagic);
  detail::put_be32(b, std::uint32_t(d.size()));
  detail::put_be32(b, std::uint32_t(s.height));
  detail::put_be32(b, std::uint32_t(s.width));
  for (const auto& img : d.images)
    for (Index k = 0; k < s.pixels(); ++k) b.push_back(detail::to_byte(img.pixels(0, k)));
  detail::write_file(images_path, b);
  write_idx_labels(d.labels, labels_path);
}

inline constexpr Index kAmatSide = 28;

/// MNIST-variations .amat: each line holds 784 pixels in [0,1] then the label.
inline Dataset load_amat(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  Dataset d;
  d.provenance = "amat:" + path.string();
  const Index px = kAmatSide * kAmatSide;
  std::string line;
  std::size_t lineno = 0;
  std::vector<double> fields;
  while (std::getline(in, line)) {
    ++lineno;
    std::istringstream ss(line);
    fields.clear();
    double v;
    while (ss >> v) fields.push_back(v);
    if (!ss.eof()) throw DataError(path.string() + ":" + std::to_string(lineno) + ": unparsable field");
    if (fields.empty()) continue;
    if (Index(fields.size()) != px + 1)
      throw DataError(path.string() + ":" + std::to_string(lineno) + ": expected " + std::to_string(px + 1) +
                      " fields, got " + std::to_string(fields.size()));
    Image img(ImageShape{1, kAmatSide, kAmatSide});
    for (Index k = 0; k < px; ++k) {
      const double v = fields[std::size_t(k)];
      if (!(v >= 0.0 && v <= 1.0))
        throw DataError(path.string() + ":" + std::to_string(lineno) + ": pixel " + std::to_string(k) + " = " +
                        std::to_string(v) + " outside [0, 1]");
      img.pixels(0, k) = float(v);
    }
    d.images.push_back(std::move(img));
    d.labels.push_back(int(std::lround(fields.back())));
  }
  d.num_classes = 10;
  validate(d);
  return d;
}

inline void write_amat(const Dataset& d, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  out.precision(9);
  for (std::size_t i = 0; i < d.size(); ++i) {
    const auto& img = d.images[i];
    if (img.shape.channels != 1 || img.shape.height != kAmatSide || img.shape.width != kAmatSide)
      throw DataError("amat images must be 1x28x28");
    for (Index k = 0; k < img.pixels.cols(); ++k) out << img.pixels(0, k) << ' ';
    out << d.labels[i] << '\n';
  }
}

inline constexpr Index kCifarSide = 32;
inline constexpr std::size_t kCifarRecord = 1 + 3 * 32 * 32;

/// CIFAR-10 binary batches: per record one label byte then R, G, B planes.
inline Dataset load_cifar10(const std::vector<std::filesystem::path>& paths) {
  Dataset d;
  d.num_classes = 10;
  d.provenance = "cifar10";
  const ImageShape shape{3, kCifarSide, kCifarSide};
  for (const auto& p : paths) {
    const auto b = detail::read_file(p);
    if (b.size() % kCifarRecord != 0)
      throw DataError(p.string() + ": length " + std::to_string(b.size()) + " is not a multiple of " +
                      std::to_string(kCifarRecord));
    for (std::size_t off = 0; off < b.size(); off += kCifarRecord) {
      d.labels.push_back(b[off]);
      Image img(shape);
      for (Index c = 0; c < 3; ++c)
        for (Index k = 0; k < shape.pixels(); ++k)
          img.pixels(c, k) = float(b[off + 1 + std::size_t(c * shape.pixels() + k)]) / 255.0f;
      d.images.push_back(std::move(img));
    }
  }
  validate(d);
  return d;
}

inline void write_cifar10(const Dataset& d, const std::filesystem::path& path) {
  std::vector<std::uint8_t> b;
  b.reserve(d.size() * kCifarRecord);
  for (std::size_t i = 0; i < d.size(); ++i) {
    const auto& img = d.images[i];
    if (!(img.shape == ImageShape{3, kCifarSide, kCifarSide})) throw DataError("CIFAR-10 images must be 3x32x32");
    b.push_back(std::uint8_t(d.labels[i]));
    for (Index c = 0; c < 3; ++c)
      for (Index k = 0; k < img.shape.pixels(); ++k) b.push_back(detail::to_byte(img.pixels(c, k)));
  }
  detail::write_file(path, b);
}

struct Splits {
  Dataset train, val, test;
};

/// Seeded shuffle, then contiguous train / val / test slices of the given fractions.
inline Splits split(const Dataset& d, std::array<double, 3> fractions, std::uint64_t seed) {
  double total = 0;
  for (double f : fractions) {
    if (f < 0 || !std::isfinite(f)) throw ConfigError("split fractions must be finite and >= 0");
    total += f;
  }
  if (total > 1.0 + 1e-12) throw ConfigError("split fractions sum to more than 1");
  const std::size_t n = d.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  auto count = [n](double f) { return std::size_t(std::llround(f * double(n))); };
  const std::size_t ntr = std::min(n, count(fractions[0]));
  const std::size_t nva = std::min(n - ntr, count(fractions[1]));
  const std::size_t nte = std::min(n - ntr - nva, count(fractions[2]));
  std::span<const std::size_t> all(order);
  return {d.subset(all.subspan(0, ntr)), d.subset(all.subspan(ntr, nva)), d.subset(all.subspan(ntr + nva, nte))};
}

enum class CropMode { per_epoch, once, center };

struct CropOffset {
  Index top = 0;
  Index left = 0;
  bool operator==(const CropOffset&) const = default;
};

/// Crop offsets for every sample. `once` ignores the epoch; `per_epoch`
/// draws fresh offsets from (seed, epoch); `center` is deterministic.
inline std::vector<CropOffset> crop_offsets(const Dataset& d, Index crop_h, Index crop_w, std::uint64_t seed, CropMode mode,
                                            int epoch = 0) {
  const ImageShape s = d.shape();
  if (crop_h < 1 || crop_w < 1 || crop_h > s.height || crop_w > s.width)
    throw ConfigError("crop " + std::to_string(crop_h) + "x" + std::to_string(crop_w) + " does not fit image " + to_string(s));
  std::vector<CropOffset> out(d.size());
  if (mode == CropMode::center) {
    for (auto& o : out) o = {(s.height - crop_h) / 2, (s.width - crop_w) / 2};
    return out;
  }
  std::seed_seq seq{std::uint64_t(seed), std::uint64_t(mode == CropMode::per_epoch ? epoch : 0)};
  std::mt19937_64 rng(seq);
  std::uniform_int_distribution<Index> top(0, s.height - crop_h);
  std::uniform_int_distribution<Index> left(0, s.width - crop_w);
  for (auto& o : out) o = {top(rng), left(rng)};
  return out;
}

inline Dataset random_crop(const Dataset& d, Index crop_h, Index crop_w, std::uint64_t seed, CropMode mode, int epoch = 0) {
  const auto offs = crop_offsets(d, crop_h, crop_w, seed, mode, epoch);
  Dataset out;
  out.num_classes = d.num_classes;
  out.provenance = d.provenance;
  out.labels = d.labels;
  out.images.reserve(d.size());
  const ImageShape cs{d.shape().channels, crop_h, crop_w};
  for (std::size_t i = 0; i < d.size(); ++i) {
    Image img(cs);
    for (Index c = 0; c < cs.channels; ++c)
      for (Index y = 0; y < crop_h; ++y)
        for (Index x = 0; x < crop_w; ++x) img.at(c, y, x) = d.images[i].at(c, y + offs[i].top, x + offs[i].left);
    out.images.push_back(std::move(img));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Planted CNN data.

enum class PlantedActivation { linear, quadratic };

struct PlantedSpec {
  std::uint64_t seed = 1;
  Index r = 2;
  Index d2 = 3;
  PlantedActivation activation = PlantedActivation::linear;
  ImageShape shape{1, 8, 8};
  Index patch_side = 3;
  Index stride = 1;
  Index pad = 0;
  double B1 = 1.0;
  double B2 = 1.0;
  double margin = 0.05;  // resample inputs whose top-two scores are closer than this
  bool reject_small_margin = true;
};

/// Data labelled by f_l(x) = sum_j sum_p alpha_{l,j,p} sigma(<w_j, z_p(x)>).
/// With d2 == 1 the label is 1 when f(x) > 0 and 0 otherwise.
struct PlantedData {
  PlantedSpec spec;
  Dataset data;
  PatchPlan plan;
  Matrix filters;              // d1 x r, columns w_j
  std::vector<Matrix> alpha;   // per output l: r x P, rows alpha_{l,j}

  Index feature_dim() const { return spec.activation == PlantedActivation::linear ? plan.d1 : plan.d1 * plan.d1; }

  /// Explicit per-patch features: z (linear) or vec(z z^T) (quadratic).
  Matrix features(const Image& x) const {
    const Matrix Z = extract_patches(x, plan);
    if (spec.activation == PlantedActivation::linear) return Z;
    Matrix out(Z.rows(), plan.d1 * plan.d1);
    for (Index p = 0; p < Z.rows(); ++p) {
      const Matrix outer = Z.row(p).transpose() * Z.row(p);
      out.row(p) = outer.reshaped().transpose();
    }
    return out;
  }

  /// A_l = sum_j w_j alpha_{l,j}^T (feature_dim x P per block), concatenated.
  Matrix planted_matrix() const {
    const Index P = plan.P;
    Matrix A(feature_dim(), P * spec.d2);
    for (Index l = 0; l < spec.d2; ++l) {
      Matrix lifted(feature_dim(), spec.r);
      for (Index j = 0; j < spec.r; ++j) {
        if (spec.activation == PlantedActivation::linear) {
          lifted.col(j) = filters.col(j);
        } else {
          const Matrix outer = filters.col(j) * filters.col(j).transpose();
          lifted.col(j) = outer.reshaped();
        }
      }
      A.middleCols(l * P, P) = lifted * alpha[std::size_t(l)];
    }
    return A;
  }

  Vector scores(const Image& x) const {
    const Matrix Z = extract_patches(x, plan);
    Matrix h = Z * filters;  // P x r
    if (spec.activation == PlantedActivation::quadratic) h = h.array().square().matrix();
    Vector f(spec.d2);
    for (Index l = 0; l < spec.d2; ++l) f(l) = (alpha[std::size_t(l)].transpose().array() * h.array()).sum();
    return f;
  }

  /// Objective of the planted parameters over this data set, with the same
  /// loss the convex trainer minimizes.
  double objective(const LossSpec& loss) const {
    const Matrix A = planted_matrix();
    double total = 0.0;
    for (std::size_t i = 0; i < data.size(); ++i) {
      const Vector f = scores_flat(A, spec.d2, flatten_features(features(data.images[i])));
      total += loss_and_grad(loss, f, double(data.labels[i])).value;
    }
    return total;
  }
};

inline PlantedData gen_planted(const PlantedSpec& spec, std::size_t n) {
  if (spec.r < 1 || spec.d2 < 1) throw ConfigError("planted model needs r >= 1 and d2 >= 1");
  PlantedData pd;
  pd.spec = spec;
  pd.plan = plan_patches(spec.shape, spec.patch_side, spec.stride, spec.pad);
  std::mt19937_64 rng(spec.seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  auto random_direction = [&](Index len, double norm) {
    Vector v(len);
    for (Index k = 0; k < len; ++k) v(k) = normal(rng);
    return Vector(v * (norm / v.norm()));
  };
  pd.filters.resize(pd.plan.d1, spec.r);
  for (Index j = 0; j < spec.r; ++j) pd.filters.col(j) = random_direction(pd.plan.d1, spec.B1);
  for (Index l = 0; l < spec.d2; ++l) {
    Matrix a(spec.r, pd.plan.P);
    for (Index j = 0; j < spec.r; ++j) a.row(j) = random_direction(pd.plan.P, spec.B2).transpose();
    pd.alpha.push_back(std::move(a));
  }

  pd.data.num_classes = spec.d2 == 1 ? 2 : spec.d2;
  pd.data.provenance = "planted";
  constexpr int kMaxTries = 1000;
  while (pd.data.size() < n) {
    Image x(spec.shape);
    int tries = 0;
    int label = 0;
    for (;; ++tries) {
      if (tries >= kMaxTries) throw NumericalError("planted margin rejection failed; lower the margin");
      for (Index c = 0; c < spec.shape.channels; ++c)
        for (Index k = 0; k < spec.shape.pixels(); ++k) x.pixels(c, k) = float(normal(rng));
      const Vector f = pd.scores(x);
      double gap;
      if (spec.d2 == 1) {
        label = f(0) > 0 ? 1 : 0;
        gap = 2.0 * std::abs(f(0));
      } else {
        Index arg = 0;
        const double top = f.maxCoeff(&arg);
        label = int(arg);
        Vector rest = f;
        rest(arg) = -std::numeric_limits<double>::infinity();
        gap = top - rest.maxCoeff();
      }
      if (!spec.reject_small_margin || gap >= spec.margin) break;
    }
    pd.data.images.push_back(std::move(x));
    pd.data.labels.push_back(label);
  }
  return pd;
}

}  // namespace ccnn
