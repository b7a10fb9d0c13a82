#pragma once

// CCNF feature files: convolutional-layer outputs H(x) stored as r-channel
// images over the pooled grid.
//
//   "CCNF" | u32 count | u32 channels | u32 grid_h | u32 grid_w
//   | f32 payload, row-major over (sample, channel, y, x) | u32 CRC32
//
// All integers and floats little-endian.

#include "ccnn/dataio.hpp"
#include "ccnn/serialize.hpp"

#include <filesystem>
#include <vector>

namespace ccnn {

inline constexpr std::string_view kFeatureMagic = "CCNF";

inline void write_features(const std::filesystem::path& path, const std::vector<Image>& images) {
  io::Writer w;
  w.bytes(kFeatureMagic);
  const ImageShape s = images.empty() ? ImageShape{} : images.front().shape;
  w.u32(std::uint32_t(images.size()));
  w.u32(std::uint32_t(s.channels));
  w.u32(std::uint32_t(s.height));
  w.u32(std::uint32_t(s.width));
  for (const auto& img : images) {
    if (!(img.shape == s)) throw ShapeError("feature images must share one shape");
    for (Index c = 0; c < s.channels; ++c)
      for (Index k = 0; k < s.pixels(); ++k) w.f32(img.pixels(c, k));
  }
  io::write_all(path, w.finish());
}

inline std::vector<Image> read_features(const std::filesystem::path& path) {
  auto bytes = io::read_all(path);
  if (bytes.size() < 4 || std::string_view(reinterpret_cast<const char*>(bytes.data()), 4) != kFeatureMagic)
    throw DataError(path.string() + ": not a CCNF feature file");
  io::Reader r(std::move(bytes), path.string());
  r.verify_checksum();
  r.bytes(4);
  const std::size_t n = r.u32();
  const ImageShape s{Index(r.u32()), Index(r.u32()), Index(r.u32())};
  if (n > 0) validate(s);
  if (r.remaining() != n * std::size_t(s.size()) * 4) throw DataError(path.string() + ": payload size does not match header");
  std::vector<Image> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    Image img(s);
    for (Index c = 0; c < s.channels; ++c)
      for (Index k = 0; k < s.pixels(); ++k) img.pixels(c, k) = r.f32();
    out.push_back(std::move(img));
  }
  return out;
}

/// Pairs a feature file with labels (IDX label file) into a Dataset.
inline Dataset load_feature_dataset(const std::filesystem::path& features, const std::filesystem::path& labels,
                                    Index num_classes = 10) {
  Dataset d;
  d.images = read_features(features);
  d.labels = load_idx_labels(labels);
  d.num_classes = num_classes;
  d.provenance = "ccnf:" + features.string();
  if (d.labels.size() != d.images.size()) throw DataError("feature file and label file have different sample counts");
  validate(d);
  return d;
}

}  // namespace ccnn
