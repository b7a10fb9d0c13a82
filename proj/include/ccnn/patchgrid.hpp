#pragma once

// Patch geometry, multi-channel patch extraction and average pooling.
//
// Conventions fixed here are relied upon by the model file format:
//  - patches are enumerated row-major over the patch grid;
//  - a patch vector is the concatenation of per-channel windows (channel
//    blocks), each window flattened row-major;
//  - padding pixels read as zero.

#include "ccnn/common.hpp"

#include <Eigen/SparseCore>

#include <string>
#include <vector>

namespace ccnn {

struct ImageShape {
  Index channels = 1;
  Index height = 1;
  Index width = 1;

  Index pixels() const { return height * width; }
  Index size() const { return channels * height * width; }
  bool operator==(const ImageShape&) const = default;
};

inline std::string to_string(const ImageShape& s) {
  return std::to_string(s.channels) + "x" + std::to_string(s.height) + "x" + std::to_string(s.width);
}

inline void validate(const ImageShape& s) {
  if (s.channels < 1 || s.height < 1 || s.width < 1)
    throw ShapeError("image shape " + to_string(s) + " has a non-positive dimension");
}

/// A C-channel image stored as a C x (height*width) matrix; each row is one
/// channel in row-major pixel order.
struct Image {
  ImageShape shape;
  MatrixF pixels;

  Image() = default;
  explicit Image(ImageShape s) : shape(s), pixels(MatrixF::Zero(s.channels, s.pixels())) {}
  Image(ImageShape s, MatrixF px) : shape(s), pixels(std::move(px)) {
    if (pixels.rows() != s.channels || pixels.cols() != s.pixels())
      throw ShapeError("pixel buffer does not match image shape " + to_string(s));
  }

  float& at(Index c, Index row, Index col) { return pixels(c, row * shape.width + col); }
  float at(Index c, Index row, Index col) const { return pixels(c, row * shape.width + col); }
};

struct PatchPlan {
  ImageShape input;
  Index patch_side = 1;
  Index stride = 1;
  Index pad = 0;
  Index grid_h = 1;
  Index grid_w = 1;
  Index P = 1;
  Index d1 = 1;
};

inline PatchPlan plan_patches(const ImageShape& shape, Index patch_side, Index stride, Index pad) {
  validate(shape);
  if (stride < 1) throw ShapeError("patch stride must be >= 1");
  if (pad < 0) throw ShapeError("padding must be >= 0");
  if (patch_side < 1) throw ShapeError("patch side must be >= 1");
  const Index ph = shape.height + 2 * pad;
  const Index pw = shape.width + 2 * pad;
  if (patch_side > ph || patch_side > pw)
    throw ShapeError("patch side " + std::to_string(patch_side) + " exceeds padded image extent " +
                     std::to_string(ph) + "x" + std::to_string(pw));
  PatchPlan plan;
  plan.input = shape;
  plan.patch_side = patch_side;
  plan.stride = stride;
  plan.pad = pad;
  plan.grid_h = (ph - patch_side) / stride + 1;
  plan.grid_w = (pw - patch_side) / stride + 1;
  plan.P = plan.grid_h * plan.grid_w;
  plan.d1 = shape.channels * patch_side * patch_side;
  return plan;
}

/// Returns the P x d1 patch matrix whose p-th row is z_p(x).
inline Matrix extract_patches(const Image& x, const PatchPlan& plan) {
  if (!(x.shape == plan.input))
    throw ShapeError("image shape " + to_string(x.shape) + " does not match plan input " +
                     to_string(plan.input));
  const Index s = plan.patch_side;
  const Index H = x.shape.height;
  const Index W = x.shape.width;
  Matrix Z(plan.P, plan.d1);
  for (Index gy = 0; gy < plan.grid_h; ++gy) {
    for (Index gx = 0; gx < plan.grid_w; ++gx) {
      const Index p = gy * plan.grid_w + gx;
      const Index y0 = gy * plan.stride - plan.pad;
      const Index x0 = gx * plan.stride - plan.pad;
      Index k = 0;
      for (Index c = 0; c < x.shape.channels; ++c) {
        for (Index dy = 0; dy < s; ++dy) {
          const Index yy = y0 + dy;
          for (Index dx = 0; dx < s; ++dx, ++k) {
            const Index xx = x0 + dx;
            Z(p, k) = (yy >= 0 && yy < H && xx >= 0 && xx < W) ? double(x.pixels(c, yy * W + xx)) : 0.0;
          }
        }
      }
    }
  }
  return Z;
}

struct PoolEntry {
  Index row;
  Index col;
  double weight;
};

struct PoolPlan {
  Index grid_h = 1;
  Index grid_w = 1;
  Index pool_side = 1;
  Index pool_stride = 1;
  Index out_h = 1;
  Index out_w = 1;
  Index P_prime = 1;
  std::vector<PoolEntry> entries;  // row-major over (row, col)

  Index P() const { return grid_h * grid_w; }
  bool is_identity() const { return pool_side == 1 && pool_stride == 1; }

  Eigen::SparseMatrix<double, Eigen::RowMajor> matrix() const {
    Eigen::SparseMatrix<double, Eigen::RowMajor> G(P_prime, P());
    std::vector<Eigen::Triplet<double>> t;
    t.reserve(entries.size());
    for (const auto& e : entries) t.emplace_back(e.row, e.col, e.weight);
    G.setFromTriplets(t.begin(), t.end());
    return G;
  }
};

namespace detail {

// Number of window starts 0, stride, 2*stride, ... needed to cover the grid,
// never starting past its last cell.
inline Index pooled_extent(Index grid, Index side, Index stride) {
  const Index cover = (grid - side + stride - 1) / stride + 1;
  const Index fit = (grid - 1) / stride + 1;
  return std::min(cover, fit);
}

}  // namespace detail

/// Average pooling over a grid_h x grid_w patch grid. Windows clipped by the
/// grid boundary average over their actual members, so every row sums to 1.
inline PoolPlan build_pool_matrix(Index grid_h, Index grid_w, Index pool_side, Index pool_stride) {
  if (grid_h < 1 || grid_w < 1) throw ShapeError("patch grid must be non-empty");
  if (pool_side < 1 || pool_stride < 1) throw ShapeError("pool side and stride must be >= 1");
  if (pool_side > grid_h || pool_side > grid_w)
    throw ShapeError("pool side " + std::to_string(pool_side) + " exceeds patch grid " +
                     std::to_string(grid_h) + "x" + std::to_string(grid_w));
  PoolPlan plan;
  plan.grid_h = grid_h;
  plan.grid_w = grid_w;
  plan.pool_side = pool_side;
  plan.pool_stride = pool_stride;
  plan.out_h = detail::pooled_extent(grid_h, pool_side, pool_stride);
  plan.out_w = detail::pooled_extent(grid_w, pool_side, pool_stride);
  plan.P_prime = plan.out_h * plan.out_w;
  for (Index oy = 0; oy < plan.out_h; ++oy) {
    for (Index ox = 0; ox < plan.out_w; ++ox) {
      const Index y0 = oy * pool_stride;
      const Index x0 = ox * pool_stride;
      const Index y1 = std::min(grid_h, y0 + pool_side);
      const Index x1 = std::min(grid_w, x0 + pool_side);
      const double w = 1.0 / double((y1 - y0) * (x1 - x0));
      for (Index y = y0; y < y1; ++y)
        for (Index x = x0; x < x1; ++x) plan.entries.push_back({oy * plan.out_w + ox, y * grid_w + x, w});
    }
  }
  return plan;
}

inline PoolPlan identity_pool(Index grid_h, Index grid_w) { return build_pool_matrix(grid_h, grid_w, 1, 1); }

/// G * Z for a P x m matrix Z.
inline Matrix apply_pool(const PoolPlan& pool, const Matrix& Z) {
  if (Z.rows() != pool.P())
    throw ShapeError("pooling expects " + std::to_string(pool.P()) + " rows, got " + std::to_string(Z.rows()));
  Matrix out = Matrix::Zero(pool.P_prime, Z.cols());
  for (const auto& e : pool.entries) out.row(e.row) += e.weight * Z.row(e.col);
  return out;
}

}  // namespace ccnn
