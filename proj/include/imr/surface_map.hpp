#pragma once

#include <cstdint>
#include <random>
#include <vector>

#include "imr/autodiff.hpp"
#include "imr/geometry.hpp"

namespace imr {

// Per-image pixel-to-sphere assignment C[p], stored as a coarse grid of
// unnormalized 3-vectors that spans the image. Lookups interpolate
// bilinearly and normalize.
struct PixelSurfaceMap {
  ad::Tensor grid;  // (Hc, Wc, 3)

  std::size_t rows() const { return grid.size(0); }
  std::size_t cols() const { return grid.size(1); }

  // Pixel coordinates (N, 2) of an H x W image -> (N, 3) unit vectors.
  ad::Tensor sample(const ad::Tensor& pixels, std::size_t H, std::size_t W) const {
    if (pixels.rank() != 2 || pixels.size(1) != 2) throw DimensionError("sample_map: pixels must be (N, 2)");
    const auto pv = pixels.data();
    for (std::size_t i = 0; i < pixels.size(0); ++i) {
      if (!(pv[2 * i] >= 0 && pv[2 * i] <= double(W) && pv[2 * i + 1] >= 0 && pv[2 * i + 1] <= double(H))) {
        throw ArgumentError(imr::detail::concat("sample_map: pixel (", pv[2 * i], ", ", pv[2 * i + 1], ") outside ", W, "x", H));
      }
    }
    const ad::Tensor to_cells({2}, {double(cols()) / double(W), double(rows()) / double(H)});
    const ad::Tensor interp = ad::bilinear_gather(grid, ad::shift(ad::mul(pixels, to_cells), -0.5));
    const auto iv = interp.data();
    for (std::size_t i = 0; i < interp.size(0); ++i) {
      const double n2 = iv[3 * i] * iv[3 * i] + iv[3 * i + 1] * iv[3 * i + 1] + iv[3 * i + 2] * iv[3 * i + 2];
      if (n2 < 1e-16) throw NumericError(imr::detail::concat("sample_map: interpolant vanishes at pixel ", i));
    }
    return ad::normalize_rows(interp);
  }

  Vec3 sample(const Vec2& p, std::size_t H, std::size_t W) const {
    ad::NoGradGuard guard;
    const ad::Tensor out = sample(ad::Tensor({1, 2}, {p.x(), p.y()}), H, W);
    return {out[0], out[1], out[2]};
  }

  // Rescales every grid entry to unit norm (between optimizer steps).
  void normalize_grid() {
    auto g = grid.mutable_data();
    for (std::size_t i = 0; i + 2 < g.size(); i += 3) {
      const double n = std::sqrt(g[i] * g[i] + g[i + 1] * g[i + 1] + g[i + 2] * g[i + 2]);
      if (n > 0) {
        g[i] /= n;
        g[i + 1] /= n;
        g[i + 2] /= n;
      }
    }
  }

  PixelSurfaceMap clone(bool grad_enabled) const { return {grid.clone(grad_enabled)}; }
};

inline PixelSurfaceMap init_map(std::size_t rows, std::size_t cols, std::uint64_t seed, bool grad_enabled = true) {
  if (rows < 4 || cols < 4) throw ArgumentError(imr::detail::concat("init_map: grid must be at least 4x4, got ", rows, "x", cols));
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g(0.0, 1.0);
  std::vector<double> v(rows * cols * 3);
  for (std::size_t i = 0; i < rows * cols; ++i) {
    Vec3 x;
    do x = Vec3(g(rng), g(rng), g(rng));
    while (x.norm() < 1e-12);
    x.normalize();
    for (int k = 0; k < 3; ++k) v[3 * i + k] = x[k];
  }
  return {ad::Tensor({rows, cols, 3}, std::move(v), grad_enabled)};
}

}  // namespace imr
