#pragma once

#include <cstdint>
#include <vector>

#include "imr/autodiff.hpp"
#include "imr/geometry.hpp"
#include "imr/image.hpp"
#include "imr/mlp.hpp"
#include "imr/renderer.hpp"
#include "imr/shape_space.hpp"

namespace imr {

// Implicit texture flow: each sphere point names the normalized image
// coordinate whose colour it copies. Points are folded onto the x >= 0
// hemisphere first, so the texture is exactly mirror-symmetric.
struct TextureSpace {
  MLPParams flow_net;
  std::size_t latent_dim = 16;

  static TextureSpace create(std::uint64_t seed, std::size_t latent_dim = 16, std::size_t hidden = 64) {
    TextureSpace t;
    t.latent_dim = latent_dim;
    t.flow_net = MLPParams::create(3 + latent_dim, hidden, 2, seed, false);
    return t;
  }

  void check_latent(const ad::Tensor& z) const {
    if (!z.defined() || z.numel() != latent_dim) {
      throw ArgumentError(imr::detail::concat("texture space: latent has ", z.defined() ? z.numel() : 0,
                                              " entries, expected ", latent_dim));
    }
  }

  // U (N, 3) unit vectors -> (N, 2) in (0, 1)^2.
  ad::Tensor flow(const ad::Tensor& U, const ad::Tensor& z) const {
    check_latent(z);
    const std::size_t n = U.size(0);
    std::vector<double> folded(U.data().begin(), U.data().end());
    for (std::size_t i = 0; i < n; ++i) folded[3 * i] = std::abs(folded[3 * i]);
    const ad::Tensor zz = ad::broadcast_to(ad::reshape(z, {1, latent_dim}), {n, latent_dim});
    return ad::sigmoid(flow_net.forward(ad::concat({ad::Tensor({n, 3}, std::move(folded)), zz}, 1)));
  }

  std::vector<ad::Tensor> parameters() const { return flow_net.parameters(); }

  TextureSpace clone() const {
    TextureSpace c = *this;
    c.flow_net = flow_net.clone();
    return c;
  }
};

inline Vec2 eval_texture_flow(const TextureSpace& space, const Vec3& u, const LatentCode& z) {
  detail::check_unit(u, "eval_texture_flow");
  ad::NoGradGuard guard;
  const ad::Tensor f = space.flow(detail::points_tensor({u}), z.values);
  return {f[0], f[1]};
}

// Bilinear sampling of image (H, W, C) at normalized coordinates xy (N, 2):
// (0, 0) is the top-left image corner and pixel centres sit at
// ((col + 0.5) / W, (row + 0.5) / H). Coordinates are clamped to the outermost
// centres. Output (N, C).
inline ad::Tensor bilinear_sample(const ad::Tensor& image, const ad::Tensor& xy) {
  if (image.rank() != 3 || xy.rank() != 2 || xy.size(1) != 2) {
    throw DimensionError(imr::detail::concat("bilinear_sample: bad shapes image ", ad::to_string(image.shape()), " xy ",
                                             ad::to_string(xy.shape())));
  }
  const double H = double(image.size(0)), W = double(image.size(1));
  const ad::Tensor to_cells({2}, {W, H});
  return ad::bilinear_gather(image, ad::shift(ad::mul(xy, to_cells), -0.5));
}

inline Vec3 bilinear_sample(const Image& image, const Vec2& xy) {
  ad::NoGradGuard guard;
  const ad::Tensor out = bilinear_sample(image.tensor(), ad::Tensor({1, 2}, {xy.x(), xy.y()}));
  return {out[0], out[1], out[2]};
}

// texture(u) = bilinear_sample(image, flow(u, z)), as a renderer texture.
inline TextureFn texture_at(const TextureSpace& space, const ad::Tensor& z, const ad::Tensor& image) {
  space.check_latent(z);
  if (image.rank() != 3 || image.size(2) != 3) throw DimensionError("texture_at: source image must be (H, W, 3)");
  return [space, z, image](const ad::Tensor& U) { return bilinear_sample(image, space.flow(U, z)); };
}

}  // namespace imr
