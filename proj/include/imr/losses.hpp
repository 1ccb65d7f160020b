#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "imr/autodiff.hpp"
#include "imr/camera.hpp"
#include "imr/geometry.hpp"
#include "imr/image.hpp"
#include "imr/renderer.hpp"
#include "imr/shape_space.hpp"
#include "imr/surface_map.hpp"
#include "imr/texture.hpp"

namespace imr {

struct LossWeights {
  double mask = 1.0;
  double boundary = 0.5;
  double gcc = 0.1;
  double kp = 1.0;
  double rigid = 0.25;
  double tex = 0.5;
  double texfg = 0.1;

  void validate() const {
    const std::pair<const char*, double> all[] = {{"mask", mask}, {"boundary", boundary}, {"gcc", gcc}, {"kp", kp},
                                                  {"rigid", rigid}, {"tex", tex},        {"texfg", texfg}};
    for (const auto& [name, w] : all) {
      if (!std::isfinite(w) || w < 0) throw ArgumentError(imr::detail::concat("loss weight ", name, " = ", w, " must be finite and >= 0"));
    }
  }
};

// Canonical sphere coordinates of the keypoints plus one image's observations.
struct KeypointSet {
  std::vector<Vec3> canonical;
  std::vector<Vec2> observed;
  std::vector<bool> visible;

  std::size_t size() const { return canonical.size(); }
  std::size_t visible_count() const { return std::size_t(std::count(visible.begin(), visible.end(), true)); }

  void validate(std::size_t H, std::size_t W) const {
    if (observed.size() != canonical.size() || visible.size() != canonical.size()) {
      throw ArgumentError(imr::detail::concat("keypoints: ", canonical.size(), " canonical, ", observed.size(), " observed, ",
                                              visible.size(), " visibility flags"));
    }
    for (std::size_t k = 0; k < size(); ++k) {
      detail::check_unit(canonical[k], "keypoints");
      const Vec2& x = observed[k];
      if (visible[k] && !(x.x() >= 0 && x.x() <= double(W) && x.y() >= 0 && x.y() <= double(H))) {
        throw ArgumentError(imr::detail::concat("keypoint ", k, " at (", x.x(), ", ", x.y(), ") outside the image"));
      }
    }
  }
};

namespace detail {

inline ad::Tensor points2(const std::vector<Vec2>& pts) {
  std::vector<double> v;
  v.reserve(2 * pts.size());
  for (const Vec2& p : pts) v.insert(v.end(), {p.x(), p.y()});
  return ad::Tensor({pts.size(), 2}, std::move(v));
}

// Mean over targets b of the softmin-weighted distance from b to the points:
// sum_i w_i d_i with w = softmax(-d / beta). Lies between the hard minimum and
// the mean distance; equals the hard minimum as beta -> 0.
inline ad::Tensor soft_chamfer(const ad::Tensor& xy, const std::vector<Vec2>& targets, double beta) {
  const std::size_t N = xy.size(0), B = targets.size();
  const auto pv = xy.data();
  std::vector<double> d(N), w(N);
  // Per target: softmin value and dvalue/dd_i = w_i (1 - (d_i - f) / beta).
  std::vector<double> coef(B * N);
  double total = 0.0;
  for (std::size_t b = 0; b < B; ++b) {
    double dmin = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < N; ++i) {
      d[i] = std::hypot(pv[2 * i] - targets[b].x(), pv[2 * i + 1] - targets[b].y());
      dmin = std::min(dmin, d[i]);
    }
    double z = 0.0;
    for (std::size_t i = 0; i < N; ++i) z += (w[i] = std::exp(-(d[i] - dmin) / beta));
    double f = 0.0;
    for (std::size_t i = 0; i < N; ++i) f += (w[i] /= z) * d[i];
    for (std::size_t i = 0; i < N; ++i) coef[b * N + i] = w[i] * (1.0 - (d[i] - f) / beta);
    total += f;
  }
  return ad::record("soft_chamfer", {}, {total / double(B)}, {xy},
                    [xy, targets, coef = std::move(coef), N, B](std::span<const double> g, std::span<const std::span<double>> gin) {
                      const auto pv = xy.data();
                      const double s = g[0] / double(B);
                      for (std::size_t b = 0; b < B; ++b) {
                        for (std::size_t i = 0; i < N; ++i) {
                          const double dx = pv[2 * i] - targets[b].x(), dy = pv[2 * i + 1] - targets[b].y();
                          const double r = std::hypot(dx, dy);
                          if (r == 0.0) continue;
                          const double c = s * coef[b * N + i] / r;
                          gin[0][2 * i] += c * dx;
                          gin[0][2 * i + 1] += c * dy;
                        }
                      }
                    });
}

inline double hard_chamfer(const std::vector<Vec2>& points, const std::vector<Vec2>& targets) {
  double total = 0.0;
  for (const Vec2& b : targets) {
    double best = std::numeric_limits<double>::infinity();
    for (const Vec2& p : points) best = std::min(best, (p - b).norm());
    total += best;
  }
  return targets.empty() ? 0.0 : total / double(targets.size());
}

}  // namespace detail

// Pixel centres where the mask is set.
inline std::vector<Vec2> foreground_pixels(const Mask& mask) {
  std::vector<Vec2> out;
  for (std::size_t r = 0; r < mask.height; ++r)
    for (std::size_t c = 0; c < mask.width; ++c)
      if (mask.at(r, c)) out.emplace_back(double(c) + 0.5, double(r) + 0.5);
  return out;
}

inline ad::Tensor loss_mask(const ad::Tensor& rendered, const ad::Tensor& target) {
  if (rendered.shape() != target.shape()) {
    throw ArgumentError(imr::detail::concat("loss_mask: shapes ", ad::to_string(rendered.shape()), " and ",
                                            ad::to_string(target.shape()), " differ"));
  }
  return ad::mean(ad::abs(ad::sub(rendered, target)));
}

inline ad::Tensor loss_mask(const ad::Tensor& rendered, const Mask& target) { return loss_mask(rendered, target.tensor()); }

struct BoundaryTerms {
  double inside = 0.0;       // mean D_fg at projected points
  double coverage = 0.0;     // softmin term used for the loss
  double hard_coverage = 0.0;  // same term with a hard minimum
};

// Projected 3D points P (N, 3) should land on the foreground, and every
// boundary pixel should have a projected point close to it.
inline ad::Tensor loss_boundary(const ad::Tensor& P, const WeakPerspectiveCamera& cam, const DistanceField& dfg,
                                const std::vector<Vec2>& boundary, double beta = 1.0, BoundaryTerms* terms = nullptr) {
  if (P.rank() != 2 || P.size(1) != 3 || P.size(0) == 0) {
    throw ArgumentError(imr::detail::concat("loss_boundary: need a nonempty (N, 3) point set, got ", ad::to_string(P.shape())));
  }
  if (!(beta > 0)) throw ArgumentError("loss_boundary: beta must be positive");
  const ad::Tensor xy = project_points(cam, P);
  ad::Tensor loss = ad::mean(dfg.lookup(xy));
  BoundaryTerms t;
  t.inside = loss.item();
  if (boundary.empty()) {
    warn("loss_boundary: empty boundary set, coverage term skipped");
  } else {
    const ad::Tensor cover = detail::soft_chamfer(xy, boundary, beta);
    t.coverage = cover.item();
    std::vector<Vec2> pts(xy.size(0));
    for (std::size_t i = 0; i < pts.size(); ++i) pts[i] = Vec2(xy[2 * i], xy[2 * i + 1]);
    t.hard_coverage = detail::hard_chamfer(pts, boundary);
    loss = ad::add(loss, cover);
  }
  if (terms) *terms = t;
  return loss;
}

// Mean reprojection distance of the cycle pixel -> sphere -> shape -> pixel.
inline ad::Tensor loss_gcc(const PixelSurfaceMap& map, const ShapeSpace& space, const ad::Tensor& z,
                           const WeakPerspectiveCamera& cam, const std::vector<Vec2>& fg_pixels, std::size_t H,
                           std::size_t W, bool deform = true) {
  if (fg_pixels.empty()) {
    warn("loss_gcc: no foreground pixels");
    return ad::Tensor::scalar(0.0);
  }
  const ad::Tensor px = detail::points2(fg_pixels);
  const ad::Tensor C = map.sample(px, H, W);
  const ad::Tensor xy = project_points(cam, space.shape_points(C, z, deform));
  return ad::mean(ad::row_norms(ad::sub(xy, px)));
}

// Mean reprojection distance over visible keypoints.
inline ad::Tensor loss_kp(const KeypointSet& kps, const ShapeSpace& space, const ad::Tensor& z,
                          const WeakPerspectiveCamera& cam, bool deform = true) {
  std::vector<Vec3> us;
  std::vector<Vec2> xs;
  for (std::size_t k = 0; k < kps.size(); ++k) {
    if (!kps.visible.at(k)) continue;
    detail::check_unit(kps.canonical[k], "loss_kp");
    us.push_back(kps.canonical[k]);
    xs.push_back(kps.observed.at(k));
  }
  if (us.empty()) {
    warn("loss_kp: no visible keypoints");
    return ad::Tensor::scalar(0.0);
  }
  const ad::Tensor xy = project_points(cam, space.shape_points(detail::points_tensor(us), z, deform));
  return ad::mean(ad::row_norms(ad::sub(xy, detail::points2(xs))));
}

// Mean over edges (i, j) of | |a_i - a_j| - |b_i - b_j| |.
inline ad::Tensor edge_length_change(const ad::Tensor& a, const ad::Tensor& b, const std::vector<Edge>& edges) {
  if (a.shape() != b.shape() || a.rank() != 2 || a.size(1) != 3) {
    throw DimensionError(imr::detail::concat("edge_length_change: shapes ", ad::to_string(a.shape()), " and ",
                                             ad::to_string(b.shape())));
  }
  if (edges.empty()) throw ArgumentError("edge_length_change: no edges");
  std::vector<Edge> sorted = edges;
  for (Edge& e : sorted)
    if (e[0] > e[1]) std::swap(e[0], e[1]);
  std::sort(sorted.begin(), sorted.end());
  std::vector<std::size_t> from(sorted.size()), to(sorted.size());
  for (std::size_t e = 0; e < sorted.size(); ++e) {
    from[e] = sorted[e][0];
    to[e] = sorted[e][1];
  }
  const ad::Tensor la = ad::row_norms(ad::sub(ad::index_select(a, from), ad::index_select(a, to)));
  const ad::Tensor lb = ad::row_norms(ad::sub(ad::index_select(b, from), ad::index_select(b, to)));
  return ad::mean(ad::abs(ad::sub(la, lb)));
}

inline ad::Tensor loss_rigid(const ShapeSpace& space, const ad::Tensor& z, const SphereAtlas& atlas) {
  if (atlas.edges.empty()) throw ArgumentError("loss_rigid: atlas has no adjacency");
  const ad::Tensor U = detail::points_tensor(atlas.samples);
  return edge_length_change(space.shape_points(U, z, true), space.mean_points(U), atlas.edges);
}

// Foreground-masked L1 colour difference summed over a 3-level average
// pyramid. Each level is normalized by its foreground weight and channel count.
inline ad::Tensor loss_texture(const ad::Tensor& rendered, const ad::Tensor& image, const Mask& fg) {
  if (rendered.shape() != image.shape() || rendered.rank() != 3 || rendered.size(2) != 3) {
    throw ArgumentError(imr::detail::concat("loss_texture: shapes ", ad::to_string(rendered.shape()), " and ",
                                            ad::to_string(image.shape()), " must match and be (H, W, 3)"));
  }
  if (fg.height != rendered.size(0) || fg.width != rendered.size(1)) throw ArgumentError("loss_texture: mask size differs");
  if (fg.height % 4 || fg.width % 4) throw DimensionError("loss_texture: image sides must be multiples of 4");
  if (fg.count() == 0) {
    warn("loss_texture: empty foreground");
    return ad::Tensor::scalar(0.0);
  }
  const std::size_t H = fg.height, W = fg.width;
  const ad::Tensor m = ad::reshape(fg.tensor(), {H, W, 1});
  ad::Tensor r = ad::mul(rendered, m), t = ad::mul(image, m);
  ad::Tensor mw = fg.tensor();
  ad::Tensor total;
  for (int level = 0; level < 3; ++level) {
    if (level > 0) {
      r = ad::avg_pool2(r);
      t = ad::avg_pool2(t);
      mw = ad::avg_pool2(mw);
    }
    const double weight = 3.0 * ad::sum(mw).item();
    const ad::Tensor term = ad::scale(ad::sum(ad::abs(ad::sub(r, t))), 1.0 / weight);
    total = level == 0 ? term : ad::add(total, term);
  }
  return total;
}

// Mean foreground distance at flow targets given in normalized coordinates.
inline ad::Tensor texture_fg_penalty(const ad::Tensor& flow, const DistanceField& dfg) {
  const ad::Tensor to_px({2}, {double(dfg.width), double(dfg.height)});
  return ad::mean(dfg.lookup(ad::mul(flow, to_px)));
}

inline ad::Tensor loss_texture_fg(const TextureSpace& space, const ad::Tensor& z, const ad::Tensor& U,
                                  const DistanceField& dfg) {
  return texture_fg_penalty(space.flow(U, z), dfg);
}

// Lazily evaluated loss terms; unset or zero-weighted terms are skipped.
struct LossComponents {
  std::function<ad::Tensor()> mask, boundary, gcc, kp, rigid, tex, texfg;
};

struct TotalLoss {
  ad::Tensor total;
  std::map<std::string, double> values;  // unweighted values of evaluated terms
};

inline TotalLoss total_loss(const LossComponents& parts, const LossWeights& weights) {
  weights.validate();
  const std::pair<const char*, std::pair<const std::function<ad::Tensor()>*, double>> terms[] = {
      {"mask", {&parts.mask, weights.mask}},         {"boundary", {&parts.boundary, weights.boundary}},
      {"gcc", {&parts.gcc, weights.gcc}},            {"kp", {&parts.kp, weights.kp}},
      {"rigid", {&parts.rigid, weights.rigid}},      {"tex", {&parts.tex, weights.tex}},
      {"texfg", {&parts.texfg, weights.texfg}}};
  TotalLoss out;
  out.total = ad::Tensor::scalar(0.0);
  for (const auto& [name, entry] : terms) {
    const auto& [fn, w] = entry;
    if (w == 0.0 || !*fn) continue;
    const ad::Tensor v = (*fn)();
    if (!std::isfinite(v.item())) throw NumericError(imr::detail::concat("total_loss: component ", name, " is ", v.item()));
    out.values[name] = v.item();
    out.total = ad::add(out.total, ad::scale(v, w));
  }
  return out;
}

}  // namespace imr
