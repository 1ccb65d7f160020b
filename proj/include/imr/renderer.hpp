#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <vector>

#include "imr/autodiff.hpp"
#include "imr/camera.hpp"
#include "imr/geometry.hpp"
#include "imr/image.hpp"
#include "imr/shape_space.hpp"

namespace imr {

struct SoftRasterConfig {
  std::size_t height = 64;
  std::size_t width = 64;
  double sigma = 0.0;  // pixels^2; 0 selects 1e-4 * width^2
  double gamma = 1e-4;
  Vec3 background = Vec3::Zero();
  // Faces farther than sqrt(cutoff * sigma) pixels outside contribute below
  // e^-cutoff and are skipped.
  double cutoff = 50.0;

  double softness() const { return sigma > 0 ? sigma : 1e-4 * double(width) * double(width); }

  void validate() const {
    if (height < 8 || width < 8) throw ArgumentError(detail::concat("render: image must be at least 8x8, got ", height, "x", width));
    if (!(gamma > 0) || sigma < 0 || !(cutoff > 0)) throw ArgumentError("render: sigma, gamma and cutoff must be positive");
  }
};

// Texture as a batched function of sphere coordinates: (N, 3) -> (N, 3) rgb.
using TextureFn = std::function<ad::Tensor(const ad::Tensor&)>;

namespace detail {

struct ProjectedFace {
  Vec2 v[3];
  std::uint32_t idx[3];
  double area2 = 0.0;  // twice the signed area
  long r0 = 0, r1 = -1, c0 = 0, c1 = -1;
};

// Signed-distance data of one pixel against one projected face.
struct FaceHit {
  double d2;      // squared distance to the boundary
  bool inside;    // all barycentrics >= 0
  int edge;       // nearest edge k: v[k] -> v[(k+1)%3]
  double t;       // position of the closest point along that edge
  Vec2 closest;   // closest boundary point
  double lambda[3];  // barycentrics of the pixel clamped onto the triangle
};

inline double cross2(const Vec2& a, const Vec2& b) { return a.x() * b.y() - a.y() * b.x(); }

inline FaceHit face_hit(const ProjectedFace& f, const Vec2& p) {
  FaceHit h{std::numeric_limits<double>::infinity(), false, 0, 0.0, Vec2::Zero(), {0, 0, 0}};
  for (int k = 0; k < 3; ++k) {
    const Vec2& a = f.v[k];
    const Vec2& b = f.v[(k + 1) % 3];
    const Vec2 e = b - a;
    const double len2 = e.squaredNorm();
    const double t = len2 > 0 ? std::clamp((p - a).dot(e) / len2, 0.0, 1.0) : 0.0;
    const Vec2 q = a + t * e;
    const double d2 = (p - q).squaredNorm();
    if (d2 < h.d2) {
      h.d2 = d2;
      h.edge = k;
      h.t = t;
      h.closest = q;
    }
  }
  if (std::abs(f.area2) > 1e-14) {
    double l[3];
    for (int k = 0; k < 3; ++k) l[k] = cross2(f.v[(k + 2) % 3] - f.v[(k + 1) % 3], p - f.v[(k + 1) % 3]) / f.area2;
    h.inside = l[0] >= 0 && l[1] >= 0 && l[2] >= 0;
    if (h.inside) {
      for (int k = 0; k < 3; ++k) h.lambda[k] = l[k];
      return h;
    }
  }
  h.lambda[h.edge] = 1.0 - h.t;
  h.lambda[(h.edge + 1) % 3] = h.t;
  return h;
}

inline std::vector<ProjectedFace> project_faces(std::span<const double> xy, const std::vector<Face>& faces,
                                                const SoftRasterConfig& cfg, double margin) {
  std::vector<ProjectedFace> out(faces.size());
  const double H = double(cfg.height), W = double(cfg.width);
  for (std::size_t i = 0; i < faces.size(); ++i) {
    ProjectedFace& f = out[i];
    double xmin = std::numeric_limits<double>::infinity(), xmax = -xmin, ymin = xmin, ymax = -xmin;
    for (int k = 0; k < 3; ++k) {
      f.idx[k] = faces[i][k];
      f.v[k] = Vec2(xy[2 * f.idx[k]], xy[2 * f.idx[k] + 1]);
      xmin = std::min(xmin, f.v[k].x());
      xmax = std::max(xmax, f.v[k].x());
      ymin = std::min(ymin, f.v[k].y());
      ymax = std::max(ymax, f.v[k].y());
    }
    f.area2 = cross2(f.v[1] - f.v[0], f.v[2] - f.v[0]);
    // Pixel centres at (col + 0.5, row + 0.5).
    if (!std::isfinite(xmin + xmax + ymin + ymax)) throw NumericError(imr::detail::concat("render: non-finite vertex in face ", i));
    // clamp in floating point: huge coordinates must not overflow the cast
    f.c0 = long(std::clamp(std::ceil(xmin - margin - 0.5), 0.0, W));
    f.c1 = long(std::clamp(std::floor(xmax + margin - 0.5), -1.0, W - 1));
    f.r0 = long(std::clamp(std::ceil(ymin - margin - 0.5), 0.0, H));
    f.r1 = long(std::clamp(std::floor(ymax + margin - 0.5), -1.0, H - 1));
  }
  return out;
}

inline void check_projected(const ad::Tensor& xy, std::size_t vertex_count) {
  if (xy.rank() != 2 || xy.size(1) != 2) throw DimensionError(imr::detail::concat("render: projected vertices must be (V, 2), got ", ad::to_string(xy.shape())));
  if (vertex_count != xy.size(0)) throw DimensionError("render: vertex count mismatch");
}

}  // namespace detail

// Soft silhouette of projected vertices xy (V, 2) in pixel units:
// O(p) = 1 - prod_f (1 - sigmoid(eps_f d^2(p, f) / sigma)). Output (H, W).
inline ad::Tensor soft_mask(const ad::Tensor& xy, const std::vector<Face>& faces, const SoftRasterConfig& cfg) {
  cfg.validate();
  const std::size_t H = cfg.height, W = cfg.width;
  if (faces.empty()) return ad::Tensor::zeros({H, W});
  for (const Face& f : faces)
    for (auto i : f)
      if (i >= xy.size(0)) throw DimensionError("soft_mask: face index out of range");
  detail::check_projected(xy, xy.size(0));
  const double sigma = cfg.softness(), cutoff = cfg.cutoff;
  const double margin = std::sqrt(cutoff * sigma);
  auto pf = std::make_shared<std::vector<detail::ProjectedFace>>(detail::project_faces(xy.data(), faces, cfg, margin));
  auto S = std::make_shared<std::vector<double>>(H * W, 0.0);
  for (const auto& f : *pf) {
    for (long r = f.r0; r <= f.r1; ++r) {
      for (long c = f.c0; c <= f.c1; ++c) {
        const detail::FaceHit h = detail::face_hit(f, Vec2(c + 0.5, r + 0.5));
        const double x = (h.inside ? 1.0 : -1.0) * h.d2 / sigma;
        if (x < -cutoff) continue;
        (*S)[std::size_t(r) * W + std::size_t(c)] -= ad::detail::softplus(x);
      }
    }
  }
  std::vector<double> out(H * W);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = -std::expm1((*S)[i]);
  return ad::record("soft_mask", {H, W}, std::move(out), {xy},
                    [pf, S, W, sigma, cutoff](std::span<const double> g, std::span<const std::span<double>> gin) {
                      for (const auto& f : *pf) {
                        for (long r = f.r0; r <= f.r1; ++r) {
                          for (long c = f.c0; c <= f.c1; ++c) {
                            const std::size_t p = std::size_t(r) * W + std::size_t(c);
                            if (g[p] == 0.0) continue;
                            const Vec2 pix(c + 0.5, r + 0.5);
                            const detail::FaceHit h = detail::face_hit(f, pix);
                            const double sgn = h.inside ? 1.0 : -1.0;
                            const double x = sgn * h.d2 / sigma;
                            if (x < -cutoff) continue;
                            const double coef = g[p] * std::exp((*S)[p]) * ad::detail::stable_sigmoid(x) * sgn / sigma;
                            if (coef == 0.0) continue;
                            // d(d^2)/d(edge endpoints) with the closest point fixed in edge coordinates.
                            const Vec2 diff = -2.0 * (pix - h.closest);
                            const std::uint32_t a = f.idx[h.edge], b = f.idx[(h.edge + 1) % 3];
                            gin[0][2 * a] += coef * diff.x() * (1.0 - h.t);
                            gin[0][2 * a + 1] += coef * diff.y() * (1.0 - h.t);
                            gin[0][2 * b] += coef * diff.x() * h.t;
                            gin[0][2 * b + 1] += coef * diff.y() * h.t;
                          }
                        }
                      }
                    });
}

// Differentiable silhouette of a mesh with vertex tensor (V, 3).
inline ad::Tensor rasterize_mask(const ad::Tensor& vertices, const std::vector<Face>& faces,
                                 const WeakPerspectiveCamera& cam, const SoftRasterConfig& cfg) {
  if (faces.empty()) {
    cfg.validate();
    return ad::Tensor::zeros({cfg.height, cfg.width});
  }
  return soft_mask(project_points(cam, vertices), faces, cfg);
}

inline ad::Tensor rasterize_mask(const TriMesh& mesh, const WeakPerspectiveCamera& cam, const SoftRasterConfig& cfg) {
  return rasterize_mask(detail::points_tensor(mesh.vertices), mesh.faces, cam, cfg);
}

namespace detail {

// Per-pixel fragment weights for soft z-buffered colour: softmax over faces
// of log sigmoid(x_f) + depth_f / gamma, depth normalized to [0, 1] over the
// mesh with 1 nearest. Barycentrics are clamped onto each face.
struct Fragments {
  std::vector<std::size_t> offsets;  // per pixel, into the arrays below (size H*W+1)
  std::vector<double> weights;
  std::vector<Vec3> coords;  // interpolated, normalized sphere coordinates
};

inline Fragments soft_fragments(std::span<const double> xy, const std::vector<double>& depth, const std::vector<Face>& faces,
                                const std::vector<Vec3>& sphere_coords, const SoftRasterConfig& cfg) {
  const std::size_t H = cfg.height, W = cfg.width;
  const double sigma = cfg.softness(), cutoff = cfg.cutoff;
  const auto pf = project_faces(xy, faces, cfg, std::sqrt(cutoff * sigma));
  double zmin = std::numeric_limits<double>::infinity(), zmax = -zmin;
  for (double z : depth) {
    zmin = std::min(zmin, z);
    zmax = std::max(zmax, z);
  }
  const double zrange = zmax > zmin ? zmax - zmin : 1.0;
  struct Candidate {
    double logit;
    Vec3 u;
  };
  std::vector<std::vector<Candidate>> per_pixel(H * W);
  for (const auto& f : pf) {
    for (long r = f.r0; r <= f.r1; ++r) {
      for (long c = f.c0; c <= f.c1; ++c) {
        const FaceHit h = face_hit(f, Vec2(c + 0.5, r + 0.5));
        const double x = (h.inside ? 1.0 : -1.0) * h.d2 / sigma;
        if (x < -cutoff) continue;
        double z = 0.0;
        Vec3 u = Vec3::Zero();
        for (int k = 0; k < 3; ++k) {
          z += h.lambda[k] * depth[f.idx[k]];
          u += h.lambda[k] * sphere_coords[f.idx[k]];
        }
        const double n = u.norm();
        u = n > 1e-12 ? Vec3(u / n) : sphere_coords[f.idx[0]];
        per_pixel[std::size_t(r) * W + std::size_t(c)].push_back({-ad::detail::softplus(-x) + ((z - zmin) / zrange) / cfg.gamma, u});
      }
    }
  }
  Fragments fr;
  fr.offsets.assign(H * W + 1, 0);
  for (std::size_t p = 0; p < H * W; ++p) {
    const auto& cand = per_pixel[p];
    fr.offsets[p] = fr.weights.size();
    if (cand.empty()) continue;
    double best = -std::numeric_limits<double>::infinity();
    for (const auto& cd : cand) best = std::max(best, cd.logit);
    // Fragments below 1e-12 of the strongest are dropped before normalizing.
    double total = 0.0;
    for (const auto& cd : cand) {
      const double w = std::exp(cd.logit - best);
      if (w < 1e-12) continue;
      total += w;
      fr.weights.push_back(w);
      fr.coords.push_back(cd.u);
    }
    for (std::size_t j = fr.offsets[p]; j < fr.weights.size(); ++j) fr.weights[j] /= total;
  }
  fr.offsets[H * W] = fr.weights.size();
  return fr;
}

// Weighted sum of fragment colours rgb (F, 3) per pixel -> (H, W, 3).
inline ad::Tensor blend_fragments(const Fragments& fr, const ad::Tensor& rgb, std::size_t H, std::size_t W) {
  std::vector<double> out(H * W * 3, 0.0);
  const auto cv = rgb.data();
  for (std::size_t p = 0; p < H * W; ++p)
    for (std::size_t j = fr.offsets[p]; j < fr.offsets[p + 1]; ++j)
      for (int k = 0; k < 3; ++k) out[3 * p + k] += fr.weights[j] * cv[3 * j + k];
  return ad::record("blend", {H, W, 3}, std::move(out), {rgb},
                    [offsets = fr.offsets, weights = fr.weights, H, W](std::span<const double> g,
                                                                       std::span<const std::span<double>> gin) {
                      for (std::size_t p = 0; p < H * W; ++p)
                        for (std::size_t j = offsets[p]; j < offsets[p + 1]; ++j)
                          for (int k = 0; k < 3; ++k) gin[0][3 * j + k] += weights[j] * g[3 * p + k];
                    });
}

}  // namespace detail

// Soft z-buffered surface colour (H, W, 3) before background blending:
// per pixel, the fragment-weighted texture colour of nearby faces, zero where
// no face is within reach. Fragment weights and barycentrics are constants;
// gradients reach the texture only.
inline ad::Tensor surface_color(const ad::Tensor& xy, const ad::Tensor& vertices, const std::vector<Face>& faces,
                                const std::vector<Vec3>& sphere_coords, const WeakPerspectiveCamera& cam,
                                const TextureFn& texture, const SoftRasterConfig& cfg) {
  const std::size_t H = cfg.height, W = cfg.width;
  if (faces.empty()) return ad::Tensor::zeros({H, W, 3});
  if (sphere_coords.size() != vertices.size(0)) throw DimensionError("rasterize_color: sphere_coords must match vertices");
  const std::vector<double> depth = view_depths(cam, detail::tensor_points(vertices));
  const detail::Fragments fr = detail::soft_fragments(xy.data(), depth, faces, sphere_coords, cfg);
  if (fr.coords.empty()) return ad::Tensor::zeros({H, W, 3});
  const ad::Tensor rgb = texture(detail::points_tensor(fr.coords));
  if (rgb.rank() != 2 || rgb.size(0) != fr.coords.size() || rgb.size(1) != 3) {
    throw DimensionError("rasterize_color: texture must map (N, 3) to (N, 3)");
  }
  return detail::blend_fragments(fr, rgb, H, W);
}

// Textured colour image (H, W, 3): the surface colour blended over the
// background by soft occupancy, color = O * surface + (1 - O) * background.
// Geometry gradients flow through O. `occupancy` may pass a mask already
// rendered for the same geometry and camera.
inline ad::Tensor rasterize_color(const ad::Tensor& vertices, const std::vector<Face>& faces,
                                  const std::vector<Vec3>& sphere_coords, const WeakPerspectiveCamera& cam,
                                  const TextureFn& texture, const SoftRasterConfig& cfg,
                                  const ad::Tensor* occupancy = nullptr) {
  cfg.validate();
  const std::size_t H = cfg.height, W = cfg.width;
  const ad::Tensor bg({3}, {cfg.background.x(), cfg.background.y(), cfg.background.z()});
  if (faces.empty()) return ad::add(ad::Tensor::zeros({H, W, 3}), bg);
  const ad::Tensor xy = project_points(cam, vertices);
  const ad::Tensor O = occupancy ? *occupancy : soft_mask(xy, faces, cfg);
  const ad::Tensor fg = surface_color(xy, vertices, faces, sphere_coords, cam, texture, cfg);
  const ad::Tensor O3 = ad::reshape(O, {H, W, 1});
  return ad::add(ad::mul(O3, fg), ad::mul(ad::shift(ad::neg(O3), 1.0), bg));
}

inline ad::Tensor rasterize_color(const TriMesh& mesh, const WeakPerspectiveCamera& cam, const TextureFn& texture,
                                  const SoftRasterConfig& cfg) {
  return rasterize_color(detail::points_tensor(mesh.vertices), mesh.faces, mesh.sphere_coords, cam, texture, cfg);
}

// ---------------------------------------------------------------------------
// Hard rasterization

struct SurfaceBuffers {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<Vec3> coords;         // unit sphere coordinate per pixel where valid
  std::vector<std::uint8_t> valid;  // covered pixels
  std::vector<double> depth;        // rotated z (larger is nearer), -inf where uncovered

  Mask mask() const {
    Mask m(height, width);
    m.data = valid;
    return m;
  }
  bool is_valid(std::size_t row, std::size_t col) const { return valid[row * width + col] != 0; }
  const Vec3& at(std::size_t row, std::size_t col) const { return coords[row * width + col]; }
};

// Z-buffered point-in-triangle rasterization at pixel centres (edges
// inclusive); writes barycentric-interpolated, renormalized sphere
// coordinates. Not differentiable.
inline SurfaceBuffers rasterize_surface_coords(const TriMesh& mesh, const WeakPerspectiveCamera& cam, std::size_t height,
                                               std::size_t width) {
  SurfaceBuffers buf;
  buf.height = height;
  buf.width = width;
  buf.coords.assign(height * width, Vec3::Zero());
  buf.valid.assign(height * width, 0);
  buf.depth.assign(height * width, -std::numeric_limits<double>::infinity());
  if (mesh.faces.empty()) return buf;
  if (mesh.sphere_coords.size() != mesh.vertices.size()) throw DimensionError("rasterize_surface_coords: mesh lacks sphere coordinates");
  const std::vector<Vec2> xy = project_all(cam, mesh.vertices);
  const std::vector<double> z = view_depths(cam, mesh.vertices);
  for (const Face& f : mesh.faces) {
    const Vec2 &a = xy[f[0]], &b = xy[f[1]], &c = xy[f[2]];
    const double area2 = detail::cross2(b - a, c - a);
    if (std::abs(area2) < 1e-14) continue;
    const double xmin = std::min({a.x(), b.x(), c.x()}), xmax = std::max({a.x(), b.x(), c.x()});
    const double ymin = std::min({a.y(), b.y(), c.y()}), ymax = std::max({a.y(), b.y(), c.y()});
    if (!std::isfinite(xmin + xmax + ymin + ymax)) throw NumericError("rasterize_surface_coords: non-finite vertex");
    const double Wd = double(width), Hd = double(height);
    const long c0 = long(std::clamp(std::ceil(xmin - 0.5), 0.0, Wd)), c1 = long(std::clamp(std::floor(xmax - 0.5), -1.0, Wd - 1));
    const long r0 = long(std::clamp(std::ceil(ymin - 0.5), 0.0, Hd)), r1 = long(std::clamp(std::floor(ymax - 0.5), -1.0, Hd - 1));
    for (long r = r0; r <= r1; ++r) {
      for (long col = c0; col <= c1; ++col) {
        const Vec2 p(col + 0.5, r + 0.5);
        const double l0 = detail::cross2(c - b, p - b) / area2;
        const double l1 = detail::cross2(a - c, p - c) / area2;
        const double l2 = detail::cross2(b - a, p - a) / area2;
        if (l0 < 0 || l1 < 0 || l2 < 0) continue;
        const double depth = l0 * z[f[0]] + l1 * z[f[1]] + l2 * z[f[2]];
        const std::size_t i = std::size_t(r) * width + std::size_t(col);
        if (depth <= buf.depth[i]) continue;
        buf.depth[i] = depth;
        const Vec3 u = l0 * mesh.sphere_coords[f[0]] + l1 * mesh.sphere_coords[f[1]] + l2 * mesh.sphere_coords[f[2]];
        const double n = u.norm();
        buf.coords[i] = n > 1e-12 ? Vec3(u / n) : mesh.sphere_coords[f[0]];
        buf.valid[i] = 1;
      }
    }
  }
  return buf;
}

inline Mask hard_mask(const TriMesh& mesh, const WeakPerspectiveCamera& cam, std::size_t height, std::size_t width) {
  return rasterize_surface_coords(mesh, cam, height, width).mask();
}

struct RenderBuffers {
  ad::Tensor mask;   // (H, W)
  ad::Tensor color;  // (H, W, 3)
  SurfaceBuffers surface;
};

inline RenderBuffers render(const TriMesh& mesh, const WeakPerspectiveCamera& cam, const TextureFn& texture,
                            const SoftRasterConfig& cfg) {
  RenderBuffers out;
  out.mask = rasterize_mask(mesh, cam, cfg);
  if (texture) {
    out.color = rasterize_color(detail::points_tensor(mesh.vertices), mesh.faces, mesh.sphere_coords, cam, texture, cfg,
                                &out.mask);
  }
  out.surface = rasterize_surface_coords(mesh, cam, cfg.height, cfg.width);
  return out;
}

// ---------------------------------------------------------------------------
// Distance field and boundary

// Euclidean distance (pixels) from each pixel centre to the nearest foreground
// pixel centre; zero on the foreground.
struct DistanceField {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<double> values;

  double at(std::size_t row, std::size_t col) const { return values[row * width + col]; }

  // Bilinear lookup at continuous pixel coordinates (x, y) where pixel
  // centres sit at (col + 0.5, row + 0.5). Points beyond the outermost
  // centres add their Euclidean excess to the clamped lookup.
  double lookup(const Vec2& p) const {
    const ad::Tensor t = lookup(ad::Tensor({1, 2}, {p.x(), p.y()}));
    return t[0];
  }

  ad::Tensor lookup(const ad::Tensor& pts) const {
    if (pts.rank() != 2 || pts.size(1) != 2) throw DimensionError("distance lookup: points must be (N, 2)");
    const std::size_t n = pts.size(0);
    const auto pv = pts.data();
    std::vector<double> out(n);
    std::vector<double> dvals(2 * n);
    for (std::size_t i = 0; i < n; ++i) {
      const double gx = pv[2 * i] - 0.5, gy = pv[2 * i + 1] - 0.5;
      double v, dx, dy;
      sample(gx, gy, v, dx, dy);
      out[i] = v;
      dvals[2 * i] = dx;
      dvals[2 * i + 1] = dy;
    }
    return ad::record("distance_lookup", {n}, std::move(out), {pts},
                      [dvals = std::move(dvals)](std::span<const double> g, std::span<const std::span<double>> gin) {
                        for (std::size_t i = 0; i < g.size(); ++i) {
                          gin[0][2 * i] += g[i] * dvals[2 * i];
                          gin[0][2 * i + 1] += g[i] * dvals[2 * i + 1];
                        }
                      });
  }

 private:
  void sample(double gx, double gy, double& v, double& dx, double& dy) const {
    const double mx = double(width - 1), my = double(height - 1);
    const double cx = std::clamp(gx, 0.0, mx), cy = std::clamp(gy, 0.0, my);
    const std::size_t x0 = std::min(std::size_t(cx), width > 1 ? width - 2 : 0);
    const std::size_t y0 = std::min(std::size_t(cy), height > 1 ? height - 2 : 0);
    const std::size_t x1 = std::min(x0 + 1, width - 1), y1 = std::min(y0 + 1, height - 1);
    const double fx = cx - double(x0), fy = cy - double(y0);
    const double v00 = at(y0, x0), v01 = at(y0, x1), v10 = at(y1, x0), v11 = at(y1, x1);
    v = (1 - fy) * ((1 - fx) * v00 + fx * v01) + fy * ((1 - fx) * v10 + fx * v11);
    dx = (gx == cx) ? (1 - fy) * (v01 - v00) + fy * (v11 - v10) : 0.0;
    dy = (gy == cy) ? (1 - fx) * (v10 - v00) + fx * (v11 - v01) : 0.0;
    const double ex = gx - cx, ey = gy - cy;
    const double excess = std::sqrt(ex * ex + ey * ey);
    if (excess > 0) {
      v += excess;
      dx += ex / excess;
      dy += ey / excess;
    }
  }
};

namespace detail {

// One-dimensional squared distance transform of sampled function f (lower
// envelope of parabolas).
inline void edt_1d(const std::vector<double>& f, std::vector<double>& d, std::vector<std::size_t>& v, std::vector<double>& z) {
  const std::size_t n = f.size();
  const double inf = std::numeric_limits<double>::infinity();
  std::size_t k = 0;
  v[0] = 0;
  z[0] = -inf;
  z[1] = inf;
  std::size_t first = n;
  for (std::size_t q = 0; q < n; ++q)
    if (f[q] < inf) {
      first = q;
      break;
    }
  if (first == n) {
    std::fill(d.begin(), d.end(), inf);
    return;
  }
  v[0] = first;
  for (std::size_t q = first + 1; q < n; ++q) {
    if (f[q] == inf) continue;
    double s;
    while (true) {
      const std::size_t p = v[k];
      s = ((f[q] + double(q * q)) - (f[p] + double(p * p))) / (2.0 * double(q) - 2.0 * double(p));
      if (s <= z[k] && k > 0) {
        --k;
        continue;
      }
      break;
    }
    ++k;
    v[k] = q;
    z[k] = s;
    z[k + 1] = inf;
  }
  k = 0;
  for (std::size_t q = 0; q < n; ++q) {
    while (z[k + 1] < double(q)) ++k;
    const double diff = double(q) - double(v[k]);
    d[q] = diff * diff + f[v[k]];
  }
}

}  // namespace detail

inline DistanceField distance_field(const Mask& mask) {
  if (mask.count() == 0) throw ArgumentError("distance_field: mask has no foreground pixels");
  const std::size_t H = mask.height, W = mask.width;
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> grid(H * W);
  for (std::size_t i = 0; i < grid.size(); ++i) grid[i] = mask.data[i] ? 0.0 : inf;
  const std::size_t n = std::max(H, W);
  std::vector<double> f, d;
  std::vector<std::size_t> v(n);
  std::vector<double> z(n + 1);
  for (std::size_t c = 0; c < W; ++c) {
    f.assign(H, 0.0);
    d.assign(H, 0.0);
    for (std::size_t r = 0; r < H; ++r) f[r] = grid[r * W + c];
    detail::edt_1d(f, d, v, z);
    for (std::size_t r = 0; r < H; ++r) grid[r * W + c] = d[r];
  }
  for (std::size_t r = 0; r < H; ++r) {
    f.assign(grid.begin() + std::ptrdiff_t(r * W), grid.begin() + std::ptrdiff_t((r + 1) * W));
    d.assign(W, 0.0);
    detail::edt_1d(f, d, v, z);
    for (std::size_t c = 0; c < W; ++c) grid[r * W + c] = std::sqrt(d[c]);
  }
  return {H, W, std::move(grid)};
}

// Foreground pixels with at least one background 4-neighbour (outside the
// image counts as background), as pixel-centre coordinates (col + 0.5, row + 0.5).
inline std::vector<Vec2> boundary_pixels(const Mask& mask) {
  std::vector<Vec2> out;
  const long H = long(mask.height), W = long(mask.width);
  auto fg = [&](long r, long c) { return r >= 0 && c >= 0 && r < H && c < W && mask.at(std::size_t(r), std::size_t(c)); };
  for (long r = 0; r < H; ++r)
    for (long c = 0; c < W; ++c)
      if (fg(r, c) && (!fg(r - 1, c) || !fg(r + 1, c) || !fg(r, c - 1) || !fg(r, c + 1))) out.emplace_back(c + 0.5, r + 0.5);
  return out;
}

}  // namespace imr
