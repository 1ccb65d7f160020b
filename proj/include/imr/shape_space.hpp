#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <numeric>
#include <random>
#include <vector>

#include "imr/assignment.hpp"
#include "imr/autodiff.hpp"
#include "imr/geometry.hpp"
#include "imr/mlp.hpp"
#include "imr/optim.hpp"

namespace imr {

struct LatentCode {
  ad::Tensor values;

  static LatentCode zeros(std::size_t d, bool grad_enabled = true) { return {ad::Tensor::zeros({d}, grad_enabled)}; }
  static LatentCode random(std::size_t d, std::uint64_t seed, double stddev, bool grad_enabled = true) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> g(0.0, stddev);
    std::vector<double> v(d);
    for (double& x : v) x = g(rng);
    return {ad::Tensor({d}, std::move(v), grad_enabled)};
  }
  std::size_t size() const { return values.defined() ? values.numel() : 0; }
};

namespace detail {

inline ad::Tensor points_tensor(const std::vector<Vec3>& pts) {
  std::vector<double> v(pts.size() * 3);
  for (std::size_t i = 0; i < pts.size(); ++i)
    for (int k = 0; k < 3; ++k) v[3 * i + k] = pts[i][k];
  return ad::Tensor({pts.size(), 3}, std::move(v));
}

inline std::vector<Vec3> tensor_points(const ad::Tensor& t) {
  std::vector<Vec3> out(t.size(0));
  const auto d = t.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = Vec3(d[3 * i], d[3 * i + 1], d[3 * i + 2]);
  return out;
}

inline ad::Tensor mirror_rows(const ad::Tensor& U) {
  return ad::mul(U, ad::Tensor({3}, {-1.0, 1.0, 1.0}));
}

// f holds network outputs for [U; R(U)] stacked along rows. Returns
// (f(U) + R(f(R(U)))) / 2 for the first half.
inline ad::Tensor mirror_average(const ad::Tensor& f) {
  const std::size_t n = f.size(0) / 2;
  std::vector<double> out(n * 3);
  const auto fv = f.data();
  for (std::size_t i = 0; i < n; ++i) {
    out[3 * i] = 0.5 * (fv[3 * i] - fv[3 * (n + i)]);
    out[3 * i + 1] = 0.5 * (fv[3 * i + 1] + fv[3 * (n + i) + 1]);
    out[3 * i + 2] = 0.5 * (fv[3 * i + 2] + fv[3 * (n + i) + 2]);
  }
  return ad::record("mirror_average", {n, 3}, std::move(out), {f},
                    [n](std::span<const double> g, std::span<const std::span<double>> gin) {
                      for (std::size_t i = 0; i < n; ++i) {
                        gin[0][3 * i] += 0.5 * g[3 * i];
                        gin[0][3 * (n + i)] -= 0.5 * g[3 * i];
                        for (int k = 1; k < 3; ++k) {
                          gin[0][3 * i + k] += 0.5 * g[3 * i + k];
                          gin[0][3 * (n + i) + k] += 0.5 * g[3 * i + k];
                        }
                      }
                    });
}

inline void check_unit(const Vec3& u, const char* op) {
  if (std::abs(u.norm() - 1.0) > 1e-6) throw ArgumentError(imr::detail::concat(op, ": u must be a unit vector, |u| = ", u.norm()));
}

}  // namespace detail

// Mean shape plus symmetric, latent-conditioned deformation of the unit
// sphere. The mean network predicts an offset from u, so a fresh space is the
// unit sphere.
struct ShapeSpace {
  MLPParams mean_net;
  MLPParams deform_net;
  std::size_t latent_dim = 16;

  static ShapeSpace create(std::uint64_t seed, std::size_t latent_dim = 16, std::size_t hidden = 64) {
    ShapeSpace s;
    s.latent_dim = latent_dim;
    s.mean_net = MLPParams::create(3, hidden, 3, seed, true);
    s.deform_net = MLPParams::create(3 + latent_dim, hidden, 3, seed ^ 0x9e3779b97f4a7c15ull, true);
    return s;
  }

  void check_latent(const ad::Tensor& z) const {
    if (!z.defined() || z.numel() != latent_dim) {
      throw ArgumentError(imr::detail::concat("shape space: latent has ", z.defined() ? z.numel() : 0,
                                              " entries, expected ", latent_dim));
    }
  }

  // Batched evaluation; U is (N, 3) of unit vectors.
  ad::Tensor mean_points(const ad::Tensor& U) const {
    const ad::Tensor both = ad::concat({U, detail::mirror_rows(U)}, 0);
    return ad::add(U, detail::mirror_average(mean_net.forward(both)));
  }

  ad::Tensor deform_points(const ad::Tensor& U, const ad::Tensor& z) const {
    check_latent(z);
    const ad::Tensor both = ad::concat({U, detail::mirror_rows(U)}, 0);
    const ad::Tensor zz = ad::broadcast_to(ad::reshape(z, {1, latent_dim}), {both.size(0), latent_dim});
    return detail::mirror_average(deform_net.forward(ad::concat({both, zz}, 1)));
  }

  // With `deform` false the deformation network is not evaluated at all.
  ad::Tensor shape_points(const ad::Tensor& U, const ad::Tensor& z, bool deform = true) const {
    if (!deform) return mean_points(U);
    return ad::add(mean_points(U), deform_points(U, z));
  }

  std::vector<ad::Tensor> parameters() const {
    auto p = mean_net.parameters();
    for (auto& t : deform_net.parameters()) p.push_back(t);
    return p;
  }

  ShapeSpace clone() const {
    ShapeSpace c = *this;
    c.mean_net = mean_net.clone();
    c.deform_net = deform_net.clone();
    return c;
  }
};

inline Vec3 eval_mean(const ShapeSpace& space, const Vec3& u) {
  detail::check_unit(u, "eval_mean");
  ad::NoGradGuard guard;
  return detail::tensor_points(space.mean_points(detail::points_tensor({u})))[0];
}

inline Vec3 eval_deform(const ShapeSpace& space, const Vec3& u, const LatentCode& z) {
  detail::check_unit(u, "eval_deform");
  ad::NoGradGuard guard;
  return detail::tensor_points(space.deform_points(detail::points_tensor({u}), z.values))[0];
}

inline Vec3 eval_shape(const ShapeSpace& space, const Vec3& u, const LatentCode& z) {
  detail::check_unit(u, "eval_shape");
  ad::NoGradGuard guard;
  return detail::tensor_points(space.shape_points(detail::points_tensor({u}), z.values))[0];
}

inline TriMesh extract_mesh(const ShapeSpace& space, const LatentCode& z, const SphereAtlas& atlas,
                            bool deform = true) {
  ad::NoGradGuard guard;
  TriMesh mesh;
  mesh.vertices = detail::tensor_points(space.shape_points(detail::points_tensor(atlas.samples), z.values, deform));
  mesh.faces = atlas.faces;
  mesh.sphere_coords = atlas.samples;
  return mesh;
}

inline TriMesh extract_mean_mesh(const ShapeSpace& space, const SphereAtlas& atlas) {
  return extract_mesh(space, LatentCode{}, atlas, false);
}

// ---------------------------------------------------------------------------
// Template initialization

struct TemplateFitConfig {
  int iterations = 2000;
  std::size_t batch = 1000;
  double lr = 1e-3;
  // Cosine decay from lr to lr * final_lr_fraction over the run; 1 keeps lr
  // constant.
  double final_lr_fraction = 0.01;
  // Chamfer tolerance as a fraction of the template's bounding-box diagonal.
  double tolerance = 0.02;
  int atlas_level = 3;
  std::uint64_t seed = 0;
};

struct TemplateFitReport {
  std::vector<double> losses;  // matched mean squared distance per iteration
  double chamfer = 0.0;
  double tolerance = 0.0;  // absolute
  bool converged = false;
};

// Fits the mean network to a template surface by minimizing the optimal
// one-to-one matching between fresh random samples of both every iteration.
// The deformation network is left untouched.
inline TemplateFitReport fit_template(ShapeSpace& space, const TriMesh& templ, const TemplateFitConfig& cfg = {}) {
  if (cfg.iterations < 0 || cfg.batch == 0) throw ArgumentError("fit_template: iterations >= 0 and batch >= 1 required");
  std::mt19937_64 rng(cfg.seed);
  Adam opt(space.mean_net.parameters(), cfg.lr);
  TemplateFitReport report;
  report.losses.reserve(std::size_t(cfg.iterations));
  const double inv_n = 1.0 / double(cfg.batch);
  for (int it = 0; it < cfg.iterations; ++it) {
    const double progress = cfg.iterations > 1 ? double(it) / double(cfg.iterations - 1) : 0.0;
    const double decay = 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
    opt.set_lr(cfg.lr * (cfg.final_lr_fraction + (1.0 - cfg.final_lr_fraction) * decay));
    const std::vector<Vec3> target = sample_surface(templ, cfg.batch, rng);
    const std::vector<Vec3> us = random_sphere_points(cfg.batch, rng);
    ad::Tape tape;
    const ad::Tensor pred = space.mean_points(detail::points_tensor(us));
    const Assignment match = hungarian_match(detail::tensor_points(pred), target);
    std::vector<Vec3> matched(cfg.batch);
    for (std::size_t i = 0; i < cfg.batch; ++i) matched[i] = target[match.match[i]];
    const ad::Tensor loss = ad::scale(ad::sum(ad::square(ad::sub(pred, detail::points_tensor(matched)))), inv_n);
    report.losses.push_back(loss.item());
    opt.step(tape.backward(loss));
  }
  const TriMesh fitted = extract_mean_mesh(space, icosphere(cfg.atlas_level));
  report.chamfer = chamfer_distance(fitted, templ);
  report.tolerance = cfg.tolerance * bounding_box(templ).diagonal();
  report.converged = report.chamfer < report.tolerance;
  if (!report.converged) {
    warn("fit_template: Chamfer ", report.chamfer, " above tolerance ", report.tolerance);
  }
  return report;
}

}  // namespace imr
