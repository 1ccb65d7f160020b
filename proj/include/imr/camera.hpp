#pragma once

#include <array>
#include <cmath>
#include <functional>
#include <numbers>
#include <vector>

#include "imr/autodiff.hpp"
#include "imr/geometry.hpp"

namespace imr {

using Quat = Eigen::Quaterniond;

// Scaled orthographic camera: rotate, drop depth, scale, translate. Image
// units are pixels with x along columns and y along rows. Larger rotated z is
// nearer to the viewer. The fields are tensors so they can be optimized.
struct WeakPerspectiveCamera {
  ad::Tensor scale;        // (1)
  ad::Tensor translation;  // (2)
  ad::Tensor rotation;     // (4) as w, x, y, z

  static WeakPerspectiveCamera make(double s, const Vec2& t, const Quat& q, bool grad_enabled = false) {
    if (!(s > 0)) throw ArgumentError(detail::concat("camera: scale must be positive, got ", s));
    return {ad::Tensor({1}, {s}, grad_enabled), ad::Tensor({2}, {t.x(), t.y()}, grad_enabled),
            ad::Tensor({4}, {q.w(), q.x(), q.y(), q.z()}, grad_enabled)};
  }

  double s() const { return scale[0]; }
  Vec2 t() const { return {translation[0], translation[1]}; }
  Quat q() const { return Quat(rotation[0], rotation[1], rotation[2], rotation[3]); }

  // (s, tx, ty, qw, qx, qy, qz)
  std::array<double, 7> to_record() const {
    return {s(), translation[0], translation[1], rotation[0], rotation[1], rotation[2], rotation[3]};
  }
  static WeakPerspectiveCamera from_record(const std::array<double, 7>& r, bool grad_enabled = false) {
    return make(r[0], Vec2(r[1], r[2]), Quat(r[3], r[4], r[5], r[6]), grad_enabled);
  }

  WeakPerspectiveCamera clone(bool grad_enabled) const {
    return {scale.clone(grad_enabled), translation.clone(grad_enabled), rotation.clone(grad_enabled)};
  }

  std::vector<ad::Tensor> parameters() const { return {scale, translation, rotation}; }

  // Restores the invariants after an optimizer step.
  void renormalize() {
    auto q = rotation.mutable_data();
    const double n = std::sqrt(q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]);
    if (!(n > 1e-12) || !std::isfinite(n)) throw NumericError("camera: degenerate quaternion");
    for (double& v : q) v /= n;
    auto s = scale.mutable_data();
    s[0] = std::max(s[0], 1e-6);
  }
};

namespace detail {

inline Eigen::Matrix3d rotation_matrix(double w, double x, double y, double z) {
  Eigen::Matrix3d R;
  R << 1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),  //
      2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),    //
      2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y);
  return R;
}

inline Quat checked_unit(const Quat& q) {
  const double n = q.norm();
  if (std::abs(n - 1.0) > 1e-4) throw ArgumentError(detail::concat("rotate: quaternion norm ", n, " is not unit"));
  if (std::abs(n - 1.0) > 1e-12) {
    warn("rotate: quaternion norm ", n, " renormalized");
    return Quat(q.coeffs() / n);
  }
  return q;
}

}  // namespace detail

// q P q^-1
inline Vec3 rotate(const Quat& q, const Vec3& P) {
  const Quat u = detail::checked_unit(q);
  return detail::rotation_matrix(u.w(), u.x(), u.y(), u.z()) * P;
}

// Projects N points (N, 3) to pixel coordinates (N, 2). The quaternion is
// normalized inside, so gradients are tangent to the unit sphere.
inline ad::Tensor project_points(const WeakPerspectiveCamera& cam, const ad::Tensor& P) {
  if (P.rank() != 2 || P.size(1) != 3) throw DimensionError(detail::concat("project: points must be (N, 3), got ", ad::to_string(P.shape())));
  const auto qv = cam.rotation.data();
  const double qn = std::sqrt(qv[0] * qv[0] + qv[1] * qv[1] + qv[2] * qv[2] + qv[3] * qv[3]);
  if (!(qn > 1e-12)) throw NumericError("project: zero quaternion");
  const double w = qv[0] / qn, x = qv[1] / qn, y = qv[2] / qn, z = qv[3] / qn;
  const Eigen::Matrix3d R = detail::rotation_matrix(w, x, y, z);
  const double s = cam.scale[0], tx = cam.translation[0], ty = cam.translation[1];
  const std::size_t n = P.size(0);
  const auto pv = P.data();
  std::vector<double> out(2 * n);
  for (std::size_t i = 0; i < n; ++i) {
    const Vec3 p(pv[3 * i], pv[3 * i + 1], pv[3 * i + 2]);
    out[2 * i] = s * R.row(0).dot(p) + tx;
    out[2 * i + 1] = s * R.row(1).dot(p) + ty;
  }
  return ad::record(
      "project", {n, 2}, std::move(out), {cam.scale, cam.translation, cam.rotation, P},
      [R, s, n, P, w, x, y, z, qn](std::span<const double> g, std::span<const std::span<double>> gin) {
        const auto pv = P.data();
        Eigen::Matrix<double, 2, 3> G = Eigen::Matrix<double, 2, 3>::Zero();  // dL/d(s R[0:2])
        double gs = 0.0, gtx = 0.0, gty = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
          const Vec3 p(pv[3 * i], pv[3 * i + 1], pv[3 * i + 2]);
          const double g0 = g[2 * i], g1 = g[2 * i + 1];
          gs += g0 * R.row(0).dot(p) + g1 * R.row(1).dot(p);
          gtx += g0;
          gty += g1;
          G.row(0) += g0 * p.transpose();
          G.row(1) += g1 * p.transpose();
          if (!gin[3].empty()) {
            const Vec3 gp = s * (g0 * R.row(0).transpose() + g1 * R.row(1).transpose());
            for (int k = 0; k < 3; ++k) gin[3][3 * i + k] += gp[k];
          }
        }
        if (!gin[0].empty()) gin[0][0] += gs;
        if (!gin[1].empty()) {
          gin[1][0] += gtx;
          gin[1][1] += gty;
        }
        if (!gin[2].empty()) {
          G *= s;
          // d R(row r, col c) / d(w, x, y, z) for the two projected rows.
          Eigen::Vector4d gq;
          gq[0] = G(0, 1) * (-2 * z) + G(0, 2) * (2 * y) + G(1, 0) * (2 * z) + G(1, 2) * (-2 * x);
          gq[1] = G(0, 1) * (2 * y) + G(0, 2) * (2 * z) + G(1, 0) * (2 * y) + G(1, 1) * (-4 * x) + G(1, 2) * (-2 * w);
          gq[2] = G(0, 0) * (-4 * y) + G(0, 1) * (2 * x) + G(0, 2) * (2 * w) + G(1, 0) * (2 * x) + G(1, 2) * (2 * z);
          gq[3] = G(0, 0) * (-4 * z) + G(0, 1) * (-2 * w) + G(0, 2) * (2 * x) + G(1, 0) * (2 * w) + G(1, 1) * (-4 * z) +
                  G(1, 2) * (2 * y);
          const Eigen::Vector4d qh(w, x, y, z);
          const Eigen::Vector4d gr = (gq - qh * qh.dot(gq)) / qn;
          for (int k = 0; k < 4; ++k) gin[2][k] += gr[k];
        }
      });
}

inline Vec2 project(const WeakPerspectiveCamera& cam, const Vec3& P) {
  const Vec3 r = rotate(cam.q(), P);
  return cam.s() * Vec2(r.x(), r.y()) + cam.t();
}

// Rotated z of each point (larger is nearer), without gradients.
inline std::vector<double> view_depths(const WeakPerspectiveCamera& cam, const std::vector<Vec3>& P) {
  const Quat q = cam.q().normalized();
  const Eigen::Matrix3d R = detail::rotation_matrix(q.w(), q.x(), q.y(), q.z());
  std::vector<double> out(P.size());
  for (std::size_t i = 0; i < P.size(); ++i) out[i] = R.row(2).dot(P[i]);
  return out;
}

inline std::vector<Vec2> project_all(const WeakPerspectiveCamera& cam, const std::vector<Vec3>& P) {
  const Quat q = cam.q().normalized();
  const Eigen::Matrix3d R = detail::rotation_matrix(q.w(), q.x(), q.y(), q.z());
  std::vector<Vec2> out(P.size());
  for (std::size_t i = 0; i < P.size(); ++i) out[i] = cam.s() * Vec2(R.row(0).dot(P[i]), R.row(1).dot(P[i])) + cam.t();
  return out;
}

// 2 arccos |<q1, q2>|, in [0, pi].
inline double geodesic_error(const Quat& q1, const Quat& q2) {
  const double d = std::abs(q1.normalized().coeffs().dot(q2.normalized().coeffs()));
  return 2.0 * std::acos(std::min(1.0, d));
}

// Object frame: y up, z forward, x lateral (the mirror axis). The view is
// azimuth about y, then elevation (positive shows the top), then a half turn
// about the optical axis so object-up maps to image-up.
inline Quat view_rotation(double azimuth, double elevation) {
  const Quat az(Eigen::AngleAxisd(azimuth, Vec3::UnitY()));
  const Quat el(Eigen::AngleAxisd(elevation, Vec3::UnitX()));
  const Quat flip(Eigen::AngleAxisd(std::numbers::pi, Vec3::UnitZ()));
  return (flip * el * az).normalized();
}

// For an x-symmetric object, R and diag(1,1,-1) R diag(-1,1,1) give identical
// silhouettes: the same view seen from the other side of the horizon.
inline WeakPerspectiveCamera depth_reflection(const WeakPerspectiveCamera& cam) {
  const Eigen::Matrix3d R = cam.q().normalized().toRotationMatrix();
  const Eigen::Matrix3d Rr = Eigen::Vector3d(1, 1, -1).asDiagonal() * R * Eigen::Vector3d(-1, 1, 1).asDiagonal();
  return WeakPerspectiveCamera::make(cam.s(), cam.t(), Quat(Rr).normalized(), cam.rotation.grad_enabled());
}

// True when the optical axis points down onto the object (positive elevation).
inline bool views_from_above(const Quat& q) {
  const double up = (q.normalized().toRotationMatrix().transpose() * Vec3::UnitZ()).y();
  static const double ref = (view_rotation(0.0, 0.5).toRotationMatrix().transpose() * Vec3::UnitZ()).y();
  return up * ref > 0;
}

struct CameraHypothesisSet {
  std::vector<WeakPerspectiveCamera> cameras;
  ad::Tensor logits;

  std::size_t size() const { return cameras.size(); }

  std::vector<double> probabilities() const {
    ad::NoGradGuard guard;
    const auto p = ad::softmax(logits);
    return {p.data().begin(), p.data().end()};
  }

  std::vector<ad::Tensor> parameters() const {
    std::vector<ad::Tensor> out{logits};
    for (const auto& c : cameras)
      for (const auto& t : c.parameters()) out.push_back(t);
    return out;
  }

  void renormalize() {
    for (auto& c : cameras) c.renormalize();
  }
};

// n cameras at equispaced azimuths and a shared elevation, all with the given
// scale and translation, equal logits.
inline CameraHypothesisSet make_hypotheses(std::size_t n, double scale, const Vec2& translation,
                                           double elevation = 10.0 * std::numbers::pi / 180.0, bool grad_enabled = true) {
  if (n == 0) throw ArgumentError("make_hypotheses: need at least one hypothesis");
  CameraHypothesisSet set;
  for (std::size_t k = 0; k < n; ++k) {
    const double az = 2.0 * std::numbers::pi * double(k) / double(n);
    set.cameras.push_back(WeakPerspectiveCamera::make(scale, translation, view_rotation(az, elevation), grad_enabled));
  }
  set.logits = ad::Tensor::zeros({n}, grad_enabled);
  return set;
}

// Sum over hypotheses of softmax(logits)_i * loss_i. The per-hypothesis
// losses are also written to `losses_out` when given.
inline ad::Tensor expected_loss(const CameraHypothesisSet& hyps,
                                const std::function<ad::Tensor(const WeakPerspectiveCamera&)>& loss_of_camera,
                                std::vector<double>* losses_out = nullptr) {
  if (hyps.size() == 0 || hyps.logits.numel() != hyps.size()) {
    throw ArgumentError("expected_loss: logits must match a non-empty hypothesis list");
  }
  std::vector<ad::Tensor> losses;
  losses.reserve(hyps.size());
  for (std::size_t i = 0; i < hyps.size(); ++i) {
    ad::Tensor l = loss_of_camera(hyps.cameras[i]);
    if (!std::isfinite(l.item())) throw NumericError(detail::concat("expected_loss: hypothesis ", i, " has non-finite loss"));
    losses.push_back(std::move(l));
  }
  if (losses_out) {
    losses_out->clear();
    for (const auto& l : losses) losses_out->push_back(l.item());
  }
  return ad::sum(ad::mul(ad::softmax(hyps.logits), ad::stack(losses)));
}

}  // namespace imr
