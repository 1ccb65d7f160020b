#pragma once

#include <cmath>
#include <iomanip>
#include <limits>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "imr/camera.hpp"
#include "imr/geometry.hpp"
#include "imr/losses.hpp"
#include "imr/pipeline.hpp"
#include "imr/renderer.hpp"
#include "imr/shape_space.hpp"

namespace imr {

// PCK thresholds are fractions of max(H, W).
inline constexpr const char* kPckNormalization = "max(H,W)";

struct EvalReport {
  std::string metric;
  std::vector<std::string> ids;
  std::vector<double> values;
  double mean = 0.0;
  double threshold = 0.0;  // 0 for IoU
  std::size_t hits = 0;    // PCK: keypoints within threshold
  std::size_t total = 0;   // PCK: keypoints evaluated; IoU: instances

  void add(std::string id, double v) {
    ids.push_back(std::move(id));
    values.push_back(v);
    double s = 0;
    for (double x : values) s += x;
    mean = s / double(values.size());
  }

  std::string summary() const {
    std::ostringstream os;
    os << "metric " << metric << "\n";
    if (threshold > 0) os << "threshold " << threshold << " x " << kPckNormalization << "\n";
    os << "instances " << values.size() << "\n";
    if (metric != "iou") os << "keypoints " << hits << "/" << total << "\n";
    os << "mean " << std::setprecision(6) << mean << "\n";
    return os.str();
  }

  void write_csv(std::ostream& os) const {
    os << "# metric=" << metric << " threshold=" << threshold << " normalization=" << kPckNormalization << "\n";
    os << "id,value\n";
    os << std::setprecision(17);
    for (std::size_t i = 0; i < values.size(); ++i) os << ids[i] << "," << values[i] << "\n";
    os << "mean," << mean << "\n";
  }
};

// What the metrics need from one fitted view.
struct ViewFit {
  TriMesh mesh;
  WeakPerspectiveCamera camera;
  std::size_t height = 0;
  std::size_t width = 0;
};

inline ViewFit view_fit(const FitState& fit, std::size_t view, const SphereAtlas& atlas, std::size_t height,
                        std::size_t width) {
  const std::size_t inst = fit.views.at(view).instance;
  std::size_t object = fit.objects.size();
  for (std::size_t o = 0; o < fit.objects.size() && object == fit.objects.size(); ++o)
    for (std::size_t v : fit.objects[o].views)
      if (v == inst) object = o;
  if (object == fit.objects.size()) throw ArgumentError(imr::detail::concat("view_fit: view ", view, " belongs to no object"));
  return {fit.mesh(object, atlas), fit.camera(view).clone(false), height, width};
}

namespace detail {

inline void check_threshold(double threshold) {
  if (!(threshold >= 0) || !std::isfinite(threshold)) throw ArgumentError(concat("pck: bad threshold ", threshold));
}

}  // namespace detail

// Reprojection errors (pixels) of the visible keypoints through a shape and
// camera; invisible entries are NaN.
inline std::vector<double> reprojection_errors(const ShapeSpace& space, const LatentCode& z, const WeakPerspectiveCamera& cam,
                                               const KeypointSet& kps) {
  std::vector<double> out(kps.size(), std::numeric_limits<double>::quiet_NaN());
  for (std::size_t k = 0; k < kps.size(); ++k) {
    if (!kps.visible[k]) continue;
    out[k] = (project(cam, eval_shape(space, kps.canonical[k].normalized(), z)) - kps.observed[k]).norm();
  }
  return out;
}

// PCK-R of one view, in percent.
inline double pck_reproject(const FitState& fit, std::size_t view, const KeypointSet& kps, double threshold,
                            std::size_t height, std::size_t width) {
  detail::check_threshold(threshold);
  if (kps.visible_count() == 0) throw ArgumentError("pck_reproject: no visible keypoints");
  const std::size_t inst = fit.views.at(view).instance;
  const ObjectState* obj = nullptr;
  for (const ObjectState& o : fit.objects)
    for (std::size_t v : o.views)
      if (v == inst) obj = &o;
  if (!obj) throw ArgumentError(imr::detail::concat("pck_reproject: view ", view, " belongs to no object"));
  const double tol = threshold * double(std::max(height, width));
  std::size_t hit = 0;
  for (double e : reprojection_errors(fit.shape, obj->z_s, fit.camera(view), kps))
    if (!std::isnan(e) && e <= tol) ++hit;
  return 100.0 * double(hit) / double(kps.visible_count());
}

// PCK-R over every view that has visible keypoints.
inline EvalReport pck_reproject_all(const FitState& fit, const std::vector<Instance>& instances, double threshold) {
  EvalReport r;
  r.metric = "pck_r";
  r.threshold = threshold;
  for (std::size_t v = 0; v < fit.views.size(); ++v) {
    const Instance& inst = instances.at(fit.views[v].instance);
    if (!inst.keypoints || inst.keypoints->visible_count() == 0) continue;
    const double p = pck_reproject(fit, v, *inst.keypoints, threshold, inst.mask.height, inst.mask.width);
    r.hits += std::size_t(std::lround(p * double(inst.keypoints->visible_count()) / 100.0));
    r.total += inst.keypoints->visible_count();
    r.add(inst.id, p);
  }
  if (r.values.empty()) throw ArgumentError("pck_reproject: no view has visible keypoints");
  return r;
}

inline constexpr double kTransferFallbackRadius = 5.0;

// Transfers 2D points from the source view to the target view through the
// rendered sphere coordinates. A point whose pixel is uncovered uses the
// nearest covered pixel within 5 px; otherwise its entry is empty.
inline std::vector<std::optional<Vec2>> transfer_keypoints(const ViewFit& src, const ViewFit& tgt,
                                                           const std::vector<Vec2>& points) {
  const SurfaceBuffers sb = rasterize_surface_coords(src.mesh, src.camera, src.height, src.width);
  const SurfaceBuffers tb = rasterize_surface_coords(tgt.mesh, tgt.camera, tgt.height, tgt.width);
  std::vector<std::size_t> tgt_pixels;
  for (std::size_t i = 0; i < tb.valid.size(); ++i)
    if (tb.valid[i]) tgt_pixels.push_back(i);
  if (tgt_pixels.empty()) throw DataError("transfer_keypoints: target render is empty");

  std::vector<std::optional<Vec2>> out;
  for (const Vec2& p : points) {
    if (!p.allFinite()) throw ArgumentError("transfer_keypoints: non-finite query point");
    std::optional<std::size_t> pix;
    const long pr = long(std::floor(p.y())), pc = long(std::floor(p.x()));
    if (pr >= 0 && pc >= 0 && pr < long(sb.height) && pc < long(sb.width) && sb.is_valid(std::size_t(pr), std::size_t(pc))) {
      pix = std::size_t(pr) * sb.width + std::size_t(pc);
    } else {
      double best = kTransferFallbackRadius;
      for (std::size_t i = 0; i < sb.valid.size(); ++i) {
        if (!sb.valid[i]) continue;
        const Vec2 c(double(i % sb.width) + 0.5, double(i / sb.width) + 0.5);
        const double d = (c - p).norm();
        if (d <= best) {
          best = d;
          pix = i;
        }
      }
    }
    if (!pix) {
      out.emplace_back();
      continue;
    }
    const Vec3& u = sb.coords[*pix];
    std::size_t best = tgt_pixels[0];
    double best_dot = -2.0;
    for (std::size_t i : tgt_pixels) {
      const double d = tb.coords[i].dot(u);
      if (d > best_dot) {
        best_dot = d;
        best = i;
      }
    }
    out.emplace_back(Vec2(double(best % tb.width) + 0.5, double(best / tb.width) + 0.5));
  }
  return out;
}

struct TransferPair {
  std::string id;
  const ViewFit* src = nullptr;
  const ViewFit* tgt = nullptr;
  const KeypointSet* src_kps = nullptr;
  const KeypointSet* tgt_kps = nullptr;
};

// PCK-T: per ordered pair, the percentage of keypoints visible in both views
// that transfer to within threshold of the target annotation; the report
// mean averages over pairs. Pairs sharing no visible keypoint are skipped.
inline EvalReport pck_transfer(const std::vector<TransferPair>& pairs, double threshold) {
  detail::check_threshold(threshold);
  EvalReport r;
  r.metric = "pck_t";
  r.threshold = threshold;
  for (const TransferPair& pr : pairs) {
    if (!pr.src || !pr.tgt || !pr.src_kps || !pr.tgt_kps) throw ArgumentError("pck_transfer: incomplete pair");
    if (pr.src_kps->size() != pr.tgt_kps->size()) throw ArgumentError("pck_transfer: keypoint sets differ in size");
    std::vector<std::size_t> shared;
    std::vector<Vec2> query;
    for (std::size_t k = 0; k < pr.src_kps->size(); ++k) {
      if (pr.src_kps->visible[k] && pr.tgt_kps->visible[k]) {
        shared.push_back(k);
        query.push_back(pr.src_kps->observed[k]);
      }
    }
    if (shared.empty()) continue;
    const auto moved = transfer_keypoints(*pr.src, *pr.tgt, query);
    const double tol = threshold * double(std::max(pr.tgt->height, pr.tgt->width));
    std::size_t hit = 0;
    for (std::size_t j = 0; j < shared.size(); ++j)
      if (moved[j] && (*moved[j] - pr.tgt_kps->observed[shared[j]]).norm() <= tol) ++hit;
    r.hits += hit;
    r.total += shared.size();
    r.add(pr.id, 100.0 * double(hit) / double(shared.size()));
  }
  if (r.values.empty()) throw ArgumentError("pck_transfer: no pair shares a visible keypoint");
  return r;
}

// Mean voxel IoU over instances; each pair is voxelized in its union box
// padded by 5%.
inline EvalReport reconstruction_iou(const std::vector<TriMesh>& fitted, const std::vector<TriMesh>& truth,
                                     int resolution = 32) {
  if (fitted.size() != truth.size() || fitted.empty()) {
    throw ArgumentError(imr::detail::concat("reconstruction_iou: ", fitted.size(), " fitted vs ", truth.size(), " reference meshes"));
  }
  EvalReport r;
  r.metric = "iou";
  for (std::size_t i = 0; i < fitted.size(); ++i) {
    const Bounds b = union_bounds(fitted[i], truth[i]);
    r.add(imr::detail::concat("object", i), voxel_iou(voxelize(fitted[i], resolution, b), voxelize(truth[i], resolution, b)));
  }
  r.total = fitted.size();
  return r;
}

}  // namespace imr
