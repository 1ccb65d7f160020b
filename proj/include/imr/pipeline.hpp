#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <numbers>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "imr/autodiff.hpp"
#include "imr/camera.hpp"
#include "imr/geometry.hpp"
#include "imr/image.hpp"
#include "imr/losses.hpp"
#include "imr/optim.hpp"
#include "imr/renderer.hpp"
#include "imr/shape_space.hpp"
#include "imr/surface_map.hpp"
#include "imr/texture.hpp"

namespace imr {

struct FitConfig {
  std::size_t iterations = 300;  // optimizer steps per instance (epochs for collections)
  double lr_nets = 1e-4;
  double lr_latent = 1e-2;
  double lr_camera = 1e-2;  // rotation; scale and translation use lr_camera * max(H, W) / 2
  double lr_logits = 1e-1;
  double camera_lr_factor_after_delta = 1.0;  // camera learning rates are scaled by this once δ trains
  double latent_init_std = 0.1;  // per-object latents start as N(0, std^2); 0 starts them at zero
  double lr_map = 1e-2;
  double lr_texture = 1e-4;
  double delta_enable_fraction = 0.33;
  std::size_t hypotheses = 8;
  double prune_fraction = 0.2;
  double gcc_warmup_fraction = 0.2;  // before this, the cycle loss only trains the surface maps
  double hypothesis_elevation = 10.0 * std::numbers::pi / 180.0;
  LossWeights weights;
  std::uint64_t seed = 0;
  int atlas_level = 2;
  std::size_t boundary_samples = 500;
  std::size_t gcc_samples = 256;  // 0 uses every foreground pixel
  std::size_t map_size = 32;
  double boundary_beta = 1.0;
  double raster_sigma = 0.0;  // soft rasterizer sharpness in pixel^2; 0 uses the renderer default
  bool share_camera_scale = false;  // one weak-perspective scale for every view
  bool cameras_above = true;        // swap cameras below the horizon for their silhouette twin
  bool train_shape = true;
  bool train_texture = true;

  void validate() const {
    if (iterations < 1) throw ArgumentError("fit config: iterations must be >= 1");
    if (!(delta_enable_fraction >= 0 && delta_enable_fraction <= 1)) throw ArgumentError("fit config: delta_enable_fraction must be in [0, 1]");
    if (!(prune_fraction >= 0 && prune_fraction <= 1)) throw ArgumentError("fit config: prune_fraction must be in [0, 1]");
    if (!(gcc_warmup_fraction >= 0 && gcc_warmup_fraction <= 1)) throw ArgumentError("fit config: gcc_warmup_fraction must be in [0, 1]");
    if (hypotheses < 1) throw ArgumentError("fit config: need at least one camera hypothesis");
    if (atlas_level < 0 || atlas_level > 5) throw ArgumentError("fit config: atlas_level must be in [0, 5]");
    if (boundary_samples < 1) throw ArgumentError("fit config: boundary_samples must be >= 1");
    if (map_size < 4) throw ArgumentError("fit config: map_size must be >= 4");
    if (!(raster_sigma >= 0)) throw ArgumentError("fit config: raster_sigma must be >= 0");
    for (double lr : {lr_nets, lr_latent, lr_camera, lr_logits, lr_map, lr_texture})
      if (!(lr >= 0 && std::isfinite(lr))) throw ArgumentError("fit config: learning rates must be finite and >= 0");
    if (!(latent_init_std >= 0 && std::isfinite(latent_init_std))) throw ArgumentError("fit config: latent_init_std must be >= 0");
    if (!(camera_lr_factor_after_delta > 0 && std::isfinite(camera_lr_factor_after_delta)))
      throw ArgumentError("fit config: camera_lr_factor_after_delta must be positive");
    weights.validate();
  }

  std::size_t delta_enable_iteration() const { return std::size_t(std::floor(delta_enable_fraction * double(iterations))); }
  std::size_t prune_iteration() const { return std::size_t(std::floor(prune_fraction * double(iterations))); }
  std::size_t gcc_warmup_iteration() const { return std::size_t(std::floor(gcc_warmup_fraction * double(iterations))); }
};

// One image: colour, foreground mask, optional keypoint annotations. Images
// sharing an `object` index are views of one shape and share its latents.
struct Instance {
  std::string id;
  std::size_t object = 0;
  Image image;  // H x W x 3 in [0, 1], or empty
  Mask mask;
  std::optional<KeypointSet> keypoints;

  void validate() const {
    if (mask.count() == 0) throw DataError(imr::detail::concat("instance ", id, ": empty mask"));
    if (!image.empty() && (image.height != mask.height || image.width != mask.width || image.channels != 3)) {
      throw DataError(imr::detail::concat("instance ", id, ": image is ", image.height, "x", image.width, "x", image.channels,
                                          ", mask is ", mask.height, "x", mask.width));
    }
    if (keypoints) keypoints->validate(mask.height, mask.width);
  }
};

struct ViewState {
  std::size_t instance = 0;
  CameraHypothesisSet hypotheses;
  PixelSurfaceMap map;
  bool pruned = false;
  std::vector<double> last_losses;  // per hypothesis, most recent evaluation

  std::size_t best() const {
    const auto p = hypotheses.probabilities();
    return std::size_t(std::max_element(p.begin(), p.end()) - p.begin());
  }
  const WeakPerspectiveCamera& camera() const { return hypotheses.cameras[best()]; }
};

struct ObjectState {
  LatentCode z_s;
  LatentCode z_t;
  std::vector<std::size_t> views;
};

struct IterationLog {
  std::size_t iteration = 0;
  std::map<std::string, double> components;  // mean over views of probability-weighted terms
  double total = 0.0;
};

struct FitState {
  ShapeSpace shape;
  TextureSpace texture;
  std::vector<ObjectState> objects;
  std::vector<ViewState> views;
  std::vector<IterationLog> log;
  std::size_t iterations_done = 0;

  const WeakPerspectiveCamera& camera(std::size_t view) const { return views.at(view).camera(); }

  TriMesh mesh(std::size_t object, const SphereAtlas& atlas) const {
    return extract_mesh(shape, objects.at(object).z_s, atlas, true);
  }
};

// ---------------------------------------------------------------------------
// Synthetic data

// Per-instance deformation of a template: per-axis scaling, a bend of the
// long (z) axis towards y, and a taper of x and y along z. All of these keep
// the x -> -x mirror symmetry.
struct DeformSpec {
  double scale_min = 0.7;
  double scale_max = 1.3;
  double bend_min = -0.3;
  double bend_max = 0.3;
  double taper_min = 0.0;
  double taper_max = 0.3;

  static DeformSpec identity() { return {1, 1, 0, 0, 0, 0}; }
  void validate() const {
    if (!(scale_min > 0 && scale_min <= scale_max && bend_min <= bend_max && taper_min <= taper_max)) {
      throw ArgumentError("deform spec: ranges must be ordered and scales positive");
    }
  }
};

struct InstanceDeformation {
  Vec3 scale = Vec3::Ones();
  double bend = 0.0;
  double taper = 0.0;

  Vec3 apply(const Vec3& p) const {
    Vec3 q = p.cwiseProduct(scale);
    const double k = 1.0 + taper * q.z();
    q.x() *= k;
    q.y() *= k;
    q.y() += bend * q.z() * q.z();
    return q;
  }
};

struct SynthConfig {
  std::size_t height = 64;
  std::size_t width = 64;
  double camera_scale = 18.0;
  double elevation_min = 10.0 * std::numbers::pi / 180.0;
  double elevation_max = 35.0 * std::numbers::pi / 180.0;
  double translation_jitter = 2.0;
  std::size_t keypoints = 10;
  int keypoint_level = 2;
  Vec3 background = Vec3::Zero();
};

struct SyntheticDataset {
  std::vector<Instance> instances;                // one per view, object = shape index
  std::vector<TriMesh> meshes;                    // ground-truth shape per object
  std::vector<InstanceDeformation> deformations;  // per object
  std::vector<WeakPerspectiveCamera> cameras;     // ground-truth camera per instance
  std::vector<Vec3> canonical_keypoints;
};

// Mirror-symmetric procedural colour on the sphere.
inline Vec3 synthetic_texture(const Vec3& u) {
  return {0.55 + 0.35 * u.z(), 0.45 + 0.35 * u.y(), 0.35 + 0.5 * std::abs(u.x())};
}

inline SyntheticDataset generate_synthetic(const TriMesh& templ, std::size_t n_instances, std::size_t n_views,
                                           const DeformSpec& spec, std::uint64_t seed, const SynthConfig& cfg = {}) {
  templ.validate();
  spec.validate();
  if (n_instances == 0 || n_views == 0) throw ArgumentError("generate_synthetic: need at least one instance and view");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  auto uniform = [&](double lo, double hi) { return lo + (hi - lo) * u01(rng); };

  SyntheticDataset ds;
  const SphereAtlas kp_atlas = icosphere(cfg.keypoint_level);
  std::vector<std::size_t> kp_index(kp_atlas.size());
  for (std::size_t i = 0; i < kp_index.size(); ++i) kp_index[i] = i;
  std::shuffle(kp_index.begin(), kp_index.end(), rng);
  kp_index.resize(std::min(cfg.keypoints, kp_index.size()));
  for (std::size_t k : kp_index) ds.canonical_keypoints.push_back(kp_atlas.samples[k]);
  // The template's sphere coords index its surface; keypoints use the
  // nearest template vertex in sphere coordinates.
  std::vector<std::size_t> kp_vertex;
  for (const Vec3& u : ds.canonical_keypoints) {
    std::size_t best = 0;
    for (std::size_t v = 1; v < templ.sphere_coords.size(); ++v)
      if ((templ.sphere_coords[v] - u).squaredNorm() < (templ.sphere_coords[best] - u).squaredNorm()) best = v;
    kp_vertex.push_back(best);
    ds.canonical_keypoints[kp_vertex.size() - 1] = templ.sphere_coords[best].normalized();
  }

  for (std::size_t o = 0; o < n_instances; ++o) {
    InstanceDeformation d;
    d.scale = Vec3(uniform(spec.scale_min, spec.scale_max), uniform(spec.scale_min, spec.scale_max),
                   uniform(spec.scale_min, spec.scale_max));
    d.bend = uniform(spec.bend_min, spec.bend_max);
    d.taper = uniform(spec.taper_min, spec.taper_max);
    TriMesh mesh = templ;
    for (Vec3& v : mesh.vertices) v = d.apply(v);
    ds.meshes.push_back(mesh);
    ds.deformations.push_back(d);

    for (std::size_t v = 0; v < n_views; ++v) {
      const double az = uniform(0.0, 2.0 * std::numbers::pi);
      const double el = uniform(cfg.elevation_min, cfg.elevation_max);
      const Vec2 t(0.5 * double(cfg.width) + uniform(-cfg.translation_jitter, cfg.translation_jitter),
                   0.5 * double(cfg.height) + uniform(-cfg.translation_jitter, cfg.translation_jitter));
      const auto cam = WeakPerspectiveCamera::make(cfg.camera_scale, t, view_rotation(az, el), false);
      const SurfaceBuffers buf = rasterize_surface_coords(mesh, cam, cfg.height, cfg.width);

      Instance inst;
      inst.id = imr::detail::concat("obj", o, "_view", v);
      inst.object = o;
      inst.mask = buf.mask();
      inst.image = Image(cfg.height, cfg.width, 3);
      for (std::size_t r = 0; r < cfg.height; ++r) {
        for (std::size_t c = 0; c < cfg.width; ++c) {
          const Vec3 col = buf.is_valid(r, c) ? synthetic_texture(buf.at(r, c)) : cfg.background;
          for (int k = 0; k < 3; ++k) inst.image.at(r, c, std::size_t(k)) = col[k];
        }
      }
      KeypointSet kps;
      const std::vector<double> depth = view_depths(cam, mesh.vertices);
      for (std::size_t k = 0; k < kp_vertex.size(); ++k) {
        const Vec2 x = project(cam, mesh.vertices[kp_vertex[k]]);
        bool vis = x.x() >= 0 && x.y() >= 0 && x.x() < double(cfg.width) && x.y() < double(cfg.height);
        if (vis) {
          const auto r = std::size_t(x.y()), c = std::size_t(x.x());
          vis = buf.is_valid(r, c) && depth[kp_vertex[k]] >= buf.depth[r * cfg.width + c] - 0.05;
        }
        kps.canonical.push_back(ds.canonical_keypoints[k]);
        kps.observed.push_back(vis ? x : Vec2(0, 0));
        kps.visible.push_back(vis);
      }
      inst.keypoints = kps;
      ds.instances.push_back(std::move(inst));
      ds.cameras.push_back(cam);
    }
  }
  return ds;
}

// ---------------------------------------------------------------------------
// Fitting

namespace detail {

struct ViewTargets {
  DistanceField dfg;
  std::vector<Vec2> boundary;
  std::vector<Vec2> fg;
  ad::Tensor mask;
  ad::Tensor image;  // undefined when the instance has no colour image
};

// Centroid and area of the mask give translation and scale relative to the
// mean shape's silhouette under each hypothesis rotation.
inline double moment_scale(const TriMesh& mean_mesh, const Quat& q, const Mask& mask) {
  const double ref = 8.0;
  const std::size_t H = mask.height, W = mask.width;
  const auto cam = WeakPerspectiveCamera::make(ref, Vec2(0.5 * double(W), 0.5 * double(H)), q, false);
  const double area = double(hard_mask(mean_mesh, cam, H, W).count());
  if (area <= 0) return ref;
  return ref * std::sqrt(double(mask.count()) / area);
}

inline Vec2 mask_centroid(const Mask& mask) {
  Vec2 c = Vec2::Zero();
  for (const Vec2& p : foreground_pixels(mask)) c += p;
  return c / double(mask.count());
}

inline Vec3 random_sphere_point(std::mt19937_64& rng) {
  std::normal_distribution<double> g(0.0, 1.0);
  Vec3 v;
  do v = Vec3(g(rng), g(rng), g(rng));
  while (v.norm() < 1e-9);
  return v.normalized();
}

class Fitter {
 public:
  Fitter(FitState& state, const std::vector<Instance>& instances, const FitConfig& cfg)
      : state_(state), instances_(instances), cfg_(cfg), atlas_(icosphere(cfg.atlas_level)), rng_(cfg.seed) {
    cfg_.validate();
    if (instances.empty()) throw ArgumentError("fit: no instances");
    H_ = instances[0].mask.height;
    W_ = instances[0].mask.width;
    raster_.height = H_;
    raster_.width = W_;
    raster_.sigma = cfg_.raster_sigma;
    raster_.validate();
    for (const Instance& inst : instances) {
      inst.validate();
      if (inst.mask.height != H_ || inst.mask.width != W_) throw DataError(imr::detail::concat("instance ", inst.id, ": size differs from the first instance"));
    }
    atlas_U_ = points_tensor(atlas_.samples);
    camera_lr_ = cfg_.lr_camera;
    if (state_.iterations_done > cfg_.delta_enable_iteration()) camera_lr_ *= cfg_.camera_lr_factor_after_delta;
    build_targets();
    init_state();
    build_optimizers();
  }

  void run(const std::function<void(const FitState&, std::size_t)>& on_iteration) {
    std::vector<std::size_t> order(state_.objects.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    for (std::size_t it = state_.iterations_done; it < cfg_.iterations; ++it) {
      if (it == cfg_.delta_enable_iteration() && cfg_.camera_lr_factor_after_delta != 1.0) {
        camera_lr_ = cfg_.lr_camera * cfg_.camera_lr_factor_after_delta;
        scale_opt_.set_lr(camera_lr_ * 0.5 * double(std::max(H_, W_)));
        build_camera_optimizers();
      }
      if (it == cfg_.prune_iteration() && cfg_.hypotheses > 1) prune();
      std::shuffle(order.begin(), order.end(), rng_);
      IterationLog entry;
      entry.iteration = it;
      std::size_t nviews = 0;
      for (std::size_t o : order) nviews += step_object(o, it, entry);
      for (auto& [name, v] : entry.components) v /= double(nviews);
      entry.total /= double(nviews);
      state_.log.push_back(std::move(entry));
      state_.iterations_done = it + 1;
      if (on_iteration) on_iteration(state_, it);
    }
  }

  // Keeps each view's lowest-loss hypothesis.
  void prune() {
    for (ViewState& v : state_.views) {
      if (v.pruned || v.hypotheses.size() == 1) continue;
      const std::size_t best = v.last_losses.empty()
                                   ? v.best()
                                   : std::size_t(std::min_element(v.last_losses.begin(), v.last_losses.end()) - v.last_losses.begin());
      CameraHypothesisSet single;
      single.cameras = {v.hypotheses.cameras[best]};
      single.logits = ad::Tensor::zeros({1}, true);
      v.hypotheses = std::move(single);
      v.last_losses.clear();
      v.pruned = true;
    }
    build_camera_optimizers();
  }

 private:
  void build_targets() {
    for (const Instance& inst : instances_) {
      ViewTargets t;
      t.dfg = distance_field(inst.mask);
      t.boundary = boundary_pixels(inst.mask);
      t.fg = foreground_pixels(inst.mask);
      t.mask = inst.mask.tensor();
      if (!inst.image.empty()) t.image = inst.image.tensor();
      targets_.push_back(std::move(t));
    }
  }

  void init_state() {
    if (!state_.objects.empty()) return;
    std::size_t n_objects = 0;
    for (const Instance& inst : instances_) n_objects = std::max(n_objects, inst.object + 1);
    state_.objects.resize(n_objects);
    for (std::size_t o = 0; o < n_objects; ++o) {
      auto init = [&](std::size_t d, std::uint64_t stream) {
        return cfg_.latent_init_std > 0 ? LatentCode::random(d, cfg_.seed * 7919 + 2 * o + stream, cfg_.latent_init_std)
                                        : LatentCode::zeros(d, true);
      };
      state_.objects[o].z_s = init(state_.shape.latent_dim, 0);
      state_.objects[o].z_t = init(state_.texture.latent_dim, 1);
    }
    const TriMesh mean_mesh = extract_mean_mesh(state_.shape, atlas_);
    std::vector<double> log_scales;
    for (std::size_t i = 0; i < instances_.size(); ++i) {
      const Instance& inst = instances_[i];
      state_.objects[inst.object].views.push_back(i);
      ViewState v;
      v.instance = i;
      v.hypotheses = make_hypotheses(cfg_.hypotheses, 1.0, mask_centroid(inst.mask), cfg_.hypothesis_elevation, true);
      for (auto& cam : v.hypotheses.cameras) {
        const double s = moment_scale(mean_mesh, cam.q(), inst.mask);
        cam.scale.mutable_data()[0] = s;
        log_scales.push_back(std::log(s));
      }
      v.map = init_map(cfg_.map_size, cfg_.map_size, cfg_.seed * 1000003 + i, true);
      state_.views.push_back(std::move(v));
    }
    for (std::size_t o = 0; o < n_objects; ++o) {
      if (state_.objects[o].views.empty()) throw DataError(imr::detail::concat("fit: object ", o, " has no views"));
    }
    if (cfg_.share_camera_scale) {
      std::sort(log_scales.begin(), log_scales.end());
      shared_scale_ = ad::Tensor({1}, {std::exp(log_scales[log_scales.size() / 2])}, true);
      for (ViewState& v : state_.views)
        for (auto& cam : v.hypotheses.cameras) cam.scale = shared_scale_;
    }
  }

  void build_optimizers() {
    std::vector<ad::Tensor> nets;
    if (cfg_.train_shape) nets = state_.shape.parameters();
    shape_opt_ = Adam(nets, cfg_.lr_nets);
    texture_opt_ = Adam(cfg_.train_texture && uses_texture() ? state_.texture.parameters() : std::vector<ad::Tensor>{},
                        cfg_.lr_texture);
    latent_opts_.clear();
    for (ObjectState& o : state_.objects) {
      std::vector<ad::Tensor> p{o.z_s.values};
      if (uses_texture()) p.push_back(o.z_t.values);
      latent_opts_.emplace_back(p, cfg_.lr_latent);
    }
    map_opts_.clear();
    for (ViewState& v : state_.views) map_opts_.emplace_back(std::vector<ad::Tensor>{v.map.grid}, cfg_.lr_map);
    build_camera_optimizers();
  }

  void build_camera_optimizers() {
    const double pixel_lr = camera_lr_ * 0.5 * double(std::max(H_, W_));
    rot_opts_.clear();
    logit_opts_.clear();
    pix_opts_.clear();
    for (ViewState& v : state_.views) {
      std::vector<ad::Tensor> rot, pix;
      for (auto& cam : v.hypotheses.cameras) {
        rot.push_back(cam.rotation);
        pix.push_back(cam.translation);
        if (!cfg_.share_camera_scale) pix.push_back(cam.scale);
      }
      rot_opts_.emplace_back(rot, camera_lr_);
      logit_opts_.emplace_back(std::vector<ad::Tensor>{v.hypotheses.logits}, cfg_.lr_logits);
      pix_opts_.emplace_back(pix, pixel_lr);
    }
    if (cfg_.share_camera_scale && !scale_opt_.params().size()) scale_opt_ = Adam({shared_scale_}, pixel_lr);
  }

  bool uses_texture() const {
    if (cfg_.weights.tex == 0 && cfg_.weights.texfg == 0) return false;
    return std::all_of(instances_.begin(), instances_.end(), [](const Instance& i) { return !i.image.empty(); });
  }

  std::vector<Vec2> sample_pixels(const std::vector<Vec2>& fg) {
    if (cfg_.gcc_samples == 0 || cfg_.gcc_samples >= fg.size()) return fg;
    std::vector<Vec2> out;
    out.reserve(cfg_.gcc_samples);
    std::uniform_int_distribution<std::size_t> pick(0, fg.size() - 1);
    for (std::size_t k = 0; k < cfg_.gcc_samples; ++k) out.push_back(fg[pick(rng_)]);
    return out;
  }

  // One gradient step on object o and its views; returns the number of views.
  std::size_t step_object(std::size_t o, std::size_t it, IterationLog& entry) {
    ObjectState& obj = state_.objects[o];
    const bool deform = it >= cfg_.delta_enable_iteration();
    const LossWeights& w = cfg_.weights;
    const bool texture = uses_texture();
    if (w.gcc > 0 && it < cfg_.gcc_warmup_iteration()) {
      frozen_shape_ = state_.shape.clone();
      frozen_shape_.mean_net.set_grad_enabled(false);
      frozen_shape_.deform_net.set_grad_enabled(false);
    }

    ad::Tape tape;
    const ad::Tensor& z = obj.z_s.values;
    ad::Tensor object_loss = ad::Tensor::scalar(0.0);

    ad::Tensor P;
    if (w.boundary > 0) {
      std::vector<Vec3> us(cfg_.boundary_samples);
      for (Vec3& u : us) u = random_sphere_point(rng_);
      P = state_.shape.shape_points(points_tensor(us), z, deform);
    }
    ad::Tensor V = state_.shape.shape_points(atlas_U_, z, deform);
    double rigid_value = 0.0;
    if (w.rigid > 0 && deform) {
      const ad::Tensor r = edge_length_change(V, state_.shape.mean_points(atlas_U_), atlas_.edges);
      rigid_value = r.item();
      object_loss = ad::add(object_loss, ad::scale(r, w.rigid));
    }
    double texfg_value = 0.0;
    if (texture && w.texfg > 0) {
      const ad::Tensor t = loss_texture_fg(state_.texture, obj.z_t.values, atlas_U_, targets_[obj.views[0]].dfg);
      texfg_value = t.item();
      object_loss = ad::add(object_loss, ad::scale(t, w.texfg));
    }

    for (std::size_t vi : obj.views) {
      ViewState& view = state_.views[vi];
      const ViewTargets& tg = targets_[view.instance];
      const Instance& inst = instances_[view.instance];

      ad::Tensor cyc_px, cyc_X;
      const bool warmup = it < cfg_.gcc_warmup_iteration();
      if (w.gcc > 0) {
        const std::vector<Vec2> px = sample_pixels(tg.fg);
        cyc_px = points2(px);
        if (warmup) {
          cyc_X = frozen_shape_.shape_points(view.map.sample(cyc_px, H_, W_), z.clone(false), deform);
        } else {
          cyc_X = state_.shape.shape_points(view.map.sample(cyc_px, H_, W_), z, deform);
        }
      }
      std::optional<TextureFn> tex;
      if (texture && w.tex > 0) tex = texture_at(state_.texture, obj.z_t.values, tg.image);
      const bool kp = w.kp > 0 && inst.keypoints && inst.keypoints->visible_count() > 0;

      std::vector<std::map<std::string, double>> parts(view.hypotheses.size());
      std::size_t h = 0;
      auto per_camera = [&](const WeakPerspectiveCamera& cam) {
        LossComponents c;
        ad::Tensor occupancy;
        c.mask = [&] {
          occupancy = rasterize_mask(V, atlas_.faces, cam, raster_);
          return loss_mask(occupancy, tg.mask);
        };
        if (P.defined()) c.boundary = [&] { return loss_boundary(P, cam, tg.dfg, tg.boundary, cfg_.boundary_beta); };
        if (cyc_X.defined()) {
          c.gcc = [&] {
            const WeakPerspectiveCamera pc = warmup ? cam.clone(false) : cam;
            return ad::mean(ad::row_norms(ad::sub(project_points(pc, cyc_X), cyc_px)));
          };
        }
        if (kp) c.kp = [&] { return loss_kp(*inst.keypoints, state_.shape, z, cam, deform); };
        if (tex) {
          c.tex = [&] {
            const ad::Tensor* occ = occupancy.defined() ? &occupancy : nullptr;
            return loss_texture(rasterize_color(V, atlas_.faces, atlas_.samples, cam, *tex, raster_, occ), tg.image,
                                inst.mask);
          };
        }
        LossWeights cw = w;
        cw.rigid = 0;
        cw.texfg = 0;
        TotalLoss total = total_loss(c, cw);
        parts[h++] = std::move(total.values);
        return total.total;
      };
      std::vector<double> losses;
      ad::Tensor view_loss;
      try {
        view_loss = expected_loss(view.hypotheses, per_camera, &losses);
      } catch (const NumericError& e) {
        throw NumericError(imr::detail::concat("fit diverged at iteration ", it, ", view ", inst.id, ": ", e.what()));
      }
      view.last_losses = losses;
      object_loss = ad::add(object_loss, ad::scale(view_loss, 1.0 / double(obj.views.size())));

      const auto prob = view.hypotheses.probabilities();
      for (std::size_t k = 0; k < parts.size(); ++k)
        for (const auto& [name, value] : parts[k]) entry.components[name] += prob[k] * value;
      entry.components["rigid"] += rigid_value;
      if (texture && w.texfg > 0) entry.components["texfg"] += texfg_value;
      double view_total = 0.0;
      for (std::size_t k = 0; k < losses.size(); ++k) view_total += prob[k] * losses[k];
      entry.total += view_total + w.rigid * rigid_value + w.texfg * texfg_value;
    }

    if (!std::isfinite(object_loss.item())) {
      throw NumericError(imr::detail::concat("fit diverged at iteration ", it, ": loss is ", object_loss.item()));
    }
    const ad::Gradients g = tape.backward(object_loss);
    try {
      shape_opt_.step(g);
      texture_opt_.step(g);
      latent_opts_[o].step(g);
      for (std::size_t vi : obj.views) {
        rot_opts_[vi].step(g);
        logit_opts_[vi].step(g);
        pix_opts_[vi].step(g);
        map_opts_[vi].step(g);
      }
      if (cfg_.share_camera_scale) scale_opt_.step(g);
    } catch (const NumericError& e) {
      throw NumericError(imr::detail::concat("fit diverged at iteration ", it, ": ", e.what()));
    }
    for (std::size_t vi : obj.views) {
      state_.views[vi].hypotheses.renormalize();
      state_.views[vi].map.normalize_grid();
      if (cfg_.cameras_above && !uses_keypoints(vi)) lift_cameras(state_.views[vi]);
    }
    return obj.views.size();
  }

  bool uses_keypoints(std::size_t vi) const {
    return cfg_.weights.kp > 0 && instances_[vi].keypoints && instances_[vi].keypoints->visible_count() > 0;
  }

  // Mask, boundary and texture terms are unchanged by the swap; with a single
  // camera the surface map is mirrored too, so the cycle term is as well.
  static void lift_cameras(ViewState& view) {
    for (WeakPerspectiveCamera& cam : view.hypotheses.cameras) {
      if (views_from_above(cam.q())) continue;
      const Quat q = depth_reflection(cam).q();
      auto r = cam.rotation.mutable_data();
      r[0] = q.w(), r[1] = q.x(), r[2] = q.y(), r[3] = q.z();
      if (view.hypotheses.size() == 1) {
        auto g = view.map.grid.mutable_data();
        for (std::size_t i = 0; i < g.size(); i += 3) g[i] = -g[i];
      }
    }
  }

  FitState& state_;
  const std::vector<Instance>& instances_;
  FitConfig cfg_;
  SphereAtlas atlas_;
  std::mt19937_64 rng_;
  std::size_t H_ = 0, W_ = 0;
  SoftRasterConfig raster_;
  ad::Tensor atlas_U_;
  std::vector<ViewTargets> targets_;
  ad::Tensor shared_scale_;
  double camera_lr_ = 0.0;
  ShapeSpace frozen_shape_;
  Adam shape_opt_, texture_opt_, scale_opt_;
  std::vector<Adam> latent_opts_, map_opts_, rot_opts_, logit_opts_, pix_opts_;
};

}  // namespace detail

using IterationCallback = std::function<void(const FitState&, std::size_t)>;

// Joint optimization of shared shape/texture spaces and per-image latents,
// cameras and surface maps over a collection.
inline FitState fit_collection(const std::vector<Instance>& instances, const ShapeSpace& shape, const TextureSpace& texture,
                               const FitConfig& cfg, const IterationCallback& on_iteration = {}) {
  FitState state;
  state.shape = shape.clone();
  state.texture = texture.clone();
  detail::Fitter fitter(state, instances, cfg);
  fitter.run(on_iteration);
  return state;
}

// Single-image fit. The spaces stay frozen unless cfg.train_shape /
// cfg.train_texture ask otherwise.
inline FitState fit_instance(const Instance& instance, const ShapeSpace& shape, const TextureSpace& texture,
                             const FitConfig& cfg, const IterationCallback& on_iteration = {}) {
  Instance single = instance;
  single.object = 0;
  return fit_collection({single}, shape, texture, cfg, on_iteration);
}

}  // namespace imr
