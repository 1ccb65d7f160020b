#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <numbers>
#include <sstream>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include <CLI11.hpp>

#include "imr/evaluation.hpp"
#include "imr/io.hpp"
#include "imr/pipeline.hpp"

namespace imr::cli {

namespace fs = std::filesystem;

enum ExitCode : int { kOk = 0, kUsage = 1, kData = 2, kNumeric = 3 };

struct RunConfig {
  std::string command;
  std::string template_path;  // OBJ
  std::string ellipsoid;      // "a,b,c" instead of an OBJ
  double template_taper = 0.0;
  double template_bend = 0.0;
  int template_level = 3;
  std::string data_dir;
  std::string out_dir = "out";
  std::string checkpoint;  // input checkpoint (template or fit)
  std::string instance_id;
  std::uint64_t seed = 0;

  TemplateFitConfig template_fit;
  FitConfig fit;
  std::size_t dump_every = 0;  // epochs between checkpoint and render dumps; 0 = final only

  std::size_t synth_instances = 8;
  std::size_t synth_views = 4;
  SynthConfig synth;

  double eval_threshold = 0.1;
  int eval_resolution = 32;

  std::size_t render_view = 0;
  double render_azimuth = std::nan("");  // degrees; NaN keeps the fitted camera
  double render_elevation = 0.0;

  std::string source_id;
  std::string target_id;
};

using FieldRef = std::variant<double*, std::uint64_t*, int*, bool*, std::string*>;

// Every configurable value under its flat key.
inline std::vector<std::pair<std::string, FieldRef>> config_fields(RunConfig& c) {
  FitConfig& f = c.fit;
  LossWeights& w = f.weights;
  return {
      {"seed", &c.seed},
      {"data", &c.data_dir},
      {"out", &c.out_dir},
      {"checkpoint", &c.checkpoint},
      {"template", &c.template_path},
      {"template.ellipsoid", &c.ellipsoid},
      {"template.taper", &c.template_taper},
      {"template.bend", &c.template_bend},
      {"template.level", &c.template_level},
      {"template.iterations", &c.template_fit.iterations},
      {"template.batch", &c.template_fit.batch},
      {"template.lr", &c.template_fit.lr},
      {"template.final_lr_fraction", &c.template_fit.final_lr_fraction},
      {"template.tolerance", &c.template_fit.tolerance},
      {"template.atlas_level", &c.template_fit.atlas_level},
      {"fit.iterations", &f.iterations},
      {"fit.lr_nets", &f.lr_nets},
      {"fit.lr_latent", &f.lr_latent},
      {"fit.lr_camera", &f.lr_camera},
      {"fit.lr_logits", &f.lr_logits},
      {"fit.lr_map", &f.lr_map},
      {"fit.lr_texture", &f.lr_texture},
      {"fit.camera_lr_factor_after_delta", &f.camera_lr_factor_after_delta},
      {"fit.latent_init_std", &f.latent_init_std},
      {"fit.delta_enable_fraction", &f.delta_enable_fraction},
      {"fit.hypotheses", &f.hypotheses},
      {"fit.prune_fraction", &f.prune_fraction},
      {"fit.gcc_warmup_fraction", &f.gcc_warmup_fraction},
      {"fit.hypothesis_elevation", &f.hypothesis_elevation},
      {"fit.atlas_level", &f.atlas_level},
      {"fit.boundary_samples", &f.boundary_samples},
      {"fit.gcc_samples", &f.gcc_samples},
      {"fit.map_size", &f.map_size},
      {"fit.boundary_beta", &f.boundary_beta},
      {"fit.raster_sigma", &f.raster_sigma},
      {"fit.share_camera_scale", &f.share_camera_scale},
      {"fit.cameras_above", &f.cameras_above},
      {"fit.train_shape", &f.train_shape},
      {"fit.train_texture", &f.train_texture},
      {"fit.dump_every", &c.dump_every},
      {"weights.mask", &w.mask},
      {"weights.boundary", &w.boundary},
      {"weights.gcc", &w.gcc},
      {"weights.kp", &w.kp},
      {"weights.rigid", &w.rigid},
      {"weights.tex", &w.tex},
      {"weights.texfg", &w.texfg},
      {"synth.instances", &c.synth_instances},
      {"synth.views", &c.synth_views},
      {"synth.height", &c.synth.height},
      {"synth.width", &c.synth.width},
      {"synth.camera_scale", &c.synth.camera_scale},
      {"synth.elevation_min", &c.synth.elevation_min},
      {"synth.elevation_max", &c.synth.elevation_max},
      {"synth.translation_jitter", &c.synth.translation_jitter},
      {"synth.keypoints", &c.synth.keypoints},
      {"eval.threshold", &c.eval_threshold},
      {"eval.resolution", &c.eval_resolution},
      {"render.view", &c.render_view},
      {"render.azimuth", &c.render_azimuth},
      {"render.elevation", &c.render_elevation},
      {"instance", &c.instance_id},
      {"transfer.source", &c.source_id},
      {"transfer.target", &c.target_id},
  };
}

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n"), e = s.find_last_not_of(" \t\r\n");
  return b == std::string::npos ? "" : s.substr(b, e - b + 1);
}

inline std::string format_field(const FieldRef& f) {
  std::ostringstream os;
  std::visit(
      [&](auto* p) {
        using T = std::remove_pointer_t<decltype(p)>;
        if constexpr (std::is_same_v<T, bool>) {
          os << (*p ? "true" : "false");
        } else if constexpr (std::is_same_v<T, double>) {
          char buf[32];
          const auto r = std::to_chars(buf, buf + sizeof buf, *p);
          os << std::string_view(buf, std::size_t(r.ptr - buf));
        } else {
          os << *p;
        }
      },
      f);
  return os.str();
}

inline void parse_field(const FieldRef& f, const std::string& key, const std::string& value) {
  auto bad = [&] { throw ArgumentError("config: bad value '" + value + "' for " + key); };
  std::visit(
      [&](auto* p) {
        using T = std::remove_pointer_t<decltype(p)>;
        if constexpr (std::is_same_v<T, std::string>) {
          *p = value;
        } else if constexpr (std::is_same_v<T, bool>) {
          if (value == "true" || value == "1") *p = true;
          else if (value == "false" || value == "0") *p = false;
          else bad();
        } else {
          std::istringstream is(value);
          if constexpr (std::is_same_v<T, double>) {
            std::string token;
            is >> token;
            if (token == "nan") {
              *p = std::nan("");
              return;
            }
            std::size_t used = 0;
            try {
              *p = std::stod(token, &used);
            } catch (const std::exception&) {
              bad();
            }
            if (used != token.size()) bad();
          } else {
            if (!value.empty() && value[0] == '-') bad();
            T v{};
            if (!(is >> v) || !is.eof()) bad();
            *p = v;
          }
        }
      },
      f);
}

}  // namespace detail

inline void set_value(RunConfig& c, const std::string& key, const std::string& value) {
  for (auto& [k, f] : config_fields(c)) {
    if (k == key) {
      detail::parse_field(f, key, value);
      return;
    }
  }
  throw ArgumentError("config: unknown key " + key);
}

// Flat key=value lines; '#' starts a comment.
inline void load_config(RunConfig& c, const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open config file " + path);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ParseError(imr::detail::concat(path, " line ", lineno, ": expected key=value"));
    set_value(c, detail::trim(line.substr(0, eq)), detail::trim(line.substr(eq + 1)));
  }
}

inline std::string echo_config(RunConfig& c) {
  std::ostringstream os;
  os << "# imr-config 1\n";
  os << "# command " << c.command << "\n";
  for (auto& [k, f] : config_fields(c)) os << k << " = " << detail::format_field(f) << "\n";
  return os.str();
}

// ---------------------------------------------------------------------------

inline TriMesh resolve_template(const RunConfig& c) {
  TriMesh m;
  if (!c.template_path.empty()) {
    m = load_obj(c.template_path);
  } else if (!c.ellipsoid.empty()) {
    const auto cells = imr::detail::split_csv(c.ellipsoid);
    if (cells.size() != 3) throw ArgumentError("template.ellipsoid must be a,b,c");
    Vec3 ax;
    for (int k = 0; k < 3; ++k) ax[k] = imr::detail::parse_double(cells[std::size_t(k)], "template.ellipsoid");
    m = ellipsoid_mesh(ax, c.template_level);
  } else {
    throw ArgumentError("no template: give --template FILE.obj or --ellipsoid a,b,c");
  }
  if (c.template_taper != 0 || c.template_bend != 0) {
    InstanceDeformation d;
    d.taper = c.template_taper;
    d.bend = c.template_bend;
    for (Vec3& v : m.vertices) v = d.apply(v);
  }
  m.validate();
  return m;
}

inline std::vector<std::string> instance_ids(const std::vector<Instance>& instances) {
  std::vector<std::string> ids;
  for (const Instance& i : instances) ids.push_back(i.id);
  return ids;
}

// Dataset instances in checkpoint view order.
inline std::vector<Instance> instances_for(const FitState& st, const std::vector<std::string>& view_ids, const Dataset& ds) {
  std::map<std::string, const Instance*> by_id;
  for (const Instance& i : ds.instances) by_id[i.id] = &i;
  std::vector<Instance> out(st.views.size());
  for (std::size_t v = 0; v < st.views.size(); ++v) {
    const auto it = by_id.find(view_ids.at(v));
    if (it == by_id.end()) throw DataError("dataset has no instance " + view_ids[v] + " named by the checkpoint");
    out.at(st.views[v].instance) = *it->second;
  }
  return out;
}

inline std::size_t object_of_view(const FitState& st, std::size_t view) {
  for (std::size_t o = 0; o < st.objects.size(); ++o)
    for (std::size_t v : st.objects[o].views)
      if (v == st.views.at(view).instance) return o;
  throw DataError(imr::detail::concat("checkpoint view ", view, " belongs to no object"));
}

inline void dump_renders(const FitState& st, const std::vector<Instance>& instances, const fs::path& dir,
                         const std::string& tag, int atlas_level) {
  fs::create_directories(dir);
  const SphereAtlas atlas = icosphere(atlas_level);
  for (std::size_t v = 0; v < st.views.size(); ++v) {
    const Instance& inst = instances.at(st.views[v].instance);
    const TriMesh mesh = st.mesh(object_of_view(st, v), atlas);
    const std::size_t H = inst.mask.height, W = inst.mask.width;
    save_png(hard_mask(mesh, st.camera(v), H, W), (dir / (tag + "_" + inst.id + "_mask.png")).string());
    if (!inst.image.empty()) {
      ad::NoGradGuard guard;
      SoftRasterConfig rc;
      rc.height = H;
      rc.width = W;
      const TextureFn tex = texture_at(st.texture, st.objects[object_of_view(st, v)].z_t.values, inst.image.tensor());
      save_png(Image::from_tensor(rasterize_color(mesh, st.camera(v), tex, rc)), (dir / (tag + "_" + inst.id + "_color.png")).string());
    }
    save_png(map_false_color(st.views[v].map, H, W), (dir / (tag + "_" + inst.id + "_map.png")).string());
  }
}

inline int cmd_init_template(RunConfig& c, std::ostream& out) {
  const TriMesh templ = resolve_template(c);
  ShapeSpace space = ShapeSpace::create(c.seed);
  TemplateFitConfig tc = c.template_fit;
  tc.seed = c.seed;
  const TemplateFitReport rep = fit_template(space, templ, tc);
  fs::create_directories(c.out_dir);
  FitState st;
  st.shape = space;
  st.texture = TextureSpace::create(c.seed + 1);
  save_checkpoint(st, (fs::path(c.out_dir) / "template.json").string());
  save_obj(extract_mean_mesh(space, icosphere(tc.atlas_level)), (fs::path(c.out_dir) / "mean_shape.obj").string());
  out << std::setprecision(6) << "chamfer " << rep.chamfer << " tolerance " << rep.tolerance << " "
      << (rep.converged ? "converged" : "not converged") << "\n";
  return kOk;
}

inline int cmd_synth(RunConfig& c, std::ostream& out) {
  const TriMesh templ = resolve_template(c);
  const SyntheticDataset ds = generate_synthetic(templ, c.synth_instances, c.synth_views, DeformSpec{}, c.seed, c.synth);
  save_dataset(ds, c.out_dir);
  out << "wrote " << ds.instances.size() << " views of " << ds.meshes.size() << " objects to " << c.out_dir << "\n";
  return kOk;
}

inline int cmd_fit(RunConfig& c, std::ostream& out, bool collection) {
  if (c.data_dir.empty()) throw ArgumentError("fit: --data is required");
  Dataset ds = load_dataset(c.data_dir);
  std::vector<Instance> instances;
  if (collection) {
    instances = ds.instances;
  } else {
    const auto it = std::find_if(ds.instances.begin(), ds.instances.end(), [&](const Instance& i) { return i.id == c.instance_id; });
    if (c.instance_id.empty()) throw ArgumentError("fit: --id names the instance to fit");
    if (it == ds.instances.end()) throw DataError("fit: no instance " + c.instance_id + " in " + c.data_dir);
    instances = {*it};
    instances[0].object = 0;
  }
  ShapeSpace shape = ShapeSpace::create(c.seed);
  TextureSpace texture = TextureSpace::create(c.seed + 1);
  if (!c.checkpoint.empty()) {
    const FitState init = load_checkpoint(c.checkpoint);
    shape = init.shape;
    texture = init.texture;
  }
  c.fit.seed = c.seed;
  const fs::path dir(c.out_dir);
  fs::create_directories(dir);
  const auto ids = instance_ids(instances);
  auto dump = [&](const FitState& st, std::size_t it) {
    if (c.dump_every == 0 || (it + 1) % c.dump_every != 0 || it + 1 == c.fit.iterations) return;
    save_checkpoint(st, (dir / "checkpoint.json").string(), ids);
    dump_renders(st, instances, dir / "renders", imr::detail::concat("epoch", it + 1), c.fit.atlas_level);
  };
  const FitState st = fit_collection(instances, shape, texture, c.fit, dump);
  save_checkpoint(st, (dir / "checkpoint.json").string(), ids);
  {
    std::ofstream log(dir / "losses.csv");
    write_loss_log(log, st.log);
  }
  dump_renders(st, instances, dir / "renders", "final", c.fit.atlas_level);
  std::vector<WeakPerspectiveCamera> cams;
  for (std::size_t v = 0; v < st.views.size(); ++v) cams.push_back(st.camera(v));
  {
    std::ofstream cf(dir / "cameras.csv");
    write_camera_csv(cf, ids, cams);
  }
  const IterationLog& last = st.log.back();
  out << std::setprecision(17) << "final total " << last.total;
  for (const auto& [k, v] : last.components) out << " " << k << " " << v;
  out << "\n";
  return kOk;
}

inline int cmd_render(RunConfig& c, std::ostream& out) {
  if (c.checkpoint.empty()) throw ArgumentError("render: --checkpoint is required");
  std::vector<std::string> ids;
  const FitState st = load_checkpoint(c.checkpoint, &ids);
  if (c.render_view >= st.views.size()) throw ArgumentError(imr::detail::concat("render: checkpoint has ", st.views.size(), " views"));
  const std::size_t o = object_of_view(st, c.render_view);
  const TriMesh mesh = st.mesh(o, icosphere(c.fit.atlas_level));
  WeakPerspectiveCamera cam = st.camera(c.render_view).clone(false);
  if (!std::isnan(c.render_azimuth)) {
    cam = WeakPerspectiveCamera::make(cam.s(), cam.t(), view_rotation(c.render_azimuth * std::numbers::pi / 180.0, c.render_elevation * std::numbers::pi / 180.0));
  }
  const std::size_t H = c.synth.height, W = c.synth.width;
  const fs::path dir(c.out_dir);
  fs::create_directories(dir);
  const std::string stem = ids.at(c.render_view);
  save_png(hard_mask(mesh, cam, H, W), (dir / (stem + "_mask.png")).string());
  const SurfaceBuffers buf = rasterize_surface_coords(mesh, cam, H, W);
  Image coords(H, W, 3);
  for (std::size_t i = 0; i < H * W; ++i)
    for (std::size_t k = 0; k < 3; ++k) coords.data[3 * i + k] = buf.valid[i] ? 0.5 * (buf.coords[i][int(k)] + 1.0) : 0.0;
  save_png(coords, (dir / (stem + "_surface.png")).string());
  if (!c.data_dir.empty()) {
    const Dataset ds = load_dataset(c.data_dir);
    const auto instances = instances_for(st, ids, ds);
    const Instance& src = instances.at(st.views[c.render_view].instance);
    if (!src.image.empty()) {
      ad::NoGradGuard guard;
      SoftRasterConfig rc;
      rc.height = H;
      rc.width = W;
      const TextureFn tex = texture_at(st.texture, st.objects[o].z_t.values, src.image.tensor());
      save_png(Image::from_tensor(rasterize_color(mesh, cam, tex, rc)), (dir / (stem + "_color.png")).string());
    }
  }
  save_obj(mesh, (dir / (stem + ".obj")).string());
  out << "rendered " << stem << " to " << c.out_dir << "\n";
  return kOk;
}

struct LoadedFit {
  FitState state;
  std::vector<std::string> ids;
  Dataset data;
  std::vector<Instance> instances;
  std::vector<ViewFit> views;
};

inline LoadedFit load_fit(const RunConfig& c) {
  if (c.checkpoint.empty() || c.data_dir.empty()) throw ArgumentError("--checkpoint and --data are required");
  LoadedFit f;
  f.state = load_checkpoint(c.checkpoint, &f.ids);
  f.data = load_dataset(c.data_dir);
  f.instances = instances_for(f.state, f.ids, f.data);
  const SphereAtlas atlas = icosphere(c.fit.atlas_level);
  for (std::size_t v = 0; v < f.state.views.size(); ++v) {
    const Instance& inst = f.instances.at(f.state.views[v].instance);
    f.views.push_back(view_fit(f.state, v, atlas, inst.mask.height, inst.mask.width));
  }
  return f;
}

inline int cmd_eval(RunConfig& c, std::ostream& out) {
  const LoadedFit f = load_fit(c);
  const fs::path dir(c.out_dir);
  fs::create_directories(dir);
  bool any = false;
  auto emit = [&](const EvalReport& r) {
    std::ofstream csv(dir / (r.metric + ".csv"));
    r.write_csv(csv);
    out << r.summary();
    any = true;
  };
  bool have_kps = false;
  for (const Instance& i : f.instances) have_kps = have_kps || (i.keypoints && i.keypoints->visible_count() > 0);
  if (have_kps) {
    emit(pck_reproject_all(f.state, f.instances, c.eval_threshold));
    std::vector<TransferPair> pairs;
    for (std::size_t a = 0; a < f.views.size(); ++a) {
      for (std::size_t b = 0; b < f.views.size(); ++b) {
        const Instance& ia = f.instances[f.state.views[a].instance];
        const Instance& ib = f.instances[f.state.views[b].instance];
        if (ia.object == ib.object || !ia.keypoints || !ib.keypoints) continue;
        pairs.push_back({ia.id + "->" + ib.id, &f.views[a], &f.views[b], &*ia.keypoints, &*ib.keypoints});
      }
    }
    if (!pairs.empty()) emit(pck_transfer(pairs, c.eval_threshold));
  }
  if (!f.data.gt_meshes.empty()) {
    if (f.data.gt_meshes.size() != f.state.objects.size())
      throw DataError(imr::detail::concat("eval: ", f.data.gt_meshes.size(), " reference meshes for ", f.state.objects.size(), " fitted objects"));
    const SphereAtlas atlas = icosphere(c.fit.atlas_level);
    std::vector<TriMesh> fitted;
    for (std::size_t o = 0; o < f.state.objects.size(); ++o) fitted.push_back(f.state.mesh(o, atlas));
    emit(reconstruction_iou(fitted, f.data.gt_meshes, c.eval_resolution));
  }
  if (!any) throw DataError("eval: dataset has neither keypoints nor reference meshes");
  return kOk;
}

inline void draw_cross(Image& im, const Vec2& p, const Vec3& color) {
  const long cx = long(std::floor(p.x())), cy = long(std::floor(p.y()));
  for (long d = -2; d <= 2; ++d) {
    for (const auto& [r, c] : {std::pair{cy + d, cx}, std::pair{cy, cx + d}}) {
      if (r < 0 || c < 0 || r >= long(im.height) || c >= long(im.width)) continue;
      for (std::size_t k = 0; k < 3; ++k) im.at(std::size_t(r), std::size_t(c), k) = color[int(k)];
    }
  }
}

inline int cmd_transfer(RunConfig& c, std::ostream& out) {
  const LoadedFit f = load_fit(c);
  auto find = [&](const std::string& id) {
    for (std::size_t v = 0; v < f.views.size(); ++v)
      if (f.instances[f.state.views[v].instance].id == id) return v;
    throw DataError("transfer: checkpoint has no view " + id);
  };
  if (c.source_id.empty() || c.target_id.empty()) throw ArgumentError("transfer: --src and --tgt are required");
  const std::size_t s = find(c.source_id), t = find(c.target_id);
  const Instance& src = f.instances[f.state.views[s].instance];
  const Instance& tgt = f.instances[f.state.views[t].instance];
  if (!src.keypoints || src.keypoints->visible_count() == 0) throw DataError("transfer: source " + src.id + " has no visible keypoints");
  std::vector<Vec2> query;
  std::vector<std::size_t> index;
  for (std::size_t k = 0; k < src.keypoints->size(); ++k) {
    if (!src.keypoints->visible[k]) continue;
    query.push_back(src.keypoints->observed[k]);
    index.push_back(k);
  }
  const auto moved = transfer_keypoints(f.views[s], f.views[t], query);
  const fs::path dir(c.out_dir);
  fs::create_directories(dir);
  std::ofstream csv(dir / "transfer.csv");
  csv << "# imr-transfer 1\nkp_name,src_x,src_y,tgt_x,tgt_y,gt_x,gt_y,gt_visible\n" << std::setprecision(17);
  Image canvas = tgt.image.empty() ? Image(tgt.mask.height, tgt.mask.width, 3) : tgt.image;
  if (tgt.image.empty())
    for (std::size_t i = 0; i < tgt.mask.data.size(); ++i)
      for (std::size_t k = 0; k < 3; ++k) canvas.data[3 * i + k] = tgt.mask.data[i] ? 0.5 : 0.0;
  std::size_t found = 0;
  for (std::size_t j = 0; j < index.size(); ++j) {
    const std::size_t k = index[j];
    const std::string name = k < f.data.keypoint_names.size() ? f.data.keypoint_names[k] : imr::detail::kp_name(k);
    csv << name << "," << query[j].x() << "," << query[j].y() << ",";
    if (moved[j]) {
      csv << moved[j]->x() << "," << moved[j]->y();
      draw_cross(canvas, *moved[j], Vec3(1, 0, 0));
      ++found;
    } else {
      csv << ",";
    }
    const bool gt = tgt.keypoints && tgt.keypoints->visible[k];
    if (gt) {
      csv << "," << tgt.keypoints->observed[k].x() << "," << tgt.keypoints->observed[k].y() << ",1\n";
      draw_cross(canvas, tgt.keypoints->observed[k], Vec3(0, 1, 0));
    } else {
      csv << ",,,0\n";
    }
  }
  save_png(canvas, (dir / "transfer.png").string());
  out << "transferred " << found << "/" << index.size() << " keypoints from " << src.id << " to " << tgt.id << "\n";
  return kOk;
}

// ---------------------------------------------------------------------------

inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Implicit mesh reconstruction from silhouettes"};
  app.require_subcommand(1);
  RunConfig cfg;
  std::string config_file;
  std::vector<std::string> sets;

  auto common = [&](CLI::App* sub) {
    sub->add_option("--config", config_file, "key=value configuration file");
    sub->add_option("--set", sets, "override one key (key=value); repeatable");
    sub->add_option("--out", cfg.out_dir, "output directory");
    sub->add_option("--seed", cfg.seed, "random seed");
  };
  auto templ = [&](CLI::App* sub) {
    sub->add_option("--template", cfg.template_path, "template mesh (OBJ)");
    sub->add_option("--ellipsoid", cfg.ellipsoid, "ellipsoid template semi-axes a,b,c");
    sub->add_option("--taper", cfg.template_taper, "taper applied to the template");
    sub->add_option("--bend", cfg.template_bend, "bend applied to the template");
  };

  auto* init = app.add_subcommand("init-template", "fit the mean shape to a template mesh");
  common(init);
  templ(init);
  init->add_option("--iterations", cfg.template_fit.iterations, "optimizer steps");

  auto* synth = app.add_subcommand("synth", "write a synthetic dataset of deformed template instances");
  common(synth);
  templ(synth);
  synth->add_option("--instances", cfg.synth_instances, "number of objects");
  synth->add_option("--views", cfg.synth_views, "views per object");

  auto* fit = app.add_subcommand("fit", "fit one image");
  auto* fitc = app.add_subcommand("fit-collection", "fit every image of a dataset with shared shape and texture spaces");
  for (auto* sub : {fit, fitc}) {
    common(sub);
    sub->add_option("--data", cfg.data_dir, "dataset directory");
    sub->add_option("--init", cfg.checkpoint, "template checkpoint from init-template");
    sub->add_option("--iterations", cfg.fit.iterations, "iterations (epochs for collections)");
    sub->add_option("--dump-every", cfg.dump_every, "epochs between checkpoint and render dumps");
  }
  fit->add_option("--id", cfg.instance_id, "instance to fit");

  auto* render = app.add_subcommand("render", "render a fitted instance");
  common(render);
  render->add_option("--checkpoint", cfg.checkpoint, "fit checkpoint");
  render->add_option("--data", cfg.data_dir, "dataset (for the texture source image)");
  render->add_option("--view", cfg.render_view, "view index in the checkpoint");
  render->add_option("--azimuth", cfg.render_azimuth, "novel view azimuth in degrees");
  render->add_option("--elevation", cfg.render_elevation, "novel view elevation in degrees");

  auto* eval = app.add_subcommand("eval", "PCK-R, PCK-T and IoU of a fit");
  common(eval);
  eval->add_option("--checkpoint", cfg.checkpoint, "fit checkpoint");
  eval->add_option("--data", cfg.data_dir, "dataset with keypoints and/or reference meshes");
  eval->add_option("--threshold", cfg.eval_threshold, "PCK threshold as a fraction of max(H, W)");

  auto* transfer = app.add_subcommand("transfer", "transfer keypoints between two fitted views");
  common(transfer);
  transfer->add_option("--checkpoint", cfg.checkpoint, "fit checkpoint");
  transfer->add_option("--data", cfg.data_dir, "dataset");
  transfer->add_option("--src", cfg.source_id, "source instance id");
  transfer->add_option("--tgt", cfg.target_id, "target instance id");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kOk : kUsage;
  }

  const WarningHandler previous = set_warning_handler([&err](const std::string& m) { err << "warning: " << m << "\n"; });
  struct Restore {
    WarningHandler h;
    ~Restore() { set_warning_handler(std::move(h)); }
  } restore{previous};
  try {
    cfg.command = app.get_subcommands().front()->get_name();
    // The config file is applied first; explicit flags and --set override it.
    if (!config_file.empty()) {
      RunConfig from_file = cfg;
      load_config(from_file, config_file);
      for (auto* sub : app.get_subcommands()) {
        for (const CLI::Option* opt : sub->get_options()) {
          if (opt->count() == 0 || opt->get_name() == "--config" || opt->get_name() == "--set") continue;
          // re-apply the flag on top of the file values
          const std::string name = opt->get_name();
          auto copy_field = [&](auto RunConfig::*member) { from_file.*member = cfg.*member; };
          if (name == "--out") copy_field(&RunConfig::out_dir);
          else if (name == "--seed") copy_field(&RunConfig::seed);
          else if (name == "--template") copy_field(&RunConfig::template_path);
          else if (name == "--ellipsoid") copy_field(&RunConfig::ellipsoid);
          else if (name == "--taper") copy_field(&RunConfig::template_taper);
          else if (name == "--bend") copy_field(&RunConfig::template_bend);
          else if (name == "--instances") copy_field(&RunConfig::synth_instances);
          else if (name == "--views") copy_field(&RunConfig::synth_views);
          else if (name == "--data") copy_field(&RunConfig::data_dir);
          else if (name == "--init" || name == "--checkpoint") copy_field(&RunConfig::checkpoint);
          else if (name == "--dump-every") copy_field(&RunConfig::dump_every);
          else if (name == "--id") copy_field(&RunConfig::instance_id);
          else if (name == "--view") copy_field(&RunConfig::render_view);
          else if (name == "--azimuth") copy_field(&RunConfig::render_azimuth);
          else if (name == "--elevation") copy_field(&RunConfig::render_elevation);
          else if (name == "--threshold") copy_field(&RunConfig::eval_threshold);
          else if (name == "--src") copy_field(&RunConfig::source_id);
          else if (name == "--tgt") copy_field(&RunConfig::target_id);
          else if (name == "--iterations") {
            from_file.template_fit.iterations = cfg.template_fit.iterations;
            from_file.fit.iterations = cfg.fit.iterations;
          }
        }
      }
      cfg = from_file;
    }
    for (const std::string& s : sets) {
      const auto eq = s.find('=');
      if (eq == std::string::npos) throw ArgumentError("--set expects key=value, got " + s);
      set_value(cfg, detail::trim(s.substr(0, eq)), detail::trim(s.substr(eq + 1)));
    }
    cfg.fit.validate();
    out << echo_config(cfg);
    int code = kOk;
    if (cfg.command == "init-template") code = cmd_init_template(cfg, out);
    else if (cfg.command == "synth") code = cmd_synth(cfg, out);
    else if (cfg.command == "fit") code = cmd_fit(cfg, out, false);
    else if (cfg.command == "fit-collection") code = cmd_fit(cfg, out, true);
    else if (cfg.command == "render") code = cmd_render(cfg, out);
    else if (cfg.command == "eval") code = cmd_eval(cfg, out);
    else if (cfg.command == "transfer") code = cmd_transfer(cfg, out);
    return code;
  } catch (const ArgumentError& e) {
    err << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const NumericError& e) {
    err << "numeric failure: " << e.what() << "\n";
    return kNumeric;
  } catch (const DataError& e) {
    err << "data error: " << e.what() << "\n";
    return kData;
  } catch (const ParseError& e) {
    err << "data error: " << e.what() << "\n";
    return kData;
  } catch (const GeometryError& e) {
    err << "data error: " << e.what() << "\n";
    return kData;
  } catch (const fs::filesystem_error& e) {
    err << "data error: " << e.what() << "\n";
    return kData;
  }
}

}  // namespace imr::cli
