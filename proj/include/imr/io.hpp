#pragma once

#include <png.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "imr/camera.hpp"
#include "imr/geometry.hpp"
#include "imr/image.hpp"
#include "imr/losses.hpp"
#include "imr/pipeline.hpp"
#include "imr/surface_map.hpp"

namespace imr {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// PNG

namespace detail {

struct PngFile {
  std::FILE* f = nullptr;
  explicit PngFile(const std::string& path, const char* mode) : f(std::fopen(path.c_str(), mode)) {}
  ~PngFile() {
    if (f) std::fclose(f);
  }
  PngFile(const PngFile&) = delete;
  PngFile& operator=(const PngFile&) = delete;
};

inline std::uint8_t to_byte(double v) {
  if (!std::isfinite(v)) v = 0.0;
  return std::uint8_t(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

// 8-bit gray (channels 1) or RGB (channels 3) rows.
inline void write_png_bytes(const std::string& path, std::size_t height, std::size_t width, int channels,
                            const std::vector<std::uint8_t>& bytes) {
  PngFile file(path, "wb");
  if (!file.f) throw DataError("cannot write PNG file " + path);
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_write_struct(&png, nullptr);
    throw DataError("libpng: cannot allocate writer for " + path);
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw DataError("libpng: failed writing " + path);
  }
  png_init_io(png, file.f);
  png_set_IHDR(png, info, png_uint_32(width), png_uint_32(height), 8, channels == 3 ? PNG_COLOR_TYPE_RGB : PNG_COLOR_TYPE_GRAY,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (std::size_t r = 0; r < height; ++r) {
    png_write_row(png, const_cast<png_bytep>(bytes.data() + r * width * std::size_t(channels)));
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

// Decodes any PNG to 8-bit gray or RGB (alpha dropped).
inline std::vector<std::uint8_t> read_png_bytes(const std::string& path, std::size_t& height, std::size_t& width,
                                                int& channels) {
  PngFile file(path, "rb");
  if (!file.f) throw DataError("cannot open PNG file " + path);
  unsigned char sig[8];
  if (std::fread(sig, 1, 8, file.f) != 8 || png_sig_cmp(sig, 0, 8)) throw DataError("not a PNG file: " + path);
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_read_struct(&png, nullptr, nullptr);
    throw DataError("libpng: cannot allocate reader for " + path);
  }
  std::vector<std::uint8_t> bytes;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw DataError("libpng: malformed PNG " + path);
  }
  png_init_io(png, file.f);
  png_set_sig_bytes(png, 8);
  png_read_info(png, info);
  const int color = png_get_color_type(png, info);
  if (png_get_bit_depth(png, info) == 16) png_set_strip_16(png);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY && png_get_bit_depth(png, info) < 8) png_set_expand_gray_1_2_4_to_8(png);
  if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
  png_set_strip_alpha(png);
  png_read_update_info(png, info);
  height = png_get_image_height(png, info);
  width = png_get_image_width(png, info);
  channels = png_get_channels(png, info);
  bytes.resize(height * width * std::size_t(channels));
  std::vector<png_bytep> rows(height);
  for (std::size_t r = 0; r < height; ++r) rows[r] = bytes.data() + r * width * std::size_t(channels);
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return bytes;
}

}  // namespace detail

// Values are clamped to [0, 1]; 1 or 3 channels.
inline void save_png(const Image& image, const std::string& path) {
  if (image.channels != 1 && image.channels != 3) throw ArgumentError(detail::concat("save_png: ", image.channels, " channels"));
  std::vector<std::uint8_t> bytes(image.data.size());
  for (std::size_t i = 0; i < bytes.size(); ++i) bytes[i] = detail::to_byte(image.data[i]);
  detail::write_png_bytes(path, image.height, image.width, int(image.channels), bytes);
}

inline void save_png(const Mask& mask, const std::string& path) {
  std::vector<std::uint8_t> bytes(mask.data.size());
  for (std::size_t i = 0; i < bytes.size(); ++i) bytes[i] = mask.data[i] ? 255 : 0;
  detail::write_png_bytes(path, mask.height, mask.width, 1, bytes);
}

// RGB image in [0, 1]; gray files are replicated to three channels.
inline Image load_png(const std::string& path) {
  std::size_t h = 0, w = 0;
  int c = 0;
  const auto bytes = detail::read_png_bytes(path, h, w, c);
  Image im(h, w, 3);
  for (std::size_t i = 0; i < h * w; ++i)
    for (std::size_t k = 0; k < 3; ++k) im.data[3 * i + k] = double(bytes[i * std::size_t(c) + (c == 3 ? k : 0)]) / 255.0;
  return im;
}

// Foreground where the gray level (mean of RGB) exceeds 127.
inline Mask load_mask_png(const std::string& path) {
  std::size_t h = 0, w = 0;
  int c = 0;
  const auto bytes = detail::read_png_bytes(path, h, w, c);
  Mask m(h, w);
  for (std::size_t i = 0; i < h * w; ++i) {
    int sum = 0;
    for (int k = 0; k < c; ++k) sum += bytes[i * std::size_t(c) + std::size_t(k)];
    m.data[i] = sum > 127 * c;
  }
  return m;
}

// (u + 1) / 2 as RGB at the pixel centres of an H x W image.
inline Image map_false_color(const PixelSurfaceMap& map, std::size_t height, std::size_t width) {
  Image im(height, width, 3);
  for (std::size_t r = 0; r < height; ++r) {
    for (std::size_t c = 0; c < width; ++c) {
      const Vec3 u = map.sample(Vec2(double(c) + 0.5, double(r) + 0.5), height, width);
      for (std::size_t k = 0; k < 3; ++k) im.at(r, c, k) = 0.5 * (u[int(k)] + 1.0);
    }
  }
  return im;
}

// ---------------------------------------------------------------------------
// CSV

namespace detail {

inline std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream is(line);
  while (std::getline(is, cell, ',')) {
    const auto b = cell.find_first_not_of(" \t\r"), e = cell.find_last_not_of(" \t\r");
    out.push_back(b == std::string::npos ? "" : cell.substr(b, e - b + 1));
  }
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

inline double parse_double(const std::string& s, const std::string& where) {
  try {
    std::size_t used = 0;
    const double v = std::stod(s, &used);
    if (used != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw ParseError(where + ": not a number: '" + s + "'");
  }
}

// Rows of a CSV file with a "# <kind> <version>" line and a column header.
inline std::vector<std::vector<std::string>> read_csv(const std::string& path, const std::string& kind,
                                                      const std::vector<std::string>& columns) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path);
  std::string line;
  std::vector<std::vector<std::string>> rows;
  bool header = false;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    if (line[0] == '#') {
      std::istringstream is(line.substr(1));
      std::string k;
      int version = 0;
      if (is >> k >> version && k == kind && version != 1)
        throw ParseError(concat(path, ": unsupported ", kind, " version ", version));
      continue;
    }
    auto cells = split_csv(line);
    if (!header) {
      if (cells != columns) throw ParseError(concat(path, ": expected columns ", line, " to be the standard header"));
      header = true;
      continue;
    }
    if (cells.size() != columns.size())
      throw ParseError(concat(path, " line ", lineno, ": expected ", columns.size(), " fields, got ", cells.size()));
    rows.push_back(std::move(cells));
  }
  if (!header) throw ParseError(path + ": missing header row");
  return rows;
}

}  // namespace detail

// Training log: one row per iteration, components in alphabetical order.
inline void write_loss_log(std::ostream& os, const std::vector<IterationLog>& log) {
  std::vector<std::string> names;
  for (const IterationLog& e : log)
    for (const auto& [k, v] : e.components)
      if (std::find(names.begin(), names.end(), k) == names.end()) names.push_back(k);
  std::sort(names.begin(), names.end());
  os << "# imr-losslog 1\niteration";
  for (const auto& n : names) os << "," << n;
  os << ",total\n" << std::setprecision(17);
  for (const IterationLog& e : log) {
    os << e.iteration;
    for (const auto& n : names) {
      const auto it = e.components.find(n);
      os << "," << (it == e.components.end() ? 0.0 : it->second);
    }
    os << "," << e.total << "\n";
  }
}

inline void write_camera_csv(std::ostream& os, const std::vector<std::string>& ids,
                             const std::vector<WeakPerspectiveCamera>& cams) {
  os << "# imr-cameras 1\nid,s,tx,ty,qw,qx,qy,qz\n" << std::setprecision(17);
  for (std::size_t i = 0; i < cams.size(); ++i) {
    os << ids.at(i);
    for (double v : cams[i].to_record()) os << "," << v;
    os << "\n";
  }
}

inline std::map<std::string, WeakPerspectiveCamera> read_camera_csv(const std::string& path) {
  std::map<std::string, WeakPerspectiveCamera> out;
  for (const auto& row : detail::read_csv(path, "imr-cameras", {"id", "s", "tx", "ty", "qw", "qx", "qy", "qz"})) {
    std::array<double, 7> r{};
    for (std::size_t k = 0; k < 7; ++k) r[k] = detail::parse_double(row[k + 1], path);
    out[row[0]] = WeakPerspectiveCamera::from_record(r);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Checkpoints (JSON)

namespace detail {

using json = nlohmann::ordered_json;

inline json tensor_json(const ad::Tensor& t) {
  return {{"shape", t.shape()}, {"data", std::vector<double>(t.data().begin(), t.data().end())}};
}

inline ad::Tensor json_tensor(const json& j, bool grad_enabled) {
  const auto shape = j.at("shape").get<ad::Shape>();
  auto data = j.at("data").get<std::vector<double>>();
  std::size_t n = 1;
  for (auto s : shape) n *= s;
  if (n != data.size()) throw ParseError(concat("checkpoint: tensor shape ", ad::to_string(shape), " holds ", data.size(), " values"));
  return ad::Tensor(shape, std::move(data), grad_enabled);
}

inline json mlp_json(const MLPParams& m) {
  json j{{"input", m.input_width}, {"hidden", m.hidden_width}, {"output", m.output_width}};
  for (std::size_t l = 0; l < m.weights.size(); ++l) {
    j["weights"].push_back(tensor_json(m.weights[l]));
    j["biases"].push_back(tensor_json(m.biases[l]));
  }
  return j;
}

inline MLPParams json_mlp(const json& j) {
  MLPParams m;
  m.input_width = j.at("input").get<std::size_t>();
  m.hidden_width = j.at("hidden").get<std::size_t>();
  m.output_width = j.at("output").get<std::size_t>();
  for (const auto& w : j.at("weights")) m.weights.push_back(json_tensor(w, true));
  for (const auto& b : j.at("biases")) m.biases.push_back(json_tensor(b, true));
  if (m.weights.size() != MLPParams::kLayers || m.biases.size() != MLPParams::kLayers)
    throw ParseError("checkpoint: network must have 4 layers");
  std::size_t in = m.input_width;
  for (std::size_t l = 0; l < MLPParams::kLayers; ++l) {
    const std::size_t out = l + 1 == MLPParams::kLayers ? m.output_width : m.hidden_width;
    if (m.weights[l].shape() != ad::Shape{in, out} || m.biases[l].shape() != ad::Shape{out})
      throw ParseError(concat("checkpoint: layer ", l, " has the wrong shape"));
    in = out;
  }
  return m;
}

}  // namespace detail

inline constexpr int kCheckpointVersion = 1;

inline detail::json shape_space_json(const ShapeSpace& s) {
  return {{"latent_dim", s.latent_dim}, {"mean_net", detail::mlp_json(s.mean_net)}, {"deform_net", detail::mlp_json(s.deform_net)}};
}

inline ShapeSpace json_shape_space(const detail::json& j) {
  ShapeSpace s;
  s.latent_dim = j.at("latent_dim").get<std::size_t>();
  s.mean_net = detail::json_mlp(j.at("mean_net"));
  s.deform_net = detail::json_mlp(j.at("deform_net"));
  if (s.mean_net.input_width != 3 || s.mean_net.output_width != 3 || s.deform_net.input_width != 3 + s.latent_dim ||
      s.deform_net.output_width != 3)
    throw ParseError("checkpoint: shape networks do not match the latent size");
  return s;
}

inline detail::json texture_space_json(const TextureSpace& t) {
  return {{"latent_dim", t.latent_dim}, {"flow_net", detail::mlp_json(t.flow_net)}};
}

inline TextureSpace json_texture_space(const detail::json& j) {
  TextureSpace t;
  t.latent_dim = j.at("latent_dim").get<std::size_t>();
  t.flow_net = detail::json_mlp(j.at("flow_net"));
  if (t.flow_net.input_width != 3 + t.latent_dim || t.flow_net.output_width != 2)
    throw ParseError("checkpoint: texture network does not match the latent size");
  return t;
}

inline std::string checkpoint_string(const FitState& st, const std::vector<std::string>& view_ids = {}) {
  detail::json j;
  j["imr_checkpoint"] = kCheckpointVersion;
  j["iterations_done"] = st.iterations_done;
  j["shape"] = shape_space_json(st.shape);
  j["texture"] = texture_space_json(st.texture);
  j["objects"] = detail::json::array();
  for (const ObjectState& o : st.objects)
    j["objects"].push_back({{"z_s", detail::tensor_json(o.z_s.values)}, {"z_t", detail::tensor_json(o.z_t.values)}, {"views", o.views}});
  j["views"] = detail::json::array();
  for (std::size_t v = 0; v < st.views.size(); ++v) {
    const ViewState& vs = st.views[v];
    detail::json cams = detail::json::array();
    for (const auto& c : vs.hypotheses.cameras) cams.push_back(c.to_record());
    j["views"].push_back({{"id", v < view_ids.size() ? view_ids[v] : std::to_string(v)},
                          {"instance", vs.instance},
                          {"cameras", cams},
                          {"logits", detail::tensor_json(vs.hypotheses.logits)},
                          {"pruned", vs.pruned},
                          {"map", detail::tensor_json(vs.map.grid)}});
  }
  return j.dump(1);
}

inline FitState parse_checkpoint(const std::string& text, std::vector<std::string>* view_ids = nullptr) {
  detail::json j;
  try {
    j = detail::json::parse(text);
  } catch (const std::exception& e) {
    throw ParseError(std::string("checkpoint: ") + e.what());
  }
  try {
    if (!j.contains("imr_checkpoint")) throw ParseError("checkpoint: missing version field");
    if (j["imr_checkpoint"].get<int>() != kCheckpointVersion)
      throw ParseError(detail::concat("checkpoint: unsupported version ", j["imr_checkpoint"].get<int>()));
    FitState st;
    st.iterations_done = j.at("iterations_done").get<std::size_t>();
    st.shape = json_shape_space(j.at("shape"));
    st.texture = json_texture_space(j.at("texture"));
    for (const auto& o : j.at("objects")) {
      ObjectState os;
      os.z_s = {detail::json_tensor(o.at("z_s"), true)};
      os.z_t = {detail::json_tensor(o.at("z_t"), true)};
      st.shape.check_latent(os.z_s.values);
      st.texture.check_latent(os.z_t.values);
      os.views = o.at("views").get<std::vector<std::size_t>>();
      st.objects.push_back(std::move(os));
    }
    for (const auto& v : j.at("views")) {
      ViewState vs;
      vs.instance = v.at("instance").get<std::size_t>();
      for (const auto& c : v.at("cameras")) vs.hypotheses.cameras.push_back(WeakPerspectiveCamera::from_record(c.get<std::array<double, 7>>(), true));
      vs.hypotheses.logits = detail::json_tensor(v.at("logits"), true);
      if (vs.hypotheses.cameras.empty() || vs.hypotheses.logits.numel() != vs.hypotheses.cameras.size())
        throw ParseError("checkpoint: camera and logit counts differ");
      vs.pruned = v.at("pruned").get<bool>();
      vs.map = {detail::json_tensor(v.at("map"), true)};
      if (vs.map.grid.rank() != 3 || vs.map.grid.size(2) != 3) throw ParseError("checkpoint: surface map must be (rows, cols, 3)");
      if (view_ids) view_ids->push_back(v.at("id").get<std::string>());
      st.views.push_back(std::move(vs));
    }
    for (const ObjectState& o : st.objects)
      for (std::size_t v : o.views)
        if (v >= st.views.size()) throw ParseError("checkpoint: object refers to a missing view");
    return st;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("checkpoint: ") + e.what());
  }
}

inline void save_checkpoint(const FitState& st, const std::string& path, const std::vector<std::string>& view_ids = {}) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write checkpoint " + path);
  out << checkpoint_string(st, view_ids) << "\n";
}

inline FitState load_checkpoint(const std::string& path, std::vector<std::string>* view_ids = nullptr) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open checkpoint " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_checkpoint(ss.str(), view_ids);
}

// ---------------------------------------------------------------------------
// Dataset directories
//
// <root>/images/<id>.png, <root>/masks/<id>.png, optional keypoints.csv
// (id, kp_name, x, y, visible), canonical_keypoints.csv (kp_name, ux, uy, uz)
// and objects.csv (id, object) grouping views of one object. Synthetic sets
// add gt/cameras.csv and gt/object_<o>.obj.

struct Dataset {
  std::vector<Instance> instances;
  std::vector<std::string> keypoint_names;
  std::vector<Vec3> canonical_keypoints;
  std::map<std::string, WeakPerspectiveCamera> gt_cameras;  // by instance id
  std::vector<TriMesh> gt_meshes;                           // by object
};

namespace detail {

inline std::string kp_name(std::size_t k) { return concat("kp", k); }

}  // namespace detail

inline void save_dataset(const SyntheticDataset& ds, const std::string& root) {
  const fs::path r(root);
  fs::create_directories(r / "images");
  fs::create_directories(r / "masks");
  fs::create_directories(r / "gt");
  std::ofstream objects(r / "objects.csv"), kps(r / "keypoints.csv"), canon(r / "canonical_keypoints.csv"), cams(r / "gt" / "cameras.csv");
  if (!objects || !kps || !canon || !cams) throw DataError("cannot write dataset files under " + root);
  objects << "# imr-objects 1\nid,object\n";
  kps << "# imr-keypoints 1\nid,kp_name,x,y,visible\n" << std::setprecision(17);
  canon << "# imr-canonical-keypoints 1\nkp_name,ux,uy,uz\n" << std::setprecision(17);
  for (std::size_t k = 0; k < ds.canonical_keypoints.size(); ++k) {
    const Vec3& u = ds.canonical_keypoints[k];
    canon << detail::kp_name(k) << "," << u.x() << "," << u.y() << "," << u.z() << "\n";
  }
  std::vector<std::string> ids;
  for (const Instance& inst : ds.instances) {
    save_png(inst.image, (r / "images" / (inst.id + ".png")).string());
    save_png(inst.mask, (r / "masks" / (inst.id + ".png")).string());
    objects << inst.id << "," << inst.object << "\n";
    if (inst.keypoints) {
      for (std::size_t k = 0; k < inst.keypoints->size(); ++k) {
        const Vec2& x = inst.keypoints->observed[k];
        kps << inst.id << "," << detail::kp_name(k) << "," << x.x() << "," << x.y() << "," << int(inst.keypoints->visible[k]) << "\n";
      }
    }
    ids.push_back(inst.id);
  }
  write_camera_csv(cams, ids, ds.cameras);
  for (std::size_t o = 0; o < ds.meshes.size(); ++o) save_obj(ds.meshes[o], (r / "gt" / detail::concat("object_", o, ".obj")).string());
}

inline Dataset load_dataset(const std::string& root) {
  const fs::path r(root);
  if (!fs::is_directory(r)) throw DataError("dataset directory not found: " + root);
  if (!fs::is_directory(r / "masks")) throw DataError("dataset has no masks/ directory: " + root);
  Dataset ds;
  std::vector<std::string> ids;
  for (const auto& e : fs::directory_iterator(r / "masks"))
    if (e.path().extension() == ".png") ids.push_back(e.path().stem().string());
  std::sort(ids.begin(), ids.end());
  if (ids.empty()) throw DataError("no masks found in " + (r / "masks").string());

  std::map<std::string, std::size_t> object_of;
  if (fs::exists(r / "objects.csv")) {
    for (const auto& row : detail::read_csv((r / "objects.csv").string(), "imr-objects", {"id", "object"}))
      object_of[row[0]] = std::size_t(detail::parse_double(row[1], "objects.csv"));
  }
  for (std::size_t i = 0; i < ids.size(); ++i) {
    Instance inst;
    inst.id = ids[i];
    inst.object = object_of.count(ids[i]) ? object_of[ids[i]] : i;
    inst.mask = load_mask_png((r / "masks" / (ids[i] + ".png")).string());
    const fs::path img = r / "images" / (ids[i] + ".png");
    if (fs::exists(img)) {
      inst.image = load_png(img.string());
      if (inst.image.height != inst.mask.height || inst.image.width != inst.mask.width)
        throw DataError("image and mask sizes differ for " + img.string());
    }
    ds.instances.push_back(std::move(inst));
  }
  // renumber objects densely in order of first appearance
  std::map<std::size_t, std::size_t> dense;
  for (Instance& inst : ds.instances) {
    const auto [it, fresh] = dense.emplace(inst.object, dense.size());
    inst.object = it->second;
  }

  if (fs::exists(r / "canonical_keypoints.csv")) {
    for (const auto& row : detail::read_csv((r / "canonical_keypoints.csv").string(), "imr-canonical-keypoints", {"kp_name", "ux", "uy", "uz"})) {
      ds.keypoint_names.push_back(row[0]);
      const Vec3 u(detail::parse_double(row[1], "canonical_keypoints.csv"), detail::parse_double(row[2], "canonical_keypoints.csv"),
                   detail::parse_double(row[3], "canonical_keypoints.csv"));
      if (!(u.norm() > 0)) throw DataError("canonical keypoint " + row[0] + " is the zero vector");
      ds.canonical_keypoints.push_back(u.normalized());
    }
  }
  if (fs::exists(r / "keypoints.csv")) {
    if (ds.keypoint_names.empty()) throw DataError("keypoints.csv needs canonical_keypoints.csv");
    std::map<std::string, std::size_t> index;
    for (std::size_t k = 0; k < ds.keypoint_names.size(); ++k) index[ds.keypoint_names[k]] = k;
    std::map<std::string, std::size_t> inst_index;
    for (std::size_t i = 0; i < ds.instances.size(); ++i) inst_index[ds.instances[i].id] = i;
    for (Instance& inst : ds.instances) {
      KeypointSet k;
      k.canonical = ds.canonical_keypoints;
      k.observed.assign(k.canonical.size(), Vec2::Zero());
      k.visible.assign(k.canonical.size(), false);
      inst.keypoints = k;
    }
    for (const auto& row : detail::read_csv((r / "keypoints.csv").string(), "imr-keypoints", {"id", "kp_name", "x", "y", "visible"})) {
      if (!inst_index.count(row[0])) throw DataError("keypoints.csv names unknown instance " + row[0]);
      if (!index.count(row[1])) throw DataError("keypoints.csv names unknown keypoint " + row[1]);
      KeypointSet& k = *ds.instances[inst_index[row[0]]].keypoints;
      const std::size_t kk = index[row[1]];
      k.observed[kk] = Vec2(detail::parse_double(row[2], "keypoints.csv"), detail::parse_double(row[3], "keypoints.csv"));
      k.visible[kk] = detail::parse_double(row[4], "keypoints.csv") != 0;
    }
  }
  if (fs::exists(r / "gt" / "cameras.csv")) ds.gt_cameras = read_camera_csv((r / "gt" / "cameras.csv").string());
  for (std::size_t o = 0;; ++o) {
    const fs::path p = r / "gt" / detail::concat("object_", o, ".obj");
    if (!fs::exists(p)) break;
    ds.gt_meshes.push_back(load_obj(p.string()));
  }
  for (const Instance& inst : ds.instances) inst.validate();
  return ds;
}

}  // namespace imr
