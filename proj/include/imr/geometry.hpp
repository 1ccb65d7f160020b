#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <iomanip>
#include <limits>
#include <map>
#include <numbers>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "imr/core.hpp"

namespace imr {

using Vec2 = Eigen::Vector2d;
using Vec3 = Eigen::Vector3d;
using Face = std::array<std::uint32_t, 3>;
using Edge = std::array<std::uint32_t, 2>;

// Reflection across the X=0 plane.
inline Vec3 reflect(const Vec3& u) { return {-u.x(), u.y(), u.z()}; }

// Canonical sampling of the unit sphere: icosphere vertices with their 1-ring.
struct SphereAtlas {
  int level = 0;
  std::vector<Vec3> samples;
  std::vector<Face> faces;
  std::vector<std::vector<std::uint32_t>> adjacency;  // sorted 1-ring per sample
  std::vector<Edge> edges;                            // undirected, i < j, sorted

  std::size_t size() const { return samples.size(); }
};

struct TriMesh {
  std::vector<Vec3> vertices;
  std::vector<Face> faces;
  std::vector<Vec3> sphere_coords;  // the sphere sample that generated each vertex

  void validate() const {
    if (sphere_coords.size() != vertices.size()) {
      throw GeometryError(detail::concat("mesh: ", sphere_coords.size(), " sphere coords for ", vertices.size(),
                                         " vertices"));
    }
    for (std::size_t f = 0; f < faces.size(); ++f)
      for (auto i : faces[f])
        if (i >= vertices.size()) throw GeometryError(detail::concat("mesh: face ", f, " index ", i, " out of range"));
  }
};

struct Bounds {
  Vec3 min = Vec3::Zero();
  Vec3 max = Vec3::Zero();

  Vec3 extent() const { return max - min; }
  double diagonal() const { return extent().norm(); }
  bool operator==(const Bounds& o) const { return min == o.min && max == o.max; }
};

struct VoxelGrid {
  int resolution = 0;
  Bounds bounds;
  std::vector<std::uint8_t> occupancy;  // x fastest, then y, then z

  std::size_t index(int x, int y, int z) const {
    return (static_cast<std::size_t>(z) * resolution + y) * resolution + x;
  }
  bool at(int x, int y, int z) const { return occupancy[index(x, y, z)] != 0; }
  std::size_t count() const { return static_cast<std::size_t>(std::count(occupancy.begin(), occupancy.end(), 1)); }
  double fraction() const { return occupancy.empty() ? 0.0 : double(count()) / double(occupancy.size()); }
};

// ---------------------------------------------------------------------------
// Sphere atlas

namespace detail {

inline void build_adjacency(SphereAtlas& atlas) {
  std::vector<std::set<std::uint32_t>> ring(atlas.samples.size());
  std::set<Edge> edges;
  for (const Face& f : atlas.faces) {
    for (int k = 0; k < 3; ++k) {
      const std::uint32_t a = f[k], b = f[(k + 1) % 3];
      ring[a].insert(b);
      ring[b].insert(a);
      edges.insert({std::min(a, b), std::max(a, b)});
    }
  }
  atlas.adjacency.assign(ring.size(), {});
  for (std::size_t i = 0; i < ring.size(); ++i) atlas.adjacency[i].assign(ring[i].begin(), ring[i].end());
  atlas.edges.assign(edges.begin(), edges.end());
}

}  // namespace detail

inline SphereAtlas icosphere(int level) {
  if (level < 0 || level > 6) throw ArgumentError(detail::concat("icosphere: level ", level, " outside [0, 6]"));
  const double t = (1.0 + std::sqrt(5.0)) / 2.0;
  SphereAtlas atlas;
  atlas.level = level;
  atlas.samples = {{-1, t, 0}, {1, t, 0}, {-1, -t, 0}, {1, -t, 0}, {0, -1, t}, {0, 1, t},
                   {0, -1, -t}, {0, 1, -t}, {t, 0, -1}, {t, 0, 1}, {-t, 0, -1}, {-t, 0, 1}};
  for (auto& v : atlas.samples) v.normalize();
  atlas.faces = {{0, 11, 5}, {0, 5, 1},  {0, 1, 7},   {0, 7, 10}, {0, 10, 11}, {1, 5, 9}, {5, 11, 4},
                 {11, 10, 2}, {10, 7, 6}, {7, 1, 8},  {3, 9, 4},  {3, 4, 2},   {3, 2, 6}, {3, 6, 8},
                 {3, 8, 9},   {4, 9, 5},  {2, 4, 11}, {6, 2, 10}, {8, 6, 7},   {9, 8, 1}};
  for (int l = 0; l < level; ++l) {
    std::map<Edge, std::uint32_t> midpoint;
    auto mid = [&](std::uint32_t a, std::uint32_t b) {
      const Edge key{std::min(a, b), std::max(a, b)};
      auto it = midpoint.find(key);
      if (it != midpoint.end()) return it->second;
      const auto idx = static_cast<std::uint32_t>(atlas.samples.size());
      atlas.samples.push_back((atlas.samples[a] + atlas.samples[b]).normalized());
      midpoint.emplace(key, idx);
      return idx;
    };
    std::vector<Face> next;
    next.reserve(atlas.faces.size() * 4);
    for (const Face& f : atlas.faces) {
      const auto a = mid(f[0], f[1]), b = mid(f[1], f[2]), c = mid(f[2], f[0]);
      next.push_back({f[0], a, c});
      next.push_back({f[1], b, a});
      next.push_back({f[2], c, b});
      next.push_back({a, b, c});
    }
    atlas.faces = std::move(next);
  }
  detail::build_adjacency(atlas);
  return atlas;
}

inline const std::vector<std::uint32_t>& neighborhood(const SphereAtlas& atlas, std::size_t index) {
  if (index >= atlas.adjacency.size()) {
    throw ArgumentError(detail::concat("neighborhood: index ", index, " outside atlas of ", atlas.size()));
  }
  return atlas.adjacency[index];
}

inline TriMesh atlas_mesh(const SphereAtlas& atlas) {
  return TriMesh{atlas.samples, atlas.faces, atlas.samples};
}

// Atlas deformed by a per-axis scale: an ellipsoid with the given semi-axes.
inline TriMesh ellipsoid_mesh(const Vec3& axes, int level) {
  const SphereAtlas atlas = icosphere(level);
  TriMesh mesh = atlas_mesh(atlas);
  for (auto& v : mesh.vertices) v = v.cwiseProduct(axes);
  return mesh;
}

// Axis-aligned closed cube centred at `center` with the given half side.
inline TriMesh cube_mesh(const Vec3& center, double half) {
  TriMesh m;
  for (int i = 0; i < 8; ++i) {
    m.vertices.push_back(center + half * Vec3(i & 1 ? 1 : -1, i & 2 ? 1 : -1, i & 4 ? 1 : -1));
  }
  m.faces = {{0, 2, 1}, {1, 2, 3}, {4, 5, 6}, {5, 7, 6}, {0, 1, 4}, {1, 5, 4},
             {2, 6, 3}, {3, 6, 7}, {0, 4, 2}, {2, 4, 6}, {1, 3, 5}, {3, 7, 5}};
  for (const auto& v : m.vertices) m.sphere_coords.push_back((v - center).normalized());
  return m;
}

// ---------------------------------------------------------------------------
// Mesh measurements

inline double triangle_area(const Vec3& a, const Vec3& b, const Vec3& c) { return 0.5 * (b - a).cross(c - a).norm(); }

inline double surface_area(const TriMesh& mesh) {
  double area = 0.0;
  for (const Face& f : mesh.faces) area += triangle_area(mesh.vertices[f[0]], mesh.vertices[f[1]], mesh.vertices[f[2]]);
  return area;
}

inline Bounds bounding_box(const TriMesh& mesh) {
  Bounds b;
  if (mesh.vertices.empty()) return b;
  b.min = b.max = mesh.vertices.front();
  for (const auto& v : mesh.vertices) {
    b.min = b.min.cwiseMin(v);
    b.max = b.max.cwiseMax(v);
  }
  return b;
}

// Union box of two meshes, each side padded by `pad` times the extent.
inline Bounds union_bounds(const TriMesh& a, const TriMesh& b, double pad = 0.05) {
  const Bounds ba = bounding_box(a), bb = bounding_box(b);
  Bounds u{ba.min.cwiseMin(bb.min), ba.max.cwiseMax(bb.max)};
  const Vec3 margin = pad * u.extent();
  u.min -= margin;
  u.max += margin;
  return u;
}

// Closest point on triangle (a, b, c) to p.
inline Vec3 closest_point_on_triangle(const Vec3& p, const Vec3& a, const Vec3& b, const Vec3& c) {
  const Vec3 ab = b - a, ac = c - a, ap = p - a;
  const double d1 = ab.dot(ap), d2 = ac.dot(ap);
  if (d1 <= 0 && d2 <= 0) return a;
  const Vec3 bp = p - b;
  const double d3 = ab.dot(bp), d4 = ac.dot(bp);
  if (d3 >= 0 && d4 <= d3) return b;
  const double vc = d1 * d4 - d3 * d2;
  if (vc <= 0 && d1 >= 0 && d3 <= 0) return a + ab * (d1 / (d1 - d3));
  const Vec3 cp = p - c;
  const double d5 = ab.dot(cp), d6 = ac.dot(cp);
  if (d6 >= 0 && d5 <= d6) return c;
  const double vb = d5 * d2 - d1 * d6;
  if (vb <= 0 && d2 >= 0 && d6 <= 0) return a + ac * (d2 / (d2 - d6));
  const double va = d3 * d6 - d5 * d4;
  if (va <= 0 && (d4 - d3) >= 0 && (d5 - d6) >= 0) return b + (c - b) * ((d4 - d3) / ((d4 - d3) + (d5 - d6)));
  const double denom = 1.0 / (va + vb + vc);
  return a + ab * (vb * denom) + ac * (vc * denom);
}

inline double point_mesh_distance(const Vec3& p, const TriMesh& mesh) {
  double best = std::numeric_limits<double>::infinity();
  for (const Face& f : mesh.faces) {
    const Vec3 q = closest_point_on_triangle(p, mesh.vertices[f[0]], mesh.vertices[f[1]], mesh.vertices[f[2]]);
    best = std::min(best, (p - q).squaredNorm());
  }
  return std::sqrt(best);
}

// Bidirectional Chamfer distance between two surfaces: mean vertex-to-surface
// distance from a to b plus the same from b to a.
inline double chamfer_distance(const TriMesh& a, const TriMesh& b) {
  if (a.vertices.empty() || b.vertices.empty() || a.faces.empty() || b.faces.empty()) {
    throw GeometryError("chamfer_distance: both meshes need vertices and faces");
  }
  auto one_way = [](const TriMesh& from, const TriMesh& to) {
    double s = 0.0;
    for (const auto& v : from.vertices) s += point_mesh_distance(v, to);
    return s / static_cast<double>(from.vertices.size());
  };
  return one_way(a, b) + one_way(b, a);
}

// Area-weighted uniform samples on the mesh surface.
template <typename Rng>
std::vector<Vec3> sample_surface(const TriMesh& mesh, std::size_t n, Rng& rng) {
  if (mesh.faces.empty()) throw GeometryError("sample_surface: mesh has no faces");
  std::vector<double> cumulative;
  cumulative.reserve(mesh.faces.size());
  double total = 0.0;
  for (const Face& f : mesh.faces) {
    total += triangle_area(mesh.vertices[f[0]], mesh.vertices[f[1]], mesh.vertices[f[2]]);
    cumulative.push_back(total);
  }
  if (!(total > 0)) throw GeometryError("sample_surface: mesh has zero area");
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::vector<Vec3> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double r = unit(rng) * total;
    auto it = std::upper_bound(cumulative.begin(), cumulative.end(), r);
    const std::size_t fi = std::min<std::size_t>(it - cumulative.begin(), mesh.faces.size() - 1);
    const Face& f = mesh.faces[fi];
    const double s = std::sqrt(unit(rng)), t = unit(rng);
    out.push_back((1 - s) * mesh.vertices[f[0]] + s * (1 - t) * mesh.vertices[f[1]] + s * t * mesh.vertices[f[2]]);
  }
  return out;
}

// Uniform random points on the unit sphere.
template <typename Rng>
std::vector<Vec3> random_sphere_points(std::size_t n, Rng& rng) {
  std::normal_distribution<double> g(0.0, 1.0);
  std::vector<Vec3> out;
  out.reserve(n);
  while (out.size() < n) {
    Vec3 v(g(rng), g(rng), g(rng));
    const double len = v.norm();
    if (len < 1e-12) continue;
    out.push_back(v / len);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Voxelization and IoU

namespace detail {

// Sign of the 2-D edge function of (a -> b) at p, with ties broken by a
// symbolic perturbation of p so that a shared edge is claimed by exactly one
// of its two triangles.
inline int edge_sign(double ay, double az, double by, double bz, double py, double pz) {
  const double e = (by - ay) * (pz - az) - (bz - az) * (py - ay);
  if (e > 0) return 1;
  if (e < 0) return -1;
  const double dz = bz - az;
  if (dz != 0) return dz < 0 ? 1 : -1;
  const double dy = by - ay;
  if (dy != 0) return dy > 0 ? 1 : -1;
  return 0;
}

}  // namespace detail

// Occupancy of voxel centres by ray-crossing parity along +x.
inline VoxelGrid voxelize(const TriMesh& mesh, int resolution, const Bounds& bounds) {
  if (resolution < 8) throw ArgumentError(detail::concat("voxelize: resolution ", resolution, " < 8"));
  if (mesh.faces.empty() || !(surface_area(mesh) > 0)) {
    throw GeometryError("voxelize: mesh has no positive-area faces");
  }
  VoxelGrid grid;
  grid.resolution = resolution;
  grid.bounds = bounds;
  grid.occupancy.assign(static_cast<std::size_t>(resolution) * resolution * resolution, 0);
  const Vec3 step = bounds.extent() / resolution;
  std::vector<double> crossings;
  for (int k = 0; k < resolution; ++k) {
    const double pz = bounds.min.z() + (k + 0.5) * step.z();
    for (int j = 0; j < resolution; ++j) {
      const double py = bounds.min.y() + (j + 0.5) * step.y();
      crossings.clear();
      for (const Face& f : mesh.faces) {
        const Vec3& a = mesh.vertices[f[0]];
        const Vec3& b = mesh.vertices[f[1]];
        const Vec3& c = mesh.vertices[f[2]];
        if (py < std::min({a.y(), b.y(), c.y()}) || py > std::max({a.y(), b.y(), c.y()})) continue;
        if (pz < std::min({a.z(), b.z(), c.z()}) || pz > std::max({a.z(), b.z(), c.z()})) continue;
        const int s0 = detail::edge_sign(b.y(), b.z(), c.y(), c.z(), py, pz);
        const int s1 = detail::edge_sign(c.y(), c.z(), a.y(), a.z(), py, pz);
        const int s2 = detail::edge_sign(a.y(), a.z(), b.y(), b.z(), py, pz);
        if (s0 == 0 || s0 != s1 || s1 != s2) continue;
        const double w0 = (c.y() - b.y()) * (pz - b.z()) - (c.z() - b.z()) * (py - b.y());
        const double w1 = (a.y() - c.y()) * (pz - c.z()) - (a.z() - c.z()) * (py - c.y());
        const double w2 = (b.y() - a.y()) * (pz - a.z()) - (b.z() - a.z()) * (py - a.y());
        const double wsum = w0 + w1 + w2;
        if (wsum == 0) continue;
        crossings.push_back((w0 * a.x() + w1 * b.x() + w2 * c.x()) / wsum);
      }
      std::sort(crossings.begin(), crossings.end());
      for (int i = 0; i < resolution; ++i) {
        const double px = bounds.min.x() + (i + 0.5) * step.x();
        const auto above = crossings.end() - std::upper_bound(crossings.begin(), crossings.end(), px);
        if (above % 2 == 1) grid.occupancy[grid.index(i, j, k)] = 1;
      }
    }
  }
  return grid;
}

inline double voxel_iou(const VoxelGrid& a, const VoxelGrid& b) {
  if (a.resolution != b.resolution || !(a.bounds == b.bounds) || a.occupancy.size() != b.occupancy.size()) {
    throw ArgumentError("voxel_iou: grids differ in resolution or bounds");
  }
  std::size_t inter = 0, uni = 0;
  for (std::size_t i = 0; i < a.occupancy.size(); ++i) {
    inter += (a.occupancy[i] && b.occupancy[i]);
    uni += (a.occupancy[i] || b.occupancy[i]);
  }
  return uni == 0 ? 1.0 : double(inter) / double(uni);
}

// ---------------------------------------------------------------------------
// Wavefront OBJ

// Texture coordinates for a sphere direction via its spherical angles.
inline Vec2 sphere_to_uv(const Vec3& u) {
  const double s = std::atan2(u.x(), u.z()) / (2.0 * std::numbers::pi) + 0.5;
  const double t = 1.0 - std::acos(std::clamp(u.y(), -1.0, 1.0)) / std::numbers::pi;
  return {s, t};
}

inline Vec3 uv_to_sphere(const Vec2& uv) {
  const double theta = (uv.x() - 0.5) * 2.0 * std::numbers::pi;
  const double polar = (1.0 - uv.y()) * std::numbers::pi;
  return {std::sin(polar) * std::sin(theta), std::cos(polar), std::sin(polar) * std::cos(theta)};
}

inline std::string write_obj(const TriMesh& mesh) {
  mesh.validate();
  std::ostringstream out;
  out << "# imr-obj 1\n";
  out << std::setprecision(17);
  for (const auto& v : mesh.vertices) out << "v " << v.x() << ' ' << v.y() << ' ' << v.z() << '\n';
  for (const auto& u : mesh.sphere_coords) {
    const Vec2 uv = sphere_to_uv(u);
    out << "vt " << uv.x() << ' ' << uv.y() << '\n';
  }
  for (const Face& f : mesh.faces) {
    out << "f " << f[0] + 1 << '/' << f[0] + 1 << ' ' << f[1] + 1 << '/' << f[1] + 1 << ' ' << f[2] + 1 << '/'
        << f[2] + 1 << '\n';
  }
  return out.str();
}

// Parses v / vt / f records. Faces with more than three corners are fanned.
// When faces reference texture coordinates the sphere coordinates are
// recovered from them, otherwise they are the normalized directions from the
// vertex centroid.
inline TriMesh read_obj(std::istream& in) {
  TriMesh mesh;
  std::vector<Vec2> uvs;
  std::vector<int> vertex_uv;
  std::string line;
  int lineno = 0;
  auto fail = [&](const std::string& why) {
    throw ParseError(detail::concat("obj line ", lineno, ": ", why));
  };
  auto resolve = [&](long idx, std::size_t count) -> std::size_t {
    if (idx > 0 && static_cast<std::size_t>(idx) <= count) return static_cast<std::size_t>(idx - 1);
    if (idx < 0 && static_cast<std::size_t>(-idx) <= count) return count - static_cast<std::size_t>(-idx);
    fail(detail::concat("index ", idx, " out of range"));
    return 0;
  };
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    std::istringstream ls(line);
    std::string tag;
    if (!(ls >> tag) || tag[0] == '#') continue;
    if (tag == "v") {
      double x, y, z;
      if (!(ls >> x >> y >> z)) fail("malformed vertex record");
      mesh.vertices.emplace_back(x, y, z);
      vertex_uv.push_back(-1);
    } else if (tag == "vt") {
      double s, t;
      if (!(ls >> s >> t)) fail("malformed texture coordinate record");
      uvs.emplace_back(s, t);
    } else if (tag == "f") {
      std::vector<std::size_t> corners;
      std::string tok;
      while (ls >> tok) {
        long vi = 0, ti = 0;
        const auto slash = tok.find('/');
        try {
          std::size_t used = 0;
          vi = std::stol(tok.substr(0, slash), &used);
          if (used != (slash == std::string::npos ? tok.size() : slash)) fail("malformed face corner '" + tok + "'");
          if (slash != std::string::npos) {
            const auto slash2 = tok.find('/', slash + 1);
            const std::string t = tok.substr(slash + 1, slash2 == std::string::npos ? std::string::npos : slash2 - slash - 1);
            if (!t.empty()) ti = std::stol(t);
          }
        } catch (const std::logic_error&) {
          fail("malformed face corner '" + tok + "'");
        }
        const std::size_t v = resolve(vi, mesh.vertices.size());
        if (ti != 0) vertex_uv[v] = static_cast<int>(resolve(ti, uvs.size()));
        corners.push_back(v);
      }
      if (corners.size() < 3) fail("face with fewer than 3 corners");
      for (std::size_t k = 1; k + 1 < corners.size(); ++k) {
        mesh.faces.push_back({static_cast<std::uint32_t>(corners[0]), static_cast<std::uint32_t>(corners[k]),
                              static_cast<std::uint32_t>(corners[k + 1])});
      }
    }
  }
  if (mesh.faces.empty()) warn("obj: no faces found; mesh has ", mesh.vertices.size(), " vertices and 0 faces");
  const bool have_uv = !mesh.vertices.empty() &&
                       std::all_of(vertex_uv.begin(), vertex_uv.end(), [](int i) { return i >= 0; });
  Vec3 centroid = Vec3::Zero();
  for (const auto& v : mesh.vertices) centroid += v;
  if (!mesh.vertices.empty()) centroid /= static_cast<double>(mesh.vertices.size());
  for (std::size_t i = 0; i < mesh.vertices.size(); ++i) {
    if (have_uv) {
      mesh.sphere_coords.push_back(uv_to_sphere(uvs[static_cast<std::size_t>(vertex_uv[i])]));
    } else {
      const Vec3 d = mesh.vertices[i] - centroid;
      mesh.sphere_coords.push_back(d.norm() > 0 ? Vec3(d.normalized()) : Vec3(0, 0, 1));
    }
  }
  return mesh;
}

inline TriMesh read_obj_string(const std::string& text) {
  std::istringstream in(text);
  return read_obj(in);
}

inline TriMesh load_obj(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open OBJ file " + path);
  return read_obj(in);
}

inline void save_obj(const TriMesh& mesh, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write OBJ file " + path);
  out << write_obj(mesh);
}

}  // namespace imr
