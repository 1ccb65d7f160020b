#include <gtest/gtest.h>

#include <random>
#include <sstream>

#include "imr/evaluation.hpp"

using namespace imr;

namespace {

FitState single_view_fit(std::uint64_t seed, const WeakPerspectiveCamera& cam) {
  FitState st;
  st.shape = ShapeSpace::create(seed, 4, 16);
  st.texture = TextureSpace::create(seed + 1, 4, 8);
  ObjectState o;
  o.z_s = LatentCode::zeros(4);
  o.z_t = LatentCode::zeros(4);
  o.views = {0};
  st.objects.push_back(o);
  ViewState v;
  v.instance = 0;
  v.hypotheses.cameras = {cam.clone(false)};
  v.hypotheses.logits = ad::Tensor::zeros({1});
  st.views.push_back(v);
  return st;
}

KeypointSet keypoints_on(const FitState& st, std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  KeypointSet k;
  for (std::size_t i = 0; i < n; ++i) {
    const Vec3 u = detail::random_sphere_point(rng);
    k.canonical.push_back(u);
    k.observed.push_back(project(st.camera(0), eval_shape(st.shape, u, st.objects[0].z_s)));
    k.visible.push_back(true);
  }
  return k;
}

WeakPerspectiveCamera camera_at(double az_deg, double el_deg, double s = 20) {
  return WeakPerspectiveCamera::make(s, Vec2(32, 32), view_rotation(az_deg * M_PI / 180, el_deg * M_PI / 180));
}

}  // namespace

TEST(EvalReport, MeanIsArithmeticMean) {
  EvalReport r;
  r.metric = "pck_t";
  r.add("a", 10);
  r.add("b", 40);
  r.add("c", 100);
  EXPECT_DOUBLE_EQ(r.mean, 50.0);
  std::ostringstream os;
  r.write_csv(os);
  EXPECT_NE(os.str().find("normalization=max(H,W)"), std::string::npos);
  EXPECT_NE(os.str().find("mean,50"), std::string::npos);
  EXPECT_NE(r.summary().find("mean 50"), std::string::npos);
}

TEST(PckReproject, ExactFitScoresFullAtZeroThreshold) {
  const FitState st = single_view_fit(3, camera_at(30, 20));
  const KeypointSet k = keypoints_on(st, 12, 5);
  EXPECT_DOUBLE_EQ(pck_reproject(st, 0, k, 0.0, 64, 64), 100.0);
  EXPECT_DOUBLE_EQ(pck_reproject(st, 0, k, 0.1, 64, 64), 100.0);
}

TEST(PckReproject, CountsOffsetsAgainstThreshold) {
  const FitState st = single_view_fit(4, camera_at(-70, 15));
  KeypointSet k = keypoints_on(st, 10, 6);
  // keypoint i displaced by i + 0.5 px in a random direction
  std::mt19937_64 rng(7);
  std::uniform_real_distribution<double> ang(0, 2 * M_PI);
  for (std::size_t i = 0; i < k.size(); ++i) {
    const double a = ang(rng);
    k.observed[i] += (double(i) + 0.5) * Vec2(std::cos(a), std::sin(a));
  }
  k.visible[9] = false;
  double last = -1;
  for (double t : {0.0, 0.01, 0.03, 0.05, 0.08, 0.2}) {
    const double tol = t * 64;
    std::size_t expect = 0;
    for (std::size_t i = 0; i < 9; ++i) expect += double(i) + 0.5 <= tol + 1e-9;
    const double p = pck_reproject(st, 0, k, t, 64, 64);
    EXPECT_NEAR(p, 100.0 * double(expect) / 9.0, 1e-9) << t;
    EXPECT_GE(p, last);
    last = p;
  }
}

TEST(PckReproject, FarKeypointsScoreZero) {
  const FitState st = single_view_fit(5, camera_at(10, 30));
  KeypointSet k = keypoints_on(st, 6, 8);
  for (Vec2& x : k.observed) x += Vec2(40, 0);
  EXPECT_DOUBLE_EQ(pck_reproject(st, 0, k, 0.1, 64, 64), 0.0);
}

TEST(PckReproject, RejectsMissingKeypointsAndBadThreshold) {
  const FitState st = single_view_fit(5, camera_at(10, 30));
  KeypointSet k = keypoints_on(st, 3, 8);
  EXPECT_THROW(pck_reproject(st, 0, k, -0.1, 64, 64), ArgumentError);
  k.visible.assign(3, false);
  EXPECT_THROW(pck_reproject(st, 0, k, 0.1, 64, 64), ArgumentError);
}

TEST(TransferKeypoints, SelfTransferStaysWithinOnePixel) {
  const TriMesh m = ellipsoid_mesh(Vec3(0.6, 0.5, 1.0), 3);
  const ViewFit f{m, camera_at(40, 20), 64, 64};
  const Mask mask = hard_mask(m, f.camera, 64, 64);
  std::vector<Vec2> pts;
  for (const Vec2& p : foreground_pixels(mask))
    if (pts.size() < 200) pts.push_back(p + Vec2(0.3, -0.2));
  const auto out = transfer_keypoints(f, f, pts);
  ASSERT_EQ(out.size(), pts.size());
  for (std::size_t i = 0; i < pts.size(); ++i) {
    ASSERT_TRUE(out[i]);
    EXPECT_LE((*out[i] - pts[i]).norm(), 1.0);
  }
}

TEST(TransferKeypoints, TwoViewsOfOneShapeAgreeWithGroundTruth) {
  const TriMesh m = ellipsoid_mesh(Vec3(0.6, 0.5, 1.0), 3);
  const ViewFit a{m, camera_at(30, 20), 64, 64}, b{m, camera_at(80, 25), 64, 64};
  // vertices visible in both views, located by the depth buffers
  const SurfaceBuffers ba = rasterize_surface_coords(m, a.camera, 64, 64), bb = rasterize_surface_coords(m, b.camera, 64, 64);
  const auto da = view_depths(a.camera, m.vertices), db = view_depths(b.camera, m.vertices);
  std::vector<Vec2> src, truth;
  for (std::size_t v = 0; v < m.vertices.size(); ++v) {
    const Vec2 pa = project(a.camera, m.vertices[v]), pb = project(b.camera, m.vertices[v]);
    const auto ra = std::size_t(pa.y()), ca = std::size_t(pa.x()), rb = std::size_t(pb.y()), cb = std::size_t(pb.x());
    if (!ba.is_valid(ra, ca) || !bb.is_valid(rb, cb)) continue;
    if (da[v] < ba.depth[ra * 64 + ca] - 0.02 || db[v] < bb.depth[rb * 64 + cb] - 0.02) continue;
    src.push_back(pa);
    truth.push_back(pb);
  }
  ASSERT_GT(src.size(), 30u);
  const auto out = transfer_keypoints(a, b, src);
  double mean = 0;
  for (std::size_t i = 0; i < src.size(); ++i) {
    ASSERT_TRUE(out[i]);
    mean += (*out[i] - truth[i]).norm();
  }
  EXPECT_LT(mean / double(src.size()), 3.0);
}

TEST(TransferKeypoints, FallbackRadius) {
  const TriMesh m = ellipsoid_mesh(Vec3(0.6, 0.5, 1.0), 2);
  const ViewFit f{m, camera_at(0, 0, 10), 64, 64};
  const Mask mask = hard_mask(m, f.camera, 64, 64);
  // leftmost covered pixel on the centre row, then step outside it
  std::size_t c0 = 64;
  for (std::size_t c = 0; c < 64 && c0 == 64; ++c)
    if (mask.at(32, c)) c0 = c;
  ASSERT_LT(c0, 64u);
  const Vec2 near(double(c0) - 3.5, 32.5), far(double(c0) - 8.0, 32.5);
  const auto out = transfer_keypoints(f, f, {near, far});
  ASSERT_TRUE(out[0]);
  EXPECT_LE((*out[0] - Vec2(double(c0) + 0.5, 32.5)).norm(), 1.0);
  EXPECT_FALSE(out[1]);
}

TEST(TransferKeypoints, EmptyTargetRenderIsAnError) {
  const TriMesh m = ellipsoid_mesh(Vec3(0.6, 0.5, 1.0), 2);
  const ViewFit a{m, camera_at(0, 0), 64, 64};
  const ViewFit off{m, WeakPerspectiveCamera::make(5, Vec2(500, 500), Quat::Identity()), 64, 64};
  EXPECT_THROW(transfer_keypoints(a, off, {Vec2(32, 32)}), DataError);
}

TEST(PckTransfer, IdenticalPairScoresFullAndIsMonotone) {
  const TriMesh m = ellipsoid_mesh(Vec3(0.6, 0.5, 1.0), 3);
  const ViewFit f{m, camera_at(-40, 20), 64, 64}, g{m, camera_at(-10, 30), 64, 64};
  KeypointSet ka, kb;
  std::mt19937_64 rng(3);
  for (int i = 0; i < 15; ++i) {
    const std::size_t v = rng() % m.vertices.size();
    ka.canonical.push_back(m.sphere_coords[v]);
    kb.canonical.push_back(m.sphere_coords[v]);
    ka.observed.push_back(project(f.camera, m.vertices[v]));
    kb.observed.push_back(project(g.camera, m.vertices[v]));
    const bool vis = view_depths(f.camera, {m.vertices[v]})[0] > 0 && view_depths(g.camera, {m.vertices[v]})[0] > 0;
    ka.visible.push_back(vis);
    kb.visible.push_back(vis);
  }
  const EvalReport self = pck_transfer({{"self", &f, &f, &ka, &ka}}, 0.1);
  EXPECT_DOUBLE_EQ(self.mean, 100.0);
  EXPECT_DOUBLE_EQ(pck_transfer({{"self", &f, &f, &ka, &ka}}, 0.05).mean, 100.0);
  double last = -1;
  for (double t : {0.0, 0.02, 0.05, 0.1, 0.3}) {
    const double p = pck_transfer({{"ab", &f, &g, &ka, &kb}, {"ba", &g, &f, &kb, &ka}}, t).mean;
    EXPECT_GE(p, last);
    EXPECT_GE(p, 0.0);
    EXPECT_LE(p, 100.0);
    last = p;
  }
}

TEST(PckTransfer, NoSharedKeypointsIsAnError) {
  const TriMesh m = ellipsoid_mesh(Vec3(0.6, 0.5, 1.0), 2);
  const ViewFit f{m, camera_at(0, 10), 64, 64};
  KeypointSet a, b;
  a.canonical = b.canonical = {Vec3::UnitX(), Vec3::UnitY()};
  a.observed = b.observed = {Vec2(30, 30), Vec2(31, 31)};
  a.visible = {true, false};
  b.visible = {false, true};
  EXPECT_THROW(pck_transfer({{"x", &f, &f, &a, &b}}, 0.1), ArgumentError);
}

TEST(ReconstructionIou, IdenticalMeshesScoreOne) {
  const TriMesh m = ellipsoid_mesh(Vec3(0.6, 0.5, 1.0), 3);
  const EvalReport r = reconstruction_iou({m, m}, {m, m});
  EXPECT_DOUBLE_EQ(r.mean, 1.0);
  EXPECT_EQ(r.total, 2u);
}

TEST(ReconstructionIou, SquashedEllipsoidMatchesVolumeRatio) {
  // the squashed solid lies inside the original, so IoU is the volume ratio 0.7
  const TriMesh a = ellipsoid_mesh(Vec3(0.6, 0.5, 1.0), 4);
  const TriMesh b = ellipsoid_mesh(Vec3(0.6, 0.5, 0.7), 4);
  const double iou = reconstruction_iou({a}, {b}).mean;
  EXPECT_LT(iou, 1.0);
  EXPECT_GT(iou, 0.5);
  EXPECT_NEAR(iou, 0.7, 0.05);
}

TEST(ReconstructionIou, RejectsMismatchedLists) {
  const TriMesh m = ellipsoid_mesh(Vec3(0.6, 0.5, 1.0), 2);
  EXPECT_THROW(reconstruction_iou({m}, {m, m}), ArgumentError);
  EXPECT_THROW(reconstruction_iou({}, {}), ArgumentError);
}
