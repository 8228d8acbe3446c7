#include <cmath>
#include <numbers>
#include <random>

#include <gtest/gtest.h>

#include "dvgaze/geometry.hpp"

using namespace dvgaze;
using namespace dvgaze::geom;

namespace {

constexpr double kPi = std::numbers::pi;

Vec3 random_unit(std::mt19937_64& gen) {
    std::normal_distribution<double> n;
    Vec3 v(n(gen), n(gen), n(gen));
    return v.normalized();
}

Mat3 random_rotation(std::mt19937_64& gen) {
    std::uniform_real_distribution<double> u(-kPi, kPi);
    return rotation_z(u(gen)) * rotation_y(u(gen)) * rotation_x(u(gen));
}

// Camera on a horizontal circle around the origin, looking at it.
CameraPose orbit_camera(double azimuth_deg, double dist) {
    const double a = deg2rad(azimuth_deg);
    const Vec3 center(dist * std::sin(a), 0.0, -dist * std::cos(a));
    const Vec3 z = (-center).normalized();
    const Vec3 y(0, 1, 0);
    const Vec3 x = y.cross(z).normalized();
    CameraPose p;
    p.rotation.row(0) = x.transpose();
    p.rotation.row(1) = z.cross(x).transpose();
    p.rotation.row(2) = z.transpose();
    p.translation = -p.rotation * center;
    return p;
}

void expect_vec_near(const Vec3& a, const Vec3& b, double tol) {
    for (int i = 0; i < 3; ++i) EXPECT_NEAR(a[i], b[i], tol) << "component " << i;
}

}  // namespace

TEST(Angles, StraightAhead) { expect_vec_near(angles_to_vector({0, 0}).direction, Vec3(0, 0, -1), 1e-15); }

TEST(Angles, PitchDown) { expect_vec_near(angles_to_vector({kPi / 2, 0}).direction, Vec3(0, -1, 0), 1e-15); }

TEST(Angles, YawQuarter) { expect_vec_near(angles_to_vector({0, kPi / 2}).direction, Vec3(-1, 0, 0), 1e-15); }

TEST(Angles, UnitNormEverywhere) {
    std::mt19937_64 gen(3);
    std::uniform_real_distribution<double> u(-kPi, kPi);
    for (int i = 0; i < 1000; ++i) EXPECT_NEAR(angles_to_vector({u(gen), u(gen)}).direction.norm(), 1.0, 1e-12);
}

TEST(Angles, InverseExamples) {
    const GazeAngles a = vector_to_angles({Vec3(0, 0, -1)});
    EXPECT_DOUBLE_EQ(a.pitch, 0.0);
    EXPECT_DOUBLE_EQ(a.yaw, 0.0);
    const GazeAngles b = vector_to_angles({Vec3(0, 1, 0)});
    EXPECT_NEAR(b.pitch, -kPi / 2, 1e-15);
    EXPECT_EQ(b.yaw, 0.0);
}

TEST(Angles, RoundtripRandomUnitVectors) {
    std::mt19937_64 gen(11);
    for (int i = 0; i < 1000; ++i) {
        const Vec3 v = random_unit(gen);
        expect_vec_near(angles_to_vector(vector_to_angles({v})).direction, v, 1e-9);
    }
}

TEST(AngularError, Examples) {
    const GazeVector a{Vec3(0, 0, -1)}, b{Vec3(1, 0, 0)}, c{Vec3(0, 0, 1)};
    EXPECT_DOUBLE_EQ(angular_error(a, a), 0.0);
    EXPECT_NEAR(angular_error(a, b), 90.0, 1e-12);
    EXPECT_NEAR(angular_error(a, c), 180.0, 1e-12);
}

TEST(AngularError, SymmetricAndTriangle) {
    std::mt19937_64 gen(5);
    for (int i = 0; i < 500; ++i) {
        const GazeVector a{random_unit(gen)}, b{random_unit(gen)}, c{random_unit(gen)};
        EXPECT_DOUBLE_EQ(angular_error(a, b), angular_error(b, a));
        EXPECT_LE(angular_error(a, c), angular_error(a, b) + angular_error(b, c) + 1e-9);
        EXPECT_GE(angular_error(a, b), 0.0);
        EXPECT_LE(angular_error(a, b), 180.0);
    }
}

TEST(Rectification, AlreadyNormalised) {
    const auto r = build_rectification({}, {}, {}, Vec3(0, 0, 0.6), 0.6);
    EXPECT_TRUE(r.scale.isApprox(Mat3::Identity(), 1e-15));
    EXPECT_TRUE(r.rotation.isApprox(Mat3::Identity(), 1e-15));
}

TEST(Rectification, ScaleFromDistance) {
    const auto r = build_rectification({}, {}, {}, Vec3(0, 0, 1.2), 0.6);
    const Mat3 expected = Eigen::Vector3d(1, 1, 0.5).asDiagonal();
    EXPECT_TRUE(r.scale.isApprox(expected, 1e-15));
}

TEST(Rectification, AlignsReferencePoint) {
    const Vec3 ref(0.1, 0.05, 0.6);
    const auto r = build_rectification({}, {}, {}, ref, 0.6);
    const Vec3 q = r.rotation * ref;
    EXPECT_LT(std::atan2(std::hypot(q.x(), q.y()), q.z()), 1e-9);
    EXPECT_NEAR(q.z(), ref.norm(), 1e-12);
    EXPECT_TRUE(is_rotation(r.rotation));
    EXPECT_NEAR(r.rotation.determinant(), 1.0, 1e-12);
}

TEST(Rectification, CancelsHeadRoll) {
    HeadPose head;
    head.rotation = rotation_z(deg2rad(20));
    const auto r = build_rectification({}, {}, head, Vec3(0, 0, 0.6), 0.6);
    // Virtual x-axis follows the rolled head x-axis.
    expect_vec_near(r.rotation.row(0).transpose(), head.rotation.col(0), 1e-12);
}

TEST(Rectification, AlignmentOnRandomInputs) {
    std::mt19937_64 gen(8);
    std::uniform_real_distribution<double> u(-0.3, 0.3), depth(0.3, 2.0);
    for (int i = 0; i < 500; ++i) {
        CameraPose cam;
        cam.rotation = random_rotation(gen);
        HeadPose head;
        head.rotation = cam.rotation.transpose() * rotation_y(u(gen)) * rotation_x(u(gen));
        const Vec3 ref(u(gen), u(gen), depth(gen));
        const auto r = build_rectification(cam, {}, head, ref, 0.6);
        const Vec3 q = r.rotation * ref;
        EXPECT_NEAR(q.x(), 0.0, 1e-12);
        EXPECT_NEAR(q.y(), 0.0, 1e-12);
        EXPECT_GT(q.z(), 0.0);
    }
}

TEST(Rectification, DegenerateReferencePoint) {
    EXPECT_THROW(build_rectification({}, {}, {}, Vec3::Zero(), 0.6), DegenerateGeometryError);
    EXPECT_THROW(build_rectification({}, {}, {}, Vec3(0, 0, -1), 0.6), DegenerateGeometryError);
}

TEST(Rectification, RejectsNonOrthonormalRotation) {
    CameraPose cam;
    cam.rotation(0, 0) = 1.001;
    EXPECT_THROW(build_rectification(cam, {}, {}, Vec3(0, 0, 0.6), 0.6), std::invalid_argument);
}

TEST(VirtualRotation, Compositions) {
    CameraPose cam;
    cam.rotation = rotation_y(0.3) * rotation_x(-0.2);
    RectificationTransform rect;
    EXPECT_TRUE(virtual_camera_rotation(rect, cam).isApprox(cam.rotation, 1e-15));
    rect.rotation = rotation_z(0.4);
    EXPECT_TRUE(virtual_camera_rotation(rect, CameraPose{}).isApprox(rect.rotation, 1e-15));

    const Mat3 a = rect.rotation, b = cam.rotation;
    const Mat3 got = virtual_camera_rotation(rect, cam);
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) {
            double s = 0.0;
            for (int k = 0; k < 3; ++k) s += a(i, k) * b(k, j);
            EXPECT_NEAR(got(i, j), s, 1e-15);
        }
    EXPECT_TRUE(is_rotation(got));
}

// Cameras sit at face height, as in the synthetic rigs. The virtual cameras
// converge on the reference point, so rows agree only near it: the residual
// scales with vertical offset times horizontal offset. Test points are eye and
// nose landmarks of a randomly posed head.
TEST(Epipolar, RectifiedRowsAgree) {
    std::mt19937_64 gen(21);
    std::uniform_real_distribution<double> ref_off(-0.03, 0.03), jitter(-0.004, 0.004), pitch(-0.14, 0.14),
        yaw(-0.175, 0.175), half_base(4.0, 30.0);
    const CameraIntrinsics raw{600, 600, 64, 64}, virt{500, 500, 32, 32};
    const std::array<Vec3, 3> landmarks{Vec3(-0.022, -0.008, 0), Vec3(0.022, -0.008, 0), Vec3(0, 0.012, -0.02)};
    double worst = 0.0;
    for (int trial = 0; trial < 1000; ++trial) {
        const double half = half_base(gen);
        const std::array<CameraPose, 2> cams{orbit_camera(-half, 0.8), orbit_camera(half, 0.8)};
        HeadPose head;
        head.rotation = rotation_y(yaw(gen)) * rotation_x(pitch(gen));
        head.translation = Vec3(ref_off(gen), 0.0, ref_off(gen));
        std::array<RectificationTransform, 2> rect;
        for (int v = 0; v < 2; ++v)
            rect[v] = build_rectification(cams[v], raw, head, cams[v].to_camera(head.translation), 0.6);
        for (const Vec3& l : landmarks) {
            const Vec3 p = head.to_world(l + Vec3(jitter(gen), jitter(gen), jitter(gen)));
            const double ya = project_rectified(p, cams[0], rect[0], virt).y();
            const double yb = project_rectified(p, cams[1], rect[1], virt).y();
            worst = std::max(worst, std::abs(ya - yb));
        }
    }
    EXPECT_LT(worst, 0.5);
}

// Points far from the reference row drift apart: the property is local.
TEST(Epipolar, DriftGrowsAwayFromReference) {
    const std::array<CameraPose, 2> cams{orbit_camera(-30, 0.8), orbit_camera(30, 0.8)};
    const CameraIntrinsics raw{600, 600, 64, 64}, virt{500, 500, 32, 32};
    std::array<RectificationTransform, 2> rect;
    for (int v = 0; v < 2; ++v) rect[v] = build_rectification(cams[v], raw, {}, cams[v].to_camera(Vec3::Zero()), 0.6);
    auto dev = [&](const Vec3& p) {
        return std::abs(project_rectified(p, cams[0], rect[0], virt).y() - project_rectified(p, cams[1], rect[1], virt).y());
    };
    EXPECT_LT(dev(Vec3(0, 0.05, 0)), 1e-9);
    EXPECT_LT(dev(Vec3(0.05, 0, 0)), 1e-9);
    EXPECT_GT(dev(Vec3(0.05, 0.05, 0)), dev(Vec3(0.01, 0.01, 0)));
}

TEST(Warp, IdentityIsExact) {
    Image img(9, 7, 3);
    std::mt19937_64 gen(1);
    std::uniform_real_distribution<float> u(0, 1);
    for (auto& v : img.data) v = u(gen);
    const CameraIntrinsics k{100, 100, 3, 4};
    const Image out = warp_image(img, RectificationTransform{Mat3::Identity(), Mat3::Identity()}, k, k);
    EXPECT_EQ(out.data, img.data);
}

TEST(Warp, ScaleFixesPrincipalPoint) {
    Image img(15, 15, 1);
    for (int r = 0; r < 15; ++r)
        for (int c = 0; c < 15; ++c) img.at(r, c, 0) = static_cast<float>(r * 15 + c);
    const CameraIntrinsics k{100, 100, 7, 7};
    RectificationTransform rect;
    rect.scale = Eigen::Vector3d(1, 1, 0.7).asDiagonal();
    const Image out = warp_image(img, rect, k, k);
    EXPECT_FLOAT_EQ(out.at(7, 7, 0), img.at(7, 7, 0));
}

TEST(Warp, OneHotLandsAtMappedPixel) {
    const CameraIntrinsics k{50, 50, 20, 20};
    struct Case {
        Mat3 scale, rotation;
        int u, v;
    };
    const double a = deg2rad(10);
    const std::vector<Case> cases{
        {Eigen::Vector3d(1, 1, 0.5).asDiagonal(), Mat3::Identity(), 24, 17},
        {Mat3::Identity(), rotation_z(a), 26, 23},
    };
    for (const auto& c : cases) {
        Image img(41, 41, 1);
        img.at(c.v, c.u, 0) = 1.0f;
        RectificationTransform rect;
        rect.scale = c.scale;
        rect.rotation = c.rotation;
        const Image out = warp_image(img, rect, k, k);

        // Map by hand: the hot pixel's normalised ray through S*R, then reproject.
        const double nx = (c.u - k.cx) / k.fx, ny = (c.v - k.cy) / k.fy;
        const double rx = c.rotation(0, 0) * nx + c.rotation(0, 1) * ny + c.rotation(0, 2);
        const double ry = c.rotation(1, 0) * nx + c.rotation(1, 1) * ny + c.rotation(1, 2);
        const double rz = (c.rotation(2, 0) * nx + c.rotation(2, 1) * ny + c.rotation(2, 2)) * c.scale(2, 2);
        const double ex = k.fx * rx / rz + k.cx, ey = k.fy * ry / rz + k.cy;

        int br = 0, bc = 0;
        for (int r = 0; r < out.height; ++r)
            for (int col = 0; col < out.width; ++col)
                if (out.at(r, col, 0) > out.at(br, bc, 0)) br = r, bc = col;
        EXPECT_GT(out.at(br, bc, 0), 0.0f);
        EXPECT_LE(std::abs(bc - ex), 0.5 + 1e-9);
        EXPECT_LE(std::abs(br - ey), 0.5 + 1e-9);
    }
}

TEST(Warp, OutOfBoundsFillsZero) {
    Image img(8, 8, 1, 1.0f);
    const CameraIntrinsics k{100, 100, 4, 4};
    RectificationTransform rect;
    rect.scale = Eigen::Vector3d(1, 1, 4.0).asDiagonal();  // shrink by 4
    const Image out = warp_image(img, rect, k, k);
    EXPECT_EQ(out.at(0, 0, 0), 0.0f);
    EXPECT_GT(out.at(4, 4, 0), 0.0f);
}

TEST(Warp, SingularHomography) {
    Image img(4, 4, 1);
    RectificationTransform rect;
    rect.scale = Eigen::Vector3d(1, 1, 0).asDiagonal();
    EXPECT_THROW(warp_image(img, rect, {}, {}), DegenerateGeometryError);
}

TEST(Triangulate, RecoversRandomPoints) {
    std::mt19937_64 gen(13);
    std::uniform_real_distribution<double> off(-0.2, 0.2), base(5.0, 60.0), dist(0.4, 1.5), focal(300, 900);
    for (int i = 0; i < 1000; ++i) {
        const double half = base(gen) / 2;
        Camera a{orbit_camera(-half, dist(gen)), {focal(gen), focal(gen), 64, 48}};
        Camera b{orbit_camera(half, dist(gen)), {focal(gen), focal(gen), 64, 48}};
        const Vec3 p(off(gen), off(gen), off(gen));
        const Triangulation t = triangulate(a.project(p), b.project(p), a, b);
        EXPECT_LT((t.point - p).norm(), 1e-6);
        EXPECT_LT(t.residual_px, 1e-6);
    }
}

TEST(Triangulate, PointOnBaselineIsDegenerate) {
    Camera a{orbit_camera(-10, 0.8), {}}, b{orbit_camera(10, 0.8), {}};
    // Both rays run along the baseline, so they coincide.
    const Vec3 p = 0.5 * (a.pose.center() + b.pose.center());
    EXPECT_THROW(triangulate(a.project(p), b.project(p), a, b), DegenerateGeometryError);
}

TEST(Triangulate, NoisyResidualReported) {
    Camera a{orbit_camera(-15, 0.8), {600, 600, 64, 64}}, b{orbit_camera(15, 0.8), {600, 600, 64, 64}};
    const Vec3 p(0.01, -0.02, 0.03);
    const Triangulation clean = triangulate(a.project(p), b.project(p), a, b);
    const Triangulation noisy = triangulate(a.project(p) + Vec2(0.5, -0.5), b.project(p) + Vec2(-0.5, 0.5), a, b);
    EXPECT_LT(clean.residual_px, 1e-9);
    EXPECT_GT(noisy.residual_px, clean.residual_px);
    EXPECT_GT(noisy.residual_px, 1e-3);
}

TEST(GazeOrigin, TargetStraightAheadGivesZero) {
    Camera a{orbit_camera(-15, 0.8), {600, 600, 64, 64}}, b{orbit_camera(15, 0.8), {600, 600, 64, 64}};
    const CameraRig rig{{a, b}};
    const Vec3 nose(0.01, 0.02, -0.03);
    const std::vector<Vec2> la{a.project(nose)}, lb{b.project(nose)};
    // Target on the line through the nose opposite to frame A's optical axis.
    const std::array<Mat3, 2> rots{a.pose.rotation, b.pose.rotation};
    const Vec3 target = nose - 0.5 * a.pose.rotation.row(2).transpose();
    const auto r = recompute_gaze_origin(la, lb, rig, rots, 0, target);
    EXPECT_NEAR(r.gaze[0].pitch, 0.0, 1e-9);
    EXPECT_NEAR(r.gaze[0].yaw, 0.0, 1e-9);
    EXPECT_LT((r.origin - nose).norm(), 1e-9);
}

TEST(GazeOrigin, IdenticalFramesGiveIdenticalAngles) {
    Camera a{orbit_camera(-15, 0.8), {600, 600, 64, 64}}, b{orbit_camera(15, 0.8), {600, 600, 64, 64}};
    const Vec3 nose(0, 0, 0);
    const std::vector<Vec2> la{a.project(nose)}, lb{b.project(nose)};
    const std::array<Mat3, 2> rots{Mat3::Identity(), Mat3::Identity()};
    const auto r = recompute_gaze_origin(la, lb, CameraRig{{a, b}}, rots, 0, Vec3(0.1, 0.2, -1));
    EXPECT_DOUBLE_EQ(r.gaze[0].pitch, r.gaze[1].pitch);
    EXPECT_DOUBLE_EQ(r.gaze[0].yaw, r.gaze[1].yaw);
}

TEST(GazeOrigin, RandomScenesAreConsistent) {
    std::mt19937_64 gen(17);
    std::uniform_real_distribution<double> off(-0.05, 0.05);
    for (int i = 0; i < 100; ++i) {
        Camera a{orbit_camera(-20, 0.8), {600, 600, 64, 64}}, b{orbit_camera(25, 0.7), {600, 600, 64, 64}};
        const Vec3 nose(off(gen), off(gen), off(gen));
        std::vector<Vec2> la{Vec2(1, 1), a.project(nose)}, lb{Vec2(2, 2), b.project(nose)};
        const std::array<Mat3, 2> rots{random_rotation(gen), random_rotation(gen)};
        const Vec3 target(off(gen) * 10, off(gen) * 10, -1.0);
        const auto r = recompute_gaze_origin(la, lb, CameraRig{{a, b}}, rots, 1, target);
        EXPECT_LT(consistency_residual(r.gaze[0], r.gaze[1], rots[0], rots[1]), 1e-9);
    }
}

TEST(GazeOrigin, BadIndex) {
    const std::vector<Vec2> one{Vec2(0, 0)};
    const std::array<Mat3, 2> rots{Mat3::Identity(), Mat3::Identity()};
    EXPECT_THROW(recompute_gaze_origin(one, one, CameraRig{}, rots, 3, Vec3(0, 0, -1)), std::out_of_range);
}

TEST(Consistency, Examples) {
    const Mat3 i = Mat3::Identity();
    EXPECT_DOUBLE_EQ(consistency_residual({0.1, 0.2}, {0.1, 0.2}, i, i), 0.0);
    // (0,0,-1) vs (0,0,1): yaw pi turns the straight-ahead vector around.
    EXPECT_NEAR(consistency_residual({0, 0}, {0, kPi}, i, i), 2.0, 1e-12);

    const Mat3 ra = rotation_y(0.3), rb = rotation_x(-0.2) * rotation_y(-0.1);
    const GazeAngles ga{0.15, -0.25};
    const GazeAngles gb = vector_to_angles({rb * ra.transpose() * angles_to_vector(ga).direction});
    EXPECT_LT(consistency_residual(ga, gb, ra, rb), 1e-9);
}

// A change of world frame by W maps world->camera rotations R to R*W^T.
// Rotating both camera frames by W instead (W*R) moves the gazes with them.
TEST(Consistency, FrameInvariance) {
    std::mt19937_64 gen(4);
    std::uniform_real_distribution<double> u(-1, 1);
    for (int i = 0; i < 200; ++i) {
        const Mat3 ra = random_rotation(gen), rb = random_rotation(gen), w = random_rotation(gen);
        const GazeAngles ga{u(gen), u(gen)}, gb{u(gen), u(gen)};
        const double base = consistency_residual(ga, gb, ra, rb);
        EXPECT_NEAR(consistency_residual(ga, gb, ra * w.transpose(), rb * w.transpose()), base, 1e-9);
        const GazeAngles wa = vector_to_angles({w * angles_to_vector(ga).direction});
        const GazeAngles wb = vector_to_angles({w * angles_to_vector(gb).direction});
        EXPECT_NEAR(consistency_residual(wa, wb, w * ra, w * rb), base, 1e-9);
    }
}

TEST(WorldAverage, Examples) {
    const Mat3 i = Mat3::Identity();
    const GazeAngles g{0.2, -0.3};
    expect_vec_near(world_average_gaze(g, g, i, i).direction, angles_to_vector(g).direction, 1e-12);

    const GazeAngles gx = vector_to_angles({Vec3(1, 0, 0)}), gy = vector_to_angles({Vec3(0, 1, 0)});
    expect_vec_near(world_average_gaze(gx, gy, i, i).direction, Vec3(1 / std::sqrt(2.0), 1 / std::sqrt(2.0), 0), 1e-12);

    EXPECT_THROW(world_average_gaze({0, 0}, {0, kPi}, i, i), UndefinedAverageError);
}
