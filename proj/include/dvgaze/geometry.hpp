#pragma once

// Camera, rectification, epipolar and gaze-direction math.
//
// Conventions used everywhere in dvgaze:
//  * Camera frames are x right, y down, z forward.
//  * CameraPose maps world to camera: p_cam = R p_world + t.
//  * HeadPose maps head to world: p_world = R_h p_head + t_h. The face looks
//    along -z of its own frame, so an identity head faces a camera at the
//    origin.
//  * Gaze angles (pitch, yaw) map to x = -cos(pitch) sin(yaw),
//    y = -sin(pitch), z = -cos(pitch) cos(yaw); (0, 0) looks back into the
//    camera.
//  * Pixel centres sit at integer coordinates.

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "dvgaze/errors.hpp"
#include "dvgaze/image.hpp"

namespace dvgaze::geom {

using Mat3 = Eigen::Matrix3d;
using Vec3 = Eigen::Vector3d;
using Vec2 = Eigen::Vector2d;

inline constexpr double kOrthonormalTolerance = 1e-9;
inline constexpr double kTriangulationConditionLimit = 1e12;
inline constexpr double kDefaultNormDistance = 0.6;
inline constexpr double kDefaultVirtualFocal = 500.0;

inline double deg2rad(double deg) { return deg * std::numbers::pi / 180.0; }
inline double rad2deg(double rad) { return rad * 180.0 / std::numbers::pi; }

inline bool is_rotation(const Mat3& r, double tol = kOrthonormalTolerance) {
    const double ortho = (r.transpose() * r - Mat3::Identity()).cwiseAbs().maxCoeff();
    return ortho < tol && std::abs(r.determinant() - 1.0) < tol;
}

inline void require_rotation(const Mat3& r, const char* what) {
    if (!is_rotation(r)) throw std::invalid_argument(std::string(what) + " is not a proper rotation");
}

inline Mat3 rotation_x(double a) {
    Mat3 r;
    r << 1, 0, 0, 0, std::cos(a), -std::sin(a), 0, std::sin(a), std::cos(a);
    return r;
}
inline Mat3 rotation_y(double a) {
    Mat3 r;
    r << std::cos(a), 0, std::sin(a), 0, 1, 0, -std::sin(a), 0, std::cos(a);
    return r;
}
inline Mat3 rotation_z(double a) {
    Mat3 r;
    r << std::cos(a), -std::sin(a), 0, std::sin(a), std::cos(a), 0, 0, 0, 1;
    return r;
}

struct CameraPose {
    Mat3 rotation = Mat3::Identity();
    Vec3 translation = Vec3::Zero();

    Vec3 to_camera(const Vec3& world) const { return rotation * world + translation; }
    Vec3 center() const { return -rotation.transpose() * translation; }
};

struct HeadPose {
    Mat3 rotation = Mat3::Identity();
    Vec3 translation = Vec3::Zero();

    Vec3 to_world(const Vec3& head) const { return rotation * head + translation; }
};

struct CameraIntrinsics {
    double fx = kDefaultVirtualFocal;
    double fy = kDefaultVirtualFocal;
    double cx = 0.0;
    double cy = 0.0;

    Mat3 matrix() const {
        Mat3 k;
        k << fx, 0, cx, 0, fy, cy, 0, 0, 1;
        return k;
    }
    Vec2 project(const Vec3& cam_point) const {
        return {fx * cam_point.x() / cam_point.z() + cx, fy * cam_point.y() / cam_point.z() + cy};
    }
    Vec3 unproject(const Vec2& px) const { return {(px.x() - cx) / fx, (px.y() - cy) / fy, 1.0}; }
    void validate() const {
        if (!(fx > 0.0) || !(fy > 0.0)) throw std::invalid_argument("CameraIntrinsics: focal lengths must be positive");
    }
};

struct Camera {
    CameraPose pose;
    CameraIntrinsics intrinsics;

    Vec2 project(const Vec3& world) const { return intrinsics.project(pose.to_camera(world)); }
};

struct CameraRig {
    std::array<Camera, 2> views;
};

struct RectificationTransform {
    Mat3 scale = Mat3::Identity();
    Mat3 rotation = Mat3::Identity();
    Vec3 reference_point = Vec3(0, 0, kDefaultNormDistance);
    double norm_distance = kDefaultNormDistance;

    // M = S * R_rec.
    Mat3 matrix() const { return scale * rotation; }
};

struct GazeAngles {
    double pitch = 0.0;
    double yaw = 0.0;
};

struct GazeVector {
    Vec3 direction = Vec3(0, 0, -1);
};

inline GazeVector angles_to_vector(const GazeAngles& g) {
    const double cp = std::cos(g.pitch);
    return {Vec3(-cp * std::sin(g.yaw), -std::sin(g.pitch), -cp * std::cos(g.yaw))};
}

inline GazeAngles vector_to_angles(const GazeVector& v) {
    const Vec3& d = v.direction;
    const double horizontal = std::hypot(d.x(), d.z());
    GazeAngles g;
    g.pitch = std::atan2(-d.y(), horizontal);
    // Straight up/down: yaw is arbitrary, pin it to zero.
    g.yaw = horizontal < 1e-15 ? 0.0 : std::atan2(-d.x(), -d.z());
    return g;
}

// Angle between two unit vectors in degrees, in [0, 180].
inline double angular_error(const GazeVector& a, const GazeVector& b) {
    const double c = std::clamp(a.direction.dot(b.direction), -1.0, 1.0);
    return rad2deg(std::acos(c));
}

// Normalising transform for one view: the virtual camera looks straight at
// `reference_point` (camera coordinates) from `norm_distance`, with its x-axis
// following the head x-axis so head roll is removed.
inline RectificationTransform build_rectification(const CameraPose& cam, const CameraIntrinsics& intr,
                                                  const HeadPose& head, const Vec3& reference_point,
                                                  double norm_distance = kDefaultNormDistance) {
    intr.validate();
    require_rotation(cam.rotation, "camera rotation");
    require_rotation(head.rotation, "head rotation");
    if (!(norm_distance > 0.0)) throw std::invalid_argument("build_rectification: norm_distance must be positive");
    const double dist = reference_point.norm();
    if (!(dist > 1e-12) || !(reference_point.z() > 0.0))
        throw DegenerateGeometryError("build_rectification: reference point at or behind the camera");

    const Vec3 forward = reference_point / dist;
    const Vec3 head_x = cam.rotation * head.rotation.col(0);
    Vec3 right = head_x - head_x.dot(forward) * forward;
    if (right.norm() < 1e-9)
        throw DegenerateGeometryError("build_rectification: head x-axis parallel to the viewing ray");
    right.normalize();
    const Vec3 down = forward.cross(right).normalized();

    RectificationTransform rect;
    rect.rotation.row(0) = right.transpose();
    rect.rotation.row(1) = down.transpose();
    rect.rotation.row(2) = forward.transpose();
    rect.scale = Eigen::Vector3d(1.0, 1.0, norm_distance / dist).asDiagonal();
    rect.reference_point = reference_point;
    rect.norm_distance = norm_distance;
    return rect;
}

// World -> virtual camera rotation.
inline Mat3 virtual_camera_rotation(const RectificationTransform& rect, const CameraPose& cam) {
    return rect.rotation * cam.rotation;
}

// Pixel of a world point in the rectified image of a view.
inline Vec2 project_rectified(const Vec3& world, const CameraPose& cam, const RectificationTransform& rect,
                              const CameraIntrinsics& intr_virtual) {
    const Vec3 q = rect.matrix() * cam.to_camera(world);
    return intr_virtual.project(q);
}

// Homography taking raw-image pixels to rectified-image pixels.
inline Mat3 rectification_homography(const RectificationTransform& rect, const CameraIntrinsics& intr_src,
                                     const CameraIntrinsics& intr_virtual) {
    return intr_virtual.matrix() * rect.matrix() * intr_src.matrix().inverse();
}

namespace detail {

inline double snap(double v) {
    const double r = std::round(v);
    return std::abs(v - r) < 1e-9 ? r : v;
}

inline float fetch(const Image& img, int row, int col, int ch) {
    if (row < 0 || col < 0 || row >= img.height || col >= img.width) return 0.0f;
    return img.at(row, col, ch);
}

}  // namespace detail

// Bilinear sample at (x = column, y = row); outside pixels read as zero.
inline void sample_bilinear(const Image& img, double x, double y, std::span<float> out) {
    x = detail::snap(x);
    y = detail::snap(y);
    const double x0f = std::floor(x), y0f = std::floor(y);
    const int x0 = static_cast<int>(x0f), y0 = static_cast<int>(y0f);
    const double ax = x - x0f, ay = y - y0f;
    for (int c = 0; c < img.channels; ++c) {
        const double top = (1 - ax) * detail::fetch(img, y0, x0, c) + ax * detail::fetch(img, y0, x0 + 1, c);
        const double bottom =
            (1 - ax) * detail::fetch(img, y0 + 1, x0, c) + ax * detail::fetch(img, y0 + 1, x0 + 1, c);
        out[c] = static_cast<float>((1 - ay) * top + ay * bottom);
    }
}

// Perspective warp by inverse mapping: every destination pixel is pulled
// through H^-1, H = K_virtual * M * K_src^-1.
inline Image warp_image(const Image& img, const RectificationTransform& rect, const CameraIntrinsics& intr_src,
                        const CameraIntrinsics& intr_virtual, int out_height, int out_width) {
    intr_src.validate();
    intr_virtual.validate();
    const Mat3 h = rectification_homography(rect, intr_src, intr_virtual);
    Eigen::FullPivLU<Mat3> lu(h);
    if (!lu.isInvertible() || !h.allFinite()) throw DegenerateGeometryError("warp_image: singular homography");
    const Mat3 h_inv = lu.inverse();

    Image out(out_height, out_width, img.channels);
    for (int row = 0; row < out_height; ++row) {
        for (int col = 0; col < out_width; ++col) {
            const Vec3 src = h_inv * Vec3(col, row, 1.0);
            if (!(std::abs(src.z()) > 1e-15)) continue;
            std::span<float> px(&out.at(row, col, 0), static_cast<std::size_t>(img.channels));
            sample_bilinear(img, src.x() / src.z(), src.y() / src.z(), px);
        }
    }
    return out;
}

inline Image warp_image(const Image& img, const RectificationTransform& rect, const CameraIntrinsics& intr_src,
                        const CameraIntrinsics& intr_virtual) {
    return warp_image(img, rect, intr_src, intr_virtual, img.height, img.width);
}

struct Triangulation {
    Vec3 point;
    double residual_px = 0.0;  // RMS reprojection error over both views
    double condition = 0.0;
};

// Linear (DLT) two-view triangulation solved by SVD in normalised image
// coordinates.
inline Triangulation triangulate(const Vec2& px_a, const Vec2& px_b, const Camera& cam_a, const Camera& cam_b) {
    Eigen::Matrix4d a;
    const std::array<const Camera*, 2> cams{&cam_a, &cam_b};
    const std::array<Vec2, 2> pxs{px_a, px_b};
    for (int v = 0; v < 2; ++v) {
        const Vec3 n = cams[v]->intrinsics.unproject(pxs[v]);
        Eigen::Matrix<double, 3, 4> p;
        p << cams[v]->pose.rotation, cams[v]->pose.translation;
        a.row(2 * v) = n.x() * p.row(2) - p.row(0);
        a.row(2 * v + 1) = n.y() * p.row(2) - p.row(1);
    }
    Eigen::JacobiSVD<Eigen::Matrix4d> svd(a, Eigen::ComputeFullV);
    const auto& s = svd.singularValues();
    const double condition = s(2) > 0.0 ? s(0) / s(2) : std::numeric_limits<double>::infinity();
    if (!(condition <= kTriangulationConditionLimit))
        throw DegenerateGeometryError("triangulate: viewing rays are parallel (condition " +
                                      std::to_string(condition) + ")");
    const Eigen::Vector4d x = svd.matrixV().col(3);
    if (std::abs(x(3)) < 1e-12 * x.head<3>().norm())
        throw DegenerateGeometryError("triangulate: point at infinity");

    Triangulation t;
    t.point = x.head<3>() / x(3);
    t.condition = condition;
    double sq = 0.0;
    for (int v = 0; v < 2; ++v) sq += (cams[v]->project(t.point) - pxs[v]).squaredNorm();
    t.residual_px = std::sqrt(sq / 2.0);
    return t;
}

struct GazeOriginResult {
    Vec3 origin;                     // triangulated nose, world frame
    std::array<GazeAngles, 2> gaze;  // per rectified virtual camera
    double residual_px = 0.0;
};

// Re-derives per-view gaze labels from a triangulated nose origin so both
// views describe one world-frame ray.
inline GazeOriginResult recompute_gaze_origin(std::span<const Vec2> landmarks_a, std::span<const Vec2> landmarks_b,
                                              const CameraRig& rig, const std::array<Mat3, 2>& virtual_rotations,
                                              std::size_t nose_index, const Vec3& target) {
    if (nose_index >= landmarks_a.size() || nose_index >= landmarks_b.size())
        throw std::out_of_range("recompute_gaze_origin: nose index outside landmark list");
    const Triangulation tri =
        triangulate(landmarks_a[nose_index], landmarks_b[nose_index], rig.views[0], rig.views[1]);
    const Vec3 dir = target - tri.point;
    if (dir.norm() < 1e-12) throw DegenerateGeometryError("recompute_gaze_origin: target coincides with origin");
    const Vec3 world_gaze = dir.normalized();

    GazeOriginResult r;
    r.origin = tri.point;
    r.residual_px = tri.residual_px;
    for (int v = 0; v < 2; ++v) r.gaze[v] = vector_to_angles({virtual_rotations[v] * world_gaze});
    return r;
}

// ||rot_a^T g_a - rot_b^T g_b||: zero iff both views agree in the world frame.
inline double consistency_residual(const GazeAngles& g_a, const GazeAngles& g_b, const Mat3& rot_a,
                                   const Mat3& rot_b) {
    const Vec3 wa = rot_a.transpose() * angles_to_vector(g_a).direction;
    const Vec3 wb = rot_b.transpose() * angles_to_vector(g_b).direction;
    return (wa - wb).norm();
}

inline GazeVector world_average_gaze(const GazeAngles& g_a, const GazeAngles& g_b, const Mat3& rot_a,
                                     const Mat3& rot_b) {
    const Vec3 sum = rot_a.transpose() * angles_to_vector(g_a).direction +
                     rot_b.transpose() * angles_to_vector(g_b).direction;
    if (0.5 * sum.norm() < 1e-9) throw UndefinedAverageError("world_average_gaze: antipodal gazes have no mean");
    return {sum.normalized()};
}

}  // namespace dvgaze::geom
