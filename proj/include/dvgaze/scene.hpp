#pragma once

// Procedural dual-view face scenes: a flat elliptical face with two eye discs,
// pupils shifted by the gaze direction as seen from each camera, and a nose
// marker. Eyes turned too far from a camera are drawn covered.

#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>
#include <cstdint>
#include <string>

#include "dvgaze/errors.hpp"
#include "dvgaze/geometry.hpp"
#include "dvgaze/image.hpp"
#include "dvgaze/rng.hpp"

namespace dvgaze {

struct RigConfig {
    std::string preset = "medium";
    double baseline_angle = 30.0;  // degrees between the two optical axes
    double distance = 0.8;         // meters from the subject

    static RigConfig from_preset(const std::string& name) {
        if (name == "small") return {name, 8.0, 0.8};
        if (name == "medium") return {name, 30.0, 0.8};
        if (name == "long") return {name, 60.0, 0.8};
        throw ConfigError("rig.preset", "unknown preset '" + name + "' (small, medium, long)");
    }

    void validate() const {
        if (!(baseline_angle >= 0.0 && baseline_angle <= 120.0))
            throw ConfigError("rig.baseline_angle", "must be in [0, 120] degrees");
        if (!(distance > 0.0)) throw ConfigError("rig.distance", "must be positive");
    }
};

// Limits of the sampled head and gaze distributions, in degrees and meters.
struct SceneLimits {
    double gaze_pitch = 20.0;
    double gaze_yaw = 25.0;
    double head_pitch = 8.0;
    double head_yaw = 10.0;
    double head_shift = 0.02;        // sideways
    double head_depth_shift = 0.03;  // towards/away from the rig
    double target_near = 0.4;
    double target_far = 1.2;

    void validate() const {
        auto angle = [](double v, const char* key) {
            if (!(v >= 0.0 && v < 90.0)) throw ConfigError(std::string("scene.") + key, "must be in [0, 90) degrees");
        };
        angle(gaze_pitch, "gaze_pitch");
        angle(gaze_yaw, "gaze_yaw");
        angle(head_pitch, "head_pitch");
        angle(head_yaw, "head_yaw");
        if (!(head_shift >= 0.0)) throw ConfigError("scene.head_shift", "must be >= 0");
        if (!(head_depth_shift >= 0.0)) throw ConfigError("scene.head_depth_shift", "must be >= 0");
        if (!(target_near > 0.0 && target_far >= target_near))
            throw ConfigError("scene.target_near", "need 0 < target_near <= target_far");
    }
};

// Canonical face in the head frame (meters). The face plane is z = 0 and the
// face looks towards -z.
struct FaceParams {
    std::array<geom::Vec3, 2> eyes{geom::Vec3(-0.022, -0.008, 0.0), geom::Vec3(0.022, -0.008, 0.0)};
    double eye_radius = 0.009;
    double pupil_radius = 0.0035;
    // Eyeball radius: a 25 degree rotation moves the pupil to the eye rim.
    double iris_gain = 0.009 / std::sin(25.0 * std::numbers::pi / 180.0);
    double eye_tilt = 25.0;  // degrees each eye normal leans outward
    geom::Vec3 nose{0.0, 0.012, -0.02};
    double nose_radius = 0.004;
    double face_half_width = 0.055;
    double face_half_height = 0.07;
};

struct SceneSpec {
    geom::Vec3 gaze_target = geom::Vec3(0, 0, -1);
    geom::HeadPose head_pose;
    FaceParams face;
    std::uint64_t rng_seed = 0;

    geom::Vec3 face_center() const { return head_pose.translation; }
    geom::Vec3 reference_point(const std::string& which) const {
        return which == "nose" ? nose_world() : face_center();
    }
    geom::Vec3 nose_world() const { return head_pose.to_world(face.nose); }
    geom::Vec3 eye_world(int i) const { return head_pose.to_world(face.eyes[static_cast<std::size_t>(i)]); }
    // Unit gaze direction (world) from the nose tip to the target.
    geom::Vec3 gaze_direction() const { return (gaze_target - nose_world()).normalized(); }
};

struct RenderConfig {
    int raw_height = 128;
    int raw_width = 128;
    double raw_focal = 600.0;
    int supersample = 2;
    double noise_sigma = 0.02;
    double occlusion_threshold = 40.0;  // degrees
    int out_height = 64;
    int out_width = 64;
    double virtual_focal = 0.0;  // 0: 500 px scaled by out_width / 64
    double norm_distance = geom::kDefaultNormDistance;
    int channels = 3;
    std::string reference = "face_center";  // rectification reference: face_center or nose

    geom::CameraIntrinsics raw_intrinsics() const {
        return {raw_focal, raw_focal, (raw_width - 1) / 2.0, (raw_height - 1) / 2.0};
    }
    geom::CameraIntrinsics virtual_intrinsics() const {
        const double f = virtual_focal > 0.0 ? virtual_focal : geom::kDefaultVirtualFocal * out_width / 64.0;
        return {f, f, (out_width - 1) / 2.0, (out_height - 1) / 2.0};
    }

    void validate() const {
        if (raw_height <= 0 || raw_width <= 0) throw ConfigError("render.raw_height", "raw size must be positive");
        if (out_height <= 0 || out_width <= 0) throw ConfigError("render.out_height", "output size must be positive");
        if (!(raw_focal > 0.0)) throw ConfigError("render.raw_focal", "must be positive");
        if (virtual_focal < 0.0) throw ConfigError("render.virtual_focal", "must be >= 0");
        if (supersample < 1 || supersample > 8) throw ConfigError("render.supersample", "must be in [1, 8]");
        if (!(noise_sigma >= 0.0)) throw ConfigError("render.noise_sigma", "must be >= 0");
        if (!(occlusion_threshold > 0.0 && occlusion_threshold <= 180.0))
            throw ConfigError("render.occlusion_threshold", "must be in (0, 180] degrees");
        if (!(norm_distance > 0.0)) throw ConfigError("render.norm_distance", "must be positive");
        if (channels != 1 && channels != 3) throw ConfigError("render.channels", "must be 1 or 3");
        if (reference != "face_center" && reference != "nose")
            throw ConfigError("render.reference", "must be face_center or nose");
    }
};

// Camera on a horizontal arc around the world origin at face height, looking
// at the origin. azimuth > 0 moves the camera towards +x.
inline geom::CameraPose look_at_origin(double azimuth_deg, double distance) {
    const double a = geom::deg2rad(azimuth_deg);
    const geom::Vec3 center(distance * std::sin(a), 0.0, -distance * std::cos(a));
    const geom::Vec3 forward = -center.normalized();
    const geom::Vec3 right(std::cos(a), 0.0, std::sin(a));
    const geom::Vec3 down = forward.cross(right);
    geom::CameraPose pose;
    pose.rotation.row(0) = right.transpose();
    pose.rotation.row(1) = down.transpose();
    pose.rotation.row(2) = forward.transpose();
    pose.translation = -pose.rotation * center;
    return pose;
}

// View A sits at -baseline/2, view B at +baseline/2.
inline geom::CameraRig build_rig(const RigConfig& rig, const geom::CameraIntrinsics& intr) {
    rig.validate();
    geom::CameraRig r;
    r.views[0] = {look_at_origin(-rig.baseline_angle / 2.0, rig.distance), intr};
    r.views[1] = {look_at_origin(rig.baseline_angle / 2.0, rig.distance), intr};
    return r;
}

// Head yaw/pitch only and no vertical offset: the head x-axis stays
// horizontal, so rectified epipolar lines stay on matching rows.
inline SceneSpec sample_scene(Rng& rng, const RigConfig& rig, const SceneLimits& limits) {
    rig.validate();
    limits.validate();
    SceneSpec s;
    const double head_yaw = geom::deg2rad(rng.uniform(-limits.head_yaw, limits.head_yaw));
    const double head_pitch = geom::deg2rad(rng.uniform(-limits.head_pitch, limits.head_pitch));
    s.head_pose.rotation = geom::rotation_y(head_yaw) * geom::rotation_x(head_pitch);
    s.head_pose.translation = geom::Vec3(rng.uniform(-limits.head_shift, limits.head_shift), 0.0,
                                         rng.uniform(-limits.head_depth_shift, limits.head_depth_shift));
    const geom::GazeAngles g{geom::deg2rad(rng.uniform(-limits.gaze_pitch, limits.gaze_pitch)),
                             geom::deg2rad(rng.uniform(-limits.gaze_yaw, limits.gaze_yaw))};
    const geom::Vec3 dir = s.head_pose.rotation * geom::angles_to_vector(g).direction;
    s.gaze_target = s.nose_world() + rng.uniform(limits.target_near, limits.target_far) * dir;
    s.rng_seed = rng.next_u64();
    return s;
}

// Gaze angles of a scene in its own head frame.
inline geom::GazeAngles head_frame_gaze(const SceneSpec& s) {
    return geom::vector_to_angles({s.head_pose.rotation.transpose() * s.gaze_direction()});
}

// Angle (degrees) between an eye's outward normal and the direction to the
// camera centre.
inline double eye_view_angle(const SceneSpec& s, const geom::CameraPose& cam, int eye) {
    const double tilt = geom::deg2rad(s.face.eye_tilt) * (eye == 0 ? -1.0 : 1.0);
    const geom::Vec3 normal = s.head_pose.rotation * geom::Vec3(std::sin(tilt), 0.0, -std::cos(tilt));
    const geom::Vec3 to_cam = (cam.center() - s.eye_world(eye)).normalized();
    return geom::rad2deg(std::acos(std::clamp(normal.dot(to_cam), -1.0, 1.0)));
}

inline bool eye_visible(const SceneSpec& s, const geom::CameraPose& cam, int eye, double threshold_deg) {
    return eye_view_angle(s, cam, eye) <= threshold_deg;
}

namespace detail {

struct Palette {
    std::array<float, 3> background{0.15f, 0.15f, 0.18f};
    std::array<float, 3> skin{0.80f, 0.62f, 0.50f};
    std::array<float, 3> lid{0.66f, 0.50f, 0.40f};
    std::array<float, 3> sclera{0.96f, 0.96f, 0.94f};
    std::array<float, 3> pupil{0.05f, 0.05f, 0.10f};
    std::array<float, 3> nose{0.55f, 0.25f, 0.25f};
};

}  // namespace detail

// Raw camera image of a scene. `view` selects the noise stream.
inline Image render_view(const SceneSpec& s, const geom::Camera& cam, const RenderConfig& cfg, int view = 0) {
    cfg.validate();
    const detail::Palette pal;
    const geom::CameraIntrinsics& k = cam.intrinsics;
    const geom::Mat3& rc = cam.pose.rotation;
    const geom::Mat3& rh = s.head_pose.rotation;
    const geom::Vec3 center_h = rh.transpose() * (cam.pose.center() - s.head_pose.translation);
    if (!((s.head_pose.translation - cam.pose.center()).dot(rc.row(2).transpose()) > 0.0))
        throw DegenerateGeometryError("render_view: subject behind the camera");

    const geom::Vec3 g_cam = rc * s.gaze_direction();
    struct EyeDraw {
        bool visible;
        geom::Vec2 pupil_px;
        double pupil_r_px;
    };
    std::array<EyeDraw, 2> eyes{};
    for (int e = 0; e < 2; ++e) {
        const geom::Vec3 p = cam.pose.to_camera(s.eye_world(e));
        const double gain = k.fx * s.face.iris_gain / p.z();
        eyes[static_cast<std::size_t>(e)] = {eye_visible(s, cam.pose, e, cfg.occlusion_threshold),
                                             k.project(p) + geom::Vec2(gain * g_cam.x(), gain * g_cam.y()),
                                             k.fx * s.face.pupil_radius / p.z()};
    }
    const geom::Vec3 nose_cam = cam.pose.to_camera(s.nose_world());
    const geom::Vec2 nose_px = k.project(nose_cam);
    const double nose_r_px = k.fx * s.face.nose_radius / nose_cam.z();

    auto shade = [&](double u, double v) -> const std::array<float, 3>& {
        if ((geom::Vec2(u, v) - nose_px).norm() <= nose_r_px) return pal.nose;
        const geom::Vec3 dir_h = rh.transpose() * (rc.transpose() * k.unproject({u, v}));
        if (std::abs(dir_h.z()) < 1e-12) return pal.background;
        const double t = -center_h.z() / dir_h.z();
        if (t <= 0.0) return pal.background;
        const geom::Vec3 hit = center_h + t * dir_h;
        const double ex = hit.x() / s.face.face_half_width, ey = hit.y() / s.face.face_half_height;
        if (ex * ex + ey * ey > 1.0) return pal.background;
        for (int e = 0; e < 2; ++e) {
            if ((hit - s.face.eyes[static_cast<std::size_t>(e)]).norm() > s.face.eye_radius) continue;
            const EyeDraw& d = eyes[static_cast<std::size_t>(e)];
            if (!d.visible) return pal.lid;
            return (geom::Vec2(u, v) - d.pupil_px).norm() <= d.pupil_r_px ? pal.pupil : pal.sclera;
        }
        return pal.skin;
    };

    Image img(cfg.raw_height, cfg.raw_width, cfg.channels);
    const int ss = cfg.supersample;
    const double inv = 1.0 / (ss * ss);
    Rng noise = Rng::derive(s.rng_seed, static_cast<std::uint64_t>(view) + 1);
    for (int row = 0; row < cfg.raw_height; ++row) {
        for (int col = 0; col < cfg.raw_width; ++col) {
            std::array<double, 3> acc{0.0, 0.0, 0.0};
            for (int sy = 0; sy < ss; ++sy)
                for (int sx = 0; sx < ss; ++sx) {
                    const auto& c = shade(col + (sx + 0.5) / ss - 0.5, row + (sy + 0.5) / ss - 0.5);
                    for (int ch = 0; ch < 3; ++ch) acc[static_cast<std::size_t>(ch)] += c[static_cast<std::size_t>(ch)];
                }
            for (double& a : acc) a *= inv;
            if (cfg.channels == 1) {
                double lum = (acc[0] + acc[1] + acc[2]) / 3.0;
                if (cfg.noise_sigma > 0.0) lum += noise.normal(0.0, cfg.noise_sigma);
                img.at(row, col, 0) = static_cast<float>(std::clamp(lum, 0.0, 1.0));
            } else {
                for (int ch = 0; ch < 3; ++ch) {
                    double val = acc[static_cast<std::size_t>(ch)];
                    if (cfg.noise_sigma > 0.0) val += noise.normal(0.0, cfg.noise_sigma);
                    img.at(row, col, ch) = static_cast<float>(std::clamp(val, 0.0, 1.0));
                }
            }
        }
    }
    return img;
}

}  // namespace dvgaze
