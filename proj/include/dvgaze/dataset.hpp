#pragma once

// Rectified dual-view samples, their on-disk layout and loading.
//
// A dataset directory holds manifest.json plus two image files per sample.
// Image files: magic "DVGZ1", uint32 rank, uint32 dims (H, W, C), then
// float32 values, all little-endian.

#include <algorithm>
#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "dvgaze/blocks.hpp"
#include "dvgaze/errors.hpp"
#include "dvgaze/geometry.hpp"
#include "dvgaze/parallel.hpp"
#include "dvgaze/scene.hpp"

namespace dvgaze {

using Json = nlohmann::ordered_json;

inline constexpr int kDatasetVersion = 1;

struct DualViewSample {
    std::string id;
    std::array<Image, 2> images;
    std::array<geom::GazeAngles, 2> gaze;
    std::array<std::array<double, 6>, 2> pose_raw{};
    std::array<geom::Mat3, 2> virtual_rotations{geom::Mat3::Identity(), geom::Mat3::Identity()};
    std::array<geom::RectificationTransform, 2> rect;
    geom::CameraRig rig;
    SceneSpec scene;
    std::array<std::array<bool, 2>, 2> eyes_visible{};  // [view][eye]
    std::array<geom::Vec2, 2> nose_px;                  // nose marker in each rectified image
};

inline std::string sample_id(std::size_t index) {
    std::ostringstream os;
    os << 's' << std::setw(6) << std::setfill('0') << index;
    return os.str();
}

// Renders, rectifies and labels both views of one scene.
inline DualViewSample make_sample(const std::string& id, const SceneSpec& scene, const geom::CameraRig& rig,
                                  const RenderConfig& cfg) {
    DualViewSample s;
    s.id = id;
    s.scene = scene;
    s.rig = rig;
    const geom::CameraIntrinsics virt = cfg.virtual_intrinsics();
    const geom::Vec3 g_world = scene.gaze_direction();
    for (int v = 0; v < 2; ++v) {
        const auto vi = static_cast<std::size_t>(v);
        const geom::Camera& cam = rig.views[vi];
        const Image raw = render_view(scene, cam, cfg, v);
        s.rect[vi] = geom::build_rectification(cam.pose, cam.intrinsics, scene.head_pose,
                                               cam.pose.to_camera(scene.reference_point(cfg.reference)), cfg.norm_distance);
        s.images[vi] = geom::warp_image(raw, s.rect[vi], cam.intrinsics, virt, cfg.out_height, cfg.out_width);
        s.virtual_rotations[vi] = geom::virtual_camera_rotation(s.rect[vi], cam.pose);
        s.gaze[vi] = geom::vector_to_angles({s.virtual_rotations[vi] * g_world});
        s.pose_raw[vi] = nn::pose_feature(s.rect[vi].rotation, cam.pose);
        for (int e = 0; e < 2; ++e)
            s.eyes_visible[vi][static_cast<std::size_t>(e)] = eye_visible(scene, cam.pose, e, cfg.occlusion_threshold);
        s.nose_px[vi] = geom::project_rectified(scene.nose_world(), cam.pose, s.rect[vi], virt);
    }
    return s;
}

inline double epipolar_row_deviation(const DualViewSample& s) { return std::abs(s.nose_px[0].y() - s.nose_px[1].y()); }

inline double label_consistency(const DualViewSample& s) {
    return geom::consistency_residual(s.gaze[0], s.gaze[1], s.virtual_rotations[0], s.virtual_rotations[1]);
}

struct GenerationSpec {
    std::size_t count = 100;
    RigConfig rig;
    RenderConfig render;
    SceneLimits limits;
    std::uint64_t seed = 0;

    void validate() const {
        if (count == 0) throw ConfigError("count", "must be positive");
        rig.validate();
        render.validate();
        limits.validate();
    }
};

// Sample i depends only on (seed, i), so any partition of the work produces
// the same samples.
inline std::vector<DualViewSample> generate_samples(const GenerationSpec& spec, int threads = 1) {
    spec.validate();
    const geom::CameraRig rig = build_rig(spec.rig, spec.render.raw_intrinsics());
    std::vector<DualViewSample> out(spec.count);
    parallel_for(spec.count, threads, [&](std::size_t i) {
        Rng rng = Rng::derive(spec.seed, i);
        out[i] = make_sample(sample_id(i), sample_scene(rng, spec.rig, spec.limits), rig, spec.render);
    });
    return out;
}

// ------------------------------------------------------------------- arrays

struct ArrayFile {
    std::vector<std::uint32_t> dims;
    std::vector<float> values;
};

namespace detail {

inline void put_u32(std::string& buf, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xFFu));
}

inline std::uint32_t get_u32(const unsigned char* p) {
    return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
           (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

inline std::string read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

inline void write_file(const std::filesystem::path& path, const std::string& bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw std::runtime_error("write failed: " + path.string());
}

}  // namespace detail

inline constexpr char kArrayMagic[5] = {'D', 'V', 'G', 'Z', '1'};

inline std::string encode_array(const std::vector<std::uint32_t>& dims, const std::vector<float>& values) {
    std::size_t n = 1;
    for (auto d : dims) n *= d;
    if (n != values.size()) throw ShapeError("encode_array: dims do not match value count");
    std::string buf(kArrayMagic, sizeof kArrayMagic);
    detail::put_u32(buf, static_cast<std::uint32_t>(dims.size()));
    for (auto d : dims) detail::put_u32(buf, d);
    buf.reserve(buf.size() + 4 * values.size());
    for (float v : values) detail::put_u32(buf, std::bit_cast<std::uint32_t>(v));
    return buf;
}

inline ArrayFile decode_array(const std::string& bytes, const std::string& context = "array") {
    auto fail = [&](const std::string& why) { throw FormatError(context + ": " + why); };
    const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
    if (bytes.size() < 9 || std::memcmp(bytes.data(), kArrayMagic, 5) != 0) fail("bad magic");
    ArrayFile a;
    const std::uint32_t rank = detail::get_u32(p + 5);
    if (rank > 8) fail("implausible rank");
    std::size_t off = 9 + 4 * static_cast<std::size_t>(rank);
    if (bytes.size() < off) fail("truncated header");
    std::size_t n = 1;
    for (std::uint32_t i = 0; i < rank; ++i) {
        a.dims.push_back(detail::get_u32(p + 9 + 4 * i));
        n *= a.dims.back();
    }
    if (bytes.size() != off + 4 * n) fail("size does not match dims");
    a.values.resize(n);
    for (std::size_t i = 0; i < n; ++i, off += 4) a.values[i] = std::bit_cast<float>(detail::get_u32(p + off));
    return a;
}

inline void write_image(const std::filesystem::path& path, const Image& img) {
    detail::write_file(path, encode_array({static_cast<std::uint32_t>(img.height), static_cast<std::uint32_t>(img.width),
                                           static_cast<std::uint32_t>(img.channels)},
                                          img.data));
}

inline Image read_image(const std::filesystem::path& path) {
    ArrayFile a = decode_array(detail::read_file(path), path.string());
    if (a.dims.size() != 3) throw FormatError(path.string() + ": expected an H x W x C array");
    Image img(static_cast<int>(a.dims[0]), static_cast<int>(a.dims[1]), static_cast<int>(a.dims[2]));
    img.data = std::move(a.values);
    return img;
}

// ----------------------------------------------------------------- manifest

namespace detail {

inline Json mat_json(const geom::Mat3& m) {
    Json a = Json::array();
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) a.push_back(m(i, j));
    return a;
}

inline Json vec_json(const geom::Vec3& v) { return Json::array({v.x(), v.y(), v.z()}); }

inline geom::Mat3 json_mat(const Json& j) {
    if (!j.is_array() || j.size() != 9) throw FormatError("manifest: expected 9 rotation values");
    geom::Mat3 m;
    for (int i = 0; i < 3; ++i)
        for (int k = 0; k < 3; ++k) m(i, k) = j.at(static_cast<std::size_t>(3 * i + k)).get<double>();
    return m;
}

inline geom::Vec3 json_vec(const Json& j) {
    if (!j.is_array() || j.size() != 3) throw FormatError("manifest: expected a 3-vector");
    return {j[0].get<double>(), j[1].get<double>(), j[2].get<double>()};
}

inline Json intrinsics_json(const geom::CameraIntrinsics& k) {
    return Json{{"fx", k.fx}, {"fy", k.fy}, {"cx", k.cx}, {"cy", k.cy}};
}

inline geom::CameraIntrinsics json_intrinsics(const Json& j) {
    return {j.at("fx").get<double>(), j.at("fy").get<double>(), j.at("cx").get<double>(), j.at("cy").get<double>()};
}

}  // namespace detail

inline Json render_json(const RenderConfig& r) {
    return Json{{"raw_height", r.raw_height},       {"raw_width", r.raw_width},
                {"raw_focal", r.raw_focal},         {"supersample", r.supersample},
                {"noise_sigma", r.noise_sigma},     {"occlusion_threshold", r.occlusion_threshold},
                {"out_height", r.out_height},       {"out_width", r.out_width},
                {"virtual_focal", r.virtual_focal}, {"norm_distance", r.norm_distance},
                {"channels", r.channels},           {"reference", r.reference}};
}

inline Json limits_json(const SceneLimits& l) {
    return Json{{"gaze_pitch", l.gaze_pitch}, {"gaze_yaw", l.gaze_yaw},
                {"head_pitch", l.head_pitch}, {"head_yaw", l.head_yaw},
                {"head_shift", l.head_shift}, {"head_depth_shift", l.head_depth_shift},
                {"target_near", l.target_near}, {"target_far", l.target_far}};
}

struct DatasetStats {
    std::array<double, 2> one_eye_occluded_fraction{0.0, 0.0};  // per view
    double asymmetric_occlusion_fraction = 0.0;  // exactly one eye hidden in each view
    double max_epipolar_row_deviation_px = 0.0;
    double max_label_consistency = 0.0;
    double mean_view_difference = 0.0;  // mean |img_a - img_b| per pixel
};

inline DatasetStats compute_stats(const std::vector<DualViewSample>& samples) {
    DatasetStats st;
    if (samples.empty()) return st;
    std::array<std::size_t, 2> one{0, 0};
    std::size_t both = 0;
    double diff = 0.0;
    for (const auto& s : samples) {
        bool all = true;
        for (std::size_t v = 0; v < 2; ++v) {
            const bool exactly_one = s.eyes_visible[v][0] != s.eyes_visible[v][1];
            one[v] += exactly_one;
            all = all && exactly_one;
        }
        both += all;
        st.max_epipolar_row_deviation_px = std::max(st.max_epipolar_row_deviation_px, epipolar_row_deviation(s));
        st.max_label_consistency = std::max(st.max_label_consistency, label_consistency(s));
        double d = 0.0;
        for (std::size_t i = 0; i < s.images[0].size(); ++i)
            d += std::abs(static_cast<double>(s.images[0].data[i]) - s.images[1].data[i]);
        diff += d / static_cast<double>(s.images[0].size());
    }
    const double n = static_cast<double>(samples.size());
    st.one_eye_occluded_fraction = {static_cast<double>(one[0]) / n, static_cast<double>(one[1]) / n};
    st.asymmetric_occlusion_fraction = static_cast<double>(both) / n;
    st.mean_view_difference = diff / n;
    return st;
}

inline Json sample_json(const DualViewSample& s) {
    Json j;
    j["id"] = s.id;
    j["files"] = Json::array({s.id + "_a.dvgz", s.id + "_b.dvgz"});
    Json gaze = Json::array(), vrot = Json::array(), pose = Json::array(), rrot = Json::array(), rref = Json::array(),
         eyes = Json::array(), nose = Json::array();
    for (std::size_t v = 0; v < 2; ++v) {
        gaze.push_back(Json::array({s.gaze[v].pitch, s.gaze[v].yaw}));
        vrot.push_back(detail::mat_json(s.virtual_rotations[v]));
        pose.push_back(Json(s.pose_raw[v]));
        rrot.push_back(detail::mat_json(s.rect[v].rotation));
        rref.push_back(detail::vec_json(s.rect[v].reference_point));
        eyes.push_back(Json::array({s.eyes_visible[v][0], s.eyes_visible[v][1]}));
        nose.push_back(Json::array({s.nose_px[v].x(), s.nose_px[v].y()}));
    }
    j["gaze"] = gaze;
    j["virtual_rotation"] = vrot;
    j["pose_raw"] = pose;
    j["rect_rotation"] = rrot;
    j["rect_reference"] = rref;
    j["eyes_visible"] = eyes;
    j["nose_px"] = nose;
    j["head_rotation"] = detail::mat_json(s.scene.head_pose.rotation);
    j["head_translation"] = detail::vec_json(s.scene.head_pose.translation);
    j["gaze_target"] = detail::vec_json(s.scene.gaze_target);
    j["nose"] = detail::vec_json(s.scene.nose_world());
    j["noise_seed"] = s.scene.rng_seed;
    return j;
}

inline Json rig_json(const RigConfig& rig, const geom::CameraRig& cams) {
    Json cameras = Json::array();
    for (const auto& c : cams.views)
        cameras.push_back(Json{{"rotation", detail::mat_json(c.pose.rotation)},
                               {"translation", detail::vec_json(c.pose.translation)},
                               {"intrinsics", detail::intrinsics_json(c.intrinsics)}});
    return Json{{"preset", rig.preset},
                {"baseline_angle", rig.baseline_angle},
                {"distance", rig.distance},
                {"cameras", cameras}};
}

inline Json stats_json(const DatasetStats& st) {
    return Json{{"one_eye_occluded_fraction", Json(st.one_eye_occluded_fraction)},
                {"asymmetric_occlusion_fraction", st.asymmetric_occlusion_fraction},
                {"max_epipolar_row_deviation_px", st.max_epipolar_row_deviation_px},
                {"max_label_consistency", st.max_label_consistency},
                {"mean_view_difference", st.mean_view_difference}};
}

inline Json build_manifest(const GenerationSpec& spec, const std::vector<DualViewSample>& samples) {
    Json m;
    m["format"] = "dvgaze-dataset";
    m["version"] = kDatasetVersion;
    m["seed"] = spec.seed;
    m["count"] = samples.size();
    m["rig"] = rig_json(spec.rig, samples.empty() ? build_rig(spec.rig, spec.render.raw_intrinsics()) : samples[0].rig);
    m["render"] = render_json(spec.render);
    m["scene_limits"] = limits_json(spec.limits);
    m["virtual_intrinsics"] = detail::intrinsics_json(spec.render.virtual_intrinsics());
    m["stats"] = stats_json(compute_stats(samples));
    Json list = Json::array();
    for (const auto& s : samples) list.push_back(sample_json(s));
    m["samples"] = list;
    return m;
}

// Writes samples and manifest.json under out_dir; returns the manifest.
inline Json write_dataset(const GenerationSpec& spec, const std::vector<DualViewSample>& samples,
                          const std::filesystem::path& out_dir) {
    std::error_code ec;
    std::filesystem::create_directories(out_dir, ec);
    if (ec) throw std::runtime_error("cannot create " + out_dir.string() + ": " + ec.message());
    for (const auto& s : samples) {
        write_image(out_dir / (s.id + "_a.dvgz"), s.images[0]);
        write_image(out_dir / (s.id + "_b.dvgz"), s.images[1]);
    }
    Json manifest = build_manifest(spec, samples);
    detail::write_file(out_dir / "manifest.json", manifest.dump(1) + "\n");
    return manifest;
}

inline Json generate_dataset(const GenerationSpec& spec, const std::filesystem::path& out_dir, int threads = 1) {
    return write_dataset(spec, generate_samples(spec, threads), out_dir);
}

struct Dataset {
    Json manifest;
    std::vector<DualViewSample> samples;

    int height() const { return samples.empty() ? 0 : samples[0].images[0].height; }
    int width() const { return samples.empty() ? 0 : samples[0].images[0].width; }
    int channels() const { return samples.empty() ? 0 : samples[0].images[0].channels; }
    std::string preset() const { return manifest.contains("rig") ? manifest["rig"].value("preset", "") : ""; }
};

inline geom::RectificationTransform rectification_from(const geom::Mat3& rotation, const geom::Vec3& reference,
                                                       double norm_distance) {
    geom::RectificationTransform r;
    r.rotation = rotation;
    r.reference_point = reference;
    r.norm_distance = norm_distance;
    r.scale = Eigen::Vector3d(1.0, 1.0, norm_distance / reference.norm()).asDiagonal();
    return r;
}

// Loads a dataset directory. `with_images = false` reads only the manifest.
inline Dataset load_dataset(const std::filesystem::path& dir, bool with_images = true) {
    const std::filesystem::path mpath = dir / "manifest.json";
    Dataset d;
    try {
        d.manifest = Json::parse(detail::read_file(mpath));
    } catch (const Json::parse_error& e) {
        throw FormatError(mpath.string() + ": " + e.what());
    }
    const Json& m = d.manifest;
    try {
        if (m.at("format") != "dvgaze-dataset") throw FormatError(mpath.string() + ": not a dvgaze dataset");
        if (m.at("version").get<int>() != kDatasetVersion)
            throw FormatError(mpath.string() + ": unsupported dataset version " + m.at("version").dump());
        geom::CameraRig rig;
        for (std::size_t v = 0; v < 2; ++v) {
            const Json& c = m.at("rig").at("cameras").at(v);
            rig.views[v].pose.rotation = detail::json_mat(c.at("rotation"));
            rig.views[v].pose.translation = detail::json_vec(c.at("translation"));
            rig.views[v].intrinsics = detail::json_intrinsics(c.at("intrinsics"));
        }
        const double norm_distance = m.at("render").at("norm_distance").get<double>();
        const geom::CameraIntrinsics virt = detail::json_intrinsics(m.at("virtual_intrinsics"));
        for (const Json& js : m.at("samples")) {
            DualViewSample s;
            s.id = js.at("id").get<std::string>();
            s.rig = rig;
            s.scene.head_pose.rotation = detail::json_mat(js.at("head_rotation"));
            s.scene.head_pose.translation = detail::json_vec(js.at("head_translation"));
            s.scene.gaze_target = detail::json_vec(js.at("gaze_target"));
            s.scene.rng_seed = js.at("noise_seed").get<std::uint64_t>();
            for (std::size_t v = 0; v < 2; ++v) {
                s.gaze[v] = {js.at("gaze").at(v).at(0).get<double>(), js.at("gaze").at(v).at(1).get<double>()};
                s.virtual_rotations[v] = detail::json_mat(js.at("virtual_rotation").at(v));
                for (std::size_t k = 0; k < 6; ++k) s.pose_raw[v][k] = js.at("pose_raw").at(v).at(k).get<double>();
                s.rect[v] = rectification_from(detail::json_mat(js.at("rect_rotation").at(v)),
                                               detail::json_vec(js.at("rect_reference").at(v)), norm_distance);
                for (std::size_t e = 0; e < 2; ++e) s.eyes_visible[v][e] = js.at("eyes_visible").at(v).at(e).get<bool>();
                s.nose_px[v] = geom::project_rectified(s.scene.nose_world(), rig.views[v].pose, s.rect[v], virt);
                if (with_images) s.images[v] = read_image(dir / js.at("files").at(v).get<std::string>());
            }
            d.samples.push_back(std::move(s));
        }
    } catch (const Json::exception& e) {
        throw FormatError(mpath.string() + ": malformed manifest (" + e.what() + ")");
    }
    if (with_images)
        for (const auto& s : d.samples)
            if (!s.images[0].same_shape(d.samples[0].images[0]) || !s.images[1].same_shape(d.samples[0].images[0]))
                throw FormatError(dir.string() + ": sample " + s.id + " has a different image shape");
    return d;
}

}  // namespace dvgaze
