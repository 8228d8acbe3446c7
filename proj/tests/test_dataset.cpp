#include <filesystem>

#include <gtest/gtest.h>

#include "dvgaze/dataset.hpp"

using namespace dvgaze;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
    const fs::path p = fs::temp_directory_path() / ("dvgaze_test_dataset_" + name);
    fs::remove_all(p);
    return p;
}

GenerationSpec small_spec(std::size_t count, const std::string& preset = "medium", std::uint64_t seed = 7) {
    GenerationSpec g;
    g.count = count;
    g.rig = RigConfig::from_preset(preset);
    g.render.raw_height = g.render.raw_width = 64;
    g.render.raw_focal = 300.0;
    g.render.out_height = g.render.out_width = 32;
    g.seed = seed;
    return g;
}

std::map<std::string, std::string> read_tree(const fs::path& dir) {
    std::map<std::string, std::string> out;
    for (const auto& e : fs::directory_iterator(dir)) out[e.path().filename().string()] = detail::read_file(e.path());
    return out;
}

}  // namespace

TEST(ArrayFormat, HeaderIsLittleEndian) {
    const std::string b = encode_array({2, 1}, {1.0f, -2.5f});
    ASSERT_EQ(b.size(), 5u + 4 + 8 + 8);
    EXPECT_EQ(b.substr(0, 5), "DVGZ1");
    EXPECT_EQ(static_cast<unsigned char>(b[5]), 2);  // rank
    EXPECT_EQ(static_cast<unsigned char>(b[9]), 2);
    EXPECT_EQ(static_cast<unsigned char>(b[13]), 1);
    // 1.0f = 0x3F800000
    EXPECT_EQ(static_cast<unsigned char>(b[17]), 0x00);
    EXPECT_EQ(static_cast<unsigned char>(b[20]), 0x3F);
    EXPECT_EQ(static_cast<unsigned char>(b[19]), 0x80);
}

TEST(ArrayFormat, Roundtrip) {
    std::vector<float> v{0.0f, 1.0f, -0.0f, 3.25f, 1e-30f, 0.1f};
    const ArrayFile a = decode_array(encode_array({3, 2, 1}, v));
    EXPECT_EQ(a.dims, (std::vector<std::uint32_t>{3, 2, 1}));
    EXPECT_EQ(a.values, v);
}

TEST(ArrayFormat, CorruptionIsFormatError) {
    const std::string good = encode_array({2, 2}, {1, 2, 3, 4});
    std::string bad_magic = good;
    bad_magic[4] = '2';
    EXPECT_THROW(decode_array(bad_magic), FormatError);
    EXPECT_THROW(decode_array(good.substr(0, good.size() - 1)), FormatError);
    EXPECT_THROW(decode_array(good + "x"), FormatError);
    EXPECT_THROW(decode_array(good.substr(0, 7)), FormatError);
    try {
        decode_array(bad_magic, "img_a.dvgz");
        FAIL();
    } catch (const FormatError& e) {
        EXPECT_NE(std::string(e.what()).find("img_a.dvgz"), std::string::npos);
    }
}

TEST(Generate, LabelsAreConsistent) {
    for (const std::string preset : {"small", "medium", "long"}) {
        const auto samples = generate_samples(small_spec(60, preset));
        for (const auto& s : samples) EXPECT_LT(label_consistency(s), 1e-9) << preset << " " << s.id;
    }
}

TEST(Generate, NoseRowsAgreeOnThousandScenes) {
    // Geometry only: rectify each view and project the nose marker.
    for (const std::string preset : {"small", "medium", "long"}) {
        const GenerationSpec g = small_spec(1000, preset);
        const auto rig = build_rig(g.rig, g.render.raw_intrinsics());
        const auto virt = g.render.virtual_intrinsics();
        double worst = 0.0;
        for (std::size_t i = 0; i < g.count; ++i) {
            Rng rng = Rng::derive(g.seed, i);
            const SceneSpec s = sample_scene(rng, g.rig, g.limits);
            std::array<double, 2> row{};
            for (std::size_t v = 0; v < 2; ++v) {
                const auto& cam = rig.views[v];
                const auto rect = geom::build_rectification(cam.pose, cam.intrinsics, s.head_pose,
                                                            cam.pose.to_camera(s.face_center()), g.render.norm_distance);
                row[v] = geom::project_rectified(s.nose_world(), cam.pose, rect, virt).y();
            }
            worst = std::max(worst, std::abs(row[0] - row[1]));
        }
        EXPECT_LT(worst, 0.5) << preset;
    }
}

TEST(Generate, ThreadCountDoesNotMatter) {
    const auto a = generate_samples(small_spec(12), 1);
    const auto b = generate_samples(small_spec(12), 3);
    for (std::size_t i = 0; i < a.size(); ++i) {
        EXPECT_EQ(a[i].images[0].data, b[i].images[0].data);
        EXPECT_EQ(a[i].images[1].data, b[i].images[1].data);
        EXPECT_EQ(a[i].gaze[1].yaw, b[i].gaze[1].yaw);
    }
}

TEST(Generate, LongBaselineViewsDifferMore) {
    const DatasetStats small = compute_stats(generate_samples(small_spec(100, "small")));
    const DatasetStats lng = compute_stats(generate_samples(small_spec(100, "long")));
    EXPECT_GT(lng.mean_view_difference, small.mean_view_difference);
    EXPECT_GT(lng.asymmetric_occlusion_fraction, 0.0);
    EXPECT_GT(lng.one_eye_occluded_fraction[0], small.one_eye_occluded_fraction[0]);
}

TEST(Generate, ImagesInUnitRangeWithExpectedShape) {
    const auto s = generate_samples(small_spec(5));
    for (const auto& x : s)
        for (const auto& img : x.images) {
            EXPECT_EQ(img.height, 32);
            EXPECT_EQ(img.width, 32);
            EXPECT_EQ(img.channels, 3);
            for (float v : img.data) {
                EXPECT_GE(v, 0.0f);
                EXPECT_LE(v, 1.0f);
            }
        }
}

TEST(Dataset, HundredSamplesRegenerateByteIdentical) {
    const fs::path a = scratch("a"), b = scratch("b");
    const Json m = generate_dataset(small_spec(100), a);
    generate_dataset(small_spec(100), b);
    EXPECT_EQ(m["samples"].size(), 100u);
    EXPECT_EQ(m["count"], 100);
    const auto ta = read_tree(a), tb = read_tree(b);
    EXPECT_EQ(ta.size(), 201u);
    EXPECT_TRUE(ta == tb);
    fs::remove_all(a);
    fs::remove_all(b);
}

TEST(Dataset, DifferentSeedDifferentData) {
    const fs::path a = scratch("s1"), b = scratch("s2");
    generate_dataset(small_spec(4, "medium", 1), a);
    generate_dataset(small_spec(4, "medium", 2), b);
    EXPECT_NE(detail::read_file(a / "manifest.json"), detail::read_file(b / "manifest.json"));
    fs::remove_all(a);
    fs::remove_all(b);
}

TEST(Dataset, LoadRoundtrip) {
    const fs::path dir = scratch("load");
    const GenerationSpec g = small_spec(6, "long");
    const auto samples = generate_samples(g);
    write_dataset(g, samples, dir);
    const Dataset d = load_dataset(dir);
    ASSERT_EQ(d.samples.size(), samples.size());
    EXPECT_EQ(d.preset(), "long");
    EXPECT_EQ(d.height(), 32);
    for (std::size_t i = 0; i < samples.size(); ++i) {
        const auto& x = samples[i];
        const auto& y = d.samples[i];
        EXPECT_EQ(x.id, y.id);
        for (std::size_t v = 0; v < 2; ++v) {
            EXPECT_EQ(x.images[v].data, y.images[v].data);
            EXPECT_EQ(x.gaze[v].pitch, y.gaze[v].pitch);
            EXPECT_EQ(x.gaze[v].yaw, y.gaze[v].yaw);
            EXPECT_EQ(x.virtual_rotations[v], y.virtual_rotations[v]);
            EXPECT_EQ(x.pose_raw[v], y.pose_raw[v]);
            EXPECT_EQ(x.eyes_visible[v], y.eyes_visible[v]);
            EXPECT_NEAR((x.nose_px[v] - y.nose_px[v]).norm(), 0.0, 1e-9);
            EXPECT_NEAR((x.rect[v].scale - y.rect[v].scale).norm(), 0.0, 1e-12);
        }
        EXPECT_LT(label_consistency(y), 1e-9);
    }
    // Manifest-only load skips images.
    const Dataset m = load_dataset(dir, false);
    EXPECT_TRUE(m.samples[0].images[0].data.empty());
    fs::remove_all(dir);
}

TEST(Dataset, ManifestRowMajorRotation) {
    const fs::path dir = scratch("rowmajor");
    const auto samples = generate_samples(small_spec(1));
    const Json m = write_dataset(small_spec(1), samples, dir);
    const geom::Mat3& r = samples[0].virtual_rotations[1];
    const Json& j = m["samples"][0]["virtual_rotation"][1];
    EXPECT_EQ(j[1].get<double>(), r(0, 1));
    EXPECT_EQ(j[3].get<double>(), r(1, 0));
    fs::remove_all(dir);
}

TEST(Dataset, LoadErrorsCarryPaths) {
    const fs::path dir = scratch("broken");
    generate_dataset(small_spec(2), dir);
    detail::write_file(dir / "s000001_b.dvgz", "DVGZ1junk");
    try {
        load_dataset(dir);
        FAIL();
    } catch (const FormatError& e) {
        EXPECT_NE(std::string(e.what()).find("s000001_b.dvgz"), std::string::npos);
    }
    detail::write_file(dir / "manifest.json", "{\"format\": \"dvgaze-dataset\", \"version\": 99}");
    EXPECT_THROW(load_dataset(dir), FormatError);
    detail::write_file(dir / "manifest.json", "{not json");
    EXPECT_THROW(load_dataset(dir), FormatError);
    fs::remove_all(dir);
    try {
        load_dataset(dir);
        FAIL();
    } catch (const std::runtime_error& e) {
        EXPECT_NE(std::string(e.what()).find(dir.string()), std::string::npos);
    }
}

TEST(Dataset, UnwritableOutputNamesPath) {
    const fs::path blocker = scratch("blocker");
    detail::write_file(blocker, "file");
    try {
        generate_dataset(small_spec(1), blocker / "sub");
        FAIL();
    } catch (const std::runtime_error& e) {
        EXPECT_NE(std::string(e.what()).find("blocker"), std::string::npos);
    }
    fs::remove(blocker);
}

TEST(Dataset, SpecValidation) {
    GenerationSpec g = small_spec(0);
    EXPECT_THROW(g.validate(), ConfigError);
    g = small_spec(1);
    g.render.channels = 2;
    EXPECT_THROW(generate_samples(g), ConfigError);
}

TEST(Generate, NoseReferenceCentresNoseInBothViews) {
    GenerationSpec g = small_spec(20, "long");
    g.render.reference = "nose";
    const auto virt = g.render.virtual_intrinsics();
    for (const auto& s : generate_samples(g))
        for (const auto& px : s.nose_px) {
            EXPECT_NEAR(px.x(), virt.cx, 1e-9);
            EXPECT_NEAR(px.y(), virt.cy, 1e-9);
        }
    g.render.reference = "chin";
    EXPECT_THROW(g.validate(), ConfigError);
}
