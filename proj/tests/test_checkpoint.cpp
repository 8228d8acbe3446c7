#include <filesystem>

#include <gtest/gtest.h>

#include "dvgaze/checkpoint.hpp"

using namespace dvgaze;
namespace fs = std::filesystem;

namespace {

ModelConfig tiny_model() {
    ModelConfig c;
    c.input_height = c.input_width = 16;
    c.stage_channels = {8, 16};
    c.num_dic_blocks = 2;
    c.feature_dim = 16;
    c.encoding_length = 3;
    c.transformer_layers = 1;
    c.attention_heads = 2;
    return c;
}

struct Trained {
    GazeNet net;
    TrainConfig cfg;
    std::vector<EpochRecord> history;
    std::vector<DualViewSample> samples;
};

Trained trained(const std::string& variant = "dvgaze") {
    GenerationSpec g;
    g.count = 12;
    g.render.raw_height = g.render.raw_width = 48;
    g.render.raw_focal = 225.0;
    g.render.out_height = g.render.out_width = 16;
    g.seed = 2;
    Trained t{GazeNet(tiny_model(), Variant::from_name(variant), 3), TrainConfig{}, {}, generate_samples(g)};
    t.cfg.epochs = 2;
    t.cfg.batch_size = 4;
    t.cfg.seed = 3;
    t.history = train(t.net, t.samples, t.cfg).history;
    return t;
}

// Re-seals a modified body with a fresh checksum.
std::string reseal(std::string bytes) {
    bytes.resize(bytes.size() - 4);
    detail::put_u32(bytes, crc32_of(bytes));
    return bytes;
}

}  // namespace

TEST(Checkpoint, RoundtripIsBitIdentical) {
    Trained t = trained();
    const Checkpoint c = make_checkpoint(t.net, t.cfg, t.history);
    const std::string bytes = encode_checkpoint(c);
    const Checkpoint d = decode_checkpoint(bytes);
    ASSERT_EQ(d.params.size(), c.params.size());
    for (std::size_t i = 0; i < c.params.size(); ++i) {
        EXPECT_EQ(d.params[i].name, c.params[i].name);
        EXPECT_EQ(d.params[i].shape, c.params[i].shape);
        EXPECT_EQ(std::memcmp(d.params[i].values.data(), c.params[i].values.data(), 8 * c.params[i].values.size()), 0);
    }
    ASSERT_EQ(d.buffers.size(), c.buffers.size());
    for (std::size_t i = 0; i < c.buffers.size(); ++i) {
        EXPECT_EQ(d.buffers[i].mean, c.buffers[i].mean);
        EXPECT_EQ(d.buffers[i].var, c.buffers[i].var);
    }
    EXPECT_EQ(d.epoch, 2);
    EXPECT_EQ(d.history.size(), 2u);
    EXPECT_EQ(d.history[1].gaze_loss, t.history[1].gaze_loss);
    EXPECT_EQ(d.train.seed, 3u);
    EXPECT_EQ(d.train.batch_size, 4);
    EXPECT_EQ(encode_checkpoint(d), bytes);
}

TEST(Checkpoint, RestoredModelPredictsIdentically) {
    Trained t = trained();
    const fs::path p = fs::temp_directory_path() / "dvgaze_test_ckpt" / "model.ckpt";
    save_checkpoint(p, make_checkpoint(t.net, t.cfg, t.history));
    const GazeNet r = restore_model(load_checkpoint(p));
    const auto a = predict(t.net, t.samples), b = predict(r, t.samples);
    for (std::size_t i = 0; i < a.size(); ++i)
        for (std::size_t v = 0; v < 2; ++v) {
            EXPECT_EQ(a[i][v].pitch, b[i][v].pitch);
            EXPECT_EQ(a[i][v].yaw, b[i][v].yaw);
        }
    fs::remove_all(p.parent_path());
}

TEST(Checkpoint, SameRunSameBytes) {
    Trained a = trained(), b = trained();
    EXPECT_EQ(encode_checkpoint(make_checkpoint(a.net, a.cfg, a.history)),
              encode_checkpoint(make_checkpoint(b.net, b.cfg, b.history)));
}

TEST(Checkpoint, HeaderLayout) {
    Trained t = trained();
    const std::string b = encode_checkpoint(make_checkpoint(t.net, t.cfg, t.history));
    EXPECT_EQ(b.substr(0, 8), "DVGZCKPT");
    EXPECT_EQ(static_cast<unsigned char>(b[8]), kCheckpointVersion);
    EXPECT_EQ(b[9], 0);
    const auto* p = reinterpret_cast<const unsigned char*>(b.data());
    EXPECT_EQ(detail::get_u32(p + b.size() - 4), crc32_of(std::string_view(b.data(), b.size() - 4)));
}

TEST(Checkpoint, TruncationIsChecksumError) {
    Trained t = trained();
    const std::string b = encode_checkpoint(make_checkpoint(t.net, t.cfg, t.history));
    for (std::size_t cut : {std::size_t{1}, std::size_t{9}, b.size() / 2, b.size() - 30}) {
        try {
            decode_checkpoint(b.substr(0, b.size() - cut), "m.ckpt");
            FAIL() << cut;
        } catch (const FormatError& e) {
            const std::string msg = e.what();
            EXPECT_NE(msg.find("m.ckpt"), std::string::npos);
            EXPECT_NE(msg.find("checksum"), std::string::npos) << msg;
        }
    }
    EXPECT_THROW(decode_checkpoint(b.substr(0, 10)), FormatError);
    EXPECT_THROW(decode_checkpoint(""), FormatError);
}

TEST(Checkpoint, BitFlipIsChecksumError) {
    Trained t = trained();
    std::string b = encode_checkpoint(make_checkpoint(t.net, t.cfg, t.history));
    b[b.size() - 100] ^= 0x01;
    EXPECT_THROW(decode_checkpoint(b), FormatError);
}

TEST(Checkpoint, VersionMismatch) {
    Trained t = trained();
    std::string b = encode_checkpoint(make_checkpoint(t.net, t.cfg, t.history));
    b[8] = 7;
    try {
        decode_checkpoint(reseal(b));
        FAIL();
    } catch (const FormatError& e) {
        EXPECT_NE(std::string(e.what()).find("version 7"), std::string::npos) << e.what();
    }
}

TEST(Checkpoint, TamperedConfigHashRejected) {
    Trained t = trained();
    std::string b = encode_checkpoint(make_checkpoint(t.net, t.cfg, t.history));
    const std::size_t at = b.find("\"config_hash\":\"") + 15;
    b[at] = b[at] == 'a' ? 'b' : 'a';
    try {
        decode_checkpoint(reseal(b));
        FAIL();
    } catch (const FormatError& e) {
        EXPECT_NE(std::string(e.what()).find("config hash"), std::string::npos) << e.what();
    }
}

TEST(Checkpoint, DifferentModelConfigRefused) {
    Trained t = trained();
    const Checkpoint c = make_checkpoint(t.net, t.cfg, t.history);
    ModelConfig other = tiny_model();
    other.feature_dim = 32;
    GazeNet wider(other, Variant::from_name("dvgaze"), 3);
    EXPECT_THROW(load_into(c, wider), ConfigError);
    GazeNet no_pose(tiny_model(), Variant::from_name("dvgaze_no_pose"), 3);
    EXPECT_THROW(load_into(c, no_pose), ConfigError);
    EXPECT_NE(config_hash(t.net), config_hash(wider));
}

TEST(Checkpoint, NonFiniteParametersNotSaved) {
    Trained t = trained();
    Checkpoint c = make_checkpoint(t.net, t.cfg, t.history);
    c.params[0].values[0] = std::numeric_limits<double>::infinity();
    EXPECT_THROW(encode_checkpoint(c), NonFiniteError);
}

TEST(Checkpoint, EveryVariantRoundtrips) {
    for (const auto& v : Variant::names()) {
        GazeNet net(tiny_model(), Variant::from_name(v), 1);
        const Checkpoint c = decode_checkpoint(encode_checkpoint(make_checkpoint(net, TrainConfig{}, {})));
        EXPECT_EQ(c.variant, v);
        EXPECT_NO_THROW(restore_model(c)) << v;
    }
}

TEST(Checkpoint, MissingFileNamesPath) {
    try {
        load_checkpoint("/nonexistent/x.ckpt");
        FAIL();
    } catch (const std::runtime_error& e) {
        EXPECT_NE(std::string(e.what()).find("/nonexistent/x.ckpt"), std::string::npos);
    }
}
