#pragma once

// Single-file checkpoints:
//   "DVGZCKPT" | u32 version | u64 metadata length | metadata JSON |
//   f64 parameter values (layout order) | f64 running mean/var per buffer |
//   u32 CRC32 of everything before it.
// Integers and floats are little-endian.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <string>
#include <vector>

#include "dvgaze/config.hpp"
#include "dvgaze/hash.hpp"
#include "dvgaze/model.hpp"
#include "dvgaze/train.hpp"

namespace dvgaze {

inline constexpr std::uint32_t kCheckpointVersion = 1;
inline constexpr char kCheckpointMagic[8] = {'D', 'V', 'G', 'Z', 'C', 'K', 'P', 'T'};

struct NamedArray {
    std::string name;
    nn::Shape shape;
    std::vector<double> values;
};

struct NamedRunningStats {
    std::string name;
    std::vector<double> mean;
    std::vector<double> var;
};

struct Checkpoint {
    ModelConfig model;
    std::string variant = "dvgaze";
    TrainConfig train;
    int epoch = 0;
    std::vector<EpochRecord> history;
    std::vector<NamedArray> params;
    std::vector<NamedRunningStats> buffers;
};

inline Json layout_json(const GazeNet& net) {
    Json params = Json::array(), buffers = Json::array();
    for (const auto& p : net.parameters().parameters()) params.push_back(Json::array({p.name, p.tensor.shape()}));
    for (const auto& b : net.parameters().buffers())
        buffers.push_back(Json::array({b.name, b.state->running_mean.size()}));
    return Json{{"parameters", params}, {"buffers", buffers}};
}

inline Json layout_json(const Checkpoint& c) {
    Json params = Json::array(), buffers = Json::array();
    for (const auto& p : c.params) params.push_back(Json::array({p.name, p.shape}));
    for (const auto& b : c.buffers) buffers.push_back(Json::array({b.name, b.mean.size()}));
    return Json{{"parameters", params}, {"buffers", buffers}};
}

// Identifies model configuration + variant + parameter layout.
inline std::string config_hash(const ModelConfig& m, const std::string& variant, const Json& layout) {
    const Json j{{"model", model_json(m)}, {"variant", variant}, {"layout", layout}};
    return sha1_hex(j.dump());
}

inline std::string config_hash(const GazeNet& net) {
    return config_hash(net.config(), net.variant().name, layout_json(net));
}

inline Json history_json(const std::vector<EpochRecord>& h) {
    Json a = Json::array();
    for (const auto& r : h)
        a.push_back(Json{{"epoch", r.epoch},
                         {"gaze_loss", r.gaze_loss},
                         {"consistency_loss", r.consistency_loss},
                         {"total_loss", r.total_loss},
                         {"val_error", r.val_error}});
    return a;
}

inline Checkpoint make_checkpoint(const GazeNet& net, const TrainConfig& train, const std::vector<EpochRecord>& history) {
    Checkpoint c;
    c.model = net.config();
    c.variant = net.variant().name;
    c.train = train;
    c.epoch = history.empty() ? 0 : history.back().epoch;
    c.history = history;
    for (const auto& p : net.parameters().parameters())
        c.params.push_back({p.name, p.tensor.shape(), {p.tensor.data().begin(), p.tensor.data().end()}});
    for (const auto& b : net.parameters().buffers())
        c.buffers.push_back({b.name, b.state->running_mean, b.state->running_var});
    return c;
}

namespace detail {

inline void put_u64(std::string& buf, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xFFu));
}

inline std::uint64_t get_u64(const unsigned char* p) {
    std::uint64_t v = 0;
    for (int i = 7; i >= 0; --i) v = (v << 8) | p[i];
    return v;
}

inline void put_f64s(std::string& buf, const std::vector<double>& xs) {
    for (double x : xs) put_u64(buf, std::bit_cast<std::uint64_t>(x));
}

}  // namespace detail

inline std::string encode_checkpoint(const Checkpoint& c) {
    for (const auto& p : c.params)
        for (double v : p.values)
            if (!std::isfinite(v)) throw NonFiniteError("checkpoint: parameter " + p.name + " is not finite");
    Json meta{{"model", model_json(c.model)},
              {"variant", c.variant},
              {"train", train_json(c.train)},
              {"seed", c.train.seed},
              {"epoch", c.epoch},
              {"history", history_json(c.history)},
              {"layout", layout_json(c)},
              {"config_hash", config_hash(c.model, c.variant, layout_json(c))}};
    const std::string meta_text = meta.dump();
    std::string buf(kCheckpointMagic, sizeof kCheckpointMagic);
    detail::put_u32(buf, kCheckpointVersion);
    detail::put_u64(buf, meta_text.size());
    buf += meta_text;
    for (const auto& p : c.params) detail::put_f64s(buf, p.values);
    for (const auto& b : c.buffers) {
        detail::put_f64s(buf, b.mean);
        detail::put_f64s(buf, b.var);
    }
    detail::put_u32(buf, crc32_of(buf));
    return buf;
}

inline Checkpoint decode_checkpoint(const std::string& bytes, const std::string& origin = "checkpoint") {
    auto fail = [&](const std::string& why) -> void { throw FormatError(origin + ": " + why); };
    const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
    if (bytes.size() < sizeof kCheckpointMagic + 4 + 8 + 4) fail("file too short");
    if (std::memcmp(bytes.data(), kCheckpointMagic, sizeof kCheckpointMagic) != 0) fail("not a dvgaze checkpoint");
    const std::uint32_t stored_crc = detail::get_u32(p + bytes.size() - 4);
    if (crc32_of(std::string_view(bytes.data(), bytes.size() - 4)) != stored_crc)
        fail("checksum mismatch (file truncated or corrupted)");
    const std::uint32_t version = detail::get_u32(p + 8);
    if (version != kCheckpointVersion)
        fail("unsupported checkpoint version " + std::to_string(version) + " (expected " +
             std::to_string(kCheckpointVersion) + ")");
    const std::uint64_t meta_len = detail::get_u64(p + 12);
    std::size_t off = 20;
    if (meta_len > bytes.size() - off - 4) fail("metadata length out of range");
    Json meta;
    try {
        meta = Json::parse(bytes.substr(off, meta_len));
    } catch (const Json::parse_error& e) {
        fail(std::string("bad metadata: ") + e.what());
    }
    off += meta_len;

    Checkpoint c;
    try {
        c.model = parse_model(detail::ObjectReader(meta.at("model"), "model"), RenderConfig{});
        c.variant = meta.at("variant").get<std::string>();
        c.train = parse_train(detail::ObjectReader(meta.at("train"), "train"));
        c.train.seed = meta.at("seed").get<std::uint64_t>();
        c.epoch = meta.at("epoch").get<int>();
        for (const Json& r : meta.at("history"))
            c.history.push_back({r.at("epoch").get<int>(), r.at("gaze_loss").get<double>(),
                                 r.at("consistency_loss").get<double>(), r.at("total_loss").get<double>(),
                                 r.at("val_error").get<double>()});
        for (const Json& e : meta.at("layout").at("parameters"))
            c.params.push_back({e.at(0).get<std::string>(), e.at(1).get<nn::Shape>(), {}});
        for (const Json& e : meta.at("layout").at("buffers"))
            c.buffers.push_back({e.at(0).get<std::string>(), std::vector<double>(e.at(1).get<std::size_t>()),
                                 std::vector<double>(e.at(1).get<std::size_t>())});
        if (meta.at("config_hash").get<std::string>() != config_hash(c.model, c.variant, layout_json(c)))
            fail("config hash does not match the stored layout");
    } catch (const Json::exception& e) {
        fail(std::string("malformed metadata: ") + e.what());
    }

    auto read_f64s = [&](std::vector<double>& out) {
        if (out.size() > (bytes.size() - 4 - off) / 8) fail("parameter block truncated");
        for (double& v : out) {
            v = std::bit_cast<double>(detail::get_u64(p + off));
            off += 8;
        }
    };
    for (auto& prm : c.params) {
        prm.values.resize(nn::shape_numel(prm.shape));
        read_f64s(prm.values);
    }
    for (auto& b : c.buffers) {
        read_f64s(b.mean);
        read_f64s(b.var);
    }
    if (off != bytes.size() - 4) fail("unexpected trailing bytes");
    return c;
}

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& c) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    detail::write_file(path, encode_checkpoint(c));
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
    return decode_checkpoint(detail::read_file(path), path.string());
}

// Copies checkpoint values into a network built from the same config.
inline void load_into(const Checkpoint& c, GazeNet& net) {
    if (config_hash(c.model, c.variant, layout_json(c)) != config_hash(net))
        throw ConfigError("model", "checkpoint config hash does not match the model (different ModelConfig or variant)");
    auto& ps = net.parameters();
    for (const auto& p : c.params) {
        const nn::Tensor* t = ps.find(p.name);
        nn::Tensor target = *t;
        std::copy(p.values.begin(), p.values.end(), target.mutable_data().begin());
    }
    for (const auto& b : c.buffers) {
        nn::BatchNormState* s = ps.find_buffer(b.name);
        s->running_mean = b.mean;
        s->running_var = b.var;
    }
}

inline GazeNet restore_model(const Checkpoint& c) {
    GazeNet net(c.model, Variant::from_name(c.variant), c.train.seed);
    load_into(c, net);
    return net;
}

}  // namespace dvgaze
