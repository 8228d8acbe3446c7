#pragma once

// Experiment configuration: strict JSON parsing with key-path diagnostics,
// defaulting, and a canonical echo that parses back to the same config.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <set>
#include <sstream>
#include <string>
#include <type_traits>
#include <vector>

#include <json.hpp>

#include "dvgaze/dataset.hpp"
#include "dvgaze/errors.hpp"
#include "dvgaze/model.hpp"
#include "dvgaze/train.hpp"

namespace dvgaze {

struct DataConfig {
    std::size_t train_count = 2000;
    std::size_t test_count = 500;
    std::string train_dir;  // empty: generate in memory
    std::string test_dir;
};

struct ExperimentConfig {
    std::string variant = "dvgaze";
    std::uint64_t seed = 0;
    RigConfig rig;
    RenderConfig render;
    SceneLimits scene;
    DataConfig data;
    ModelConfig model;
    TrainConfig train;
    std::string output_dir = "runs";

    void validate() const {
        Variant::from_name(variant);
        rig.validate();
        render.validate();
        scene.validate();
        model.validate();
        train.validate();
        if (data.train_count == 0) throw ConfigError("data.train_count", "must be positive");
        if (data.test_count == 0) throw ConfigError("data.test_count", "must be positive");
        if (model.input_height != render.out_height)
            throw ConfigError("model.input_height", "must equal render.out_height (" + std::to_string(render.out_height) + ")");
        if (model.input_width != render.out_width)
            throw ConfigError("model.input_width", "must equal render.out_width (" + std::to_string(render.out_width) + ")");
        if (model.input_channels != render.channels)
            throw ConfigError("model.input_channels", "must equal render.channels (" + std::to_string(render.channels) + ")");
    }

    // Dataset directories named in the config must exist.
    void validate_paths() const {
        for (const auto& [key, dir] : {std::pair<const char*, const std::string&>{"data.train_dir", data.train_dir},
                                       std::pair<const char*, const std::string&>{"data.test_dir", data.test_dir}})
            if (!dir.empty() && !std::filesystem::exists(std::filesystem::path(dir) / "manifest.json"))
                throw ConfigError(key, "no dataset manifest under '" + dir + "'");
    }

    GenerationSpec generation(std::size_t count, std::uint64_t data_seed) const {
        GenerationSpec g;
        g.count = count;
        g.rig = rig;
        g.render = render;
        g.limits = scene;
        g.seed = data_seed;
        return g;
    }
};

// ------------------------------------------------------------------ reading

namespace detail {

class ObjectReader {
public:
    ObjectReader(const Json& j, std::string path) : j_(j), path_(std::move(path)) {
        if (!j_.is_object()) throw ConfigError(path_.empty() ? "<root>" : path_, "expected an object");
    }

    bool has(const char* key) const { return j_.contains(key); }

    template <class T>
    void get(const char* key, T& out) {
        seen_.insert(key);
        if (!j_.contains(key)) return;
        const Json& v = j_.at(key);
        const std::string p = join(key);
        if constexpr (std::is_same_v<T, bool>) {
            if (!v.is_boolean()) throw ConfigError(p, "expected a boolean");
            out = v.get<bool>();
        } else if constexpr (std::is_same_v<T, std::string>) {
            if (!v.is_string()) throw ConfigError(p, "expected a string");
            out = v.get<std::string>();
        } else if constexpr (std::is_same_v<T, std::uint64_t> || std::is_same_v<T, std::size_t>) {
            if (!v.is_number_unsigned() && !(v.is_number_integer() && v.get<std::int64_t>() >= 0))
                throw ConfigError(p, "expected a non-negative integer");
            out = static_cast<T>(v.get<std::uint64_t>());
        } else if constexpr (std::is_integral_v<T>) {
            if (!v.is_number_integer()) throw ConfigError(p, "expected an integer");
            const auto x = v.get<std::int64_t>();
            if (x < std::numeric_limits<T>::min() || x > std::numeric_limits<T>::max())
                throw ConfigError(p, "integer out of range");
            out = static_cast<T>(x);
        } else if constexpr (std::is_floating_point_v<T>) {
            if (!v.is_number()) throw ConfigError(p, "expected a number");
            out = v.get<double>();
        } else if constexpr (std::is_same_v<T, std::vector<int>>) {
            if (!v.is_array()) throw ConfigError(p, "expected an array of integers");
            out.clear();
            for (std::size_t i = 0; i < v.size(); ++i) {
                if (!v[i].is_number_integer())
                    throw ConfigError(p + "[" + std::to_string(i) + "]", "expected an integer");
                out.push_back(v[i].get<int>());
            }
        } else {
            static_assert(sizeof(T) == 0, "unsupported config field type");
        }
    }

    ObjectReader child(const char* key) {
        seen_.insert(key);
        static const Json empty = Json::object();
        return ObjectReader(j_.contains(key) ? j_.at(key) : empty, join(key));
    }

    void finish() const {
        for (auto it = j_.begin(); it != j_.end(); ++it)
            if (!seen_.count(it.key())) throw ConfigError(join(it.key()), "unknown key");
    }

private:
    std::string join(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

    const Json& j_;
    std::string path_;
    std::set<std::string> seen_;
};

}  // namespace detail

inline ModelConfig parse_model(detail::ObjectReader r, const RenderConfig& render) {
    ModelConfig m;
    m.input_height = render.out_height;
    m.input_width = render.out_width;
    m.input_channels = render.channels;
    r.get("stage_channels", m.stage_channels);
    r.get("num_dic_blocks", m.num_dic_blocks);
    r.get("block_stride", m.block_stride);
    r.get("primary_stride", m.primary_stride);
    r.get("encoding_length", m.encoding_length);
    r.get("feature_dim", m.feature_dim);
    r.get("transformer_layers", m.transformer_layers);
    r.get("attention_heads", m.attention_heads);
    r.get("input_height", m.input_height);
    r.get("input_width", m.input_width);
    r.get("input_channels", m.input_channels);
    r.get("shared_weights", m.shared_weights);
    r.finish();
    return m;
}

inline TrainConfig parse_train(detail::ObjectReader r) {
    TrainConfig t;
    r.get("learning_rate", t.learning_rate);
    r.get("batch_size", t.batch_size);
    r.get("epochs", t.epochs);
    r.get("adam_beta1", t.adam_beta1);
    r.get("adam_beta2", t.adam_beta2);
    r.get("adam_eps", t.adam_eps);
    r.get("weight_decay", t.weight_decay);
    r.get("validation_fraction", t.validation_fraction);
    detail::ObjectReader w = r.child("loss_weights");
    w.get("alpha", t.loss_weights.alpha);
    w.get("beta", t.loss_weights.beta);
    w.finish();
    r.finish();
    return t;
}

inline ExperimentConfig parse_config_json(const Json& root) {
    detail::ObjectReader r(root, "");
    ExperimentConfig c;
    r.get("variant", c.variant);
    r.get("seed", c.seed);

    std::string preset = c.rig.preset;
    std::string top_preset;
    r.get("preset", top_preset);
    detail::ObjectReader rig = r.child("rig");
    std::string rig_preset;
    rig.get("preset", rig_preset);
    if (!top_preset.empty() && !rig_preset.empty() && top_preset != rig_preset)
        throw ConfigError("rig.preset", "conflicts with top-level preset '" + top_preset + "'");
    if (!rig_preset.empty()) preset = rig_preset;
    if (!top_preset.empty()) preset = top_preset;
    c.rig = RigConfig::from_preset(preset);
    rig.get("baseline_angle", c.rig.baseline_angle);
    rig.get("distance", c.rig.distance);
    rig.finish();

    detail::ObjectReader rd = r.child("render");
    rd.get("raw_height", c.render.raw_height);
    rd.get("raw_width", c.render.raw_width);
    rd.get("raw_focal", c.render.raw_focal);
    rd.get("supersample", c.render.supersample);
    rd.get("noise_sigma", c.render.noise_sigma);
    rd.get("occlusion_threshold", c.render.occlusion_threshold);
    rd.get("out_height", c.render.out_height);
    rd.get("out_width", c.render.out_width);
    rd.get("virtual_focal", c.render.virtual_focal);
    rd.get("norm_distance", c.render.norm_distance);
    rd.get("channels", c.render.channels);
    rd.get("reference", c.render.reference);
    rd.finish();

    detail::ObjectReader sc = r.child("scene");
    sc.get("gaze_pitch", c.scene.gaze_pitch);
    sc.get("gaze_yaw", c.scene.gaze_yaw);
    sc.get("head_pitch", c.scene.head_pitch);
    sc.get("head_yaw", c.scene.head_yaw);
    sc.get("head_shift", c.scene.head_shift);
    sc.get("head_depth_shift", c.scene.head_depth_shift);
    sc.get("target_near", c.scene.target_near);
    sc.get("target_far", c.scene.target_far);
    sc.finish();

    detail::ObjectReader data = r.child("data");
    data.get("train_count", c.data.train_count);
    data.get("test_count", c.data.test_count);
    data.get("train_dir", c.data.train_dir);
    data.get("test_dir", c.data.test_dir);
    data.finish();

    c.model = parse_model(r.child("model"), c.render);
    c.train = parse_train(r.child("train"));
    detail::ObjectReader out = r.child("output");
    out.get("dir", c.output_dir);
    out.finish();
    r.finish();

    c.train.seed = c.seed;
    c.validate();
    return c;
}

inline ExperimentConfig parse_config_text(const std::string& text, const std::string& origin = "<config>") {
    Json j;
    try {
        j = Json::parse(text);
    } catch (const Json::parse_error& e) {
        throw ConfigError(origin, std::string("malformed JSON: ") + e.what());
    }
    return parse_config_json(j);
}

inline ExperimentConfig parse_config(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ConfigError(path.string(), "cannot open config file");
    std::ostringstream ss;
    ss << in.rdbuf();
    return parse_config_text(ss.str(), path.string());
}

// ------------------------------------------------------------------ writing

inline Json model_json(const ModelConfig& m) {
    return Json{{"stage_channels", m.stage_channels},
                {"num_dic_blocks", m.num_dic_blocks},
                {"block_stride", m.block_stride},
                {"primary_stride", m.primary_stride},
                {"encoding_length", m.encoding_length},
                {"feature_dim", m.feature_dim},
                {"transformer_layers", m.transformer_layers},
                {"attention_heads", m.attention_heads},
                {"input_height", m.input_height},
                {"input_width", m.input_width},
                {"input_channels", m.input_channels},
                {"shared_weights", m.shared_weights}};
}

inline Json train_json(const TrainConfig& t) {
    return Json{{"learning_rate", t.learning_rate},
                {"batch_size", t.batch_size},
                {"epochs", t.epochs},
                {"adam_beta1", t.adam_beta1},
                {"adam_beta2", t.adam_beta2},
                {"adam_eps", t.adam_eps},
                {"weight_decay", t.weight_decay},
                {"validation_fraction", t.validation_fraction},
                {"loss_weights", Json{{"alpha", t.loss_weights.alpha}, {"beta", t.loss_weights.beta}}}};
}

// Fully defaulted config; parse_config_json(config_json(c)) == c.
inline Json config_json(const ExperimentConfig& c) {
    return Json{{"variant", c.variant},
                {"seed", c.seed},
                {"rig", Json{{"preset", c.rig.preset}, {"baseline_angle", c.rig.baseline_angle}, {"distance", c.rig.distance}}},
                {"render", render_json(c.render)},
                {"scene", limits_json(c.scene)},
                {"data", Json{{"train_count", c.data.train_count},
                              {"test_count", c.data.test_count},
                              {"train_dir", c.data.train_dir},
                              {"test_dir", c.data.test_dir}}},
                {"model", model_json(c.model)},
                {"train", train_json(c.train)},
                {"output", Json{{"dir", c.output_dir}}}};
}

inline std::string echo_config(const ExperimentConfig& c) { return config_json(c).dump(2) + "\n"; }

}  // namespace dvgaze
