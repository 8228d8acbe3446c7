// dvgaze command-line front end.
//
// Exit codes: 0 success, 1 invalid input (config, arguments, shapes),
// 2 runtime failure (I/O, corrupt files, non-finite training, failed checks).

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>

#include <CLI11.hpp>

#include "dvgaze/experiment.hpp"

using namespace dvgaze;
namespace fs = std::filesystem;

namespace {

constexpr int kExitInvalid = 1;
constexpr int kExitRuntime = 2;

// Flags shared by every experiment subcommand.
struct Common {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::string out;
    std::string preset;
    std::string variant;

    void attach(CLI::App* app, bool with_variant = true) {
        app->add_option("--config", config, "experiment config (JSON)");
        app->add_option("--seed", seed, "seed for all randomness");
        app->add_option("--out", out, "output path");
        app->add_option("--preset", preset, "rig preset")->check(CLI::IsMember({"small", "medium", "long"}));
        if (with_variant) app->add_option("--variant", variant, "model variant")->check(CLI::IsMember(Variant::names()));
    }

    ExperimentConfig load() const {
        ExperimentConfig c = config.empty() ? parse_config_text("{}") : parse_config(config);
        if (seed) {
            c.seed = *seed;
            c.train.seed = *seed;
        }
        if (!preset.empty()) c.rig = RigConfig::from_preset(preset);
        if (!variant.empty()) c.variant = variant;
        c.validate();
        c.validate_paths();
        return c;
    }

    std::string out_or(const std::string& fallback) const { return out.empty() ? fallback : out; }
};

void require_dir(const std::string& key, const std::string& dir) {
    if (!fs::exists(fs::path(dir) / "manifest.json")) throw ConfigError(key, "no dataset manifest under '" + dir + "'");
}

std::string manifest_text(const fs::path& dir) { return detail::read_file(dir / "manifest.json"); }

// A dataset either read from disk or generated in memory for a run.
struct LoadedData {
    std::vector<DualViewSample> samples;
    std::string manifest_hash;
    std::string source;
};

LoadedData obtain_data(const ExperimentConfig& c, const std::string& dir, std::size_t count, bool test) {
    LoadedData d;
    if (!dir.empty()) {
        d.samples = load_dataset(dir).samples;
        d.manifest_hash = git_blob_hash(manifest_text(dir));
        d.source = dir;
        return d;
    }
    const GenerationSpec g = c.generation(count, data_seed(c.rig.preset, c.seed, test));
    d.samples = generate_samples(g, thread_limit());
    d.manifest_hash = git_blob_hash(build_manifest(g, d.samples).dump(1) + "\n");
    d.source = "generated:" + c.rig.preset + ":" + std::to_string(g.seed);
    return d;
}

void write_text(const fs::path& path, const std::string& text) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    detail::write_file(path, text);
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

// Run record: config snapshot, dataset hashes, metrics and wall time. Wall
// time lives only here, so every other output is reproducible.
Json run_record(const std::string& command, const ExperimentConfig& c, const Json& datasets, const Json& metrics,
                double wall) {
    return Json{{"command", command},
                {"config", config_json(c)},
                {"datasets", datasets},
                {"metrics", metrics},
                {"wall_seconds", wall}};
}

// ------------------------------------------------------------- generate

struct GenerateArgs {
    Common common;
    std::size_t count = 0;
    bool test_split = false;
};

int cmd_generate(const GenerateArgs& a) {
    const ExperimentConfig c = a.common.load();
    if (a.common.out.empty()) throw ConfigError("--out", "generate needs an output directory");
    const std::size_t count = a.count ? a.count : (a.test_split ? c.data.test_count : c.data.train_count);
    const auto t0 = std::chrono::steady_clock::now();
    const GenerationSpec g = c.generation(count, c.seed);
    const Json m = generate_dataset(g, a.common.out, thread_limit());
    const Json& st = m["stats"];
    std::cout << "wrote " << count << " samples to " << a.common.out << " (preset " << c.rig.preset << ", seed "
              << c.seed << ")\n"
              << "  max epipolar row deviation " << st["max_epipolar_row_deviation_px"].get<double>() << " px\n"
              << "  max label consistency residual " << st["max_label_consistency"].get<double>() << "\n"
              << "  asymmetric occlusion fraction " << st["asymmetric_occlusion_fraction"].get<double>() << "\n"
              << "  manifest " << git_blob_hash(manifest_text(a.common.out)) << "  (" << seconds_since(t0) << " s)\n";
    return 0;
}

// ---------------------------------------------------------------- train

struct TrainArgs {
    Common common;
    std::string data, test;
    std::optional<int> epochs;
    bool echo = false;
};

int cmd_train(const TrainArgs& a) {
    ExperimentConfig c = a.common.load();
    if (a.epochs) {
        c.train.epochs = *a.epochs;
        c.validate();
    }
    if (a.echo) {
        std::cout << echo_config(c);
        return 0;
    }
    const std::string train_dir = a.data.empty() ? c.data.train_dir : a.data;
    const std::string test_dir = a.test.empty() ? c.data.test_dir : a.test;
    if (!train_dir.empty()) require_dir("--data", train_dir);
    if (!test_dir.empty()) require_dir("--test", test_dir);
    const fs::path out = a.common.out_or(c.output_dir);

    const auto t0 = std::chrono::steady_clock::now();
    const LoadedData tr = obtain_data(c, train_dir, c.data.train_count, false);
    const LoadedData te = obtain_data(c, test_dir, c.data.test_count, true);
    GazeNet net(c.model, Variant::from_name(c.variant), c.seed);
    check_input_schema(net, tr.samples);
    check_input_schema(net, te.samples);

    std::string history;
    const TrainResult res = train(net, tr.samples, c.train, [&](const EpochRecord& r) {
        const Json j{{"epoch", r.epoch},
                     {"gaze_loss", r.gaze_loss},
                     {"consistency_loss", r.consistency_loss},
                     {"total_loss", r.total_loss},
                     {"val_error", r.val_error}};
        history += j.dump() + "\n";
        std::cerr << "epoch " << r.epoch << "  gaze " << r.gaze_loss << "  gc " << r.consistency_loss << "  val "
                  << r.val_error << " deg\n";
    });
    const Metrics m = evaluate(net, te.samples);
    const Json record = metrics_record(c.variant, c.rig.preset, c.seed, m);

    save_checkpoint(out / "model.ckpt", make_checkpoint(net, c.train, res.history));
    write_text(out / "history.jsonl", history);
    write_text(out / "metrics.jsonl", record.dump() + "\n");
    write_text(out / "config.json", echo_config(c));
    const Json datasets{{"train", Json{{"source", tr.source}, {"manifest_hash", tr.manifest_hash}}},
                        {"test", Json{{"source", te.source}, {"manifest_hash", te.manifest_hash}}}};
    write_text(out / "run.json", run_record("train", c, datasets, Json::array({record}), seconds_since(t0)).dump(2) + "\n");
    std::cout << record.dump() << "\n";
    return 0;
}

// ----------------------------------------------------------------- eval

struct EvalArgs {
    Common common;
    std::string checkpoint, data;
};

int cmd_eval(const EvalArgs& a) {
    if (a.checkpoint.empty()) throw ConfigError("--checkpoint", "required");
    if (a.data.empty()) throw ConfigError("--data", "required");
    if (!fs::exists(a.checkpoint)) throw ConfigError("--checkpoint", "no such file '" + a.checkpoint + "'");
    require_dir("--data", a.data);
    const auto t0 = std::chrono::steady_clock::now();
    const Checkpoint ck = load_checkpoint(a.checkpoint);
    const GazeNet net = restore_model(ck);
    const Dataset d = load_dataset(a.data);
    check_input_schema(net, d.samples);
    const Metrics m = evaluate(net, d.samples);
    const std::string preset = a.common.preset.empty() ? d.preset() : a.common.preset;
    const Json record = metrics_record(ck.variant, preset, ck.train.seed, m);
    std::cout << record.dump() << "\n";
    if (!a.common.out.empty()) {
        const fs::path out = a.common.out;
        write_text(out / "metrics.jsonl", record.dump() + "\n");
        std::string per_sample = "id,left,right,avg\n";
        for (const auto& e : m.per_sample) {
            std::ostringstream os;
            os.precision(17);
            os << e.id << ',' << e.left << ',' << e.right << ',' << e.avg << '\n';
            per_sample += os.str();
        }
        write_text(out / "per_sample.csv", per_sample);
        ExperimentConfig snap;
        snap.variant = ck.variant;
        snap.model = ck.model;
        snap.train = ck.train;
        snap.seed = ck.train.seed;
        const Json datasets{{"test", Json{{"source", a.data}, {"manifest_hash", git_blob_hash(manifest_text(a.data))}}}};
        write_text(out / "run.json",
                   run_record("eval", snap, datasets, Json::array({record}), seconds_since(t0)).dump(2) + "\n");
    }
    return 0;
}

// --------------------------------------------------------------- ablate

struct AblateArgs {
    Common common;
    std::vector<std::string> presets{"small", "medium", "long"};
    std::vector<std::uint64_t> seeds{0, 1, 2};
    std::vector<std::string> variants;
    std::optional<int> epochs;
};

int cmd_ablate(const AblateArgs& a) {
    ExperimentConfig c = a.common.load();
    if (a.epochs) {
        c.train.epochs = *a.epochs;
        c.validate();
    }
    SuiteSpec spec;
    spec.base = c;
    spec.presets = a.presets;
    spec.seeds = a.seeds;
    spec.variants = a.variants.empty() ? Variant::names() : a.variants;
    spec.threads = thread_limit();
    spec.out_dir = fs::path(a.common.out_or(c.output_dir));
    const auto t0 = std::chrono::steady_clock::now();
    const SuiteReport r = run_ablation_suite(spec, [](const SuiteCell& cell) {
        std::cerr << cell.preset << " " << cell.variant << " seed " << cell.seed << ": "
                  << (cell.ok ? std::to_string(cell.metrics.mean_view_error()) + " deg" : "error: " + cell.error) << " ("
                  << cell.seconds << " s)\n";
    });

    std::ostringstream checks;
    auto emit = [&](const TrendCheck& t) {
        checks << (t.passed ? "PASS " : "FAIL ") << t.name << " [" << t.seeds_passing << "/" << t.seeds_total
               << "] " << t.detail << "\n";
    };
    auto has = [&](const std::string& v) {
        return std::find(spec.variants.begin(), spec.variants.end(), v) != spec.variants.end();
    };
    const std::string main_preset =
        std::find(spec.presets.begin(), spec.presets.end(), "medium") != spec.presets.end() ? "medium" : spec.presets[0];
    if (has("single_view")) emit(check_dual_view_advantage(r, spec.seeds, main_preset));
    if (has("transformer_only") && has("concat"))
        emit(check_ordering(r, spec.seeds, {"dvgaze", "transformer_only", "concat"}, main_preset));
    for (const char* abl : {"dvgaze_no_pose", "dvgaze_no_comp", "dvgaze_no_gc"})
        if (has(abl)) emit(check_not_better(r, spec.seeds, abl, "dvgaze", main_preset));
    if (has("single_view") && spec.presets.size() > 1) emit(check_distance_trend(r, spec.seeds, spec.presets));

    const std::string report = format_report(r);
    write_text(*spec.out_dir / "report.csv", report);
    write_text(*spec.out_dir / "checks.txt", checks.str());
    Json metrics = Json::array();
    for (const auto& cell : r.cells)
        if (cell.ok) metrics.push_back(metrics_record(cell.variant, cell.preset, cell.seed, cell.metrics));
    write_text(*spec.out_dir / "run.json",
               run_record("ablate", c, Json::object(), metrics, seconds_since(t0)).dump(2) + "\n");
    std::cout << report << "\n" << checks.str();
    for (const auto& cell : r.cells)
        if (!cell.ok) return kExitRuntime;
    return 0;
}

// ----------------------------------------------------------------- geom

struct ConvertArgs {
    std::vector<double> angles, vector;
    bool degrees = false;
};

int cmd_convert(const ConvertArgs& a) {
    std::cout.precision(12);
    if (a.angles.size() == 2) {
        const double k = a.degrees ? geom::deg2rad(1.0) : 1.0;
        const geom::Vec3 v = geom::angles_to_vector({a.angles[0] * k, a.angles[1] * k}).direction;
        std::cout << v.x() << " " << v.y() << " " << v.z() << "\n";
        return 0;
    }
    if (a.vector.size() == 3) {
        const geom::Vec3 v(a.vector[0], a.vector[1], a.vector[2]);
        if (v.norm() < 1e-12) throw ConfigError("--vector", "must be non-zero");
        const auto g = geom::vector_to_angles({v.normalized()});
        const double k = a.degrees ? geom::rad2deg(1.0) : 1.0;
        std::cout << g.pitch * k << " " << g.yaw * k << "\n";
        return 0;
    }
    throw ConfigError("geom convert", "give --angles PITCH YAW or --vector X Y Z");
}

int cmd_epipolar_check(const std::string& dir, double tolerance) {
    require_dir("dataset", dir);
    const Dataset d = load_dataset(dir, false);
    double worst = 0.0;
    std::string worst_id;
    for (const auto& s : d.samples) {
        const double dev = epipolar_row_deviation(s);
        if (dev >= worst) {
            worst = dev;
            worst_id = s.id;
        }
    }
    const bool ok = worst < tolerance;
    std::cout << "samples " << d.samples.size() << "\nmax nose row deviation " << worst << " px (" << worst_id
              << ")\n" << (ok ? "ok" : "FAIL") << " (tolerance " << tolerance << " px)\n";
    return ok ? 0 : kExitRuntime;
}

void write_ppm(const fs::path& path, const Image& img) {
    std::string buf = "P6\n" + std::to_string(img.width) + " " + std::to_string(img.height) + "\n255\n";
    for (int r = 0; r < img.height; ++r)
        for (int c = 0; c < img.width; ++c)
            for (int ch = 0; ch < 3; ++ch) {
                const float v = img.at(r, c, img.channels == 3 ? ch : 0);
                buf.push_back(static_cast<char>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f)));
            }
    detail::write_file(path, buf);
}

struct RectifyArgs {
    Common common;
    std::size_t index = 0;
    bool ppm = false;
};

// Renders sample `index` of the (config, seed) dataset and writes both raw
// and rectified views.
int cmd_rectify(const RectifyArgs& a) {
    const ExperimentConfig c = a.common.load();
    if (a.common.out.empty()) throw ConfigError("--out", "rectify needs an output directory");
    const fs::path out = a.common.out;
    fs::create_directories(out);
    const GenerationSpec g = c.generation(a.index + 1, c.seed);
    const auto rig = build_rig(g.rig, g.render.raw_intrinsics());
    Rng rng = Rng::derive(g.seed, a.index);
    const SceneSpec scene = sample_scene(rng, g.rig, g.limits);
    const DualViewSample s = make_sample(sample_id(a.index), scene, rig, g.render);
    for (int v = 0; v < 2; ++v) {
        const auto vi = static_cast<std::size_t>(v);
        const std::string tag = v == 0 ? "a" : "b";
        const Image raw = render_view(scene, rig.views[vi], g.render, v);
        write_image(out / ("raw_" + tag + ".dvgz"), raw);
        write_image(out / ("rect_" + tag + ".dvgz"), s.images[vi]);
        if (a.ppm) {
            write_ppm(out / ("raw_" + tag + ".ppm"), raw);
            write_ppm(out / ("rect_" + tag + ".ppm"), s.images[vi]);
        }
        std::cout << "view " << tag << ": gaze pitch " << s.gaze[vi].pitch << " yaw " << s.gaze[vi].yaw
                  << " rad, nose at (" << s.nose_px[vi].x() << ", " << s.nose_px[vi].y() << ")\n";
    }
    std::cout << "row deviation " << epipolar_row_deviation(s) << " px, label residual " << label_consistency(s) << "\n";
    return 0;
}

template <class F>
int guarded(F&& f) {
    try {
        return f();
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kExitInvalid;
    } catch (const ShapeError& e) {
        std::cerr << "shape error: " << e.what() << "\n";
        return kExitInvalid;
    } catch (const std::invalid_argument& e) {
        std::cerr << "invalid input: " << e.what() << "\n";
        return kExitInvalid;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitRuntime;
    }
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"dual-view gaze estimation: data generation, training and evaluation"};
    app.require_subcommand(1);

    GenerateArgs gen;
    auto* g = app.add_subcommand("generate", "render a synthetic dual-view dataset");
    gen.common.attach(g, false);
    g->add_option("--count", gen.count, "number of samples (default: data.train_count)");
    g->add_flag("--test-split", gen.test_split, "default the count to data.test_count");

    TrainArgs tr;
    auto* t = app.add_subcommand("train", "train a model and evaluate it on the test split");
    tr.common.attach(t);
    t->add_option("--data", tr.data, "training dataset directory (default: generate)");
    t->add_option("--test", tr.test, "test dataset directory (default: generate)");
    t->add_option("--epochs", tr.epochs, "override train.epochs")->check(CLI::PositiveNumber);
    t->add_flag("--echo-config", tr.echo, "print the fully defaulted config and exit");

    EvalArgs ev;
    auto* e = app.add_subcommand("eval", "evaluate a checkpoint on a dataset");
    ev.common.attach(e, false);
    e->add_option("--checkpoint", ev.checkpoint, "model checkpoint")->required();
    e->add_option("--data", ev.data, "dataset directory")->required();

    AblateArgs ab;
    auto* a = app.add_subcommand("ablate", "run the variant x preset x seed grid");
    ab.common.attach(a, false);
    a->add_option("--presets", ab.presets, "presets")->delimiter(',')->check(CLI::IsMember({"small", "medium", "long"}));
    a->add_option("--seeds", ab.seeds, "seeds")->delimiter(',');
    a->add_option("--variants", ab.variants, "variants (default: all)")->delimiter(',')->check(CLI::IsMember(Variant::names()));
    a->add_option("--epochs", ab.epochs, "override train.epochs")->check(CLI::PositiveNumber);

    auto* geo = app.add_subcommand("geom", "geometry utilities");
    geo->require_subcommand(1);
    ConvertArgs cv;
    auto* conv = geo->add_subcommand("convert", "convert between gaze angles and vectors");
    conv->add_option("--angles", cv.angles, "PITCH YAW")->expected(2);
    conv->add_option("--vector", cv.vector, "X Y Z")->expected(3);
    conv->add_flag("--degrees", cv.degrees, "angles in degrees");
    std::string epi_dir;
    double epi_tol = 0.5;
    auto* epi = geo->add_subcommand("epipolar-check", "max cross-view row deviation of the nose marker");
    epi->add_option("dataset", epi_dir, "dataset directory")->required();
    epi->add_option("--tolerance", epi_tol, "pass threshold in pixels");
    RectifyArgs rc;
    auto* rect = geo->add_subcommand("rectify", "render one sample and write raw and rectified views");
    rc.common.attach(rect, false);
    rect->add_option("--index", rc.index, "sample index");
    rect->add_flag("--ppm", rc.ppm, "also write PPM previews");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& err) {
        const int code = app.exit(err);
        return code == 0 ? 0 : kExitInvalid;
    }

    if (*g) return guarded([&] { return cmd_generate(gen); });
    if (*t) return guarded([&] { return cmd_train(tr); });
    if (*e) return guarded([&] { return cmd_eval(ev); });
    if (*a) return guarded([&] { return cmd_ablate(ab); });
    if (*conv) return guarded([&] { return cmd_convert(cv); });
    if (*epi) return guarded([&] { return cmd_epipolar_check(epi_dir, epi_tol); });
    if (*rect) return guarded([&] { return cmd_rectify(rc); });
    return kExitInvalid;
}
