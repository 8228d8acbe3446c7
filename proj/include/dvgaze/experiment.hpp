#pragma once

// Variant x preset x seed experiment grid, metric records and trend checks.

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "dvgaze/checkpoint.hpp"
#include "dvgaze/config.hpp"
#include "dvgaze/parallel.hpp"
#include "dvgaze/train.hpp"

namespace dvgaze {

struct SuiteCell {
    std::string variant;
    std::string preset;
    std::uint64_t seed = 0;
    bool ok = false;
    std::string error;
    Metrics metrics;  // test split; per-sample records dropped
    std::vector<EpochRecord> history;
    double seconds = 0.0;
};

// One metrics record, the line format shared by train/eval/ablate.
inline Json metrics_record(const std::string& variant, const std::string& preset, std::uint64_t seed,
                           const Metrics& m) {
    return Json{{"variant", variant},        {"preset", preset},           {"seed", seed},
                {"error_left", m.error_left}, {"error_right", m.error_right}, {"error_avg", m.error_avg},
                {"error_oracle", m.error_oracle}};
}

// Dataset seeds for a (preset, seed) cell; train and test never overlap.
inline std::uint64_t data_seed(const std::string& preset, std::uint64_t seed, bool test) {
    return Rng::derive(seed ^ fnv1a64(preset), test ? 2 : 1).next_u64();
}

struct SuiteSpec {
    std::vector<std::string> presets{"small", "medium", "long"};
    std::vector<std::uint64_t> seeds{0, 1, 2};
    std::vector<std::string> variants{"concat",         "transformer_only", "dvgaze",
                                      "dvgaze_no_gc",   "dvgaze_no_pose",   "dvgaze_no_comp"};
    // Optional per-preset override of `variants`.
    std::map<std::string, std::vector<std::string>> variants_for_preset;
    ExperimentConfig base;
    int threads = 1;
    std::optional<std::filesystem::path> out_dir;  // per-cell checkpoints + metrics.jsonl

    const std::vector<std::string>& variants_of(const std::string& preset) const {
        auto it = variants_for_preset.find(preset);
        return it == variants_for_preset.end() ? variants : it->second;
    }
};

struct SuiteReport {
    std::vector<SuiteCell> cells;

    const SuiteCell* find(const std::string& variant, const std::string& preset, std::uint64_t seed) const {
        for (const auto& c : cells)
            if (c.variant == variant && c.preset == preset && c.seed == seed) return &c;
        return nullptr;
    }
};

inline SuiteReport run_ablation_suite(const SuiteSpec& spec,
                                      const std::function<void(const SuiteCell&)>& on_cell = {}) {
    for (const auto& p : spec.presets) RigConfig::from_preset(p);
    for (const auto& p : spec.presets)
        for (const auto& v : spec.variants_of(p)) Variant::from_name(v);

    struct Job {
        std::string variant, preset;
        std::uint64_t seed;
        std::size_t data_slot;
    };
    struct DataSlot {
        std::string preset;
        std::uint64_t seed;
        std::vector<DualViewSample> train, test;
    };
    std::vector<DataSlot> data;
    std::vector<Job> jobs;
    for (const auto& preset : spec.presets)
        for (auto seed : spec.seeds) {
            data.push_back({preset, seed, {}, {}});
            for (const auto& v : spec.variants_of(preset)) jobs.push_back({v, preset, seed, data.size() - 1});
        }

    parallel_for(data.size(), spec.threads, [&](std::size_t i) {
        ExperimentConfig cfg = spec.base;
        cfg.rig = RigConfig::from_preset(data[i].preset);
        data[i].train = generate_samples(cfg.generation(cfg.data.train_count, data_seed(data[i].preset, data[i].seed, false)));
        data[i].test = generate_samples(cfg.generation(cfg.data.test_count, data_seed(data[i].preset, data[i].seed, true)));
    });

    SuiteReport report;
    report.cells.resize(jobs.size());
    std::mutex emit;
    parallel_for(jobs.size(), spec.threads, [&](std::size_t j) {
        const Job& job = jobs[j];
        SuiteCell cell;
        cell.variant = job.variant;
        cell.preset = job.preset;
        cell.seed = job.seed;
        const auto t0 = std::chrono::steady_clock::now();
        try {
            TrainConfig tc = spec.base.train;
            tc.seed = job.seed;
            GazeNet net(spec.base.model, Variant::from_name(job.variant), job.seed);
            const TrainResult tr = train(net, data[job.data_slot].train, tc);
            cell.history = tr.history;
            cell.metrics = evaluate(net, data[job.data_slot].test);
            cell.metrics.per_sample.clear();
            cell.ok = true;
            if (spec.out_dir) {
                const auto dir = *spec.out_dir / job.preset / (job.variant + "_seed" + std::to_string(job.seed));
                save_checkpoint(dir / "model.ckpt", make_checkpoint(net, tc, tr.history));
            }
        } catch (const std::exception& e) {
            cell.error = e.what();
        }
        cell.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        std::lock_guard<std::mutex> lock(emit);
        report.cells[j] = cell;
        if (on_cell) on_cell(cell);
    });

    if (spec.out_dir) {
        std::filesystem::create_directories(*spec.out_dir);
        std::string lines;
        for (const auto& c : report.cells)
            if (c.ok) lines += metrics_record(c.variant, c.preset, c.seed, c.metrics).dump() + "\n";
        detail::write_file(*spec.out_dir / "metrics.jsonl", lines);
    }
    return report;
}

// ------------------------------------------------------------------- trends

struct TrendSummary {
    std::string variant, preset;
    int runs = 0;
    double mean = 0.0, min = 0.0, max = 0.0;  // mean per-view error, degrees
};

inline std::vector<TrendSummary> summarize(const SuiteReport& r) {
    std::vector<TrendSummary> out;
    for (const auto& c : r.cells) {
        if (!c.ok) continue;
        auto it = std::find_if(out.begin(), out.end(),
                               [&](const TrendSummary& s) { return s.variant == c.variant && s.preset == c.preset; });
        const double e = c.metrics.mean_view_error();
        if (it == out.end()) {
            out.push_back({c.variant, c.preset, 1, e, e, e});
        } else {
            it->mean += e;
            it->min = std::min(it->min, e);
            it->max = std::max(it->max, e);
            ++it->runs;
        }
    }
    for (auto& s : out) s.mean /= s.runs;
    return out;
}

struct TrendCheck {
    std::string name;
    bool passed = false;
    int seeds_passing = 0;
    int seeds_total = 0;
    std::string detail;
};

// At least two thirds of the seeds, rounded up (2 of 3).
inline int seeds_required(int n) { return (2 * n + 2) / 3; }

inline std::optional<double> cell_error(const SuiteReport& r, const std::string& variant, const std::string& preset,
                                        std::uint64_t seed) {
    const SuiteCell* c = r.find(variant, preset, seed);
    if (!c || !c->ok) return std::nullopt;
    return c->metrics.mean_view_error();
}

// Relative improvement of `model` over `baseline`: (e_base - e_model) / e_base.
inline std::optional<double> relative_improvement(const SuiteReport& r, const std::string& model,
                                                  const std::string& baseline, const std::string& preset,
                                                  std::uint64_t seed) {
    auto m = cell_error(r, model, preset, seed), b = cell_error(r, baseline, preset, seed);
    if (!m || !b || *b <= 0.0) return std::nullopt;
    return (*b - *m) / *b;
}

inline TrendCheck check_per_seed(const std::string& name, const std::vector<std::uint64_t>& seeds,
                                 const std::function<std::optional<bool>(std::uint64_t, std::ostringstream&)>& pred) {
    TrendCheck t;
    t.name = name;
    std::ostringstream os;
    os.setf(std::ios::fixed);
    os.precision(3);
    for (auto s : seeds) {
        os << (t.seeds_total ? "; " : "") << "seed " << s << ": ";
        const auto ok = pred(s, os);
        ++t.seeds_total;
        if (!ok) {
            os << "missing";
            continue;
        }
        os << (*ok ? " ok" : " no");
        t.seeds_passing += *ok;
    }
    t.passed = t.seeds_total > 0 && t.seeds_passing >= seeds_required(t.seeds_total);
    t.detail = os.str();
    return t;
}

inline TrendCheck check_dual_view_advantage(const SuiteReport& r, const std::vector<std::uint64_t>& seeds,
                                            const std::string& preset = "medium", double min_gain = 0.10) {
    return check_per_seed("dual-view advantage on " + preset, seeds, [&](std::uint64_t s, std::ostringstream& os)
                                                                         -> std::optional<bool> {
        auto g = relative_improvement(r, "dvgaze", "single_view", preset, s);
        if (!g) return std::nullopt;
        os << "gain " << *g;
        return *g >= min_gain;
    });
}

inline TrendCheck check_ordering(const SuiteReport& r, const std::vector<std::uint64_t>& seeds,
                                 const std::vector<std::string>& best_first, const std::string& preset = "medium") {
    std::string name = "ordering";
    for (std::size_t i = 0; i < best_first.size(); ++i) name += (i ? " <= " : " ") + best_first[i];
    return check_per_seed(name, seeds, [&](std::uint64_t s, std::ostringstream& os) -> std::optional<bool> {
        bool ok = true;
        std::optional<double> prev;
        for (const auto& v : best_first) {
            auto e = cell_error(r, v, preset, s);
            if (!e) return std::nullopt;
            os << v << "=" << *e << " ";
            if (prev && *prev > *e) ok = false;
            prev = e;
        }
        return ok;
    });
}

// The ablated variant must not beat the full model.
inline TrendCheck check_not_better(const SuiteReport& r, const std::vector<std::uint64_t>& seeds,
                                   const std::string& ablation, const std::string& full = "dvgaze",
                                   const std::string& preset = "medium") {
    return check_per_seed(ablation + " does not improve on " + full, seeds,
                          [&](std::uint64_t s, std::ostringstream& os) -> std::optional<bool> {
                              auto a = cell_error(r, ablation, preset, s), f = cell_error(r, full, preset, s);
                              if (!a || !f) return std::nullopt;
                              os << ablation << "=" << *a << " " << full << "=" << *f;
                              return *a >= *f;
                          });
}

inline TrendCheck check_distance_trend(const SuiteReport& r, const std::vector<std::uint64_t>& seeds,
                                       const std::vector<std::string>& presets = {"small", "medium", "long"}) {
    return check_per_seed("improvement non-decreasing over presets", seeds,
                          [&](std::uint64_t s, std::ostringstream& os) -> std::optional<bool> {
                              bool ok = true;
                              std::optional<double> prev;
                              for (const auto& p : presets) {
                                  auto g = relative_improvement(r, "dvgaze", "single_view", p, s);
                                  if (!g) return std::nullopt;
                                  os << p << "=" << *g << " ";
                                  if (prev && *g < *prev) ok = false;
                                  prev = g;
                              }
                              return ok;
                          });
}

inline std::string format_report(const SuiteReport& r) {
    std::ostringstream os;
    os.setf(std::ios::fixed);
    os.precision(3);
    os << "variant,preset,seed,error_left,error_right,error_avg,error_oracle,seconds,status\n";
    for (const auto& c : r.cells) {
        os << c.variant << ',' << c.preset << ',' << c.seed << ',';
        if (c.ok)
            os << c.metrics.error_left << ',' << c.metrics.error_right << ',' << c.metrics.error_avg << ','
               << c.metrics.error_oracle << ',' << c.seconds << ",ok\n";
        else
            os << ",,,," << c.seconds << ",error: " << c.error << '\n';
    }
    os << "\nvariant,preset,runs,mean_error,min,max\n";
    for (const auto& s : summarize(r))
        os << s.variant << ',' << s.preset << ',' << s.runs << ',' << s.mean << ',' << s.min << ',' << s.max << '\n';
    return os.str();
}

}  // namespace dvgaze
