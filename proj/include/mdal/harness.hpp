#pragma once

#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "mdal/acquisition.hpp"
#include "mdal/config.hpp"
#include "mdal/detector.hpp"
#include "mdal/losses.hpp"
#include "mdal/uncertainty.hpp"

namespace mdal {

// confidence floor used when sweeping PR curves for mAP (scoring keeps the
// configured floor; evaluation needs the low-confidence tail)
inline constexpr double kEvalConfFloor = 0.05;

inline std::string fmt_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

/// Minimal CSV reader for the tool's own outputs (no quoting needed).
inline std::vector<std::vector<std::string>> read_csv(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("read_csv: cannot open " + path);
    std::vector<std::vector<std::string>> rows;
    std::string line;
    while (std::getline(f, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        std::vector<std::string> row;
        std::string cell;
        std::istringstream in(line);
        while (std::getline(in, cell, ',')) row.push_back(cell);
        rows.push_back(std::move(row));
    }
    return rows;
}

// ---- benchmark data ----

struct Bench {
    DatasetSpec spec;
    std::vector<Scene> scenes;
    std::vector<int> train_ids;
    std::vector<int> test_ids;
};

inline Bench make_bench(const ExperimentConfig& cfg) {
    Bench b;
    b.spec = cfg.dataset;
    b.scenes = generate_dataset(cfg.dataset);
    auto parts = split_ids(cfg.dataset.n_scenes, {cfg.train_fraction, 1.0 - cfg.train_fraction},
                           cfg.dataset.seed);
    b.train_ids = std::move(parts[0]);
    b.test_ids = std::move(parts[1]);
    std::sort(b.train_ids.begin(), b.train_ids.end());
    std::sort(b.test_ids.begin(), b.test_ids.end());
    return b;
}

// ---- AL state ----

struct CycleRecord {
    int cycle = 0;
    int labeled_count = 0;  // before selection
    double map50 = 0, map75 = 0;
    std::vector<int> selection;
    PoolScores scores;  // populated for acquisition = uncertainty
    std::vector<LossBreakdown> loss_curve;
    double wall_sec = 0;
    uint64_t init_param_hash = 0;
};

struct ALState {
    int cycle = 0;
    std::vector<int> labeled_ids;
    std::vector<int> unlabeled_ids;
    std::vector<CycleRecord> records;
    uint64_t master_seed = 0;
};

inline uint64_t cycle_init_seed(uint64_t master, int cycle) {
    return derive_seed(master, 1000 + static_cast<uint64_t>(cycle));
}
inline uint64_t cycle_train_seed(uint64_t master, int cycle) {
    return derive_seed(master, 2000 + static_cast<uint64_t>(cycle));
}
inline uint64_t cycle_selection_seed(uint64_t master, int cycle) {
    return derive_seed(master, 3000 + static_cast<uint64_t>(cycle));
}
inline uint64_t initial_labeled_seed(uint64_t master) { return derive_seed(master, 999); }

inline ALState init_al_state(const Bench& bench, const ExperimentConfig& cfg,
                             uint64_t master_seed) {
    ALState s;
    s.master_seed = master_seed;
    s.labeled_ids = random_select(bench.train_ids, initial_labeled_seed(master_seed),
                                  static_cast<size_t>(cfg.initial_labeled));
    for (int id : bench.train_ids)
        if (!std::binary_search(s.labeled_ids.begin(), s.labeled_ids.end(), id))
            s.unlabeled_ids.push_back(id);
    return s;
}

inline std::vector<Scene> collect_scenes(const Bench& bench, const std::vector<int>& ids) {
    std::vector<Scene> out;
    out.reserve(ids.size());
    for (int id : ids) out.push_back(bench.scenes[id]);
    return out;
}

// ---- acquisition dispatch ----

/// Scores the unlabeled pool with the configured method and returns the
/// selected ids (ascending). For the uncertainty method the full PoolScores
/// are returned through `scores_out`.
inline std::vector<int> acquire(const DetectorModel& model, const Bench& bench,
                                const ALState& state, const ExperimentConfig& cfg,
                                size_t budget, PoolScores* scores_out) {
    if (cfg.acquisition == "random")
        return random_select(state.unlabeled_ids,
                             cycle_selection_seed(state.master_seed, state.cycle), budget);
    if (cfg.acquisition == "uncertainty") {
        std::vector<PoolImage> pool;
        pool.reserve(state.unlabeled_ids.size());
        for (int id : state.unlabeled_ids) {
            const InferenceResult r = run_forward(model, bench.scenes[id]);
            std::vector<Detection> dets = predict(r.loc_rows, r.cls_rows, model.anchors,
                                                  model.config, cfg.conf_floor, cfg.nms_iou);
            attach_uncertainties(dets, r.loc_rows, r.cls_rows, model.config, cfg.cls_reduction);
            PoolImage img;
            img.image_id = id;
            for (const auto& d : dets) img.objects.push_back(d.uncertainty);
            pool.push_back(std::move(img));
        }
        PoolScores scores = score_pool(pool, cfg.aggregation);
        std::vector<int> sel = select_top_k(scores, budget);
        if (scores_out) *scores_out = std::move(scores);
        return sel;
    }
    if (cfg.acquisition == "entropy") {
        std::vector<std::pair<int, std::optional<double>>> scored;
        for (int id : state.unlabeled_ids) {
            const auto dets = detect(model, bench.scenes[id], cfg.conf_floor, cfg.nms_iou);
            scored.emplace_back(id, entropy_score(dets));
        }
        return select_top_k_scalar(scored, budget);
    }
    if (cfg.acquisition == "coreset") {
        std::vector<std::pair<int, std::vector<double>>> pool_feat;
        for (int id : state.unlabeled_ids)
            pool_feat.emplace_back(id, run_forward(model, bench.scenes[id]).pooled_features);
        std::vector<std::vector<double>> labeled_feat;
        for (int id : state.labeled_ids)
            labeled_feat.push_back(run_forward(model, bench.scenes[id]).pooled_features);
        return coreset_greedy(pool_feat, labeled_feat, budget);
    }
    throw std::invalid_argument("acquire: unknown acquisition " + cfg.acquisition);
}

// ---- cycle / experiment ----

inline double evaluate_model_map(const DetectorModel& model, const std::vector<Scene>& test,
                                 double nms_iou, double iou_thr) {
    std::vector<std::vector<Detection>> preds;
    preds.reserve(test.size());
    for (const auto& sc : test) preds.push_back(detect(model, sc, kEvalConfFloor, nms_iou));
    return evaluate_map(preds, test, model.config.num_classes, iou_thr);
}

/// One AL cycle: fresh seeded init, train on the labeled set, evaluate,
/// score the pool, move the top-B into the labeled set.
inline CycleRecord run_cycle(ALState& state, const Bench& bench, const ExperimentConfig& cfg,
                             DetectorModel* model_out = nullptr) {
    if (state.unlabeled_ids.size() < static_cast<size_t>(cfg.budget))
        throw std::runtime_error("run_cycle: pool exhausted");
    const auto t0 = std::chrono::steady_clock::now();
    CycleRecord rec;
    rec.cycle = state.cycle;
    rec.labeled_count = static_cast<int>(state.labeled_ids.size());

    DetectorModel model = make_model(cfg.network, cycle_init_seed(state.master_seed, state.cycle));
    rec.init_param_hash = param_hash(model.params);
    const TrainResult tr = train(model, collect_scenes(bench, state.labeled_ids), cfg.optimizer,
                                 cycle_train_seed(state.master_seed, state.cycle));
    rec.loss_curve = tr.curve;

    const std::vector<Scene> test = collect_scenes(bench, bench.test_ids);
    rec.map50 = evaluate_model_map(model, test, cfg.nms_iou, 0.5);
    rec.map75 = evaluate_model_map(model, test, cfg.nms_iou, 0.75);

    rec.selection = acquire(model, bench, state, cfg, static_cast<size_t>(cfg.budget),
                            &rec.scores);

    // move selection into the labeled set
    std::vector<int> remaining;
    remaining.reserve(state.unlabeled_ids.size() - rec.selection.size());
    for (int id : state.unlabeled_ids)
        if (!std::binary_search(rec.selection.begin(), rec.selection.end(), id))
            remaining.push_back(id);
    state.labeled_ids.insert(state.labeled_ids.end(), rec.selection.begin(),
                             rec.selection.end());
    std::sort(state.labeled_ids.begin(), state.labeled_ids.end());
    state.unlabeled_ids = std::move(remaining);
    state.cycle += 1;

    rec.wall_sec = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (model_out) *model_out = std::move(model);
    return rec;
}

struct SeedRun {
    uint64_t seed = 0;
    std::vector<int> initial_labeled;
    std::vector<CycleRecord> cycles;
    bool complete = true;
};

struct ExperimentReport {
    std::vector<SeedRun> runs;
};

using CycleCallback =
    std::function<void(uint64_t seed, const CycleRecord&, const DetectorModel&)>;

inline ExperimentReport run_experiment(const ExperimentConfig& cfg, const Bench& bench,
                                       const CycleCallback& on_cycle = {}) {
    cfg.validate();
    ExperimentReport report;
    for (uint64_t seed : cfg.seeds) {
        SeedRun run;
        run.seed = seed;
        ALState state = init_al_state(bench, cfg, seed);
        run.initial_labeled = state.labeled_ids;
        for (int c = 0; c < cfg.cycles; ++c) {
            try {
                DetectorModel model;
                run.cycles.push_back(run_cycle(state, bench, cfg, &model));
                if (on_cycle) on_cycle(seed, run.cycles.back(), model);
            } catch (const std::runtime_error&) {
                run.complete = false;
                break;
            }
        }
        report.runs.push_back(std::move(run));
    }
    return report;
}

inline ExperimentReport run_experiment(const ExperimentConfig& cfg) {
    const Bench bench = make_bench(cfg);
    return run_experiment(cfg, bench);
}

// ---- output files ----

inline void write_metrics_csv(const ExperimentReport& rep, const std::string& path) {
    std::ofstream f(path, std::ios::binary);
    f << "seed,cycle,labeled_count,map50,map75\n";
    for (const auto& run : rep.runs)
        for (const auto& c : run.cycles)
            f << run.seed << "," << c.cycle << "," << c.labeled_count << ","
              << fmt_double(c.map50) << "," << fmt_double(c.map75) << "\n";
}

inline void write_timings_csv(const ExperimentReport& rep, const std::string& path) {
    std::ofstream f(path, std::ios::binary);
    f << "seed,cycle,wall_sec\n";
    for (const auto& run : rep.runs)
        for (const auto& c : run.cycles)
            f << run.seed << "," << c.cycle << "," << fmt_double(c.wall_sec) << "\n";
}

inline void write_selections_csv(const ExperimentReport& rep, const std::string& path) {
    std::ofstream f(path, std::ios::binary);
    f << "seed,cycle,image_id\n";
    for (const auto& run : rep.runs)
        for (const auto& c : run.cycles)
            for (int id : c.selection) f << run.seed << "," << c.cycle << "," << id << "\n";
}

inline void write_scores_csv(const ExperimentReport& rep, int cycle, const std::string& path) {
    std::ofstream f(path, std::ios::binary);
    f << "seed,image_id,al_b,ep_b,al_c,ep_c,aggregate,selected\n";
    for (const auto& run : rep.runs) {
        if (cycle >= static_cast<int>(run.cycles.size())) continue;
        const auto& rec = run.cycles[cycle];
        for (const auto& e : rec.scores.entries) {
            const bool sel = std::binary_search(rec.selection.begin(), rec.selection.end(),
                                                e.image_id);
            f << run.seed << "," << e.image_id;
            for (int t = 0; t < 4; ++t) f << "," << fmt_double(e.type_scores[t]);
            f << "," << fmt_double(e.aggregate) << "," << (sel ? 1 : 0) << "\n";
        }
    }
}

inline void write_loss_curve_csv(const std::vector<LossBreakdown>& curve,
                                 const std::string& path) {
    std::ofstream f(path, std::ios::binary);
    f << "step,total,loc,cl_pos,cl_neg\n";
    for (size_t i = 0; i < curve.size(); ++i)
        f << i << "," << fmt_double(curve[i].total) << "," << fmt_double(curve[i].loc) << ","
          << fmt_double(curve[i].cl_pos) << "," << fmt_double(curve[i].cl_neg) << "\n";
}

inline void write_summary_csv(const ExperimentReport& rep, const std::string& path) {
    std::ofstream f(path, std::ios::binary);
    f << "cycle,labeled_count,map50_mean,map50_std,map75_mean,map75_std\n";
    if (rep.runs.empty()) return;
    const size_t n_cycles = rep.runs[0].cycles.size();
    for (size_t c = 0; c < n_cycles; ++c) {
        std::vector<double> m50, m75;
        for (const auto& run : rep.runs)
            if (c < run.cycles.size()) {
                m50.push_back(run.cycles[c].map50);
                m75.push_back(run.cycles[c].map75);
            }
        auto mean_std = [](const std::vector<double>& v) {
            double mean = 0;
            for (double x : v) mean += x;
            mean /= static_cast<double>(v.size());
            double var = 0;
            for (double x : v) var += (x - mean) * (x - mean);
            return std::pair<double, double>(mean, std::sqrt(var / v.size()));
        };
        const auto [mean50, std50] = mean_std(m50);
        const auto [mean75, std75] = mean_std(m75);
        f << c << "," << rep.runs[0].cycles[c].labeled_count << "," << fmt_double(mean50)
          << "," << fmt_double(std50) << "," << fmt_double(mean75) << ","
          << fmt_double(std75) << "\n";
    }
}

inline void write_experiment_outputs(const ExperimentReport& rep, const ExperimentConfig& cfg,
                                     const std::string& out_dir) {
    namespace fs = std::filesystem;
    fs::create_directories(out_dir);
    std::ofstream snap(fs::path(out_dir) / "config.snapshot");
    snap << config_to_text(cfg);
    write_metrics_csv(rep, (fs::path(out_dir) / "metrics.csv").string());
    write_selections_csv(rep, (fs::path(out_dir) / "selections.csv").string());
    write_timings_csv(rep, (fs::path(out_dir) / "timings.csv").string());
    write_summary_csv(rep, (fs::path(out_dir) / "summary.csv").string());
    if (cfg.acquisition == "uncertainty")
        for (int c = 0; c < cfg.cycles; ++c)
            write_scores_csv(rep, c,
                             (fs::path(out_dir) / ("scores_cycle" + std::to_string(c) + ".csv"))
                                 .string());
    for (const auto& run : rep.runs)
        for (const auto& rec : run.cycles)
            write_loss_curve_csv(rec.loss_curve,
                                 (fs::path(out_dir) / ("losses_seed" + std::to_string(run.seed) +
                                                       "_cycle" + std::to_string(rec.cycle) +
                                                       ".csv"))
                                     .string());
}

// ---- table-shaped reports ----

struct AggRow {
    std::string mode;
    uint64_t seed;
    int cycle;
    int labeled_count;
    double map50, map75;
};

/// One AL experiment per aggregation mode plus random, sharing the initial
/// labeled set (seed-derived, mode-independent).
inline std::vector<AggRow> compare_aggregations(const ExperimentConfig& base,
                                                const Bench& bench) {
    std::vector<AggRow> rows;
    auto run_mode = [&](const std::string& label, const ExperimentConfig& cfg) {
        const ExperimentReport rep = run_experiment(cfg, bench);
        for (const auto& run : rep.runs)
            for (const auto& c : run.cycles)
                rows.push_back({label, run.seed, c.cycle, c.labeled_count, c.map50, c.map75});
    };
    ExperimentConfig rnd = base;
    rnd.acquisition = "random";
    run_mode("random", rnd);
    for (const AggregationMode& mode : all_aggregation_modes()) {
        ExperimentConfig cfg = base;
        cfg.acquisition = "uncertainty";
        cfg.aggregation = mode;
        run_mode(mode.name(), cfg);
    }
    return rows;
}

inline void write_agg_table_csv(const std::vector<AggRow>& rows, const std::string& path) {
    std::ofstream f(path, std::ios::binary);
    f << "mode,seed,cycle,labeled_count,map50,map75\n";
    for (const auto& r : rows)
        f << r.mode << "," << r.seed << "," << r.cycle << "," << r.labeled_count << ","
          << fmt_double(r.map50) << "," << fmt_double(r.map75) << "\n";
}

/// Trains once on the initial labeled set, scores the pool, selects the
/// budget by each single uncertainty type, and reports pairwise overlap.
inline std::array<std::array<double, 4>, 4> overlap_analysis(const ExperimentConfig& cfg,
                                                             const Bench& bench,
                                                             uint64_t master_seed) {
    ALState state = init_al_state(bench, cfg, master_seed);
    DetectorModel model = make_model(cfg.network, cycle_init_seed(master_seed, 0));
    train(model, collect_scenes(bench, state.labeled_ids), cfg.optimizer,
          cycle_train_seed(master_seed, 0));
    std::array<std::vector<int>, 4> selections;
    for (int t = 0; t < 4; ++t) {
        ExperimentConfig c = cfg;
        c.acquisition = "uncertainty";
        c.aggregation = AggregationMode{AggregationMode::Op::Single, 1u << t};
        selections[t] = acquire(model, bench, state, c, static_cast<size_t>(cfg.budget), nullptr);
    }
    std::array<std::array<double, 4>, 4> m{};
    for (int i = 0; i < 4; ++i)
        for (int j = 0; j < 4; ++j) m[i][j] = overlap_ratio(selections[i], selections[j]);
    return m;
}

inline void write_overlap_csv(const std::array<std::array<double, 4>, 4>& m,
                              const std::string& path) {
    std::ofstream f(path, std::ios::binary);
    f << "type,al_b,ep_b,al_c,ep_c\n";
    for (int i = 0; i < 4; ++i) {
        f << type_name(i);
        for (int j = 0; j < 4; ++j) f << "," << fmt_double(m[i][j]);
        f << "\n";
    }
}

}  // namespace mdal
