// mdal — mixture-density active learning for object detection, desk scale.
//
// Subcommands: gen-data, train, score, al-run, compare-agg, overlap, eval,
// grad-check. Every run is a pure function of (config, seed); repeated runs
// produce byte-identical CSVs.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "mdal/gradcheck.hpp"
#include "mdal/harness.hpp"

namespace fs = std::filesystem;
using namespace mdal;

namespace {

struct CommonArgs {
    std::string config_path;
    std::string out_dir;
    std::optional<uint64_t> seed_override;
};

void add_common(CLI::App* cmd, CommonArgs& args, bool out_required = true) {
    cmd->add_option("--config", args.config_path, "experiment config file (key = value)");
    auto* out = cmd->add_option("--out", args.out_dir, "output directory");
    if (out_required) out->required();
    cmd->add_option("--seed", args.seed_override, "override config seeds with one seed");
}

ExperimentConfig load_config(const CommonArgs& args) {
    try {
        ExperimentConfig cfg = args.config_path.empty() ? default_experiment_config()
                                                        : load_experiment_config(args.config_path);
        if (args.seed_override) cfg.seeds = {*args.seed_override};
        cfg.validate();
        return cfg;
    } catch (const std::runtime_error& e) {
        // any failure while reading/validating the config is a usage error
        throw std::invalid_argument(e.what());
    }
}

void snapshot_config(const ExperimentConfig& cfg, const std::string& dir) {
    fs::create_directories(dir);
    std::ofstream f(fs::path(dir) / "config.snapshot");
    f << config_to_text(cfg);
}

int cmd_gen_data(const CommonArgs& args) {
    const ExperimentConfig cfg = load_config(args);
    const auto scenes = generate_dataset(cfg.dataset);
    save_dataset(cfg.dataset, scenes, args.out_dir);
    std::cout << "wrote " << scenes.size() << " scenes to " << args.out_dir << "\n";
    return 0;
}

int cmd_train(const CommonArgs& args) {
    const ExperimentConfig cfg = load_config(args);
    snapshot_config(cfg, args.out_dir);
    const Bench bench = make_bench(cfg);
    const uint64_t seed = cfg.seeds.front();
    DetectorModel model = make_model(cfg.network, cycle_init_seed(seed, 0));
    const TrainResult tr = train(model, collect_scenes(bench, bench.train_ids), cfg.optimizer,
                                 cycle_train_seed(seed, 0));
    write_loss_curve_csv(tr.curve, (fs::path(args.out_dir) / "loss_curve.csv").string());
    save_checkpoint(model.params, (fs::path(args.out_dir) / "model.ckpt").string());
    const auto test = collect_scenes(bench, bench.test_ids);
    const double m50 = evaluate_model_map(model, test, cfg.nms_iou, 0.5);
    const double m75 = evaluate_model_map(model, test, cfg.nms_iou, 0.75);
    std::ofstream f(fs::path(args.out_dir) / "eval.csv", std::ios::binary);
    f << "map50,map75\n" << fmt_double(m50) << "," << fmt_double(m75) << "\n";
    std::cout << "mAP@0.5 " << m50 << "  mAP@0.75 " << m75 << "\n";
    return 0;
}

int cmd_eval(const CommonArgs& args, const std::string& ckpt) {
    const ExperimentConfig cfg = load_config(args);
    const Bench bench = make_bench(cfg);
    DetectorModel model = make_model(cfg.network, 0);
    model.params = load_checkpoint(ckpt);
    const auto test = collect_scenes(bench, bench.test_ids);
    const double m50 = evaluate_model_map(model, test, cfg.nms_iou, 0.5);
    const double m75 = evaluate_model_map(model, test, cfg.nms_iou, 0.75);
    fs::create_directories(args.out_dir);
    std::ofstream f(fs::path(args.out_dir) / "eval.csv", std::ios::binary);
    f << "map50,map75\n" << fmt_double(m50) << "," << fmt_double(m75) << "\n";
    std::cout << "mAP@0.5 " << m50 << "  mAP@0.75 " << m75 << "\n";
    return 0;
}

int cmd_score(const CommonArgs& args, const std::string& ckpt) {
    const ExperimentConfig cfg = load_config(args);
    snapshot_config(cfg, args.out_dir);
    const Bench bench = make_bench(cfg);
    const uint64_t seed = cfg.seeds.front();
    ALState state = init_al_state(bench, cfg, seed);
    DetectorModel model = make_model(cfg.network, cycle_init_seed(seed, 0));
    if (!ckpt.empty()) {
        model.params = load_checkpoint(ckpt);
    } else {
        train(model, collect_scenes(bench, state.labeled_ids), cfg.optimizer,
              cycle_train_seed(seed, 0));
    }

    std::ofstream unc(fs::path(args.out_dir) / "uncertainties.csv", std::ios::binary);
    unc << "image_id,detection_id,class,confidence,al_b,ep_b,al_c,ep_c\n";
    std::vector<PoolImage> pool;
    for (int id : state.unlabeled_ids) {
        const InferenceResult r = run_forward(model, bench.scenes[id]);
        std::vector<Detection> dets = predict(r.loc_rows, r.cls_rows, model.anchors,
                                              model.config, cfg.conf_floor, cfg.nms_iou);
        attach_uncertainties(dets, r.loc_rows, r.cls_rows, model.config, cfg.cls_reduction);
        PoolImage img;
        img.image_id = id;
        for (size_t j = 0; j < dets.size(); ++j) {
            const auto& d = dets[j];
            img.objects.push_back(d.uncertainty);
            unc << id << "," << j << "," << d.class_id << "," << fmt_double(d.confidence)
                << "," << fmt_double(d.uncertainty.al_b) << "," << fmt_double(d.uncertainty.ep_b)
                << "," << fmt_double(d.uncertainty.al_c) << "," << fmt_double(d.uncertainty.ep_c)
                << "\n";
        }
        pool.push_back(std::move(img));
    }
    const PoolScores scores = score_pool(pool, cfg.aggregation);
    const std::vector<int> selected = select_top_k(scores, static_cast<size_t>(cfg.budget));
    std::ofstream f(fs::path(args.out_dir) / "scores.csv", std::ios::binary);
    f << "image_id,al_b,ep_b,al_c,ep_c,aggregate,selected\n";
    for (const auto& e : scores.entries) {
        const bool sel = std::binary_search(selected.begin(), selected.end(), e.image_id);
        f << e.image_id;
        for (int t = 0; t < 4; ++t) f << "," << fmt_double(e.type_scores[t]);
        f << "," << fmt_double(e.aggregate) << "," << (sel ? 1 : 0) << "\n";
    }
    std::cout << "scored " << scores.entries.size() << " pool images\n";
    return 0;
}

int cmd_al_run(const CommonArgs& args) {
    const ExperimentConfig cfg = load_config(args);
    fs::create_directories(args.out_dir);
    const Bench bench = make_bench(cfg);
    const CycleCallback save_ckpt = [&](uint64_t seed, const CycleRecord& rec,
                                        const DetectorModel& model) {
        save_checkpoint(model.params,
                        (fs::path(args.out_dir) / ("ckpt_seed" + std::to_string(seed) +
                                                   "_cycle" + std::to_string(rec.cycle) + ".txt"))
                            .string());
    };
    const ExperimentReport rep = run_experiment(cfg, bench, save_ckpt);
    write_experiment_outputs(rep, cfg, args.out_dir);
    for (const auto& run : rep.runs)
        if (!run.complete) std::cerr << "warning: seed " << run.seed << " ended early (pool exhausted)\n";
    std::cout << "wrote " << args.out_dir << "/metrics.csv\n";
    return 0;
}

int cmd_compare_agg(const CommonArgs& args) {
    const ExperimentConfig cfg = load_config(args);
    snapshot_config(cfg, args.out_dir);
    const Bench bench = make_bench(cfg);
    const auto rows = compare_aggregations(cfg, bench);
    write_agg_table_csv(rows, (fs::path(args.out_dir) / "agg_table.csv").string());
    std::cout << "wrote " << args.out_dir << "/agg_table.csv (" << rows.size() << " rows)\n";
    return 0;
}

int cmd_overlap(const CommonArgs& args) {
    const ExperimentConfig cfg = load_config(args);
    snapshot_config(cfg, args.out_dir);
    const Bench bench = make_bench(cfg);
    const auto m = overlap_analysis(cfg, bench, cfg.seeds.front());
    write_overlap_csv(m, (fs::path(args.out_dir) / "overlap.csv").string());
    std::cout << "wrote " << args.out_dir << "/overlap.csv\n";
    return 0;
}

int cmd_grad_check(const CommonArgs& args) {
    const uint64_t seed = args.seed_override.value_or(7);
    const double tol = 1e-4;
    const auto results = run_grad_checks(50, tol, seed);
    bool all_pass = true;
    for (const auto& r : results) {
        std::cout << r.name << " max_rel_err=" << r.max_rel_err
                  << (r.pass ? " PASS" : " FAIL") << "\n";
        all_pass = all_pass && r.pass;
    }
    return all_pass ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"mixture-density active learning for object detection (desk scale)"};
    app.require_subcommand(1);

    CommonArgs gen_args, train_args, score_args, al_args, agg_args, ovl_args, eval_args, gc_args;
    std::string score_ckpt, eval_ckpt;

    add_common(app.add_subcommand("gen-data", "generate and serialize a dataset"), gen_args);
    add_common(app.add_subcommand("train", "train one model on the train split"), train_args);
    auto* score = app.add_subcommand("score", "score the unlabeled pool");
    add_common(score, score_args);
    score->add_option("--ckpt", score_ckpt, "checkpoint to score with (else trains first)");
    add_common(app.add_subcommand("al-run", "run the active-learning experiment"), al_args);
    add_common(app.add_subcommand("compare-agg", "aggregation-mode comparison table"), agg_args);
    add_common(app.add_subcommand("overlap", "per-type selection overlap matrix"), ovl_args);
    auto* ev = app.add_subcommand("eval", "evaluate a checkpoint on the test split");
    add_common(ev, eval_args);
    ev->add_option("--ckpt", eval_ckpt, "checkpoint to evaluate")->required();
    add_common(app.add_subcommand("grad-check", "finite-difference gradient suite"), gc_args,
               /*out_required=*/false);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) return app.exit(e);  // --help
        app.exit(e);
        return 2;
    }

    try {
        if (app.got_subcommand("gen-data")) return cmd_gen_data(gen_args);
        if (app.got_subcommand("train")) return cmd_train(train_args);
        if (app.got_subcommand("score")) return cmd_score(score_args, score_ckpt);
        if (app.got_subcommand("al-run")) return cmd_al_run(al_args);
        if (app.got_subcommand("compare-agg")) return cmd_compare_agg(agg_args);
        if (app.got_subcommand("overlap")) return cmd_overlap(ovl_args);
        if (app.got_subcommand("eval")) return cmd_eval(eval_args, eval_ckpt);
        if (app.got_subcommand("grad-check")) return cmd_grad_check(gc_args);
    } catch (const std::invalid_argument& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::runtime_error& e) {
        std::cerr << "error: " << e.what() << "\n";
        const std::string msg = e.what();
        return msg.rfind("config", 0) == 0 ? 2 : 1;
    }
    return 2;
}
