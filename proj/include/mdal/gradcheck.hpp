#pragma once

#include <functional>
#include <string>
#include <vector>

#include "mdal/autodiff.hpp"
#include "mdal/losses.hpp"
#include "mdal/rng.hpp"

namespace mdal {

struct GradCheckResult {
    std::string name;
    double max_rel_err = 0;
    bool pass = false;
};

namespace detail {

struct LossInstance {
    NetworkConfig cfg;
    MatchTable match;
    int64_t n_anchors = 0;
    uint64_t noise_seed = 0;
    std::vector<int64_t> frozen_negatives;  // mining pinned at the base point
};

inline LossInstance random_loss_instance(Rng& rng, HeadVariant head) {
    LossInstance inst;
    inst.cfg.head = head;
    inst.cfg.mixture_components = rng.uniform_int(1, 3);
    inst.cfg.num_classes = rng.uniform_int(2, 4);
    inst.n_anchors = rng.uniform_int(4, 8);
    inst.noise_seed = rng.next_u64();
    inst.match.anchor_to_gt.assign(inst.n_anchors, -1);
    for (int64_t a = 0; a < inst.n_anchors; ++a) {
        if (rng.uniform() < 0.4) {
            inst.match.anchor_to_gt[a] = static_cast<int>(inst.match.positives.size());
            inst.match.positives.push_back(a);
            inst.match.encoded.push_back(
                {rng.normal(0, 0.5), rng.normal(0, 0.5), rng.normal(0, 0.3), rng.normal(0, 0.3)});
            inst.match.positive_class.push_back(rng.uniform_int(1, inst.cfg.num_classes));
        }
    }
    if (inst.match.positives.empty()) {  // force one positive
        inst.match.anchor_to_gt[0] = 0;
        inst.match.positives.push_back(0);
        inst.match.encoded.push_back({0.1, -0.2, 0.05, 0.0});
        inst.match.positive_class.push_back(1);
    }
    inst.match.n_pos = static_cast<int>(inst.match.positives.size());
    return inst;
}

inline Tensor random_rows(Rng& rng, int64_t n, int64_t rest) {
    Tensor t({n, rest});
    for (auto& v : t.data) v = rng.normal(0, 1.0);
    return t;
}

}  // namespace detail

/// Finite-difference checks of the training losses with respect to the raw
/// head rows: localization NLL, the two classification losses (positive
/// and mined-negative terms), their efficient-head variant, and the
/// 1/N-normalized total. Noise and mining selection are frozen per trial.
inline std::vector<GradCheckResult> run_grad_checks(int trials, double tolerance,
                                                    uint64_t seed) {
    Rng rng(derive_seed(seed, 0x9cad));
    const double step = 1e-5;
    std::vector<GradCheckResult> results = {
        {"loc_nll", 0, true},   {"cls_full", 0, true}, {"cls_efficient", 0, true},
        {"total_full", 0, true}, {"total_efficient", 0, true}};

    auto record = [&](size_t i, const ad::FiniteDiffReport& rep) {
        results[i].max_rel_err = std::max(results[i].max_rel_err, rep.max_rel_err);
    };

    for (int trial = 0; trial < trials; ++trial) {
        // localization loss on the full head
        {
            detail::LossInstance inst = detail::random_loss_instance(rng, HeadVariant::FullGmm);
            const int64_t rest = inst.cfg.loc_rest();
            std::vector<Tensor> params = {detail::random_rows(rng, inst.n_anchors, rest)};
            auto fn = [&](const std::vector<Tensor>& p) {
                ad::Graph g;
                return g.value(localization_loss(g, g.constant(p[0]), inst.match,
                                                 inst.cfg.mixture_components))
                    .data[0];
            };
            auto grad = [&](const std::vector<Tensor>& p) {
                ad::Graph g;
                const ad::NodeId rows = g.constant(p[0]);
                g.backward(localization_loss(g, rows, inst.match, inst.cfg.mixture_components));
                return std::vector<Tensor>{g.grad(rows)};
            };
            record(0, ad::finite_diff_check(fn, grad, params, step, tolerance));
        }
        // classification losses, full and efficient
        for (int variant = 0; variant < 2; ++variant) {
            const HeadVariant head = variant == 0 ? HeadVariant::FullGmm : HeadVariant::Efficient;
            detail::LossInstance inst = detail::random_loss_instance(rng, head);
            const int64_t rest = inst.cfg.cls_rest();
            std::vector<Tensor> params = {detail::random_rows(rng, inst.n_anchors, rest)};
            {  // pin mining at the base point
                ad::Graph g;
                const auto nodes = classification_loss(g, g.constant(params[0]), inst.match,
                                                       inst.cfg, inst.noise_seed);
                inst.frozen_negatives = nodes.selected_negatives;
            }
            auto fn = [&](const std::vector<Tensor>& p) {
                ad::Graph g;
                const auto nodes =
                    classification_loss(g, g.constant(p[0]), inst.match, inst.cfg,
                                        inst.noise_seed, kDefaultMiningRatio,
                                        &inst.frozen_negatives);
                return g.value(g.add(nodes.pos, nodes.neg)).data[0];
            };
            auto grad = [&](const std::vector<Tensor>& p) {
                ad::Graph g;
                const ad::NodeId rows = g.constant(p[0]);
                const auto nodes =
                    classification_loss(g, rows, inst.match, inst.cfg, inst.noise_seed,
                                        kDefaultMiningRatio, &inst.frozen_negatives);
                g.backward(g.add(nodes.pos, nodes.neg));
                return std::vector<Tensor>{g.grad(rows)};
            };
            record(1 + variant, ad::finite_diff_check(fn, grad, params, step, tolerance));
        }
        // combined loss over both heads' rows
        for (int variant = 0; variant < 2; ++variant) {
            const HeadVariant head = variant == 0 ? HeadVariant::FullGmm : HeadVariant::Efficient;
            detail::LossInstance inst = detail::random_loss_instance(rng, head);
            std::vector<Tensor> params = {
                detail::random_rows(rng, inst.n_anchors, inst.cfg.loc_rest()),
                detail::random_rows(rng, inst.n_anchors, inst.cfg.cls_rest())};
            {
                ad::Graph g;
                const auto nodes = classification_loss(g, g.constant(params[1]), inst.match,
                                                       inst.cfg, inst.noise_seed);
                inst.frozen_negatives = nodes.selected_negatives;
            }
            auto build = [&](ad::Graph& g, ad::NodeId loc_rows, ad::NodeId cls_rows) {
                const ad::NodeId l_loc =
                    localization_loss(g, loc_rows, inst.match, inst.cfg.mixture_components);
                const auto cls =
                    classification_loss(g, cls_rows, inst.match, inst.cfg, inst.noise_seed,
                                        kDefaultMiningRatio, &inst.frozen_negatives);
                return g.scale(g.add(g.add(l_loc, cls.pos), cls.neg),
                               1.0 / inst.match.n_pos);
            };
            auto fn = [&](const std::vector<Tensor>& p) {
                ad::Graph g;
                return g.value(build(g, g.constant(p[0]), g.constant(p[1]))).data[0];
            };
            auto grad = [&](const std::vector<Tensor>& p) {
                ad::Graph g;
                const ad::NodeId a = g.constant(p[0]);
                const ad::NodeId b = g.constant(p[1]);
                g.backward(build(g, a, b));
                return std::vector<Tensor>{g.grad(a), g.grad(b)};
            };
            record(3 + variant, ad::finite_diff_check(fn, grad, params, step, tolerance));
        }
    }
    for (auto& r : results) r.pass = r.max_rel_err <= tolerance;
    return results;
}

}  // namespace mdal
