#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <vector>

#include "mdal/autodiff.hpp"
#include "mdal/detector.hpp"
#include "mdal/rng.hpp"

namespace mdal {

inline constexpr double kDefaultLossEpsilon = 1.2340980408667956e-4;  // e^-9
inline constexpr int kDefaultMiningRatio = 3;

struct LossBreakdown {
    double total = 0;
    double loc = 0;
    double cl_pos = 0;
    double cl_neg = 0;
    int n_pos = 0;
};

/// Mixture NLL over the encoded offsets of the positive anchors:
/// -sum_pos sum_b log( sum_k pi N(g_hat | mu, sigma) + eps ).
/// The Gaussian density is exp(log-density clamped at -700), then eps is
/// added inside the log, so the result is finite for any finite inputs.
inline ad::NodeId localization_loss(ad::Graph& g, ad::NodeId loc_rows,
                                    const MatchTable& match, int k_comp,
                                    double eps = kDefaultLossEpsilon) {
    if (eps <= 0) throw std::invalid_argument("localization_loss: eps must be > 0");
    if (match.n_pos == 0) return g.scalar(0.0);
    const int64_t n = match.n_pos;
    const ad::NodeId rows = g.gather_rows(loc_rows, match.positives);
    ad::NodeId loss = g.scalar(0.0);
    for (int b = 0; b < 4; ++b) {
        std::vector<int64_t> pi_idx(k_comp), mu_idx(k_comp), sg_idx(k_comp);
        for (int k = 0; k < k_comp; ++k) {
            pi_idx[k] = b * 3 * k_comp + k;
            mu_idx[k] = b * 3 * k_comp + k_comp + k;
            sg_idx[k] = b * 3 * k_comp + 2 * k_comp + k;
        }
        const ad::NodeId pi = g.softmax_lastdim(g.gather_cols(rows, pi_idx));
        const ad::NodeId mu = g.gather_cols(rows, mu_idx);
        const ad::NodeId sigma = g.add_scalar(
            g.scale(g.sigmoid(g.gather_cols(rows, sg_idx)), 1.0 - kLocSigmaFloor),
            kLocSigmaFloor);
        Tensor tgt({n, k_comp});
        for (int64_t i = 0; i < n; ++i)
            for (int k = 0; k < k_comp; ++k)
                tgt.data[i * k_comp + k] = match.encoded[i][b];
        const ad::NodeId diff = g.sub(mu, g.constant(std::move(tgt)));
        // Clamp the per-coordinate log-density on both sides: the floor keeps
        // exp() finite, the cap stops the unbounded sharpening incentive
        // (sigma -> 0 at a fitted target) from starving the other loss terms
        // of gradient budget.
        const ad::NodeId raw_log_dens =
            g.scale(g.add(g.log(g.scale(sigma, 2.0 * M_PI)),
                          g.div(g.square(diff), sigma)),
                    -0.5);
        const ad::NodeId log_dens =
            g.scale(g.clamp_min(g.scale(g.clamp_min(raw_log_dens, -700.0), -1.0), -2.0), -1.0);
        const ad::NodeId mix = g.sum_lastdim(g.mul(pi, g.exp(log_dens)));
        loss = g.sub(loss, g.sum(g.log(g.add_scalar(mix, eps))));
    }
    return loss;
}

/// Noise-perturbed per-component class logits for the full head:
/// c^k_p = mu^k_p + sqrt(sigma^k_p) * gamma, gamma ~ N(0,1), one fresh draw
/// per logit. Returns a K x C' tensor; deterministic given the seed.
inline Tensor sample_class_logits(const GmmParams& cls, uint64_t seed) {
    if (cls.sigma.empty())
        throw std::invalid_argument("sample_class_logits: head has no class variances");
    const int64_t k_comp = static_cast<int64_t>(cls.pi.size());
    const int64_t cp = static_cast<int64_t>(cls.mu[0].size());
    Rng rng(seed);
    Tensor out({k_comp, cp});
    for (int64_t k = 0; k < k_comp; ++k)
        for (int64_t p = 0; p < cp; ++p)
            out.data[k * cp + p] =
                cls.mu[k][p] + std::sqrt(cls.sigma[k][p]) * rng.normal();
    return out;
}

/// Top min(M*N, size) positions by loss value, largest first in the
/// returned (ascending) index list; ties broken toward the lower index.
inline std::vector<int64_t> hard_negative_select(const std::vector<double>& neg_losses,
                                                 int m_ratio, int n_pos) {
    if (n_pos == 0) return {};
    const size_t want = std::min(neg_losses.size(),
                                 static_cast<size_t>(int64_t(m_ratio) * n_pos));
    std::vector<int64_t> order(neg_losses.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](int64_t a, int64_t b) {
        if (neg_losses[a] != neg_losses[b]) return neg_losses[a] > neg_losses[b];
        return a < b;
    });
    order.resize(want);
    std::sort(order.begin(), order.end());
    return order;
}

struct ClsLossNodes {
    ad::NodeId pos = -1;
    ad::NodeId neg = -1;
    std::vector<int64_t> selected_negatives;  // anchor indices
};

/// Mixture classification loss (positive + hard-mined negative terms).
/// Full head: per-pass Gaussian noise on the logits, one draw per logit,
/// shared by both terms. Efficient head: the raw means stand in for the
/// perturbed logits.
/// `forced_negatives`, when given, bypasses mining and uses the supplied
/// anchor indices; finite-difference checks use this to pin the selection
/// at the base point.
inline ClsLossNodes classification_loss(ad::Graph& g, ad::NodeId cls_rows,
                                        const MatchTable& match, const NetworkConfig& cfg,
                                        uint64_t noise_seed,
                                        int m_ratio = kDefaultMiningRatio,
                                        const std::vector<int64_t>* forced_negatives = nullptr) {
    if (m_ratio < 1) throw std::invalid_argument("classification_loss: M >= 1 required");
    if (cfg.head == HeadVariant::Pointwise)
        throw std::invalid_argument("classification_loss: pointwise head not supported here");
    const int k_comp = cfg.mixture_components;
    const int cp = cfg.num_classes_with_bg();
    const int64_t a_total = g.value(cls_rows).shape[0];
    ClsLossNodes out;
    if (match.n_pos == 0) {
        out.pos = g.scalar(0.0);
        out.neg = g.scalar(0.0);
        return out;
    }

    std::vector<int64_t> pi_idx(k_comp), mu_idx(int64_t(k_comp) * cp);
    for (int k = 0; k < k_comp; ++k) pi_idx[k] = k;
    for (int64_t i = 0; i < int64_t(k_comp) * cp; ++i) mu_idx[i] = k_comp + i;
    const ad::NodeId pi = g.softmax_lastdim(g.gather_cols(cls_rows, pi_idx));  // [A,K]
    ad::NodeId logits =
        g.reshape(g.gather_cols(cls_rows, mu_idx), {a_total * k_comp, cp});

    if (cfg.head == HeadVariant::FullGmm) {
        std::vector<int64_t> sg_idx(int64_t(k_comp) * cp);
        for (int64_t i = 0; i < int64_t(k_comp) * cp; ++i)
            sg_idx[i] = k_comp + int64_t(k_comp) * cp + i;
        const ad::NodeId sigma = g.sigmoid(
            g.reshape(g.gather_cols(cls_rows, sg_idx), {a_total * k_comp, cp}));
        Rng rng(noise_seed);
        Tensor gamma({a_total * k_comp, cp});
        for (auto& v : gamma.data) v = rng.normal();
        logits = g.add(logits, g.mul(g.sqrt(sigma), g.constant(std::move(gamma))));
    }

    const ad::NodeId lse = g.reshape(g.logsumexp_lastdim(logits), {a_total, k_comp});

    // positive term: per-component log-softmax at the GT class, pi-weighted
    const ad::NodeId logits_3d = g.reshape(logits, {a_total, k_comp, cp});
    const ad::NodeId pos_logits =
        g.reshape(g.gather_rows(logits_3d, match.positives),
                  {int64_t(match.n_pos) * k_comp, cp});
    std::vector<int64_t> pos_cls(size_t(match.n_pos) * k_comp);
    for (int i = 0; i < match.n_pos; ++i)
        for (int k = 0; k < k_comp; ++k)
            pos_cls[size_t(i) * k_comp + k] = match.positive_class[i];
    const ad::NodeId pos_sel = g.reshape(g.select_lastdim(pos_logits, pos_cls),
                                         {int64_t(match.n_pos), int64_t(k_comp)});
    const ad::NodeId pos_lse = g.gather_rows(lse, match.positives);
    const ad::NodeId pos_pi = g.gather_rows(pi, match.positives);
    out.pos = g.scale(g.sum(g.mul(pos_pi, g.sub(pos_sel, pos_lse))), -1.0);

    // per-anchor negative loss (background class), then hard mining
    std::vector<int64_t> bg(size_t(a_total) * k_comp, 0);
    const ad::NodeId bg_sel = g.reshape(g.select_lastdim(logits, bg), {a_total, int64_t(k_comp)});
    const ad::NodeId per_anchor_neg =
        g.scale(g.sum_lastdim(g.mul(pi, g.sub(bg_sel, lse))), -1.0);  // [A]
    if (forced_negatives) {
        out.selected_negatives = *forced_negatives;
    } else {
        const Tensor& neg_vals = g.value(per_anchor_neg);
        std::vector<int64_t> neg_anchors;
        std::vector<double> neg_losses;
        for (int64_t a = 0; a < a_total; ++a)
            if (match.anchor_to_gt[a] == -1) {
                neg_anchors.push_back(a);
                neg_losses.push_back(neg_vals.data[a]);
            }
        const std::vector<int64_t> picked =
            hard_negative_select(neg_losses, m_ratio, match.n_pos);
        for (int64_t p : picked) out.selected_negatives.push_back(neg_anchors[p]);
    }
    out.neg = out.selected_negatives.empty()
                  ? g.scalar(0.0)
                  : g.sum(g.gather_rows(per_anchor_neg, out.selected_negatives));
    return out;
}

/// Eq-style total: (L_loc + L_pos + L_neg) / N for N > 0, else exactly 0.
inline double total_loss(double l_loc, double l_pos, double l_neg, int n_pos) {
    if (n_pos <= 0) return 0.0;
    return (l_loc + l_pos + l_neg) / n_pos;
}

struct SceneLossNodes {
    ad::NodeId total = -1;
    LossBreakdown breakdown;
    std::vector<int64_t> selected_negatives;  // mined anchor indices
};

/// Smooth-L1 + cross-entropy baseline for the pointwise head, with the
/// same matching, mining and 1/N normalization.
inline SceneLossNodes build_pointwise_loss(ad::Graph& g, const ForwardNodes& fwd,
                                           const MatchTable& match, const NetworkConfig& cfg,
                                           int m_ratio,
                                           const std::vector<int64_t>* forced_negatives = nullptr) {
    SceneLossNodes out;
    out.breakdown.n_pos = match.n_pos;
    if (match.n_pos == 0) {
        out.total = g.scalar(0.0);
        return out;
    }
    const int cp = cfg.num_classes_with_bg();
    const int64_t a_total = g.value(fwd.cls_rows).shape[0];
    const int64_t n = match.n_pos;

    const ad::NodeId pos_rows = g.gather_rows(fwd.loc_rows, match.positives);
    Tensor tgt({n, 4});
    for (int64_t i = 0; i < n; ++i)
        for (int b = 0; b < 4; ++b) tgt.data[i * 4 + b] = match.encoded[i][b];
    const ad::NodeId l_loc = g.sum(g.huber(g.sub(pos_rows, g.constant(std::move(tgt)))));

    const ad::NodeId lse = g.logsumexp_lastdim(fwd.cls_rows);  // [A]
    std::vector<int64_t> cls_all(a_total, 0);
    for (int64_t i = 0; i < n; ++i)
        cls_all[match.positives[i]] = match.positive_class[i];
    const ad::NodeId sel = g.select_lastdim(fwd.cls_rows, cls_all);  // [A]
    const ad::NodeId per_anchor_ce = g.sub(lse, sel);                // [A], >= 0
    const ad::NodeId l_pos = g.sum(g.gather_rows(per_anchor_ce, match.positives));

    std::vector<int64_t> sel_neg;
    if (forced_negatives) {
        sel_neg = *forced_negatives;
    } else {
        const Tensor& ce = g.value(per_anchor_ce);
        std::vector<int64_t> neg_anchors;
        std::vector<double> neg_losses;
        for (int64_t a = 0; a < a_total; ++a)
            if (match.anchor_to_gt[a] == -1) {
                neg_anchors.push_back(a);
                neg_losses.push_back(ce.data[a]);
            }
        const auto picked = hard_negative_select(neg_losses, m_ratio, match.n_pos);
        for (int64_t p : picked) sel_neg.push_back(neg_anchors[p]);
    }
    const ad::NodeId l_neg =
        sel_neg.empty() ? g.scalar(0.0) : g.sum(g.gather_rows(per_anchor_ce, sel_neg));

    out.selected_negatives = sel_neg;
    out.total = g.scale(g.add(g.add(l_loc, l_pos), l_neg), 1.0 / match.n_pos);
    out.breakdown.loc = g.value(l_loc).data[0];
    out.breakdown.cl_pos = g.value(l_pos).data[0];
    out.breakdown.cl_neg = g.value(l_neg).data[0];
    out.breakdown.total = g.value(out.total).data[0];
    (void)cp;
    return out;
}

/// Full per-scene training objective for any head variant.
/// Weight on the localization term inside the total. The mixture NLL is the
/// only unbounded-below term; at full weight its gradients crowd out the
/// classification terms under a shared clip, and the class head never
/// separates foreground from background.
inline constexpr double kDefaultLocWeight = 0.25;

inline SceneLossNodes build_scene_loss(ad::Graph& g, const ForwardNodes& fwd,
                                       const MatchTable& match, const NetworkConfig& cfg,
                                       uint64_t noise_seed,
                                       double eps = kDefaultLossEpsilon,
                                       int m_ratio = kDefaultMiningRatio,
                                       double loc_weight = kDefaultLocWeight) {
    if (cfg.head == HeadVariant::Pointwise)
        return build_pointwise_loss(g, fwd, match, cfg, m_ratio);
    SceneLossNodes out;
    out.breakdown.n_pos = match.n_pos;
    if (match.n_pos == 0) {
        out.total = g.scalar(0.0);
        return out;
    }
    const ad::NodeId l_loc =
        localization_loss(g, fwd.loc_rows, match, cfg.mixture_components, eps);
    const ClsLossNodes cls =
        classification_loss(g, fwd.cls_rows, match, cfg, noise_seed, m_ratio);
    out.selected_negatives = cls.selected_negatives;
    out.total = g.scale(g.add(g.add(g.scale(l_loc, loc_weight), cls.pos), cls.neg),
                        1.0 / match.n_pos);
    out.breakdown.loc = g.value(l_loc).data[0];
    out.breakdown.cl_pos = g.value(cls.pos).data[0];
    out.breakdown.cl_neg = g.value(cls.neg).data[0];
    out.breakdown.total = g.value(out.total).data[0];
    return out;
}

// ---- training ----

struct OptimizerConfig {
    double learning_rate = 0.12;
    double momentum = 0.9;
    int steps = 280;
    int batch_size = 32;
    double warmup_frac = 0.05;  // linear warm-up over the first fraction of steps
    double eps = kDefaultLossEpsilon;
    int mining_ratio = kDefaultMiningRatio;
    double grad_clip = 1.0;  // global gradient-norm ceiling; <=0 disables
    double loc_weight = kDefaultLocWeight;
};

inline double lr_at(const OptimizerConfig& opt, int step) {
    const int warm = std::max(1, static_cast<int>(opt.steps * opt.warmup_frac));
    double lr = opt.learning_rate;
    if (step < warm) return lr * (step + 1) / warm;
    if (step >= opt.steps * 5 / 6) return lr * 0.01;
    if (step >= opt.steps * 2 / 3) return lr * 0.1;
    return lr;
}

struct TrainResult {
    std::vector<LossBreakdown> curve;  // one entry per step (batch means)
};

/// SGD with momentum; deterministic given the seed. Per-step batches are
/// drawn by epoch-wise shuffling; the whole labeled set is one batch when
/// it fits. Eq-4 noise is redrawn every step from a (seed, step, scene)
/// derived stream.
inline TrainResult train(DetectorModel& model, const std::vector<Scene>& labeled,
                         const OptimizerConfig& opt, uint64_t seed) {
    if (labeled.empty()) throw std::invalid_argument("train: no labeled scenes");
    std::vector<MatchTable> matches;
    matches.reserve(labeled.size());
    for (const auto& sc : labeled) matches.push_back(match_anchors(model.anchors, sc.objects));

    ParamStore velocity;
    for (const auto& [name, t] : model.params) velocity.emplace(name, Tensor(t.shape));

    Rng shuffle_rng(derive_seed(seed, 0xba7c4));
    std::vector<int> order(labeled.size());
    std::iota(order.begin(), order.end(), 0);
    size_t cursor = order.size();  // force shuffle on first use

    const bool full_batch = static_cast<int>(labeled.size()) <= opt.batch_size;
    TrainResult result;

    for (int step = 0; step < opt.steps; ++step) {
        std::vector<int> batch;
        if (full_batch) {
            batch = order;
        } else {
            for (int i = 0; i < opt.batch_size; ++i) {
                if (cursor >= order.size()) {
                    shuffle_rng.shuffle(order);
                    cursor = 0;
                }
                batch.push_back(order[cursor++]);
            }
        }

        ParamStore grad_sum;
        for (const auto& [name, t] : model.params) grad_sum.emplace(name, Tensor(t.shape));
        LossBreakdown mean{};
        for (int sid : batch) {
            ad::Graph g;
            const ForwardNodes fwd = build_forward(g, labeled[sid], model.params, model.config);
            const uint64_t noise_seed =
                derive_seed(derive_seed(seed, static_cast<uint64_t>(step)), sid);
            const SceneLossNodes loss =
                build_scene_loss(g, fwd, matches[sid], model.config, noise_seed, opt.eps,
                                 opt.mining_ratio, opt.loc_weight);
            if (!std::isfinite(loss.breakdown.total))
                throw std::runtime_error("train: loss diverged (non-finite) at step " +
                                         std::to_string(step));
            mean.total += loss.breakdown.total;
            mean.loc += loss.breakdown.loc;
            mean.cl_pos += loss.breakdown.cl_pos;
            mean.cl_neg += loss.breakdown.cl_neg;
            mean.n_pos += loss.breakdown.n_pos;
            if (loss.breakdown.n_pos == 0) continue;
            g.backward(loss.total);
            for (auto& [name, acc] : grad_sum) {
                const Tensor& pg = g.grad(fwd.params.at(name));
                for (size_t i = 0; i < acc.data.size(); ++i) acc.data[i] += pg.data[i];
            }
        }
        const double inv_b = 1.0 / static_cast<double>(batch.size());
        mean.total *= inv_b;
        mean.loc *= inv_b;
        mean.cl_pos *= inv_b;
        mean.cl_neg *= inv_b;
        result.curve.push_back(mean);

        double clip_scale = 1.0;
        if (opt.grad_clip > 0) {
            double sq = 0;
            for (const auto& [name, gsum] : grad_sum)
                for (double v : gsum.data) sq += (v * inv_b) * (v * inv_b);
            const double norm = std::sqrt(sq);
            if (norm > opt.grad_clip) clip_scale = opt.grad_clip / norm;
        }

        const double lr = lr_at(opt, step);
        for (auto& [name, p] : model.params) {
            Tensor& v = velocity.at(name);
            const Tensor& gsum = grad_sum.at(name);
            for (size_t i = 0; i < p.data.size(); ++i) {
                v.data[i] = opt.momentum * v.data[i] - lr * gsum.data[i] * inv_b * clip_scale;
                p.data[i] += v.data[i];
            }
        }
    }
    return result;
}

}  // namespace mdal
