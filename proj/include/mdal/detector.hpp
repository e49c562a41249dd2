#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "mdal/autodiff.hpp"
#include "mdal/checkpoint.hpp"
#include "mdal/rng.hpp"
#include "mdal/scenes.hpp"

namespace mdal {

// ---- anchors / matching ----

struct AnchorSet {
    int feature_size = 0;      // F
    int anchors_per_cell = 0;  // D
    std::vector<BoundingBox> anchors;  // F*F*D, index (y*F + x)*D + d
};

/// Anchors centered on a uniform FxF grid; one anchor per (scale, ratio)
/// pair, w = scale*sqrt(ratio), h = scale/sqrt(ratio).
inline AnchorSet build_anchor_grid(int image_size, int feature_size,
                                   const std::vector<double>& scales,
                                   const std::vector<double>& ratios) {
    AnchorSet set;
    set.feature_size = feature_size;
    set.anchors_per_cell = static_cast<int>(scales.size() * ratios.size());
    const double cell = static_cast<double>(image_size) / feature_size;
    for (int gy = 0; gy < feature_size; ++gy)
        for (int gx = 0; gx < feature_size; ++gx)
            for (double s : scales)
                for (double r : ratios) {
                    BoundingBox a;
                    a.w = s * std::sqrt(r);
                    a.h = s / std::sqrt(r);
                    if (a.w > image_size || a.h > image_size)
                        throw std::invalid_argument("build_anchor_grid: anchor larger than image");
                    a.x = (gx + 0.5) * cell;
                    a.y = (gy + 0.5) * cell;
                    // clamp so the whole anchor lies inside the image
                    a.x = std::clamp(a.x, a.w / 2, image_size - a.w / 2);
                    a.y = std::clamp(a.y, a.h / 2, image_size - a.h / 2);
                    set.anchors.push_back(a);
                }
    return set;
}

inline double iou(const BoundingBox& a, const BoundingBox& b) {
    const double ix = std::max(0.0, std::min(a.x_max(), b.x_max()) - std::max(a.x_min(), b.x_min()));
    const double iy = std::max(0.0, std::min(a.y_max(), b.y_max()) - std::max(a.y_min(), b.y_min()));
    const double inter = ix * iy;
    const double uni = a.area() + b.area() - inter;
    return uni > 0 ? inter / uni : 0.0;
}

/// Offset encoding: centers normalized by anchor extents, sizes as
/// log-ratios.
inline std::array<double, 4> encode_offsets(const BoundingBox& gt, const BoundingBox& d) {
    if (d.w <= 0 || d.h <= 0) throw std::invalid_argument("encode_offsets: bad anchor");
    if (gt.w <= 0 || gt.h <= 0)
        throw std::invalid_argument("encode_offsets: non-positive GT extent");
    return {(gt.x - d.x) / d.w, (gt.y - d.y) / d.h, std::log(gt.w / d.w),
            std::log(gt.h / d.h)};
}

inline BoundingBox decode_box(const BoundingBox& d, const std::array<double, 4>& off) {
    BoundingBox g;
    g.x = off[0] * d.w + d.x;
    g.y = off[1] * d.h + d.y;
    g.w = std::exp(off[2]) * d.w;
    g.h = std::exp(off[3]) * d.h;
    return g;
}

/// Anchors with max IoU in the ignore band (kNeutralIou, match threshold]
/// are neither positive nor negative: their features are nearly identical
/// to a positive anchor's, so using them as mined negatives cancels the
/// positive classification gradient outright.
inline constexpr double kNeutralIou = 0.3;

struct MatchTable {
    std::vector<int> anchor_to_gt;              // >=0 positive, -1 negative, -2 neutral
    std::vector<int64_t> positives;             // ascending anchor indices
    std::vector<std::array<double, 4>> encoded; // per positive, aligned with `positives`
    std::vector<int> positive_class;            // per positive, GT class in [1..C]
    int n_pos = 0;
};

/// Threshold matching: anchor i is positive iff max_j IoU(i, j) > 0.5,
/// assigned to its highest-IoU GT (ties toward the lowest GT index).
inline MatchTable match_anchors(const AnchorSet& set, const std::vector<ObjectLabel>& gt) {
    MatchTable t;
    t.anchor_to_gt.assign(set.anchors.size(), -1);
    for (size_t i = 0; i < set.anchors.size(); ++i) {
        double best = 0.5;
        double best_any = 0.0;
        int best_j = -1;
        for (size_t j = 0; j < gt.size(); ++j) {
            const double v = iou(set.anchors[i], gt[j].box);
            best_any = std::max(best_any, v);
            if (v > best) {
                best = v;
                best_j = static_cast<int>(j);
            }
        }
        if (best_j >= 0) {
            t.anchor_to_gt[i] = best_j;
            t.positives.push_back(static_cast<int64_t>(i));
            t.encoded.push_back(encode_offsets(gt[best_j].box, set.anchors[i]));
            t.positive_class.push_back(gt[best_j].class_id);
        } else if (best_any > kNeutralIou) {
            t.anchor_to_gt[i] = -2;
        }
    }
    t.n_pos = static_cast<int>(t.positives.size());
    return t;
}

// ---- network ----

enum class HeadVariant { FullGmm, Efficient, Pointwise };

inline std::string to_string(HeadVariant v) {
    switch (v) {
        case HeadVariant::FullGmm: return "full_gmm";
        case HeadVariant::Efficient: return "efficient";
        case HeadVariant::Pointwise: return "pointwise";
    }
    return "?";
}

inline HeadVariant head_variant_from_string(const std::string& s) {
    if (s == "full_gmm") return HeadVariant::FullGmm;
    if (s == "efficient") return HeadVariant::Efficient;
    if (s == "pointwise") return HeadVariant::Pointwise;
    throw std::invalid_argument("unknown head variant: " + s);
}

struct NetworkConfig {
    HeadVariant head = HeadVariant::FullGmm;
    int mixture_components = 4;  // K
    int image_size = 64;
    int num_classes = 4;  // C foreground classes; background is index 0
    std::vector<int> backbone_channels = {8, 16, 32};  // stride-2 conv stack
    int backbone_kernel = 5;  // odd; 5 gives a 29-pixel receptive field at F=8
    std::vector<double> anchor_scales = {12, 18, 26};
    std::vector<double> anchor_ratios = {1.0};

    int num_classes_with_bg() const { return num_classes + 1; }  // C'
    int anchors_per_cell() const {
        return static_cast<int>(anchor_scales.size() * anchor_ratios.size());
    }
    int feature_size() const {
        int f = image_size;
        for (size_t i = 0; i < backbone_channels.size(); ++i) {
            if (f % 2 != 0) throw std::invalid_argument("NetworkConfig: image size not divisible");
            f /= 2;
        }
        return f;
    }

    /// Per-anchor output widths.
    int loc_rest() const {
        return head == HeadVariant::Pointwise ? 4 : 4 * 3 * mixture_components;
    }
    int cls_rest() const {
        const int cp = num_classes_with_bg();
        const int k = mixture_components;
        switch (head) {
            case HeadVariant::FullGmm: return cp * 2 * k + k;
            case HeadVariant::Efficient: return cp * k + k;
            case HeadVariant::Pointwise: return cp;
        }
        return 0;
    }

    void validate() const {
        if (mixture_components < 1) throw std::invalid_argument("NetworkConfig: K >= 1 required");
        if (num_classes < 1) throw std::invalid_argument("NetworkConfig: C >= 1 required");
        if (backbone_channels.empty())
            throw std::invalid_argument("NetworkConfig: empty backbone");
        if (backbone_kernel < 1 || backbone_kernel % 2 == 0)
            throw std::invalid_argument("NetworkConfig: backbone_kernel must be odd");
        (void)feature_size();
    }
};

/// Head output element counts; these are the closed forms the layer sizes
/// must satisfy.
inline int64_t loc_head_size(int f, int d, int k) { return int64_t(f) * f * d * (4 * 3 * k); }
inline int64_t cls_head_size_full(int f, int d, int k, int cp) {
    return int64_t(f) * f * d * (cp * 2 * k + k);
}
inline int64_t cls_head_size_efficient(int f, int d, int k, int cp) {
    return int64_t(f) * f * d * (cp * k + k);
}

// Raw per-anchor layouts (offsets into a row of loc_rows / cls_rows):
//   loc (gmm heads):  b*(3K) + 0*K + k = pi_hat, +1*K = mu_hat, +2*K = sigma_hat
//   cls full:         [0,K) pi_hat; K + k*C' + p = mu_hat; K + K*C' + k*C' + p = sigma_hat
//   cls efficient:    [0,K) pi_hat; K + k*C' + p = mu_hat
//   pointwise:        loc row = 4 offsets; cls row = C' logits

inline ParamStore init_params(const NetworkConfig& cfg, uint64_t seed) {
    cfg.validate();
    Rng rng(derive_seed(seed, 0x1717ULL));
    ParamStore p;
    auto conv = [&](const std::string& name, int cout, int cin, int k) {
        Tensor w({cout, cin, k, k});
        const double sd = std::sqrt(2.0 / (cin * k * k));
        for (auto& v : w.data) v = rng.normal(0, sd);
        p.emplace(name + ".w", std::move(w));
        p.emplace(name + ".b", Tensor({cout}));
    };
    int cin = 1;
    for (size_t i = 0; i < cfg.backbone_channels.size(); ++i) {
        conv("backbone." + std::to_string(i), cfg.backbone_channels[i], cin, cfg.backbone_kernel);
        cin = cfg.backbone_channels[i];
    }
    const int d = cfg.anchors_per_cell();
    conv("head.loc", d * cfg.loc_rest(), cin, 1);
    conv("head.cls", d * cfg.cls_rest(), cin, 1);
    // Down-scale the head weights so raw outputs start near 0: offsets ~0,
    // variances at sigmoid(0)=0.5, class logits near-uniform. Full-scale
    // heads put early mixture densities so far from the targets that the
    // floor inside the log zeroes their gradients for good.
    for (auto* t : {&p.at("head.loc.w"), &p.at("head.cls.w")})
        for (auto& v : t->data) v *= 0.01;
    return p;
}

/// Node ids of the bound parameter leaves plus the head outputs.
struct ForwardNodes {
    std::map<std::string, ad::NodeId> params;
    ad::NodeId loc_rows = -1;   // [A, loc_rest]
    ad::NodeId cls_rows = -1;   // [A, cls_rest]
    ad::NodeId features = -1;   // [C_last, F, F]
};

/// Backbone (stride-2 3x3 convs + relu) feeding two 1x1 head convs.
inline ForwardNodes build_forward(ad::Graph& g, const Scene& scene,
                                  const ParamStore& params, const NetworkConfig& cfg) {
    if (scene.height != cfg.image_size || scene.width != cfg.image_size)
        throw std::invalid_argument("build_forward: image size mismatch");
    ForwardNodes out;
    for (const auto& [name, t] : params) out.params.emplace(name, g.constant(t));
    auto pid = [&](const std::string& n) {
        auto it = out.params.find(n);
        if (it == out.params.end())
            throw std::invalid_argument("build_forward: missing parameter " + n);
        return it->second;
    };
    ad::NodeId x = g.constant(
        Tensor({1, scene.height, scene.width}, scene.image));
    for (size_t i = 0; i < cfg.backbone_channels.size(); ++i) {
        const std::string base = "backbone." + std::to_string(i);
        x = g.relu(g.conv2d(x, pid(base + ".w"), pid(base + ".b"), 2, cfg.backbone_kernel / 2));
    }
    out.features = x;
    const int d = cfg.anchors_per_cell();
    out.loc_rows = g.chw_to_anchor_rows(
        g.conv2d(x, pid("head.loc.w"), pid("head.loc.b"), 1, 0), d);
    out.cls_rows = g.chw_to_anchor_rows(
        g.conv2d(x, pid("head.cls.w"), pid("head.cls.b"), 1, 0), d);
    return out;
}

// ---- GMM post-processing (plain math, used at inference/scoring) ----

/// Post-processed mixture for one output group: pi on the simplex, mu free,
/// sigma in (0,1) via sigmoid. For the efficient cls head sigma is empty.
struct GmmParams {
    std::vector<double> pi;                  // K
    std::vector<std::vector<double>> mu;     // K x dim
    std::vector<std::vector<double>> sigma;  // K x dim, possibly empty

    void validate() const {
        double s = 0;
        for (double v : pi) {
            if (v < 0) throw std::logic_error("GmmParams: negative weight");
            s += v;
        }
        if (std::fabs(s - 1.0) > 1e-9) throw std::logic_error("GmmParams: weights off simplex");
        for (const auto& sg : sigma)
            for (double v : sg)
                if (v <= 0 || v >= 1) throw std::logic_error("GmmParams: sigma outside (0,1)");
    }
};

inline std::vector<double> softmax(const std::vector<double>& v) {
    double m = v[0];
    for (double x : v) m = std::max(m, x);
    std::vector<double> out(v.size());
    double s = 0;
    for (size_t i = 0; i < v.size(); ++i) {
        out[i] = std::exp(v[i] - m);
        s += out[i];
    }
    for (auto& x : out) x /= s;
    return out;
}

inline double sigmoid(double x) {
    if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

/// One anchor's post-processed outputs.
struct AnchorGmm {
    std::array<GmmParams, 4> loc;  // x, y, w, h (scalar mu/sigma per component)
    GmmParams cls;                 // vector-valued over C' classes
};

/// Variance floor for the localization mixture. A plain sigmoid lets the
/// fitted variances collapse toward 0, where the 1/sigma factors in the
/// density blow up the gradients; the floor keeps the range inside (0,1)
/// while bounding those factors.
inline constexpr double kLocSigmaFloor = 0.04;

inline double loc_sigma(double raw) { return kLocSigmaFloor + (1.0 - kLocSigmaFloor) * sigmoid(raw); }

inline GmmParams postprocess_loc_coord(const double* row, int b, int k_comp) {
    GmmParams g;
    std::vector<double> pihat(k_comp);
    for (int k = 0; k < k_comp; ++k) pihat[k] = row[b * 3 * k_comp + k];
    g.pi = softmax(pihat);
    g.mu.resize(k_comp);
    g.sigma.resize(k_comp);
    for (int k = 0; k < k_comp; ++k) {
        g.mu[k] = {row[b * 3 * k_comp + k_comp + k]};
        g.sigma[k] = {loc_sigma(row[b * 3 * k_comp + 2 * k_comp + k])};
    }
    return g;
}

inline GmmParams postprocess_cls(const double* row, const NetworkConfig& cfg) {
    const int k_comp = cfg.mixture_components;
    const int cp = cfg.num_classes_with_bg();
    GmmParams g;
    std::vector<double> pihat(row, row + k_comp);
    g.pi = softmax(pihat);
    g.mu.resize(k_comp);
    for (int k = 0; k < k_comp; ++k)
        g.mu[k].assign(row + k_comp + k * cp, row + k_comp + (k + 1) * cp);
    if (cfg.head == HeadVariant::FullGmm) {
        g.sigma.resize(k_comp);
        for (int k = 0; k < k_comp; ++k) {
            g.sigma[k].resize(cp);
            for (int p = 0; p < cp; ++p)
                g.sigma[k][p] = sigmoid(row[k_comp + k_comp * cp + k * cp + p]);
        }
    }
    return g;
}

inline AnchorGmm postprocess_anchor(const double* loc_row, const double* cls_row,
                                    const NetworkConfig& cfg) {
    if (cfg.head == HeadVariant::Pointwise)
        throw std::invalid_argument("postprocess_anchor: pointwise head has no GMM");
    AnchorGmm out;
    for (int b = 0; b < 4; ++b)
        out.loc[b] = postprocess_loc_coord(loc_row, b, cfg.mixture_components);
    out.cls = postprocess_cls(cls_row, cfg);
    return out;
}

// ---- inference ----

/// The four per-object uncertainty values (raw, pre-normalization).
struct UncertaintyQuad {
    double al_b = 0, ep_b = 0, al_c = 0, ep_c = 0;
};

struct Detection {
    BoundingBox box;
    int class_id = 0;
    double confidence = 0;
    int anchor_index = -1;
    std::vector<double> class_probs;  // P_i over C'+bg, for the entropy baseline
    UncertaintyQuad uncertainty;
};

/// Mixture means summed per Eq-style aggregation: R_b = sum_k pi^k mu^k and
/// P_i = sum_k pi^k softmax(mu^k)_i; background-argmax anchors and anchors
/// below conf_floor are dropped, then per-class NMS.
inline std::vector<Detection> predict(const Tensor& loc_rows, const Tensor& cls_rows,
                                      const AnchorSet& anchors, const NetworkConfig& cfg,
                                      double conf_floor, double nms_iou) {
    if (conf_floor <= 0 || conf_floor >= 1)
        throw std::invalid_argument("predict: conf_floor must be in (0,1)");
    const int cp = cfg.num_classes_with_bg();
    const int k_comp = cfg.mixture_components;
    const int64_t a_total = loc_rows.shape[0];
    std::vector<Detection> cands;
    for (int64_t a = 0; a < a_total; ++a) {
        const double* lrow = loc_rows.data.data() + a * loc_rows.shape[1];
        const double* crow = cls_rows.data.data() + a * cls_rows.shape[1];
        std::array<double, 4> off{};
        std::vector<double> probs(cp, 0.0);
        if (cfg.head == HeadVariant::Pointwise) {
            for (int b = 0; b < 4; ++b) off[b] = lrow[b];
            probs = softmax(std::vector<double>(crow, crow + cp));
        } else {
            for (int b = 0; b < 4; ++b) {
                const GmmParams g = postprocess_loc_coord(lrow, b, k_comp);
                double r = 0;
                for (int k = 0; k < k_comp; ++k) r += g.pi[k] * g.mu[k][0];
                off[b] = r;
            }
            const GmmParams g = postprocess_cls(crow, cfg);
            for (int k = 0; k < k_comp; ++k) {
                const std::vector<double> sm = softmax(g.mu[k]);
                for (int p = 0; p < cp; ++p) probs[p] += g.pi[k] * sm[p];
            }
        }
        int argmax = 0;
        for (int p = 1; p < cp; ++p)
            if (probs[p] > probs[argmax]) argmax = p;
        if (argmax == 0 || probs[argmax] < conf_floor) continue;
        Detection d;
        d.box = decode_box(anchors.anchors[a], off);
        d.class_id = argmax;
        d.confidence = probs[argmax];
        d.anchor_index = static_cast<int>(a);
        d.class_probs = std::move(probs);
        cands.push_back(std::move(d));
    }
    // per-class NMS, highest confidence first (ties toward lower anchor index)
    std::sort(cands.begin(), cands.end(), [](const Detection& a, const Detection& b) {
        if (a.confidence != b.confidence) return a.confidence > b.confidence;
        return a.anchor_index < b.anchor_index;
    });
    std::vector<Detection> kept;
    for (const auto& c : cands) {
        bool suppressed = false;
        for (const auto& k : kept)
            if (k.class_id == c.class_id && iou(k.box, c.box) > nms_iou) {
                suppressed = true;
                break;
            }
        if (!suppressed) kept.push_back(c);
    }
    return kept;
}

// ---- mAP ----

/// All-point-interpolation average precision for one class.
/// `preds` are (confidence, scene_index, box); `gt_per_scene` holds this
/// class's GT boxes per scene.
inline double average_precision(
    std::vector<std::tuple<double, int, BoundingBox>> preds,
    const std::vector<std::vector<BoundingBox>>& gt_per_scene, double iou_thr) {
    int64_t n_gt = 0;
    for (const auto& g : gt_per_scene) n_gt += static_cast<int64_t>(g.size());
    if (n_gt == 0) return 0.0;
    std::sort(preds.begin(), preds.end(), [](const auto& a, const auto& b) {
        if (std::get<0>(a) != std::get<0>(b)) return std::get<0>(a) > std::get<0>(b);
        return std::get<1>(a) < std::get<1>(b);
    });
    std::vector<std::vector<bool>> used(gt_per_scene.size());
    for (size_t i = 0; i < gt_per_scene.size(); ++i)
        used[i].assign(gt_per_scene[i].size(), false);
    std::vector<int> tp(preds.size(), 0);
    for (size_t i = 0; i < preds.size(); ++i) {
        const int sc = std::get<1>(preds[i]);
        const auto& gts = gt_per_scene[sc];
        double best = 0.0;
        int best_j = -1;
        for (size_t j = 0; j < gts.size(); ++j) {
            const double v = iou(std::get<2>(preds[i]), gts[j]);
            if (v > best) {
                best = v;
                best_j = static_cast<int>(j);
            }
        }
        if (best_j >= 0 && best >= iou_thr && !used[sc][best_j]) {
            used[sc][best_j] = true;
            tp[i] = 1;
        }
    }
    // precision/recall sweep + running-max interpolation
    double ap = 0.0, prev_recall = 0.0;
    int64_t cum_tp = 0;
    std::vector<std::pair<double, double>> pr;  // (recall, precision)
    for (size_t i = 0; i < preds.size(); ++i) {
        cum_tp += tp[i];
        pr.emplace_back(static_cast<double>(cum_tp) / n_gt,
                        static_cast<double>(cum_tp) / static_cast<double>(i + 1));
    }
    double run_max = 0.0;
    for (auto it = pr.rbegin(); it != pr.rend(); ++it)
        it->second = run_max = std::max(run_max, it->second);
    for (const auto& [r, p] : pr) {
        ap += (r - prev_recall) * p;
        prev_recall = r;
    }
    return ap;
}

/// Mean AP over classes that have at least one GT instance.
inline double evaluate_map(const std::vector<std::vector<Detection>>& preds_per_scene,
                           const std::vector<Scene>& scenes, int num_classes,
                           double iou_thr) {
    if (scenes.empty()) throw std::invalid_argument("evaluate_map: empty test set");
    if (preds_per_scene.size() != scenes.size())
        throw std::invalid_argument("evaluate_map: prediction/scene count mismatch");
    double sum_ap = 0.0;
    int n_classes_with_gt = 0;
    for (int c = 1; c <= num_classes; ++c) {
        std::vector<std::vector<BoundingBox>> gt(scenes.size());
        int64_t n_gt = 0;
        for (size_t i = 0; i < scenes.size(); ++i)
            for (const auto& o : scenes[i].objects)
                if (o.class_id == c) {
                    gt[i].push_back(o.box);
                    ++n_gt;
                }
        if (n_gt == 0) continue;
        std::vector<std::tuple<double, int, BoundingBox>> preds;
        for (size_t i = 0; i < preds_per_scene.size(); ++i)
            for (const auto& d : preds_per_scene[i])
                if (d.class_id == c)
                    preds.emplace_back(d.confidence, static_cast<int>(i), d.box);
        sum_ap += average_precision(std::move(preds), gt, iou_thr);
        ++n_classes_with_gt;
    }
    if (n_classes_with_gt == 0) return 0.0;
    return sum_ap / n_classes_with_gt;
}

// ---- model bundle ----

struct DetectorModel {
    NetworkConfig config;
    AnchorSet anchors;
    ParamStore params;
};

inline DetectorModel make_model(const NetworkConfig& cfg, uint64_t seed) {
    DetectorModel m;
    m.config = cfg;
    m.anchors = build_anchor_grid(cfg.image_size, cfg.feature_size(), cfg.anchor_scales,
                                  cfg.anchor_ratios);
    m.params = init_params(cfg, seed);
    return m;
}

struct InferenceResult {
    Tensor loc_rows;
    Tensor cls_rows;
    std::vector<double> pooled_features;  // spatially averaged final feature map
};

inline InferenceResult run_forward(const DetectorModel& m, const Scene& scene) {
    ad::Graph g;
    const ForwardNodes nodes = build_forward(g, scene, m.params, m.config);
    InferenceResult res;
    res.loc_rows = g.value(nodes.loc_rows);
    res.cls_rows = g.value(nodes.cls_rows);
    const Tensor& f = g.value(nodes.features);
    const int64_t c = f.shape[0], hw = f.shape[1] * f.shape[2];
    res.pooled_features.resize(c);
    for (int64_t i = 0; i < c; ++i) {
        double s = 0;
        for (int64_t j = 0; j < hw; ++j) s += f.data[i * hw + j];
        res.pooled_features[i] = s / static_cast<double>(hw);
    }
    return res;
}

inline std::vector<Detection> detect(const DetectorModel& m, const Scene& scene,
                                     double conf_floor, double nms_iou) {
    const InferenceResult r = run_forward(m, scene);
    return predict(r.loc_rows, r.cls_rows, m.anchors, m.config, conf_floor, nms_iou);
}

}  // namespace mdal
