#pragma once

#include <cmath>
#include <stdexcept>
#include <vector>

#include "mdal/detector.hpp"

namespace mdal {

/// Closed-form decomposition for a mixture: aleatoric is the pi-weighted
/// variance, epistemic the pi-weighted squared deviation of component means
/// from the mixture mean. mu may be scalar or vector (squared Euclidean
/// norm); sigma entries are summed over dimensions when vector-valued.
struct UncertaintyPair {
    double aleatoric = 0;
    double epistemic = 0;
};

inline UncertaintyPair mixture_uncertainty(const GmmParams& g) {
    const size_t k_comp = g.pi.size();
    const size_t dim = g.mu.empty() ? 0 : g.mu[0].size();
    UncertaintyPair out;
    if (!g.sigma.empty()) {
        for (size_t k = 0; k < k_comp; ++k)
            for (double s : g.sigma[k]) out.aleatoric += g.pi[k] * s;
    }
    std::vector<double> mean(dim, 0.0);
    for (size_t k = 0; k < k_comp; ++k)
        for (size_t i = 0; i < dim; ++i) mean[i] += g.pi[k] * g.mu[k][i];
    for (size_t k = 0; k < k_comp; ++k) {
        double dev2 = 0;
        for (size_t i = 0; i < dim; ++i) {
            const double d = g.mu[k][i] - mean[i];
            dev2 += d * d;
        }
        out.epistemic += g.pi[k] * dev2;
    }
    return out;
}

/// Aleatoric class-covariance for the efficient head:
/// sum_k pi^k (diag(c^k) - c^k c^kT) over simplex vectors c^k.
/// Symmetric, rows sum to zero, PSD; diagonal holds per-class aleatoric.
inline std::vector<std::vector<double>> efficient_cls_aleatoric(
    const std::vector<double>& pi, const std::vector<std::vector<double>>& probs) {
    if (pi.size() != probs.size())
        throw std::invalid_argument("efficient_cls_aleatoric: pi/probs size mismatch");
    const size_t cp = probs.empty() ? 0 : probs[0].size();
    for (const auto& c : probs) {
        if (c.size() != cp)
            throw std::invalid_argument("efficient_cls_aleatoric: ragged probability vectors");
        double s = 0;
        for (double v : c) {
            if (v < -1e-12) throw std::invalid_argument("efficient_cls_aleatoric: negative probability");
            s += v;
        }
        if (std::fabs(s - 1.0) > 1e-9)
            throw std::invalid_argument("efficient_cls_aleatoric: input not on the simplex");
    }
    std::vector<std::vector<double>> m(cp, std::vector<double>(cp, 0.0));
    for (size_t k = 0; k < probs.size(); ++k)
        for (size_t i = 0; i < cp; ++i)
            for (size_t j = 0; j < cp; ++j) {
                const double diag = (i == j) ? probs[k][i] : 0.0;
                m[i][j] += pi[k] * (diag - probs[k][i] * probs[k][j]);
            }
    return m;
}

/// How the per-class aleatoric value is reduced to one scalar per object.
enum class ClsReduction { PredictedClass, MaxOverClasses };

/// Fills the four per-object values. Localization: per-coordinate
/// decomposition, max over {x,y,w,h} taken separately for each kind.
/// Classification (full head): epistemic over the mean vectors, aleatoric
/// from the per-class sigma. Classification (efficient head): aleatoric
/// from the class-covariance diagonal, epistemic over the component
/// probability vectors.
inline UncertaintyQuad detection_uncertainty(const AnchorGmm& g, int class_id,
                                             HeadVariant head,
                                             ClsReduction reduction = ClsReduction::PredictedClass) {
    UncertaintyQuad q;
    for (int b = 0; b < 4; ++b) {
        const UncertaintyPair p = mixture_uncertainty(g.loc[b]);
        q.al_b = std::max(q.al_b, p.aleatoric);
        q.ep_b = std::max(q.ep_b, p.epistemic);
    }
    const size_t k_comp = g.cls.pi.size();
    const size_t cp = g.cls.mu[0].size();
    auto reduce = [&](const std::vector<double>& per_class) {
        if (reduction == ClsReduction::PredictedClass)
            return per_class[static_cast<size_t>(class_id)];
        double m = per_class[0];
        for (double v : per_class) m = std::max(m, v);
        return m;
    };
    if (head == HeadVariant::FullGmm) {
        q.ep_c = mixture_uncertainty(g.cls).epistemic;
        std::vector<double> al(cp, 0.0);
        for (size_t k = 0; k < k_comp; ++k)
            for (size_t p = 0; p < cp; ++p) al[p] += g.cls.pi[k] * g.cls.sigma[k][p];
        q.al_c = reduce(al);
    } else if (head == HeadVariant::Efficient) {
        std::vector<std::vector<double>> probs(k_comp);
        for (size_t k = 0; k < k_comp; ++k) probs[k] = softmax(g.cls.mu[k]);
        const auto cov = efficient_cls_aleatoric(g.cls.pi, probs);
        std::vector<double> al(cp);
        for (size_t p = 0; p < cp; ++p) al[p] = cov[p][p];
        q.al_c = reduce(al);
        GmmParams ep;
        ep.pi = g.cls.pi;
        ep.mu = probs;
        q.ep_c = mixture_uncertainty(ep).epistemic;
    } else {
        throw std::invalid_argument("detection_uncertainty: pointwise head has no uncertainties");
    }
    return q;
}

/// Attaches an UncertaintyQuad to every detection, reading the raw head
/// rows at each detection's anchor.
inline void attach_uncertainties(std::vector<Detection>& dets, const Tensor& loc_rows,
                                 const Tensor& cls_rows, const NetworkConfig& cfg,
                                 ClsReduction reduction = ClsReduction::PredictedClass) {
    for (auto& d : dets) {
        const double* lrow = loc_rows.data.data() + d.anchor_index * loc_rows.shape[1];
        const double* crow = cls_rows.data.data() + d.anchor_index * cls_rows.shape[1];
        const AnchorGmm g = postprocess_anchor(lrow, crow, cfg);
        d.uncertainty = detection_uncertainty(g, d.class_id, cfg.head, reduction);
    }
}

}  // namespace mdal
