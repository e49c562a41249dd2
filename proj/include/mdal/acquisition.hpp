#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <iostream>
#include <limits>
#include <numeric>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "mdal/detector.hpp"
#include "mdal/rng.hpp"

namespace mdal {

// bit positions for the four uncertainty types
enum UncertaintyType : int { kAlB = 0, kEpB = 1, kAlC = 2, kEpC = 3 };

inline const char* type_name(int t) {
    static const char* names[4] = {"al_b", "ep_b", "al_c", "ep_c"};
    return names[t];
}

/// One of the 14 non-random aggregation rows: a single type, or sum/max
/// over a listed subset (the two per-task pairs, the two per-kind pairs,
/// or all four).
struct AggregationMode {
    enum class Op { Single, Sum, Max };
    Op op = Op::Max;
    unsigned mask = 0xF;  // bits kAlB..kEpC

    std::string name() const {
        if (op == Op::Single)
            for (int t = 0; t < 4; ++t)
                if (mask == (1u << t)) return type_name(t);
        const std::string prefix = op == Op::Sum ? "sum_" : "max_";
        switch (mask) {
            case 0b0011: return prefix + "loc";
            case 0b1100: return prefix + "cls";
            case 0b0101: return prefix + "al";
            case 0b1010: return prefix + "ep";
            case 0b1111: return prefix + "all";
        }
        return prefix + "?";
    }

    double apply(const std::array<double, 4>& u) const {
        double acc = op == Op::Max ? -std::numeric_limits<double>::infinity() : 0.0;
        for (int t = 0; t < 4; ++t) {
            if (!(mask & (1u << t))) continue;
            if (op == Op::Max)
                acc = std::max(acc, u[t]);
            else
                acc += u[t];
        }
        return acc;
    }
};

/// The canonical 14 modes, in reporting order.
inline std::vector<AggregationMode> all_aggregation_modes() {
    using Op = AggregationMode::Op;
    std::vector<AggregationMode> m;
    for (int t = 0; t < 4; ++t) m.push_back({Op::Single, 1u << t});
    for (unsigned mask : {0b0011u, 0b1100u, 0b0101u, 0b1010u}) m.push_back({Op::Sum, mask});
    m.push_back({Op::Sum, 0xFu});
    for (unsigned mask : {0b0011u, 0b1100u, 0b0101u, 0b1010u}) m.push_back({Op::Max, mask});
    m.push_back({Op::Max, 0xFu});
    return m;
}

inline AggregationMode aggregation_mode_from_string(const std::string& s) {
    for (const auto& m : all_aggregation_modes())
        if (m.name() == s) return m;
    throw std::invalid_argument("unknown aggregation mode: " + s);
}

/// Population z-score over one uncertainty type. Degenerate pools
/// (sigma = 0) map everything to 0 with a warning.
inline std::vector<double> zscore_normalize(const std::vector<double>& raw) {
    if (raw.size() < 2)
        throw std::invalid_argument("zscore_normalize: need at least 2 values");
    double mean = 0;
    for (double v : raw) mean += v;
    mean /= static_cast<double>(raw.size());
    double var = 0;
    for (double v : raw) var += (v - mean) * (v - mean);
    var /= static_cast<double>(raw.size());
    const double sd = std::sqrt(var);
    std::vector<double> out(raw.size());
    if (sd == 0.0) {
        std::cerr << "warning: zscore_normalize: zero variance, scores set to 0\n";
        return out;
    }
    for (size_t i = 0; i < raw.size(); ++i) out[i] = (raw[i] - mean) / sd;
    return out;
}

/// Per-image score of one type: max over the image's surviving objects.
inline std::optional<double> image_score(const std::vector<double>& per_object) {
    if (per_object.empty()) return std::nullopt;  // no-detection sentinel
    return *std::max_element(per_object.begin(), per_object.end());
}

/// Raw uncertainties of one pool image's surviving detections.
struct PoolImage {
    int image_id = -1;
    std::vector<UncertaintyQuad> objects;
};

struct PoolScores {
    struct Entry {
        int image_id = -1;
        bool has_detections = false;
        std::array<double, 4> type_scores{};  // normalized, max over objects
        double aggregate = 0;
    };
    std::vector<Entry> entries;
    std::array<double, 4> pool_mean{};
    std::array<double, 4> pool_sd{};
};

/// z-score each type over all objects of the pool, reduce per image by
/// max-over-objects, then aggregate the four per-image scores.
inline PoolScores score_pool(const std::vector<PoolImage>& pool, AggregationMode mode) {
    PoolScores out;
    out.entries.resize(pool.size());
    std::vector<double> raw;
    std::array<std::vector<double>, 4> normalized;
    for (int t = 0; t < 4; ++t) {
        raw.clear();
        for (const auto& img : pool)
            for (const auto& q : img.objects) {
                const double v = t == kAlB   ? q.al_b
                                 : t == kEpB ? q.ep_b
                                 : t == kAlC ? q.al_c
                                             : q.ep_c;
                raw.push_back(v);
            }
        if (raw.size() >= 2) {
            double mean = 0;
            for (double v : raw) mean += v;
            mean /= static_cast<double>(raw.size());
            double var = 0;
            for (double v : raw) var += (v - mean) * (v - mean);
            out.pool_mean[t] = mean;
            out.pool_sd[t] = std::sqrt(var / static_cast<double>(raw.size()));
            normalized[t] = zscore_normalize(raw);
        } else {
            normalized[t].assign(raw.size(), 0.0);
        }
    }
    size_t cursor = 0;
    for (size_t i = 0; i < pool.size(); ++i) {
        auto& e = out.entries[i];
        e.image_id = pool[i].image_id;
        e.has_detections = !pool[i].objects.empty();
        if (!e.has_detections) continue;
        for (int t = 0; t < 4; ++t) {
            std::vector<double> per_obj(pool[i].objects.size());
            for (size_t j = 0; j < per_obj.size(); ++j) per_obj[j] = normalized[t][cursor + j];
            e.type_scores[t] = *image_score(per_obj);
        }
        cursor += pool[i].objects.size();
        e.aggregate = mode.apply(e.type_scores);
    }
    return out;
}

/// Budgeted top-K over final scores. No-detection images rank below every
/// scored image; ties break toward the lower image id.
inline std::vector<int> select_top_k(const PoolScores& scores, size_t budget) {
    if (scores.entries.empty()) throw std::invalid_argument("select_top_k: empty pool");
    if (budget > scores.entries.size())
        throw std::invalid_argument("select_top_k: budget exceeds pool size");
    std::vector<const PoolScores::Entry*> order;
    order.reserve(scores.entries.size());
    for (const auto& e : scores.entries) order.push_back(&e);
    std::sort(order.begin(), order.end(),
              [](const PoolScores::Entry* a, const PoolScores::Entry* b) {
                  if (a->has_detections != b->has_detections) return a->has_detections;
                  if (a->has_detections && a->aggregate != b->aggregate)
                      return a->aggregate > b->aggregate;
                  return a->image_id < b->image_id;
              });
    std::vector<int> picked;
    for (size_t i = 0; i < budget; ++i) picked.push_back(order[i]->image_id);
    std::sort(picked.begin(), picked.end());
    return picked;
}

/// Mean Shannon entropy (nats) of the class distributions of an image's
/// surviving detections; empty images get the no-detection sentinel.
inline std::optional<double> entropy_score(const std::vector<Detection>& dets) {
    if (dets.empty()) return std::nullopt;
    double total = 0;
    for (const auto& d : dets) {
        double h = 0;
        for (double p : d.class_probs)
            if (p > 0) h -= p * std::log(p);
        total += h;
    }
    return total / static_cast<double>(dets.size());
}

/// Top-B images by a scalar score with the same sentinel/tie policy as
/// select_top_k. Used by the entropy baseline.
inline std::vector<int> select_top_k_scalar(
    const std::vector<std::pair<int, std::optional<double>>>& scores, size_t budget) {
    if (scores.empty()) throw std::invalid_argument("select_top_k_scalar: empty pool");
    if (budget > scores.size())
        throw std::invalid_argument("select_top_k_scalar: budget exceeds pool size");
    auto order = scores;
    std::sort(order.begin(), order.end(), [](const auto& a, const auto& b) {
        if (a.second.has_value() != b.second.has_value()) return a.second.has_value();
        if (a.second && b.second && *a.second != *b.second) return *a.second > *b.second;
        return a.first < b.first;
    });
    std::vector<int> picked;
    for (size_t i = 0; i < budget; ++i) picked.push_back(order[i].first);
    std::sort(picked.begin(), picked.end());
    return picked;
}

/// k-center greedy: repeatedly take the pool point farthest from the
/// nearest labeled or already-selected point. Ties toward the lower id.
inline std::vector<int> coreset_greedy(
    const std::vector<std::pair<int, std::vector<double>>>& pool_features,
    const std::vector<std::vector<double>>& labeled_features, size_t budget) {
    if (budget > pool_features.size())
        throw std::invalid_argument("coreset_greedy: budget exceeds pool size");
    auto dist2 = [](const std::vector<double>& a, const std::vector<double>& b) {
        if (a.size() != b.size())
            throw std::invalid_argument("coreset_greedy: feature dim mismatch");
        double s = 0;
        for (size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
        return s;
    };
    std::vector<double> nearest(pool_features.size(),
                                std::numeric_limits<double>::infinity());
    for (size_t i = 0; i < pool_features.size(); ++i)
        for (const auto& lf : labeled_features)
            nearest[i] = std::min(nearest[i], dist2(pool_features[i].second, lf));
    if (labeled_features.empty())
        nearest.assign(pool_features.size(), std::numeric_limits<double>::infinity());
    std::vector<bool> taken(pool_features.size(), false);
    std::vector<int> picked;
    for (size_t b = 0; b < budget; ++b) {
        int best = -1;
        for (size_t i = 0; i < pool_features.size(); ++i) {
            if (taken[i]) continue;
            if (best < 0 || nearest[i] > nearest[best] ||
                (nearest[i] == nearest[best] &&
                 pool_features[i].first < pool_features[best].first))
                best = static_cast<int>(i);
        }
        taken[best] = true;
        picked.push_back(pool_features[best].first);
        for (size_t i = 0; i < pool_features.size(); ++i)
            if (!taken[i])
                nearest[i] = std::min(nearest[i],
                                      dist2(pool_features[i].second, pool_features[best].second));
    }
    std::sort(picked.begin(), picked.end());
    return picked;
}

/// Uniform without replacement, seed-deterministic.
inline std::vector<int> random_select(const std::vector<int>& pool_ids, uint64_t seed,
                                      size_t budget) {
    if (budget > pool_ids.size())
        throw std::invalid_argument("random_select: budget exceeds pool size");
    std::vector<int> ids = pool_ids;
    Rng rng(derive_seed(seed, 0xa11d0));
    rng.shuffle(ids);
    ids.resize(budget);
    std::sort(ids.begin(), ids.end());
    return ids;
}

/// 100 * |A cap B| / |A| over equal-size selections.
inline double overlap_ratio(const std::vector<int>& a, const std::vector<int>& b) {
    if (a.size() != b.size())
        throw std::invalid_argument("overlap_ratio: selection size mismatch");
    if (a.empty()) return 100.0;
    std::vector<int> sa = a, sb = b, inter;
    std::sort(sa.begin(), sa.end());
    std::sort(sb.begin(), sb.end());
    std::set_intersection(sa.begin(), sa.end(), sb.begin(), sb.end(),
                          std::back_inserter(inter));
    return 100.0 * static_cast<double>(inter.size()) / static_cast<double>(sa.size());
}

}  // namespace mdal
