#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <set>

#include "mdal/acquisition.hpp"
#include "mdal/rng.hpp"

using namespace mdal;

// --------------------------------------------------------------- z-score

TEST_CASE("z-score hand cases") {
    const auto z = zscore_normalize({1.0, 3.0});
    CHECK(z[0] == Catch::Approx(-1.0));
    CHECK(z[1] == Catch::Approx(1.0));

    // {2, 4, 6}: mean 4, population sd sqrt(8/3)
    const auto z3 = zscore_normalize({2.0, 4.0, 6.0});
    const double sd = std::sqrt(8.0 / 3.0);
    CHECK(z3[0] == Catch::Approx(-2.0 / sd));
    CHECK(z3[1] == Catch::Approx(0.0).margin(1e-15));
    CHECK(z3[2] == Catch::Approx(2.0 / sd));

    CHECK_THROWS_AS(zscore_normalize({1.0}), std::invalid_argument);
}

TEST_CASE("z-score of a constant pool degenerates to zeros") {
    const auto z = zscore_normalize({5.0, 5.0, 5.0, 5.0});
    for (double v : z) CHECK(v == 0.0);
}

TEST_CASE("z-scored values are invariant to affine rescaling of the raw type") {
    Rng rng(14);
    std::vector<double> raw(50);
    for (auto& v : raw) v = rng.uniform(0, 10);
    const auto base = zscore_normalize(raw);
    for (const auto& [a, b] : {std::pair<double, double>{3.0, 0.0},
                               {0.25, -7.0},
                               {100.0, 42.0}}) {
        std::vector<double> scaled(raw.size());
        for (size_t i = 0; i < raw.size(); ++i) scaled[i] = a * raw[i] + b;
        const auto z = zscore_normalize(scaled);
        for (size_t i = 0; i < z.size(); ++i)
            REQUIRE(z[i] == Catch::Approx(base[i]).margin(1e-10));
    }
}

// --------------------------------------------------------------- modes

TEST_CASE("the canonical aggregation modes are distinct and well named") {
    const auto modes = all_aggregation_modes();
    REQUIRE(modes.size() == 14);
    std::set<std::string> names;
    for (const auto& m : modes) names.insert(m.name());
    REQUIRE(names.size() == 14);
    for (const char* n : {"al_b", "ep_b", "al_c", "ep_c", "sum_loc", "sum_cls",
                          "sum_al", "sum_ep", "sum_all", "max_loc", "max_cls",
                          "max_al", "max_ep", "max_all"})
        CHECK(names.count(n) == 1);
    // round trip through the parser
    for (const auto& m : modes) {
        const AggregationMode r = aggregation_mode_from_string(m.name());
        CHECK(r.name() == m.name());
    }
    CHECK_THROWS_AS(aggregation_mode_from_string("mean_all"), std::invalid_argument);
}

TEST_CASE("aggregation arithmetic on a fixed quad") {
    const std::array<double, 4> u = {1.0, 2.0, 0.0, -1.0};  // al_b, ep_b, al_c, ep_c
    auto val = [&](const std::string& name) {
        return aggregation_mode_from_string(name).apply(u);
    };
    CHECK(val("al_b") == 1.0);
    CHECK(val("ep_b") == 2.0);
    CHECK(val("al_c") == 0.0);
    CHECK(val("ep_c") == -1.0);
    CHECK(val("sum_loc") == 3.0);   // al_b + ep_b
    CHECK(val("sum_cls") == -1.0);  // al_c + ep_c
    CHECK(val("sum_al") == 1.0);    // al_b + al_c
    CHECK(val("sum_ep") == 1.0);    // ep_b + ep_c
    CHECK(val("sum_all") == 2.0);
    CHECK(val("max_loc") == 2.0);
    CHECK(val("max_cls") == 0.0);
    CHECK(val("max_al") == 1.0);
    CHECK(val("max_ep") == 2.0);
    CHECK(val("max_all") == 2.0);
}

// --------------------------------------------------------------- image score

TEST_CASE("image score is the max over objects, with a sentinel when empty") {
    CHECK(!image_score({}).has_value());
    CHECK(*image_score({0.5}) == 0.5);
    CHECK(*image_score({-3.0, 2.0, 1.0}) == 2.0);
}

// --------------------------------------------------------------- pool scoring

namespace {

UncertaintyQuad quad(double a, double b, double c, double d) {
    UncertaintyQuad q;
    q.al_b = a; q.ep_b = b; q.al_c = c; q.ep_c = d;
    return q;
}

}  // namespace

TEST_CASE("pool scoring normalizes per type over all objects") {
    // two images, three objects; al_b raw values {1, 3, 5}
    std::vector<PoolImage> pool(3);
    pool[0].image_id = 10;
    pool[0].objects = {quad(1, 0, 0, 0), quad(3, 0, 0, 0)};
    pool[1].image_id = 11;
    pool[1].objects = {quad(5, 0, 0, 0)};
    pool[2].image_id = 12;  // no detections

    const PoolScores s = score_pool(pool, aggregation_mode_from_string("al_b"));
    REQUIRE(s.entries.size() == 3);
    CHECK(s.pool_mean[kAlB] == Catch::Approx(3.0));
    CHECK(s.pool_sd[kAlB] == Catch::Approx(std::sqrt(8.0 / 3.0)));
    // image 10 keeps the max of its objects' z-scores: z(3) = 0
    CHECK(s.entries[0].aggregate == Catch::Approx(0.0).margin(1e-15));
    CHECK(s.entries[1].aggregate == Catch::Approx(2.0 / std::sqrt(8.0 / 3.0)));
    CHECK(!s.entries[2].has_detections);

    // selection: image 11 first, then 10; the empty image ranks last
    CHECK(select_top_k(s, 1) == std::vector<int>{11});
    CHECK(select_top_k(s, 2) == std::vector<int>{10, 11});
    CHECK(select_top_k(s, 3) == std::vector<int>{10, 11, 12});
    CHECK_THROWS_AS(select_top_k(s, 4), std::invalid_argument);
}

TEST_CASE("selection ties break toward the lower image id") {
    std::vector<PoolImage> pool(4);
    for (int i = 0; i < 4; ++i) {
        pool[i].image_id = 100 - i;  // 100, 99, 98, 97
        pool[i].objects = {quad(1, 1, 1, 1)};  // all identical -> all scores 0
    }
    const PoolScores s = score_pool(pool, aggregation_mode_from_string("max_all"));
    CHECK(select_top_k(s, 2) == std::vector<int>{97, 98});
}

// --------------------------------------------------------------- entropy

TEST_CASE("entropy baseline hand cases") {
    CHECK(!entropy_score({}).has_value());

    Detection uniform5;
    uniform5.class_probs.assign(5, 0.2);
    CHECK(*entropy_score({uniform5}) == Catch::Approx(std::log(5.0)));

    Detection onehot;
    onehot.class_probs = {0.0, 1.0, 0.0};
    CHECK(*entropy_score({onehot}) == Catch::Approx(0.0).margin(1e-15));

    // mean over detections
    CHECK(*entropy_score({uniform5, onehot}) == Catch::Approx(0.5 * std::log(5.0)));
}

TEST_CASE("scalar top-k shares the sentinel and tie policy") {
    std::vector<std::pair<int, std::optional<double>>> scores = {
        {4, 0.5}, {2, std::nullopt}, {7, 0.9}, {1, 0.5}};
    CHECK(select_top_k_scalar(scores, 1) == std::vector<int>{7});
    CHECK(select_top_k_scalar(scores, 2) == std::vector<int>{1, 7});  // tie -> lower id
    CHECK(select_top_k_scalar(scores, 4) == std::vector<int>{1, 2, 4, 7});
    CHECK_THROWS_AS(select_top_k_scalar(scores, 5), std::invalid_argument);
    CHECK_THROWS_AS(select_top_k_scalar({}, 0), std::invalid_argument);
}

// --------------------------------------------------------------- coreset

TEST_CASE("coreset greedy picks the farthest-first points") {
    // labeled at the origin; pool on a line at 1, 5, 6
    std::vector<std::pair<int, std::vector<double>>> pool = {
        {0, {1.0}}, {1, {5.0}}, {2, {6.0}}};
    std::vector<std::vector<double>> labeled = {{0.0}};
    // farthest from origin is 6 (id 2), then 1 (distance 1 vs 5's distance 1 to 6)
    CHECK(coreset_greedy(pool, labeled, 1) == std::vector<int>{2});
    // after taking 6: nearest distances are 1 -> 1, 5 -> 1; tie, lower id wins
    CHECK(coreset_greedy(pool, labeled, 2) == std::vector<int>{0, 2});
    CHECK(coreset_greedy(pool, labeled, 3) == std::vector<int>{0, 1, 2});
    CHECK_THROWS_AS(coreset_greedy(pool, labeled, 4), std::invalid_argument);
}

TEST_CASE("coreset greedy with an empty labeled set covers the pool") {
    std::vector<std::pair<int, std::vector<double>>> pool = {
        {5, {0.0, 0.0}}, {6, {10.0, 0.0}}, {7, {5.0, 0.1}}};
    // first pick: infinite distances tie, lowest id (index order) wins
    const auto sel = coreset_greedy(pool, {}, 2);
    REQUIRE(sel.size() == 2);
    CHECK(sel == std::vector<int>{5, 6});  // 5 first, then the farthest point 6
    CHECK_THROWS_AS(coreset_greedy({{1, {0.0}}, {2, {0.0, 1.0}}}, {}, 2),
                    std::invalid_argument);  // dim mismatch
}

// --------------------------------------------------------------- random

TEST_CASE("random selection is uniform-ish, deterministic, sorted") {
    std::vector<int> ids;
    for (int i = 0; i < 40; ++i) ids.push_back(i * 2);

    const auto a = random_select(ids, 7, 10);
    const auto b = random_select(ids, 7, 10);
    REQUIRE(a == b);
    REQUIRE(a.size() == 10);
    CHECK(std::is_sorted(a.begin(), a.end()));
    std::set<int> uniq(a.begin(), a.end());
    CHECK(uniq.size() == 10);
    for (int v : a) CHECK(std::count(ids.begin(), ids.end(), v) == 1);

    CHECK(random_select(ids, 8, 10) != a);
    CHECK_THROWS_AS(random_select(ids, 1, 41), std::invalid_argument);

    // frequency sanity: over many seeds each id appears ~budget/pool of the time
    std::vector<int> hits(40, 0);
    const int trials = 2000;
    for (int s = 0; s < trials; ++s)
        for (int v : random_select(ids, 1000 + s, 10))
            hits[v / 2]++;
    for (int h : hits) {
        CHECK(h > trials * 0.25 * 0.6);
        CHECK(h < trials * 0.25 * 1.4);
    }
}

// --------------------------------------------------------------- overlap

TEST_CASE("overlap ratio hand cases") {
    CHECK(overlap_ratio({1, 2, 3}, {1, 2, 3}) == Catch::Approx(100.0));
    CHECK(overlap_ratio({1, 2, 3}, {4, 5, 6}) == Catch::Approx(0.0));
    // 12 of 25 shared -> 48%
    std::vector<int> a, b;
    for (int i = 0; i < 25; ++i) a.push_back(i);
    for (int i = 13; i < 38; ++i) b.push_back(i);
    CHECK(overlap_ratio(a, b) == Catch::Approx(48.0));
    // order-insensitive
    CHECK(overlap_ratio({3, 1, 2}, {2, 9, 1}) == Catch::Approx(200.0 / 3.0));
    CHECK(overlap_ratio({}, {}) == Catch::Approx(100.0));
    CHECK_THROWS_AS(overlap_ratio({1}, {1, 2}), std::invalid_argument);
}
