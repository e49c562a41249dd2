#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>

#include "mdal/rng.hpp"
#include "mdal/uncertainty.hpp"

using namespace mdal;

// ------------------------------------------------------- scalar mixtures

TEST_CASE("mixture decomposition hand case") {
    GmmParams g;
    g.pi = {0.5, 0.5};
    g.mu = {{0.0}, {2.0}};
    g.sigma = {{0.3}, {0.5}};
    const UncertaintyPair p = mixture_uncertainty(g);
    CHECK(p.aleatoric == Catch::Approx(0.4));
    CHECK(p.epistemic == Catch::Approx(1.0));  // mean 1, both deviations 1

    GmmParams skew;
    skew.pi = {0.9, 0.1};
    skew.mu = {{1.0}, {-1.0}};
    skew.sigma = {{0.2}, {0.8}};
    const UncertaintyPair q = mixture_uncertainty(skew);
    CHECK(q.aleatoric == Catch::Approx(0.9 * 0.2 + 0.1 * 0.8));
    // mean 0.8; deviations 0.2 and -1.8
    CHECK(q.epistemic == Catch::Approx(0.9 * 0.04 + 0.1 * 3.24));
}

TEST_CASE("single-component mixtures have zero epistemic uncertainty") {
    Rng rng(4);
    for (int t = 0; t < 100; ++t) {
        GmmParams g;
        g.pi = {1.0};
        g.mu = {{rng.uniform(-5, 5)}};
        g.sigma = {{rng.uniform(0.05, 0.95)}};
        const UncertaintyPair p = mixture_uncertainty(g);
        CHECK(p.epistemic == 0.0);
        CHECK(p.aleatoric == g.sigma[0][0]);
    }
}

TEST_CASE("decomposition satisfies the law of total variance (Monte Carlo)") {
    GmmParams g;
    g.pi = {0.2, 0.5, 0.3};
    g.mu = {{-1.0}, {0.5}, {3.0}};
    g.sigma = {{0.4}, {0.1}, {0.7}};  // component variances
    const UncertaintyPair p = mixture_uncertainty(g);

    Rng rng(2025);
    const int n = 400000;
    double sum = 0, sumsq = 0;
    for (int i = 0; i < n; ++i) {
        const double u = rng.uniform();
        int k = u < 0.2 ? 0 : (u < 0.7 ? 1 : 2);
        const double x = g.mu[k][0] + std::sqrt(g.sigma[k][0]) * rng.normal();
        sum += x;
        sumsq += x * x;
    }
    const double mean = sum / n;
    const double var = sumsq / n - mean * mean;
    CHECK(var == Catch::Approx(p.aleatoric + p.epistemic).margin(0.02));
}

TEST_CASE("decomposition is shift- and permutation-invariant") {
    GmmParams g;
    g.pi = {0.3, 0.25, 0.45};
    g.mu = {{1.2}, {-0.7}, {0.3}};
    g.sigma = {{0.2}, {0.6}, {0.15}};
    const UncertaintyPair base = mixture_uncertainty(g);

    GmmParams shifted = g;
    for (auto& m : shifted.mu) m[0] += 17.5;
    const UncertaintyPair s = mixture_uncertainty(shifted);
    CHECK(s.aleatoric == Catch::Approx(base.aleatoric).epsilon(1e-12));
    CHECK(s.epistemic == Catch::Approx(base.epistemic).epsilon(1e-12));

    GmmParams perm;
    perm.pi = {g.pi[2], g.pi[0], g.pi[1]};
    perm.mu = {g.mu[2], g.mu[0], g.mu[1]};
    perm.sigma = {g.sigma[2], g.sigma[0], g.sigma[1]};
    const UncertaintyPair q = mixture_uncertainty(perm);
    CHECK(q.aleatoric == Catch::Approx(base.aleatoric).epsilon(1e-12));
    CHECK(q.epistemic == Catch::Approx(base.epistemic).epsilon(1e-12));
}

TEST_CASE("vector-valued means use squared Euclidean deviations") {
    GmmParams g;
    g.pi = {0.5, 0.5};
    g.mu = {{0.0, 0.0}, {3.0, 4.0}};  // distance 5 between means
    const UncertaintyPair p = mixture_uncertainty(g);
    // mixture mean (1.5, 2); each component deviates by (1.5, 2), norm^2 6.25
    CHECK(p.epistemic == Catch::Approx(6.25));
    CHECK(p.aleatoric == 0.0);  // no sigma supplied
}

// ------------------------------------------------------- class covariance

TEST_CASE("class covariance of a uniform single component") {
    const std::vector<double> c(4, 0.25);
    const auto m = efficient_cls_aleatoric({1.0}, {c});
    for (size_t i = 0; i < 4; ++i)
        for (size_t j = 0; j < 4; ++j)
            CHECK(m[i][j] == Catch::Approx(i == j ? 0.1875 : -0.0625));
}

TEST_CASE("one-hot components carry no class aleatoric uncertainty") {
    const std::vector<double> a = {1, 0, 0};
    const std::vector<double> b = {0, 0, 1};
    const auto m = efficient_cls_aleatoric({0.4, 0.6}, {a, b});
    for (const auto& row : m)
        for (double v : row) CHECK(v == Catch::Approx(0.0).margin(1e-15));
}

TEST_CASE("class covariance: symmetric, zero row sums, PSD, correct diagonal") {
    Rng rng(88);
    for (int t = 0; t < 50; ++t) {
        const int k_comp = 1 + static_cast<int>(rng.uniform() * 3);
        const int cp = 2 + static_cast<int>(rng.uniform() * 5);
        std::vector<double> pi(k_comp);
        double s = 0;
        for (auto& v : pi) { v = rng.uniform(0.05, 1.0); s += v; }
        for (auto& v : pi) v /= s;
        std::vector<std::vector<double>> probs(k_comp, std::vector<double>(cp));
        for (auto& c : probs) {
            double cs = 0;
            for (auto& v : c) { v = rng.uniform(0.01, 1.0); cs += v; }
            for (auto& v : c) v /= cs;
        }
        const auto m = efficient_cls_aleatoric(pi, probs);
        for (int i = 0; i < cp; ++i) {
            double row_sum = 0;
            for (int j = 0; j < cp; ++j) {
                REQUIRE(m[i][j] == Catch::Approx(m[j][i]).margin(1e-14));
                row_sum += m[i][j];
            }
            REQUIRE(row_sum == Catch::Approx(0.0).margin(1e-12));
            double diag = 0;  // sum_k pi c (1 - c)
            for (int k = 0; k < k_comp; ++k)
                diag += pi[k] * probs[k][i] * (1.0 - probs[k][i]);
            REQUIRE(m[i][i] == Catch::Approx(diag).margin(1e-14));
        }
        // PSD: z^T M z >= 0 for random z
        for (int r = 0; r < 10; ++r) {
            std::vector<double> z(cp);
            for (auto& v : z) v = rng.uniform(-2, 2);
            double quad = 0;
            for (int i = 0; i < cp; ++i)
                for (int j = 0; j < cp; ++j) quad += z[i] * m[i][j] * z[j];
            REQUIRE(quad >= -1e-12);
        }
    }
}

TEST_CASE("class covariance matches the two-component closed form") {
    const std::vector<double> pi = {0.3, 0.7};
    const std::vector<double> a = {0.6, 0.3, 0.1};
    const std::vector<double> b = {0.2, 0.5, 0.3};
    const auto m = efficient_cls_aleatoric(pi, {a, b});
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) {
            const double da = (i == j ? a[i] : 0.0) - a[i] * a[j];
            const double db = (i == j ? b[i] : 0.0) - b[i] * b[j];
            CHECK(m[i][j] == Catch::Approx(0.3 * da + 0.7 * db).margin(1e-15));
        }
}

TEST_CASE("class covariance input validation") {
    CHECK_THROWS_AS(efficient_cls_aleatoric({1.0, 0.0}, {{0.5, 0.5}}),
                    std::invalid_argument);
    CHECK_THROWS_AS(efficient_cls_aleatoric({1.0}, {{0.5, 0.6}}),
                    std::invalid_argument);  // off simplex
    CHECK_THROWS_AS(efficient_cls_aleatoric({0.5, 0.5}, {{0.5, 0.5}, {0.7, 0.3, 0.0}}),
                    std::invalid_argument);  // ragged
}

// ------------------------------------------------------- per-detection quad

namespace {

AnchorGmm make_anchor_gmm() {
    AnchorGmm g;
    for (int b = 0; b < 4; ++b) {
        g.loc[b].pi = {0.5, 0.5};
        g.loc[b].mu = {{0.0}, {0.1 * (b + 1)}};
        g.loc[b].sigma = {{0.05 + 0.1 * b}, {0.05 + 0.1 * b}};
    }
    g.cls.pi = {0.6, 0.4};
    g.cls.mu = {{0.0, 2.0, -1.0}, {0.5, 1.0, 0.0}};
    g.cls.sigma = {{0.1, 0.2, 0.3}, {0.4, 0.5, 0.6}};
    return g;
}

}  // namespace

TEST_CASE("detection quad takes the max over box coordinates") {
    const AnchorGmm g = make_anchor_gmm();
    const UncertaintyQuad q = detection_uncertainty(g, 1, HeadVariant::FullGmm);
    // coordinate b=3 has the largest sigma -> aleatoric 0.35
    CHECK(q.al_b == Catch::Approx(0.35));
    // epistemic grows with the mean gap; b=3 has mu gap 0.4 -> pi-weighted
    // squared deviations around mean 0.2: 0.5*(0.04+0.04)
    CHECK(q.ep_b == Catch::Approx(0.04));
}

TEST_CASE("full-head class quad: weighted sigma at the predicted class") {
    const AnchorGmm g = make_anchor_gmm();
    const UncertaintyQuad q1 = detection_uncertainty(g, 1, HeadVariant::FullGmm);
    CHECK(q1.al_c == Catch::Approx(0.6 * 0.2 + 0.4 * 0.5));
    const UncertaintyQuad q2 = detection_uncertainty(g, 2, HeadVariant::FullGmm);
    CHECK(q2.al_c == Catch::Approx(0.6 * 0.3 + 0.4 * 0.6));
    // max-over-classes reduction picks the largest weighted sigma (class 2)
    const UncertaintyQuad qm = detection_uncertainty(g, 0, HeadVariant::FullGmm,
                                                     ClsReduction::MaxOverClasses);
    CHECK(qm.al_c == Catch::Approx(0.6 * 0.3 + 0.4 * 0.6));
    // epistemic: mixture over the mean vectors
    GmmParams means;
    means.pi = g.cls.pi;
    means.mu = g.cls.mu;
    CHECK(q1.ep_c == Catch::Approx(mixture_uncertainty(means).epistemic));
}

TEST_CASE("efficient-head class quad uses softmaxed probability vectors") {
    AnchorGmm g = make_anchor_gmm();
    g.cls.sigma.clear();  // efficient head has no class variances
    const UncertaintyQuad q = detection_uncertainty(g, 1, HeadVariant::Efficient);

    std::vector<std::vector<double>> probs = {softmax(g.cls.mu[0]), softmax(g.cls.mu[1])};
    const auto cov = efficient_cls_aleatoric(g.cls.pi, probs);
    CHECK(q.al_c == Catch::Approx(cov[1][1]));
    GmmParams ep;
    ep.pi = g.cls.pi;
    ep.mu = probs;
    CHECK(q.ep_c == Catch::Approx(mixture_uncertainty(ep).epistemic));
}

TEST_CASE("pointwise head has no uncertainty decomposition") {
    const AnchorGmm g = make_anchor_gmm();
    CHECK_THROWS_AS(detection_uncertainty(g, 1, HeadVariant::Pointwise),
                    std::invalid_argument);
}

TEST_CASE("attach_uncertainties matches manual postprocessing") {
    NetworkConfig cfg;
    cfg.mixture_components = 2;
    cfg.num_classes = 2;
    cfg.image_size = 32;
    cfg.backbone_channels = {4, 8};
    cfg.anchor_scales = {10, 16};
    cfg.head = HeadVariant::FullGmm;

    DatasetSpec spec;
    spec.n_scenes = 1;
    spec.image_size = 32;
    spec.num_classes = 2;
    spec.seed = 3;
    const Scene scene = generate_dataset(spec)[0];
    const DetectorModel model = make_model(cfg, 21);
    const InferenceResult r = run_forward(model, scene);

    auto dets = predict(r.loc_rows, r.cls_rows, model.anchors, cfg, 0.05, 0.5);
    attach_uncertainties(dets, r.loc_rows, r.cls_rows, cfg);
    for (const auto& d : dets) {
        const double* lrow = r.loc_rows.data.data() + d.anchor_index * r.loc_rows.shape[1];
        const double* crow = r.cls_rows.data.data() + d.anchor_index * r.cls_rows.shape[1];
        const AnchorGmm g = postprocess_anchor(lrow, crow, cfg);
        const UncertaintyQuad q = detection_uncertainty(g, d.class_id, cfg.head);
        CHECK(d.uncertainty.al_b == q.al_b);
        CHECK(d.uncertainty.ep_b == q.ep_b);
        CHECK(d.uncertainty.al_c == q.al_c);
        CHECK(d.uncertainty.ep_c == q.ep_c);
        CHECK(d.uncertainty.al_b >= 0.0);
        CHECK(d.uncertainty.ep_b >= 0.0);
    }
}
