#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <filesystem>

#include "mdal/detector.hpp"
#include "mdal/scenes.hpp"

using namespace mdal;

namespace {
DatasetSpec small_spec() {
    DatasetSpec s;
    s.n_scenes = 30;
    s.image_size = 64;
    s.num_classes = 4;
    s.seed = 123;
    return s;
}
}  // namespace

TEST_CASE("generation is deterministic in the spec seed") {
    const auto a = generate_dataset(small_spec());
    const auto b = generate_dataset(small_spec());
    REQUIRE(a.size() == b.size());
    for (size_t i = 0; i < a.size(); ++i) {
        CHECK(a[i].image == b[i].image);  // byte-identical doubles
        REQUIRE(a[i].objects.size() == b[i].objects.size());
        for (size_t j = 0; j < a[i].objects.size(); ++j) {
            CHECK(a[i].objects[j].class_id == b[i].objects[j].class_id);
            CHECK(a[i].objects[j].box.x == b[i].objects[j].box.x);
        }
    }
    DatasetSpec other = small_spec();
    other.seed = 124;
    const auto c = generate_dataset(other);
    CHECK(a[0].image != c[0].image);
}

TEST_CASE("noiseless boxes are tight: mask touches every box edge") {
    DatasetSpec s = small_spec();
    s.n_scenes = 40;
    s.occlusion_prob = 0;
    s.pixel_noise_sd = 0;
    s.box_jitter_sd = 0;
    const auto ds = generate_dataset(s);
    int checked = 0;
    for (const auto& sc : ds)
        for (const auto& o : sc.objects) {
            // The rendered foreground's own bounding box must equal the label.
            const int x0 = static_cast<int>(std::lround(o.box.x_min()));
            const int y0 = static_cast<int>(std::lround(o.box.y_min()));
            const int x1 = static_cast<int>(std::lround(o.box.x_max()));
            const int y1 = static_cast<int>(std::lround(o.box.y_max()));
            CHECK(x0 >= 0);
            CHECK(y0 >= 0);
            CHECK(x1 <= sc.width);
            CHECK(y1 <= sc.height);
            BoundingBox label = o.box;
            BoundingBox ideal{(x0 + x1) / 2.0, (y0 + y1) / 2.0, double(x1 - x0),
                              double(y1 - y0)};
            CHECK(iou(label, ideal) == Catch::Approx(1.0).epsilon(1e-12));
            ++checked;
        }
    CHECK(checked > 20);
}

TEST_CASE("class frequencies follow the weights") {
    DatasetSpec s = small_spec();
    s.n_scenes = 4000;
    s.objects_min = 2;
    s.objects_max = 3;
    s.class_weights = {0.55, 0.25, 0.12, 0.08};
    const auto ds = generate_dataset(s);
    std::vector<double> counts(5, 0.0);
    double total = 0;
    for (const auto& sc : ds)
        for (const auto& o : sc.objects) {
            counts[o.class_id] += 1;
            ++total;
        }
    REQUIRE(total > 9000);
    for (int c = 1; c <= 4; ++c)
        CHECK(counts[c] / total == Catch::Approx(s.class_weights[c - 1]).margin(0.02));
}

TEST_CASE("split_ids partitions without overlap and is deterministic") {
    const auto sp = split_ids(100, {0.8, 0.2}, 7);
    REQUIRE(sp.size() == 2);
    CHECK(sp[0].size() == 80);
    CHECK(sp[1].size() == 20);
    std::vector<bool> seen(100, false);
    for (const auto& part : sp)
        for (int id : part) {
            CHECK(!seen[id]);
            seen[id] = true;
        }
    for (bool b : seen) CHECK(b);
    CHECK(split_ids(100, {0.8, 0.2}, 7) == sp);
    CHECK(split_ids(100, {0.8, 0.2}, 8) != sp);
}

TEST_CASE("dataset serialization round-trips exactly") {
    DatasetSpec s = small_spec();
    s.box_jitter_sd = 0.7;
    s.occlusion_prob = 0.4;
    s.pixel_noise_sd = 0.05;
    s.class_weights = {0.4, 0.3, 0.2, 0.1};
    const auto ds = generate_dataset(s);
    const std::string dir = std::filesystem::temp_directory_path() / "mdal_scene_rt";
    save_dataset(s, ds, dir);
    const auto [s2, ds2] = load_dataset(dir);
    CHECK(s2.n_scenes == s.n_scenes);
    CHECK(s2.box_jitter_sd == s.box_jitter_sd);
    CHECK(s2.class_weights == s.class_weights);
    REQUIRE(ds2.size() == ds.size());
    for (size_t i = 0; i < ds.size(); ++i) {
        CHECK(ds2[i].image == ds[i].image);  // bit-exact
        REQUIRE(ds2[i].objects.size() == ds[i].objects.size());
        for (size_t j = 0; j < ds[i].objects.size(); ++j) {
            CHECK(ds2[i].objects[j].class_id == ds[i].objects[j].class_id);
            CHECK(ds2[i].objects[j].box.x == ds[i].objects[j].box.x);
            CHECK(ds2[i].objects[j].box.w == ds[i].objects[j].box.w);
            CHECK(ds2[i].objects[j].jittered == ds[i].objects[j].jittered);
            CHECK(ds2[i].objects[j].occluded == ds[i].objects[j].occluded);
        }
    }
    std::filesystem::remove_all(dir);
}

TEST_CASE("box jitter grows the label error monotonically") {
    auto mean_err = [](double sd) {
        DatasetSpec s;
        s.n_scenes = 300;
        s.seed = 55;
        s.box_jitter_sd = sd;
        double err = 0;
        int n = 0;
        const auto with = generate_dataset(s);
        s.box_jitter_sd = 0.0;
        const auto base = generate_dataset(s);
        for (size_t i = 0; i < with.size(); ++i)
            for (size_t j = 0; j < with[i].objects.size(); ++j) {
                const auto& a = with[i].objects[j].box;
                const auto& b = base[i].objects[j].box;
                err += std::fabs(a.x - b.x) + std::fabs(a.y - b.y) + std::fabs(a.w - b.w) +
                       std::fabs(a.h - b.h);
                ++n;
            }
        return err / n;
    };
    const double e0 = mean_err(0.0);
    const double e1 = mean_err(0.5);
    const double e2 = mean_err(1.5);
    CHECK(e0 == 0.0);
    CHECK(e1 > 0.0);
    CHECK(e2 > e1);
}

TEST_CASE("invalid specs are rejected") {
    DatasetSpec s = small_spec();
    s.class_weights = {0.5, 0.5};  // wrong size for C=4
    CHECK_THROWS_AS(s.validate(), std::invalid_argument);
    DatasetSpec t = small_spec();
    t.size_max = 70;  // larger than the image
    CHECK_THROWS_AS(t.validate(), std::invalid_argument);
}

TEST_CASE("pixel noise perturbs the image, not the labels") {
    DatasetSpec s = small_spec();
    s.pixel_noise_sd = 0.05;
    const auto noisy = generate_dataset(s);
    s.pixel_noise_sd = 0.0;
    const auto clean = generate_dataset(s);
    CHECK(noisy[0].image != clean[0].image);
    REQUIRE(noisy[0].objects.size() == clean[0].objects.size());
    for (size_t j = 0; j < clean[0].objects.size(); ++j)
        CHECK(noisy[0].objects[j].box.x == clean[0].objects[j].box.x);
}
