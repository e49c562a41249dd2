#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "mdal/rng.hpp"

namespace mdal {

/// Axis-aligned box in center/size pixel coordinates.
struct BoundingBox {
    double x = 0, y = 0;  // center
    double w = 0, h = 0;  // extents, > 0

    double x_min() const { return x - w / 2; }
    double x_max() const { return x + w / 2; }
    double y_min() const { return y - h / 2; }
    double y_max() const { return y + h / 2; }
    double area() const { return w * h; }
};

struct ObjectLabel {
    int class_id = 1;  // 1..C; 0 is reserved for background
    BoundingBox box;
    bool jittered = false;
    bool occluded = false;
};

struct Scene {
    int height = 0, width = 0;
    std::vector<double> image;  // H*W grayscale in [0,1], row-major
    std::vector<ObjectLabel> objects;

    double& at(int y, int x) { return image[static_cast<size_t>(y) * width + x]; }
    double at(int y, int x) const { return image[static_cast<size_t>(y) * width + x]; }
};

struct DatasetSpec {
    int n_scenes = 100;
    int image_size = 64;
    int num_classes = 4;
    int objects_min = 1;
    int objects_max = 3;
    int size_min = 12;
    int size_max = 24;
    // aleatoric knobs
    double box_jitter_sd = 0.0;
    double occlusion_prob = 0.0;
    double pixel_noise_sd = 0.0;
    // epistemic knobs
    std::vector<double> class_weights;  // empty = uniform; must sum to 1
    double size_skew = 1.0;             // >1 biases toward small objects
    uint64_t seed = 0;

    void validate() const {
        if (n_scenes < 0) throw std::invalid_argument("DatasetSpec: n_scenes < 0");
        if (image_size < 8) throw std::invalid_argument("DatasetSpec: image too small");
        if (num_classes < 1) throw std::invalid_argument("DatasetSpec: num_classes < 1");
        if (objects_min < 0 || objects_max < objects_min)
            throw std::invalid_argument("DatasetSpec: bad objects-per-scene range");
        if (size_min < 4 || size_max < size_min)
            throw std::invalid_argument("DatasetSpec: bad size range");
        if (size_max + 2 > image_size)
            throw std::invalid_argument(
                "DatasetSpec: objects-per-scene range infeasible for image size");
        if (occlusion_prob < 0 || occlusion_prob > 1)
            throw std::invalid_argument("DatasetSpec: occlusion_prob outside [0,1]");
        if (box_jitter_sd < 0 || pixel_noise_sd < 0)
            throw std::invalid_argument("DatasetSpec: negative noise sd");
        if (!class_weights.empty()) {
            if (static_cast<int>(class_weights.size()) != num_classes)
                throw std::invalid_argument("DatasetSpec: class_weights size != C");
            double s = 0;
            for (double w : class_weights) {
                if (w < 0) throw std::invalid_argument("DatasetSpec: negative weight");
                s += w;
            }
            if (std::fabs(s - 1.0) > 1e-9)
                throw std::invalid_argument("DatasetSpec: class_weights must sum to 1");
        }
        if (size_skew <= 0) throw std::invalid_argument("DatasetSpec: size_skew <= 0");
    }

    std::vector<double> effective_weights() const {
        if (!class_weights.empty()) return class_weights;
        return std::vector<double>(num_classes, 1.0 / num_classes);
    }
};

namespace detail {

enum class ShapeKind { Square, Disc, Cross, Ring };

inline ShapeKind shape_for_class(int class_id) {
    switch ((class_id - 1) % 4) {
        case 0: return ShapeKind::Square;
        case 1: return ShapeKind::Disc;
        case 2: return ShapeKind::Cross;
        default: return ShapeKind::Ring;
    }
}

/// Binary mask of size s*s for the shape; mask touches all four edges of
/// its bounding square so the GT box is tight by construction.
inline std::vector<uint8_t> shape_mask(ShapeKind kind, int s) {
    std::vector<uint8_t> m(static_cast<size_t>(s) * s, 0);
    const double c = s / 2.0;
    const double r = s / 2.0;
    const int bar = std::max(2, s / 3);
    const int b0 = (s - bar) / 2;
    const double r_in = r - std::max(2.0, s / 4.0);
    for (int y = 0; y < s; ++y)
        for (int x = 0; x < s; ++x) {
            const double dx = x + 0.5 - c, dy = y + 0.5 - c;
            const double d2 = dx * dx + dy * dy;
            bool on = false;
            switch (kind) {
                case ShapeKind::Square: on = true; break;
                case ShapeKind::Disc: on = d2 <= r * r; break;
                case ShapeKind::Cross:
                    on = (x >= b0 && x < b0 + bar) || (y >= b0 && y < b0 + bar);
                    break;
                case ShapeKind::Ring: on = d2 <= r * r && d2 >= r_in * r_in; break;
            }
            if (on) m[static_cast<size_t>(y) * s + x] = 1;
        }
    return m;
}

inline double iou_minmax(double ax0, double ay0, double ax1, double ay1, double bx0,
                         double by0, double bx1, double by1) {
    const double ix = std::max(0.0, std::min(ax1, bx1) - std::max(ax0, bx0));
    const double iy = std::max(0.0, std::min(ay1, by1) - std::max(ay0, by0));
    const double inter = ix * iy;
    const double uni = (ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter;
    return uni > 0 ? inter / uni : 0.0;
}

}  // namespace detail

/// Renders one scene. Pure function of (spec, scene_index).
inline Scene generate_scene(const DatasetSpec& spec, int scene_index) {
    using namespace detail;
    Rng rng(derive_seed(spec.seed, static_cast<uint64_t>(scene_index)));
    const int sz = spec.image_size;
    Scene scene;
    scene.height = scene.width = sz;
    scene.image.resize(static_cast<size_t>(sz) * sz);

    // textured background
    const double base = rng.uniform(0.08, 0.22);
    for (auto& p : scene.image) p = base + rng.uniform(0.0, 0.08);

    const auto weights = spec.effective_weights();
    const int n_obj = rng.uniform_int(spec.objects_min, spec.objects_max);
    std::vector<std::array<double, 4>> placed;  // x0,y0,x1,y1

    for (int k = 0; k < n_obj; ++k) {
        const int class_id = rng.categorical(weights) + 1;
        const double u = std::pow(rng.uniform(), spec.size_skew);
        const int s = spec.size_min +
                      static_cast<int>(std::floor(u * (spec.size_max - spec.size_min + 1e-12)));
        int x0 = 0, y0 = 0;
        for (int attempt = 0; attempt < 20; ++attempt) {
            x0 = rng.uniform_int(1, sz - s - 1);
            y0 = rng.uniform_int(1, sz - s - 1);
            bool clear = true;
            for (const auto& p : placed)
                if (iou_minmax(x0, y0, x0 + s, y0 + s, p[0], p[1], p[2], p[3]) > 0.3) {
                    clear = false;
                    break;
                }
            if (clear) break;
        }
        placed.push_back({double(x0), double(y0), double(x0 + s), double(y0 + s)});

        const auto mask = shape_mask(shape_for_class(class_id), s);
        // Each class gets a distinct intensity band (plus its shape), so the
        // task stays learnable for a desk-scale backbone.
        const double band = spec.num_classes > 1
                                ? 0.35 + 0.55 * (class_id - 1) / (spec.num_classes - 1)
                                : 0.65;
        const double intensity = band + rng.uniform(-0.05, 0.05);
        for (int y = 0; y < s; ++y)
            for (int x = 0; x < s; ++x)
                if (mask[static_cast<size_t>(y) * s + x])
                    scene.at(y0 + y, x0 + x) = intensity;

        ObjectLabel obj;
        obj.class_id = class_id;

        // occlusion: paint a background-colored rectangle over part of it
        if (rng.uniform() < spec.occlusion_prob) {
            obj.occluded = true;
            const int ow = std::max(2, static_cast<int>(s * rng.uniform(0.35, 0.65)));
            const int oh = std::max(2, static_cast<int>(s * rng.uniform(0.35, 0.65)));
            const int ox = x0 + rng.uniform_int(0, s - ow);
            const int oy = y0 + rng.uniform_int(0, s - oh);
            const double ocol = base + rng.uniform(0.0, 0.08);
            for (int y = 0; y < oh; ++y)
                for (int x = 0; x < ow; ++x) scene.at(oy + y, ox + x) = ocol;
        }

        // tight GT box, then optional label jitter (noisy annotation)
        obj.box = BoundingBox{x0 + s / 2.0, y0 + s / 2.0, double(s), double(s)};
        if (spec.box_jitter_sd > 0) {
            obj.jittered = true;
            obj.box.x += rng.normal(0, spec.box_jitter_sd);
            obj.box.y += rng.normal(0, spec.box_jitter_sd);
            obj.box.w = std::max(2.0, obj.box.w + rng.normal(0, spec.box_jitter_sd));
            obj.box.h = std::max(2.0, obj.box.h + rng.normal(0, spec.box_jitter_sd));
        }
        // keep the GT box inside the image
        obj.box.w = std::min(obj.box.w, double(sz));
        obj.box.h = std::min(obj.box.h, double(sz));
        obj.box.x = std::clamp(obj.box.x, obj.box.w / 2, sz - obj.box.w / 2);
        obj.box.y = std::clamp(obj.box.y, obj.box.h / 2, sz - obj.box.h / 2);
        scene.objects.push_back(obj);
    }

    if (spec.pixel_noise_sd > 0)
        for (auto& p : scene.image)
            p = std::clamp(p + rng.normal(0, spec.pixel_noise_sd), 0.0, 1.0);
    return scene;
}

inline std::vector<Scene> generate_dataset(const DatasetSpec& spec) {
    spec.validate();
    std::vector<Scene> out;
    out.reserve(spec.n_scenes);
    for (int i = 0; i < spec.n_scenes; ++i) out.push_back(generate_scene(spec, i));
    return out;
}

/// Deterministic disjoint exhaustive split of [0,n) into |fractions| parts.
inline std::vector<std::vector<int>> split_ids(int n, const std::vector<double>& fractions,
                                               uint64_t seed) {
    double s = 0;
    for (double f : fractions) s += f;
    if (std::fabs(s - 1.0) > 1e-9)
        throw std::invalid_argument("split_ids: fractions must sum to 1");
    std::vector<int> ids(n);
    std::iota(ids.begin(), ids.end(), 0);
    Rng rng(derive_seed(seed, 0x511700ULL));
    rng.shuffle(ids);
    std::vector<std::vector<int>> parts;
    size_t pos = 0;
    double acc = 0;
    for (size_t i = 0; i < fractions.size(); ++i) {
        acc += fractions[i];
        const size_t end =
            (i + 1 == fractions.size()) ? ids.size()
                                        : static_cast<size_t>(std::llround(acc * n));
        if (end <= pos) throw std::invalid_argument("split_ids: empty partition");
        parts.emplace_back(ids.begin() + pos, ids.begin() + end);
        pos = end;
    }
    return parts;
}

// ---- serialization ----

inline nlohmann::json spec_to_json(const DatasetSpec& s) {
    return nlohmann::json{{"n_scenes", s.n_scenes},
                          {"image_size", s.image_size},
                          {"num_classes", s.num_classes},
                          {"objects_min", s.objects_min},
                          {"objects_max", s.objects_max},
                          {"size_min", s.size_min},
                          {"size_max", s.size_max},
                          {"box_jitter_sd", s.box_jitter_sd},
                          {"occlusion_prob", s.occlusion_prob},
                          {"pixel_noise_sd", s.pixel_noise_sd},
                          {"class_weights", s.class_weights},
                          {"size_skew", s.size_skew},
                          {"seed", s.seed}};
}

inline DatasetSpec spec_from_json(const nlohmann::json& j) {
    DatasetSpec s;
    s.n_scenes = j.at("n_scenes");
    s.image_size = j.at("image_size");
    s.num_classes = j.at("num_classes");
    s.objects_min = j.at("objects_min");
    s.objects_max = j.at("objects_max");
    s.size_min = j.at("size_min");
    s.size_max = j.at("size_max");
    s.box_jitter_sd = j.at("box_jitter_sd");
    s.occlusion_prob = j.at("occlusion_prob");
    s.pixel_noise_sd = j.at("pixel_noise_sd");
    s.class_weights = j.at("class_weights").get<std::vector<double>>();
    s.size_skew = j.at("size_skew");
    s.seed = j.at("seed");
    return s;
}

namespace detail {
template <typename T>
void write_raw(std::ostream& os, const T& v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}
template <typename T>
void read_raw(std::istream& is, T& v) {
    is.read(reinterpret_cast<char*>(&v), sizeof(T));
}
}  // namespace detail

/// Dataset directory: manifest.json (spec + scene byte offsets) and
/// scenes.bin. Per-scene record, little-endian:
///   int32 height, int32 width, int32 n_objects,
///   H*W float64 pixels,
///   per object: int32 class_id, 4x float64 (x,y,w,h), uint8 jittered, uint8 occluded.
inline void save_dataset(const DatasetSpec& spec, const std::vector<Scene>& scenes,
                         const std::string& dir) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    std::ofstream bin(fs::path(dir) / "scenes.bin", std::ios::binary);
    if (!bin) throw std::runtime_error("save_dataset: cannot write scenes.bin");
    std::vector<uint64_t> offsets;
    for (const auto& sc : scenes) {
        offsets.push_back(static_cast<uint64_t>(bin.tellp()));
        detail::write_raw(bin, int32_t(sc.height));
        detail::write_raw(bin, int32_t(sc.width));
        detail::write_raw(bin, int32_t(sc.objects.size()));
        bin.write(reinterpret_cast<const char*>(sc.image.data()),
                  static_cast<std::streamsize>(sc.image.size() * sizeof(double)));
        for (const auto& o : sc.objects) {
            detail::write_raw(bin, int32_t(o.class_id));
            detail::write_raw(bin, o.box.x);
            detail::write_raw(bin, o.box.y);
            detail::write_raw(bin, o.box.w);
            detail::write_raw(bin, o.box.h);
            detail::write_raw(bin, uint8_t(o.jittered));
            detail::write_raw(bin, uint8_t(o.occluded));
        }
    }
    nlohmann::json manifest{{"format", "mdal-dataset-v1"},
                            {"spec", spec_to_json(spec)},
                            {"n_scenes", scenes.size()},
                            {"offsets", offsets}};
    std::ofstream mf(fs::path(dir) / "manifest.json");
    mf << manifest.dump(2) << "\n";
    if (!mf) throw std::runtime_error("save_dataset: cannot write manifest.json");
}

inline std::pair<DatasetSpec, std::vector<Scene>> load_dataset(const std::string& dir) {
    namespace fs = std::filesystem;
    std::ifstream mf(fs::path(dir) / "manifest.json");
    if (!mf) throw std::runtime_error("load_dataset: cannot open manifest.json in " + dir);
    nlohmann::json manifest = nlohmann::json::parse(mf);
    if (manifest.at("format") != "mdal-dataset-v1")
        throw std::runtime_error("load_dataset: unrecognized format");
    DatasetSpec spec = spec_from_json(manifest.at("spec"));
    const size_t n = manifest.at("n_scenes");
    std::ifstream bin(fs::path(dir) / "scenes.bin", std::ios::binary);
    if (!bin) throw std::runtime_error("load_dataset: cannot open scenes.bin");
    std::vector<Scene> scenes(n);
    for (auto& sc : scenes) {
        int32_t h, w, nobj;
        detail::read_raw(bin, h);
        detail::read_raw(bin, w);
        detail::read_raw(bin, nobj);
        sc.height = h;
        sc.width = w;
        sc.image.resize(static_cast<size_t>(h) * w);
        bin.read(reinterpret_cast<char*>(sc.image.data()),
                 static_cast<std::streamsize>(sc.image.size() * sizeof(double)));
        sc.objects.resize(nobj);
        for (auto& o : sc.objects) {
            int32_t cid;
            uint8_t jit, occ;
            detail::read_raw(bin, cid);
            detail::read_raw(bin, o.box.x);
            detail::read_raw(bin, o.box.y);
            detail::read_raw(bin, o.box.w);
            detail::read_raw(bin, o.box.h);
            detail::read_raw(bin, jit);
            detail::read_raw(bin, occ);
            o.class_id = cid;
            o.jittered = jit;
            o.occluded = occ;
        }
        if (!bin) throw std::runtime_error("load_dataset: truncated scenes.bin");
    }
    return {spec, std::move(scenes)};
}

}  // namespace mdal
