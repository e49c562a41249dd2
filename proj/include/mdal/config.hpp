#pragma once

#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "mdal/acquisition.hpp"
#include "mdal/detector.hpp"
#include "mdal/losses.hpp"
#include "mdal/scenes.hpp"
#include "mdal/uncertainty.hpp"

namespace mdal {

/// Flat `key = value` sections, `#` comments. All keys are known; a typo
/// is an error, not a silent default.
class KeyValueConfig {
public:
    static KeyValueConfig parse_file(const std::string& path) {
        std::ifstream f(path);
        if (!f) throw std::runtime_error("config: cannot open " + path);
        std::stringstream ss;
        ss << f.rdbuf();
        return parse(ss.str(), path);
    }

    static KeyValueConfig parse(const std::string& text, const std::string& origin = "<string>") {
        KeyValueConfig cfg;
        std::istringstream in(text);
        std::string line, section;
        int lineno = 0;
        while (std::getline(in, line)) {
            ++lineno;
            const auto hash = line.find('#');
            if (hash != std::string::npos) line.erase(hash);
            line = trim(line);
            if (line.empty()) continue;
            if (line.front() == '[') {
                if (line.back() != ']')
                    throw std::runtime_error(origin + ":" + std::to_string(lineno) +
                                             ": malformed section header");
                section = trim(line.substr(1, line.size() - 2));
                continue;
            }
            const auto eq = line.find('=');
            if (eq == std::string::npos)
                throw std::runtime_error(origin + ":" + std::to_string(lineno) +
                                         ": expected key = value");
            cfg.values_[section + "." + trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
        }
        return cfg;
    }

    bool has(const std::string& key) const { return values_.count(key) > 0; }

    std::string get_str(const std::string& key, const std::string& dflt) {
        auto it = values_.find(key);
        if (it == values_.end()) return dflt;
        used_.insert({key, true});
        return it->second;
    }
    double get_double(const std::string& key, double dflt) {
        auto it = values_.find(key);
        if (it == values_.end()) return dflt;
        used_.insert({key, true});
        return std::stod(it->second);
    }
    int64_t get_int(const std::string& key, int64_t dflt) {
        auto it = values_.find(key);
        if (it == values_.end()) return dflt;
        used_.insert({key, true});
        return std::stoll(it->second);
    }
    std::vector<double> get_doubles(const std::string& key, std::vector<double> dflt) {
        auto it = values_.find(key);
        if (it == values_.end()) return dflt;
        used_.insert({key, true});
        return split_doubles(it->second);
    }
    std::vector<int> get_ints(const std::string& key, std::vector<int> dflt) {
        auto it = values_.find(key);
        if (it == values_.end()) return dflt;
        used_.insert({key, true});
        std::vector<int> out;
        for (double v : split_doubles(it->second)) out.push_back(static_cast<int>(v));
        return out;
    }

    void reject_unknown_keys() const {
        for (const auto& [k, v] : values_)
            if (!used_.count(k)) throw std::runtime_error("config: unknown key '" + k + "'");
    }

private:
    std::map<std::string, std::string> values_;
    std::map<std::string, bool> used_;

    static std::string trim(const std::string& s) {
        const auto a = s.find_first_not_of(" \t\r");
        if (a == std::string::npos) return "";
        const auto b = s.find_last_not_of(" \t\r");
        return s.substr(a, b - a + 1);
    }
    static std::vector<double> split_doubles(const std::string& s) {
        std::vector<double> out;
        std::string item;
        std::istringstream in(s);
        while (std::getline(in, item, ',')) {
            item = trim(item);
            if (!item.empty()) out.push_back(std::stod(item));
        }
        return out;
    }
};

struct ExperimentConfig {
    DatasetSpec dataset;
    NetworkConfig network;
    OptimizerConfig optimizer;
    double train_fraction = 0.8;
    int initial_labeled = 100;
    int budget = 100;
    int cycles = 5;
    std::string acquisition = "uncertainty";  // uncertainty | random | entropy | coreset
    AggregationMode aggregation{AggregationMode::Op::Max, 0xF};
    ClsReduction cls_reduction = ClsReduction::PredictedClass;
    double conf_floor = 0.3;
    double nms_iou = 0.45;
    std::vector<uint64_t> seeds = {1, 2, 3};

    int train_pool_size() const {
        return static_cast<int>(std::llround(dataset.n_scenes * train_fraction));
    }

    void validate() const {
        dataset.validate();
        network.validate();
        if (train_fraction <= 0 || train_fraction >= 1)
            throw std::invalid_argument("ExperimentConfig: train_fraction outside (0,1)");
        if (initial_labeled < 1 || budget < 1 || cycles < 0)
            throw std::invalid_argument("ExperimentConfig: bad AL sizes");
        if (initial_labeled + int64_t(cycles) * budget > train_pool_size())
            throw std::invalid_argument(
                "ExperimentConfig: initial + cycles*budget exceeds train pool");
        if (acquisition != "uncertainty" && acquisition != "random" &&
            acquisition != "entropy" && acquisition != "coreset")
            throw std::invalid_argument("ExperimentConfig: unknown acquisition '" +
                                        acquisition + "'");
        if (conf_floor <= 0 || conf_floor >= 1)
            throw std::invalid_argument("ExperimentConfig: conf_floor outside (0,1)");
        if (seeds.empty()) throw std::invalid_argument("ExperimentConfig: no seeds");
        if (network.image_size != dataset.image_size)
            throw std::invalid_argument("ExperimentConfig: network/dataset image size mismatch");
    }
};

/// Desk-scale benchmark defaults: 2500 scenes split 2000/500, 100 initial
/// labels, budget 100, 5 cycles, K=4 full-GMM head.
inline ExperimentConfig default_experiment_config() {
    ExperimentConfig c;
    c.dataset.n_scenes = 2500;
    c.dataset.image_size = 64;
    c.dataset.num_classes = 4;
    c.dataset.class_weights = {0.55, 0.25, 0.12, 0.08};
    c.dataset.box_jitter_sd = 0.0;
    c.dataset.occlusion_prob = 0.15;
    c.dataset.pixel_noise_sd = 0.02;
    c.dataset.seed = 20240901;
    c.network.image_size = 64;
    c.network.num_classes = 4;
    return c;
}

inline ExperimentConfig config_from_kv(KeyValueConfig kv) {
    ExperimentConfig c = default_experiment_config();
    auto& d = c.dataset;
    d.n_scenes = static_cast<int>(kv.get_int("dataset.n_scenes", d.n_scenes));
    d.image_size = static_cast<int>(kv.get_int("dataset.image_size", d.image_size));
    d.num_classes = static_cast<int>(kv.get_int("dataset.num_classes", d.num_classes));
    d.objects_min = static_cast<int>(kv.get_int("dataset.objects_min", d.objects_min));
    d.objects_max = static_cast<int>(kv.get_int("dataset.objects_max", d.objects_max));
    d.size_min = static_cast<int>(kv.get_int("dataset.size_min", d.size_min));
    d.size_max = static_cast<int>(kv.get_int("dataset.size_max", d.size_max));
    d.box_jitter_sd = kv.get_double("dataset.box_jitter_sd", d.box_jitter_sd);
    d.occlusion_prob = kv.get_double("dataset.occlusion_prob", d.occlusion_prob);
    d.pixel_noise_sd = kv.get_double("dataset.pixel_noise_sd", d.pixel_noise_sd);
    d.class_weights = kv.get_doubles("dataset.class_weights", d.class_weights);
    d.size_skew = kv.get_double("dataset.size_skew", d.size_skew);
    d.seed = static_cast<uint64_t>(kv.get_int("dataset.seed", static_cast<int64_t>(d.seed)));

    auto& n = c.network;
    n.head = head_variant_from_string(kv.get_str("network.head", to_string(n.head)));
    n.mixture_components =
        static_cast<int>(kv.get_int("network.mixture_components", n.mixture_components));
    n.image_size = d.image_size;
    n.num_classes = d.num_classes;
    n.backbone_channels = kv.get_ints("network.backbone_channels", n.backbone_channels);
    n.backbone_kernel = static_cast<int>(kv.get_int("network.backbone_kernel", n.backbone_kernel));
    n.anchor_scales = kv.get_doubles("network.anchor_scales", n.anchor_scales);
    n.anchor_ratios = kv.get_doubles("network.anchor_ratios", n.anchor_ratios);

    auto& o = c.optimizer;
    o.learning_rate = kv.get_double("optimizer.learning_rate", o.learning_rate);
    o.momentum = kv.get_double("optimizer.momentum", o.momentum);
    o.steps = static_cast<int>(kv.get_int("optimizer.steps", o.steps));
    o.batch_size = static_cast<int>(kv.get_int("optimizer.batch_size", o.batch_size));
    o.warmup_frac = kv.get_double("optimizer.warmup_frac", o.warmup_frac);
    o.eps = kv.get_double("optimizer.eps", o.eps);
    o.mining_ratio = static_cast<int>(kv.get_int("optimizer.mining_ratio", o.mining_ratio));
    o.grad_clip = kv.get_double("optimizer.grad_clip", o.grad_clip);
    o.loc_weight = kv.get_double("optimizer.loc_weight", o.loc_weight);

    c.train_fraction = kv.get_double("active_learning.train_fraction", c.train_fraction);
    c.initial_labeled =
        static_cast<int>(kv.get_int("active_learning.initial_labeled", c.initial_labeled));
    c.budget = static_cast<int>(kv.get_int("active_learning.budget", c.budget));
    c.cycles = static_cast<int>(kv.get_int("active_learning.cycles", c.cycles));
    c.acquisition = kv.get_str("active_learning.acquisition", c.acquisition);
    c.aggregation =
        aggregation_mode_from_string(kv.get_str("active_learning.aggregation", "max_all"));
    const std::string red = kv.get_str("active_learning.cls_reduction", "predicted_class");
    if (red == "predicted_class")
        c.cls_reduction = ClsReduction::PredictedClass;
    else if (red == "max_over_classes")
        c.cls_reduction = ClsReduction::MaxOverClasses;
    else
        throw std::runtime_error("config: unknown cls_reduction '" + red + "'");
    c.conf_floor = kv.get_double("active_learning.conf_floor", c.conf_floor);
    c.nms_iou = kv.get_double("active_learning.nms_iou", c.nms_iou);
    std::vector<double> seeds =
        kv.get_doubles("active_learning.seeds", {1, 2, 3});
    c.seeds.clear();
    for (double s : seeds) c.seeds.push_back(static_cast<uint64_t>(s));

    kv.reject_unknown_keys();
    c.validate();
    return c;
}

inline ExperimentConfig load_experiment_config(const std::string& path) {
    return config_from_kv(KeyValueConfig::parse_file(path));
}

/// Full provenance snapshot: every effective value, including defaults.
inline std::string config_to_text(const ExperimentConfig& c) {
    std::ostringstream os;
    os.precision(17);
    auto list_d = [](const std::vector<double>& v) {
        std::ostringstream s;
        s.precision(17);
        for (size_t i = 0; i < v.size(); ++i) s << (i ? "," : "") << v[i];
        return s.str();
    };
    auto list_i = [](const std::vector<int>& v) {
        std::ostringstream s;
        for (size_t i = 0; i < v.size(); ++i) s << (i ? "," : "") << v[i];
        return s.str();
    };
    os << "[dataset]\n"
       << "n_scenes = " << c.dataset.n_scenes << "\n"
       << "image_size = " << c.dataset.image_size << "\n"
       << "num_classes = " << c.dataset.num_classes << "\n"
       << "objects_min = " << c.dataset.objects_min << "\n"
       << "objects_max = " << c.dataset.objects_max << "\n"
       << "size_min = " << c.dataset.size_min << "\n"
       << "size_max = " << c.dataset.size_max << "\n"
       << "box_jitter_sd = " << c.dataset.box_jitter_sd << "\n"
       << "occlusion_prob = " << c.dataset.occlusion_prob << "\n"
       << "pixel_noise_sd = " << c.dataset.pixel_noise_sd << "\n"
       << "class_weights = " << list_d(c.dataset.class_weights) << "\n"
       << "size_skew = " << c.dataset.size_skew << "\n"
       << "seed = " << c.dataset.seed << "\n\n";
    os << "[network]\n"
       << "head = " << to_string(c.network.head) << "\n"
       << "mixture_components = " << c.network.mixture_components << "\n"
       << "backbone_channels = " << list_i(c.network.backbone_channels) << "\n"
       << "backbone_kernel = " << c.network.backbone_kernel << "\n"
       << "anchor_scales = " << list_d(c.network.anchor_scales) << "\n"
       << "anchor_ratios = " << list_d(c.network.anchor_ratios) << "\n\n";
    os << "[optimizer]\n"
       << "learning_rate = " << c.optimizer.learning_rate << "\n"
       << "momentum = " << c.optimizer.momentum << "\n"
       << "steps = " << c.optimizer.steps << "\n"
       << "batch_size = " << c.optimizer.batch_size << "\n"
       << "warmup_frac = " << c.optimizer.warmup_frac << "\n"
       << "eps = " << c.optimizer.eps << "\n"
       << "mining_ratio = " << c.optimizer.mining_ratio << "\n"
       << "grad_clip = " << c.optimizer.grad_clip << "\n"
       << "loc_weight = " << c.optimizer.loc_weight << "\n\n";
    os << "[active_learning]\n"
       << "train_fraction = " << c.train_fraction << "\n"
       << "initial_labeled = " << c.initial_labeled << "\n"
       << "budget = " << c.budget << "\n"
       << "cycles = " << c.cycles << "\n"
       << "acquisition = " << c.acquisition << "\n"
       << "aggregation = " << c.aggregation.name() << "\n"
       << "cls_reduction = "
       << (c.cls_reduction == ClsReduction::PredictedClass ? "predicted_class"
                                                           : "max_over_classes")
       << "\n"
       << "conf_floor = " << c.conf_floor << "\n"
       << "nms_iou = " << c.nms_iou << "\n"
       << "seeds = ";
    for (size_t i = 0; i < c.seeds.size(); ++i) os << (i ? "," : "") << c.seeds[i];
    os << "\n";
    return os.str();
}

}  // namespace mdal
