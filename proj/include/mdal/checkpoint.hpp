#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>

#include "mdal/tensor.hpp"

namespace mdal {

/// Named parameter tensors, ordered by name so every traversal
/// (optimizer steps, checkpoints, hashing) is deterministic.
using ParamStore = std::map<std::string, Tensor>;

namespace detail {
inline uint64_t double_bits(double v) {
    uint64_t u;
    std::memcpy(&u, &v, sizeof(u));
    return u;
}
inline double bits_double(uint64_t u) {
    double v;
    std::memcpy(&v, &u, sizeof(v));
    return v;
}
}  // namespace detail

/// Text checkpoint, one record per parameter. Values are stored as hex
/// bit patterns so round-trips are bit-exact.
///
///   mdal-checkpoint v1
///   <name> <rank> <dim...> <hex>...
inline void save_checkpoint(const ParamStore& params, const std::string& path) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("save_checkpoint: cannot open " + path);
    f << "mdal-checkpoint v1\n";
    for (const auto& [name, t] : params) {
        f << name << " " << t.rank();
        for (int64_t d : t.shape) f << " " << d;
        f << std::hex;
        for (double v : t.data) f << " " << detail::double_bits(v);
        f << std::dec << "\n";
    }
    if (!f) throw std::runtime_error("save_checkpoint: write failed for " + path);
}

inline ParamStore load_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("load_checkpoint: cannot open " + path);
    std::string magic, version;
    f >> magic >> version;
    if (magic != "mdal-checkpoint" || version != "v1")
        throw std::runtime_error("load_checkpoint: unrecognized format in " + path);
    ParamStore out;
    std::string name;
    while (f >> name) {
        int rank;
        if (!(f >> rank)) throw std::runtime_error("load_checkpoint: truncated record");
        std::vector<int64_t> shape(rank);
        for (auto& d : shape) f >> d;
        Tensor t(shape);
        f >> std::hex;
        for (auto& v : t.data) {
            uint64_t u;
            if (!(f >> u)) throw std::runtime_error("load_checkpoint: truncated values");
            v = detail::bits_double(u);
        }
        f >> std::dec;
        out.emplace(name, std::move(t));
    }
    return out;
}

/// FNV-1a over names, shapes and value bit patterns; used to verify
/// retrain-from-scratch initialization independence.
inline uint64_t param_hash(const ParamStore& params) {
    uint64_t h = 0xcbf29ce484222325ULL;
    auto mix = [&h](uint64_t v) {
        for (int i = 0; i < 8; ++i) {
            h ^= (v >> (8 * i)) & 0xff;
            h *= 0x100000001b3ULL;
        }
    };
    for (const auto& [name, t] : params) {
        for (char c : name) {
            h ^= static_cast<unsigned char>(c);
            h *= 0x100000001b3ULL;
        }
        for (int64_t d : t.shape) mix(static_cast<uint64_t>(d));
        for (double v : t.data) mix(detail::double_bits(v));
    }
    return h;
}

}  // namespace mdal
