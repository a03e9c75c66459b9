#ifndef SEGENS_TESTS_SUPPORT_HPP
#define SEGENS_TESTS_SUPPORT_HPP

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <limits>
#include <random>
#include <string>
#include <vector>

#include "segens/core.hpp"
#include "segens/metrics.hpp"
#include "segens/phantom.hpp"

namespace testsupport {

using segens::metrics::BinaryVolume;

/// Fresh empty directory under the system temp dir.
inline std::filesystem::path temp_dir(const std::string& name) {
    auto dir = std::filesystem::temp_directory_path() / ("segens_test_" + name);
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);
    return dir;
}

inline segens::phantom::PhantomSpec small_phantom(int patients = 2, uint64_t seed = 11) {
    segens::phantom::PhantomSpec spec;
    spec.n_patients = patients;
    spec.rng_seed = seed;
    spec.slices_min = 80;
    spec.slices_max = 84;
    return spec;
}

/// Random blobby binary volume: a few random boxes, possibly empty.
inline BinaryVolume random_volume(std::mt19937_64& rng, int64_t d, int64_t r, int64_t c, double empty_prob = 0.1) {
    BinaryVolume v(d, r, c);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    if (u(rng) < empty_prob) return v;
    std::uniform_int_distribution<int> boxes(1, 3);
    const int n = boxes(rng);
    for (int b = 0; b < n; ++b) {
        std::uniform_int_distribution<int64_t> zd(0, d - 1), rd(0, r - 1), cd(0, c - 1);
        int64_t z0 = zd(rng), z1 = zd(rng), r0 = rd(rng), r1 = rd(rng), c0 = cd(rng), c1 = cd(rng);
        if (z0 > z1) std::swap(z0, z1);
        if (r0 > r1) std::swap(r0, r1);
        if (c0 > c1) std::swap(c0, c1);
        for (int64_t z = z0; z <= z1; ++z)
            for (int64_t y = r0; y <= r1; ++y)
                for (int64_t x = c0; x <= c1; ++x) v.at(z, y, x) = 1;
    }
    // Sprinkle noise so surfaces are irregular.
    for (auto& x : v.data) {
        if (u(rng) < 0.03) x = static_cast<uint8_t>(1 - x);
    }
    return v;
}

// Brute-force references ------------------------------------------------------

inline double ref_dice(const BinaryVolume& p, const BinaryVolume& g) {
    double tp = 0, np = 0, ng = 0;
    for (size_t i = 0; i < p.data.size(); ++i) {
        tp += (p.data[i] && g.data[i]);
        np += p.data[i] != 0;
        ng += g.data[i] != 0;
    }
    if (np + ng == 0) return 1.0;
    return 2.0 * tp / (np + ng);
}

inline std::pair<double, double> ref_precision_recall(const BinaryVolume& p, const BinaryVolume& g) {
    double tp = 0, fp = 0, fn = 0;
    for (size_t i = 0; i < p.data.size(); ++i) {
        tp += (p.data[i] && g.data[i]);
        fp += (p.data[i] && !g.data[i]);
        fn += (!p.data[i] && g.data[i]);
    }
    const bool both_empty = tp + fp == 0 && tp + fn == 0;
    const double prec = tp + fp == 0 ? (both_empty ? 1.0 : 0.0) : tp / (tp + fp);
    const double rec = tp + fn == 0 ? (both_empty ? 1.0 : 0.0) : tp / (tp + fn);
    return {prec, rec};
}

inline std::vector<std::array<int64_t, 3>> ref_surface(const BinaryVolume& m) {
    std::vector<std::array<int64_t, 3>> out;
    auto bg = [&](int64_t z, int64_t y, int64_t x) {
        if (z < 0 || y < 0 || x < 0 || z >= m.depth || y >= m.rows || x >= m.cols) return true;
        return m.at(z, y, x) == 0;
    };
    for (int64_t z = 0; z < m.depth; ++z)
        for (int64_t y = 0; y < m.rows; ++y)
            for (int64_t x = 0; x < m.cols; ++x) {
                if (!m.at(z, y, x)) continue;
                if (bg(z - 1, y, x) || bg(z + 1, y, x) || bg(z, y - 1, x) || bg(z, y + 1, x) || bg(z, y, x - 1) ||
                    bg(z, y, x + 1)) {
                    out.push_back({z, y, x});
                }
            }
    return out;
}

inline double ref_percentile(std::vector<double> v, double q) {
    std::sort(v.begin(), v.end());
    const double pos = q / 100.0 * static_cast<double>(v.size() - 1);
    const auto lo = static_cast<size_t>(std::floor(pos));
    const auto hi = std::min(lo + 1, v.size() - 1);
    return v[lo] + (pos - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

/// O(n^2) pairwise HD95; NaN encodes "undefined".
inline double ref_hd95(const BinaryVolume& p, const BinaryVolume& g, const segens::Spacing& s) {
    const auto sp = ref_surface(p);
    const auto sg = ref_surface(g);
    if (sp.empty() && sg.empty()) return 0.0;
    if (sp.empty() || sg.empty()) return std::numeric_limits<double>::quiet_NaN();
    auto directed = [&](const auto& a, const auto& b) {
        std::vector<double> d;
        for (const auto& u : a) {
            double best = std::numeric_limits<double>::infinity();
            for (const auto& v : b) {
                const double dz = (u[0] - v[0]) * s.z, dy = (u[1] - v[1]) * s.y, dx = (u[2] - v[2]) * s.x;
                best = std::min(best, dz * dz + dy * dy + dx * dx);
            }
            d.push_back(std::sqrt(best));
        }
        return ref_percentile(d, 95.0);
    };
    return std::max(directed(sp, sg), directed(sg, sp));
}

}  // namespace testsupport

#endif  // SEGENS_TESTS_SUPPORT_HPP
