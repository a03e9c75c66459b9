#ifndef SEGENS_CORE_HPP
#define SEGENS_CORE_HPP

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace segens {

// Error taxonomy shared by every module.
struct ArgumentError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};
struct IoError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct IntegrityError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

inline constexpr int kHuMin = -1024;
inline constexpr int kHuMax = 3071;
inline constexpr int kOrganCount = 6;

/// Organ label convention: 0 background, 1..6 organs.
enum class Organ : int {
    LeftLung = 1,
    RightLung = 2,
    Heart = 3,
    Esophagus = 4,
    Trachea = 5,
    SpinalCord = 6,
};

inline constexpr std::array<Organ, kOrganCount> kAllOrgans = {
    Organ::LeftLung, Organ::RightLung, Organ::Heart,
    Organ::Esophagus, Organ::Trachea, Organ::SpinalCord};

std::string_view organ_name(Organ organ);
Organ organ_from_name(std::string_view name);
Organ organ_from_label(int label);
inline int organ_label(Organ organ) { return static_cast<int>(organ); }

/// Physical voxel spacing in millimetres, ordered (z, y, x).
struct Spacing {
    double z = 1.0;
    double y = 1.0;
    double x = 1.0;

    friend bool operator==(const Spacing&, const Spacing&) = default;
};

/// Dense row-major 2-D grid.
template <typename T>
struct Image2D {
    int64_t rows = 0;
    int64_t cols = 0;
    std::vector<T> data;

    Image2D() = default;
    Image2D(int64_t r, int64_t c, T fill = T{}) : rows(r), cols(c), data(static_cast<size_t>(r * c), fill) {}

    T& at(int64_t r, int64_t c) { return data[static_cast<size_t>(r * cols + c)]; }
    const T& at(int64_t r, int64_t c) const { return data[static_cast<size_t>(r * cols + c)]; }
    [[nodiscard]] int64_t size() const { return rows * cols; }
    std::span<const T> view() const { return data; }

    friend bool operator==(const Image2D&, const Image2D&) = default;
};

/// Dense 3-D grid ordered (slices, rows, cols); cols vary fastest.
template <typename T>
struct Grid3 {
    int64_t depth = 0;
    int64_t rows = 0;
    int64_t cols = 0;
    std::vector<T> data;

    Grid3() = default;
    Grid3(int64_t d, int64_t r, int64_t c, T fill = T{})
        : depth(d), rows(r), cols(c), data(static_cast<size_t>(d * r * c), fill) {}

    T& at(int64_t z, int64_t r, int64_t c) { return data[static_cast<size_t>((z * rows + r) * cols + c)]; }
    const T& at(int64_t z, int64_t r, int64_t c) const {
        return data[static_cast<size_t>((z * rows + r) * cols + c)];
    }
    [[nodiscard]] int64_t size() const { return depth * rows * cols; }
    [[nodiscard]] std::array<int64_t, 3> shape() const { return {depth, rows, cols}; }

    Image2D<T> slice(int64_t z) const {
        Image2D<T> out(rows, cols);
        const auto offset = static_cast<size_t>(z * rows * cols);
        std::copy_n(data.begin() + static_cast<std::ptrdiff_t>(offset), rows * cols, out.data.begin());
        return out;
    }
    void set_slice(int64_t z, const Image2D<T>& img) {
        if (img.rows != rows || img.cols != cols) throw ArgumentError("set_slice: shape mismatch");
        std::copy(img.data.begin(), img.data.end(),
                  data.begin() + static_cast<std::ptrdiff_t>(z * rows * cols));
    }

    friend bool operator==(const Grid3&, const Grid3&) = default;
};

/// CT intensities in Hounsfield units with physical spacing.
struct CtVolume {
    Grid3<int16_t> voxels;
    Spacing spacing;
    std::string patient_id;
};

/// Multi-organ label volume aligned voxel-for-voxel with a CtVolume.
struct LabelMask {
    Grid3<uint8_t> labels;
    int class_count = kOrganCount;
};

/// Hounsfield window (width, level).
struct WindowSpec {
    double width = 1.0;
    double level = 0.0;

    friend bool operator==(const WindowSpec&, const WindowSpec&) = default;
};

/// Normalized 2-D slice in [0, 1] tagged with its origin.
struct Slice2D {
    Image2D<float> pixels;
    std::string patient_id;
    int64_t slice_index = 0;
};

inline uint64_t splitmix64(uint64_t x) {
    x += 0x9E3779B97F4A7C15ull;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
    return x ^ (x >> 31);
}

/// Independent child seed for (seed, salt).
inline uint64_t derive_seed(uint64_t seed, uint64_t salt) { return splitmix64(seed ^ splitmix64(salt + 1)); }

/// Windows used per organ; both lungs share one.
WindowSpec default_window(Organ organ);

}  // namespace segens

#endif  // SEGENS_CORE_HPP
