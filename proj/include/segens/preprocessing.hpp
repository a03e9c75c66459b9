#ifndef SEGENS_PREPROCESSING_HPP
#define SEGENS_PREPROCESSING_HPP

#include <algorithm>
#include <cstdint>
#include <utility>

#include "segens/core.hpp"

namespace segens::preproc {

inline constexpr int64_t kCropSize = 320;

/// Linear window transfer: clamp((hu - (level - width/2)) / width, 0, 1).
inline double window_value(double hu, const WindowSpec& w) {
    const double v = (hu - (w.level - w.width / 2.0)) / w.width;
    return std::clamp(v, 0.0, 1.0);
}

void validate_window(const WindowSpec& w);

Grid3<float> apply_window(const CtVolume& volume, const WindowSpec& w);
Image2D<float> apply_window(const Image2D<int16_t>& hu, const WindowSpec& w);

/// Centered size x size sub-grid; offset is (rows - size) / 2 rounded down.
template <typename T>
Image2D<T> center_crop(const Image2D<T>& in, int64_t size = kCropSize) {
    if (in.rows < size || in.cols < size) {
        throw ArgumentError("center_crop: input " + std::to_string(in.rows) + "x" + std::to_string(in.cols) +
                            " smaller than crop " + std::to_string(size));
    }
    const int64_t r0 = (in.rows - size) / 2;
    const int64_t c0 = (in.cols - size) / 2;
    Image2D<T> out(size, size);
    for (int64_t r = 0; r < size; ++r) {
        std::copy_n(in.data.begin() + static_cast<std::ptrdiff_t>((r + r0) * in.cols + c0), size,
                    out.data.begin() + static_cast<std::ptrdiff_t>(r * size));
    }
    return out;
}

/// Inverse of center_crop: pastes `crop` centered into a rows x cols grid filled with `fill`.
template <typename T>
Image2D<T> uncrop(const Image2D<T>& crop, int64_t rows, int64_t cols, T fill = T{}) {
    if (crop.rows > rows || crop.cols > cols) throw ArgumentError("uncrop: crop larger than target");
    Image2D<T> out(rows, cols, fill);
    const int64_t r0 = (rows - crop.rows) / 2;
    const int64_t c0 = (cols - crop.cols) / 2;
    for (int64_t r = 0; r < crop.rows; ++r) {
        std::copy_n(crop.data.begin() + static_cast<std::ptrdiff_t>(r * crop.cols), crop.cols,
                    out.data.begin() + static_cast<std::ptrdiff_t>((r + r0) * cols + c0));
    }
    return out;
}

Grid3<uint8_t> binarize_mask(const LabelMask& mask, int organ_label);
Image2D<uint8_t> binarize_mask(const Image2D<uint8_t>& labels, int organ_label, int class_count = kOrganCount);

// Geometric augmentation ----------------------------------------------------

struct AugmentConfig {
    double probability = 0.5;     // per transform
    double max_rotation_deg = 15.0;
    int grid_steps = 5;
    double grid_limit = 0.3;
    double elastic_alpha = 34.0;
    double elastic_sigma = 4.0;
};

/// Fully resolved parameters of one augmentation draw.
struct AugmentParams {
    bool rotate = false;
    double angle_deg = 0.0;
    bool grid = false;
    std::vector<double> grid_x_steps;  // grid_steps + 1 multiplicative step factors
    std::vector<double> grid_y_steps;
    bool elastic = false;
    double elastic_alpha = 0.0;
    double elastic_sigma = 4.0;
    uint64_t elastic_seed = 0;

    /// Every transform enabled but with zero magnitude.
    static AugmentParams identity(int grid_steps = 5);
};

AugmentParams sample_augment_params(uint64_t rng_seed, const AugmentConfig& config = {});

/// Applies the same transforms to image (bilinear) and mask (nearest-neighbour).
std::pair<Slice2D, Image2D<uint8_t>> augment_with(const Slice2D& slice, const Image2D<uint8_t>& mask,
                                                  const AugmentParams& params);

std::pair<Slice2D, Image2D<uint8_t>> augment(const Slice2D& slice, const Image2D<uint8_t>& mask,
                                             uint64_t rng_seed, const AugmentConfig& config = {});

}  // namespace segens::preproc

#endif  // SEGENS_PREPROCESSING_HPP
