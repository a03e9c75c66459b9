#include "segens/preprocessing.hpp"

#include <cmath>
#include <numbers>
#include <random>

#include <opencv2/core.hpp>
#include <opencv2/imgproc.hpp>

namespace segens::preproc {

void validate_window(const WindowSpec& w) {
    if (!(w.width > 0.0) || !std::isfinite(w.width) || !std::isfinite(w.level)) {
        throw ArgumentError("window width must be positive and finite, got " + std::to_string(w.width));
    }
}

Grid3<float> apply_window(const CtVolume& volume, const WindowSpec& w) {
    validate_window(w);
    const auto& v = volume.voxels;
    Grid3<float> out(v.depth, v.rows, v.cols);
    for (size_t i = 0; i < v.data.size(); ++i) out.data[i] = static_cast<float>(window_value(v.data[i], w));
    return out;
}

Image2D<float> apply_window(const Image2D<int16_t>& hu, const WindowSpec& w) {
    validate_window(w);
    Image2D<float> out(hu.rows, hu.cols);
    for (size_t i = 0; i < hu.data.size(); ++i) out.data[i] = static_cast<float>(window_value(hu.data[i], w));
    return out;
}

Grid3<uint8_t> binarize_mask(const LabelMask& mask, int organ_label) {
    if (organ_label < 1 || organ_label > mask.class_count) {
        throw ArgumentError("binarize_mask: organ label " + std::to_string(organ_label) + " outside 1.." +
                            std::to_string(mask.class_count));
    }
    const auto& l = mask.labels;
    Grid3<uint8_t> out(l.depth, l.rows, l.cols);
    for (size_t i = 0; i < l.data.size(); ++i) out.data[i] = l.data[i] == organ_label ? 1 : 0;
    return out;
}

Image2D<uint8_t> binarize_mask(const Image2D<uint8_t>& labels, int organ_label, int class_count) {
    if (organ_label < 1 || organ_label > class_count) {
        throw ArgumentError("binarize_mask: organ label " + std::to_string(organ_label) + " outside 1.." +
                            std::to_string(class_count));
    }
    Image2D<uint8_t> out(labels.rows, labels.cols);
    for (size_t i = 0; i < labels.data.size(); ++i) out.data[i] = labels.data[i] == organ_label ? 1 : 0;
    return out;
}

// Augmentation ---------------------------------------------------------------

AugmentParams AugmentParams::identity(int grid_steps) {
    AugmentParams p;
    p.rotate = true;
    p.grid = true;
    p.grid_x_steps.assign(static_cast<size_t>(grid_steps), 1.0);
    p.grid_y_steps.assign(static_cast<size_t>(grid_steps), 1.0);
    p.elastic = true;
    p.elastic_alpha = 0.0;
    return p;
}

AugmentParams sample_augment_params(uint64_t rng_seed, const AugmentConfig& config) {
    if (config.grid_steps < 1) throw ArgumentError("grid_steps must be >= 1");
    std::mt19937_64 rng(rng_seed);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    auto symmetric = [&](double limit) { return (2.0 * unit(rng) - 1.0) * limit; };

    // Every draw is consumed regardless of which transforms fire so the
    // stream layout does not depend on the coin flips.
    AugmentParams p;
    p.rotate = unit(rng) < config.probability;
    p.grid = unit(rng) < config.probability;
    p.elastic = unit(rng) < config.probability;
    p.angle_deg = symmetric(config.max_rotation_deg);
    for (int i = 0; i < config.grid_steps; ++i) p.grid_x_steps.push_back(1.0 + symmetric(config.grid_limit));
    for (int i = 0; i < config.grid_steps; ++i) p.grid_y_steps.push_back(1.0 + symmetric(config.grid_limit));
    p.elastic_alpha = config.elastic_alpha;
    p.elastic_sigma = config.elastic_sigma;
    p.elastic_seed = rng();
    return p;
}

namespace {

struct Maps {
    cv::Mat x;
    cv::Mat y;
};

Maps identity_maps(int rows, int cols) {
    Maps m{cv::Mat(rows, cols, CV_32F), cv::Mat(rows, cols, CV_32F)};
    for (int r = 0; r < rows; ++r) {
        auto* mx = m.x.ptr<float>(r);
        auto* my = m.y.ptr<float>(r);
        for (int c = 0; c < cols; ++c) {
            mx[c] = static_cast<float>(c);
            my[c] = static_cast<float>(r);
        }
    }
    return m;
}

Maps rotation_maps(int rows, int cols, double angle_deg) {
    Maps m{cv::Mat(rows, cols, CV_32F), cv::Mat(rows, cols, CV_32F)};
    const double a = angle_deg * std::numbers::pi / 180.0;
    const double ca = std::cos(a);
    const double sa = std::sin(a);
    const double cy = (rows - 1) / 2.0;
    const double cx = (cols - 1) / 2.0;
    for (int r = 0; r < rows; ++r) {
        auto* mx = m.x.ptr<float>(r);
        auto* my = m.y.ptr<float>(r);
        for (int c = 0; c < cols; ++c) {
            const double dx = c - cx;
            const double dy = r - cy;
            mx[c] = static_cast<float>(ca * dx + sa * dy + cx);
            my[c] = static_cast<float>(-sa * dx + ca * dy + cy);
        }
    }
    return m;
}

// Piecewise-linear resampling of one axis: output knots are evenly spaced,
// source knots are spaced by the step factors and rescaled to keep both
// edges fixed.
std::vector<double> grid_axis(int length, const std::vector<double>& factors) {
    const auto n = factors.size();
    const double span = length - 1;
    std::vector<double> src_knots(n + 1, 0.0);
    for (size_t k = 0; k < n; ++k) src_knots[k + 1] = src_knots[k] + factors[k];
    const double total = src_knots[n];
    for (auto& s : src_knots) s = s / total * span;

    std::vector<double> out(static_cast<size_t>(length));
    for (int i = 0; i < length; ++i) {
        const double u = span > 0 ? i / span * static_cast<double>(n) : 0.0;
        const auto k = std::min(static_cast<size_t>(u), n - 1);
        const double t = u - static_cast<double>(k);
        out[static_cast<size_t>(i)] = src_knots[k] + t * (src_knots[k + 1] - src_knots[k]);
    }
    return out;
}

Maps grid_maps(int rows, int cols, const AugmentParams& p) {
    const auto xs = grid_axis(cols, p.grid_x_steps);
    const auto ys = grid_axis(rows, p.grid_y_steps);
    Maps m{cv::Mat(rows, cols, CV_32F), cv::Mat(rows, cols, CV_32F)};
    for (int r = 0; r < rows; ++r) {
        auto* mx = m.x.ptr<float>(r);
        auto* my = m.y.ptr<float>(r);
        for (int c = 0; c < cols; ++c) {
            mx[c] = static_cast<float>(xs[static_cast<size_t>(c)]);
            my[c] = static_cast<float>(ys[static_cast<size_t>(r)]);
        }
    }
    return m;
}

Maps elastic_maps(int rows, int cols, const AugmentParams& p) {
    Maps m = identity_maps(rows, cols);
    if (p.elastic_alpha == 0.0) return m;
    std::mt19937_64 rng(p.elastic_seed);
    std::uniform_real_distribution<float> dist(-1.0f, 1.0f);
    cv::Mat dx(rows, cols, CV_32F);
    cv::Mat dy(rows, cols, CV_32F);
    for (int r = 0; r < rows; ++r) {
        for (int c = 0; c < cols; ++c) dx.at<float>(r, c) = dist(rng);
    }
    for (int r = 0; r < rows; ++r) {
        for (int c = 0; c < cols; ++c) dy.at<float>(r, c) = dist(rng);
    }
    cv::GaussianBlur(dx, dx, cv::Size(0, 0), p.elastic_sigma, p.elastic_sigma, cv::BORDER_REFLECT_101);
    cv::GaussianBlur(dy, dy, cv::Size(0, 0), p.elastic_sigma, p.elastic_sigma, cv::BORDER_REFLECT_101);
    m.x += dx * p.elastic_alpha;
    m.y += dy * p.elastic_alpha;
    return m;
}

void resample(cv::Mat& image, cv::Mat& mask, const Maps& maps) {
    cv::Mat image_out;
    cv::Mat mask_out;
    cv::remap(image, image_out, maps.x, maps.y, cv::INTER_LINEAR, cv::BORDER_REFLECT_101);
    cv::remap(mask, mask_out, maps.x, maps.y, cv::INTER_NEAREST, cv::BORDER_REFLECT_101);
    image = image_out;
    mask = mask_out;
}

}  // namespace

std::pair<Slice2D, Image2D<uint8_t>> augment_with(const Slice2D& slice, const Image2D<uint8_t>& mask,
                                                  const AugmentParams& params) {
    const auto& px = slice.pixels;
    if (px.rows != mask.rows || px.cols != mask.cols) {
        throw ArgumentError("augment: image and mask shapes differ");
    }
    const int rows = static_cast<int>(px.rows);
    const int cols = static_cast<int>(px.cols);
    cv::Mat image = cv::Mat(rows, cols, CV_32F, const_cast<float*>(px.data.data())).clone();
    cv::Mat labels = cv::Mat(rows, cols, CV_8U, const_cast<uint8_t*>(mask.data.data())).clone();

    if (params.elastic) resample(image, labels, elastic_maps(rows, cols, params));
    if (params.grid) resample(image, labels, grid_maps(rows, cols, params));
    if (params.rotate) resample(image, labels, rotation_maps(rows, cols, params.angle_deg));

    Slice2D out_slice{Image2D<float>(px.rows, px.cols), slice.patient_id, slice.slice_index};
    Image2D<uint8_t> out_mask(mask.rows, mask.cols);
    for (int r = 0; r < rows; ++r) {
        const auto* ip = image.ptr<float>(r);
        const auto* mp = labels.ptr<uint8_t>(r);
        for (int c = 0; c < cols; ++c) {
            out_slice.pixels.at(r, c) = std::clamp(ip[c], 0.0f, 1.0f);
            out_mask.at(r, c) = mp[c];
        }
    }
    return {std::move(out_slice), std::move(out_mask)};
}

std::pair<Slice2D, Image2D<uint8_t>> augment(const Slice2D& slice, const Image2D<uint8_t>& mask, uint64_t rng_seed,
                                             const AugmentConfig& config) {
    if (slice.pixels.rows != mask.rows || slice.pixels.cols != mask.cols) {
        throw ArgumentError("augment: image and mask shapes differ");
    }
    return augment_with(slice, mask, sample_augment_params(rng_seed, config));
}

}  // namespace segens::preproc
