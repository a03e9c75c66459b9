#ifndef SEGENS_METRICS_HPP
#define SEGENS_METRICS_HPP

#include <array>
#include <map>
#include <optional>
#include <utility>
#include <vector>

#include "segens/core.hpp"

namespace segens::metrics {

using BinaryVolume = Grid3<uint8_t>;
using Voxel = std::array<int64_t, 3>;

/// 2|P∩G| / (|P|+|G|); 1.0 when both are empty.
double dice(const BinaryVolume& pred, const BinaryVolume& gt);

/// (TP/(TP+FP), TP/(TP+FN)). An empty denominator yields 1.0 if both sets are
/// empty, else 0.0.
std::pair<double, double> precision_recall(const BinaryVolume& pred, const BinaryVolume& gt);

/// Foreground voxels with at least one background face neighbour. Voxels
/// outside the grid count as background.
std::vector<Voxel> surface_points(const BinaryVolume& mask);

/// Percentile with linear interpolation between order statistics (q in [0, 100]).
double percentile(std::vector<double> values, double q);

/// Symmetric 95th-percentile Hausdorff distance in mm: the max of the two
/// directed 95th percentiles of surface-to-surface nearest distances.
/// Both empty -> 0; exactly one empty -> nullopt (undefined).
std::optional<double> hd95(const BinaryVolume& pred, const BinaryVolume& gt, const Spacing& spacing);

/// Nearest-surface distances from each surface voxel of `from` to the surface
/// of `to`, via an exact Euclidean distance transform.
std::vector<double> directed_surface_distances(const BinaryVolume& from, const BinaryVolume& to,
                                               const Spacing& spacing);

struct ClassMetrics {
    double dsc = 0.0;
    double precision = 0.0;
    double recall = 0.0;
    std::optional<double> hd95_mm;
    bool present_in_gt = false;
};

struct MetricsReport {
    std::map<Organ, ClassMetrics> per_class;
    // Unweighted means over classes present in the ground truth. Undefined
    // HD95 values enter the macro mean as `hd95_penalty_mm`.
    double macro_dsc = 0.0;
    double macro_precision = 0.0;
    double macro_recall = 0.0;
    double macro_hd95 = 0.0;
    double hd95_penalty_mm = 0.0;
    int classes_evaluated = 0;
};

/// Grid diagonal in mm; substituted for undefined HD95 in aggregates.
double hd95_penalty(const std::array<int64_t, 3>& shape, const Spacing& spacing);

MetricsReport evaluate_prediction(const LabelMask& pred, const LabelMask& gt, const Spacing& spacing);

/// Multilabel form: one binary volume per organ (index organ_label - 1).
MetricsReport evaluate_multilabel(const std::vector<BinaryVolume>& per_class, const LabelMask& gt,
                                  const Spacing& spacing);

/// Per-class means over patients (classes absent from a patient's ground truth
/// are skipped), then macro means over classes.
MetricsReport aggregate(const std::vector<MetricsReport>& reports);

}  // namespace segens::metrics

#endif  // SEGENS_METRICS_HPP
