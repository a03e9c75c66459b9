#include "segens/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "segens/preprocessing.hpp"

namespace segens::metrics {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

void check_shapes(const BinaryVolume& a, const BinaryVolume& b, const char* what) {
    if (a.shape() != b.shape()) throw ArgumentError(std::string(what) + ": prediction and ground truth shapes differ");
}

struct Counts {
    int64_t tp = 0, fp = 0, fn = 0;
};

Counts confusion(const BinaryVolume& pred, const BinaryVolume& gt) {
    Counts c;
    for (size_t i = 0; i < pred.data.size(); ++i) {
        const bool p = pred.data[i] != 0;
        const bool g = gt.data[i] != 0;
        c.tp += p && g;
        c.fp += p && !g;
        c.fn += !p && g;
    }
    return c;
}

struct Box {
    std::array<int64_t, 3> lo{std::numeric_limits<int64_t>::max(), std::numeric_limits<int64_t>::max(),
                              std::numeric_limits<int64_t>::max()};
    std::array<int64_t, 3> hi{-1, -1, -1};

    void include(const Voxel& v) {
        for (int k = 0; k < 3; ++k) {
            lo[k] = std::min(lo[k], v[k]);
            hi[k] = std::max(hi[k], v[k]);
        }
    }
    [[nodiscard]] bool empty() const { return hi[0] < 0; }
    [[nodiscard]] int64_t extent(int k) const { return hi[k] - lo[k] + 1; }
};

// Lower envelope of parabolas along one line (Felzenszwalb & Huttenlocher),
// with sample positions scaled by `step` mm.
void edt_line(std::vector<double>& f, double step, std::vector<int64_t>& v, std::vector<double>& z,
              std::vector<double>& out) {
    const auto n = static_cast<int64_t>(f.size());
    v.resize(static_cast<size_t>(n));
    z.resize(static_cast<size_t>(n) + 1);
    out.resize(static_cast<size_t>(n));
    int64_t k = -1;
    for (int64_t q = 0; q < n; ++q) {
        if (!std::isfinite(f[static_cast<size_t>(q)])) continue;
        const double xq = static_cast<double>(q) * step;
        const double fq = f[static_cast<size_t>(q)] + xq * xq;
        double s = -kInf;
        while (k >= 0) {
            const auto vk = v[static_cast<size_t>(k)];
            const double xv = static_cast<double>(vk) * step;
            s = (fq - (f[static_cast<size_t>(vk)] + xv * xv)) / (2.0 * (xq - xv));
            if (s > z[static_cast<size_t>(k)]) break;
            --k;
        }
        ++k;
        v[static_cast<size_t>(k)] = q;
        z[static_cast<size_t>(k)] = k == 0 ? -kInf : s;
        z[static_cast<size_t>(k) + 1] = kInf;
    }
    if (k < 0) {
        std::fill(out.begin(), out.end(), kInf);
    } else {
        int64_t j = 0;
        for (int64_t q = 0; q < n; ++q) {
            const double xq = static_cast<double>(q) * step;
            while (z[static_cast<size_t>(j) + 1] < xq) ++j;
            const auto vj = v[static_cast<size_t>(j)];
            const double d = xq - static_cast<double>(vj) * step;
            out[static_cast<size_t>(q)] = d * d + f[static_cast<size_t>(vj)];
        }
    }
    f.swap(out);
}

// Squared distance (mm^2) to the nearest site, for a dense box grid.
std::vector<double> squared_edt(std::vector<double> grid, const std::array<int64_t, 3>& dims, const Spacing& spacing) {
    const int64_t nz = dims[0], ny = dims[1], nx = dims[2];
    std::vector<double> line, out, z;
    std::vector<int64_t> v;
    auto index = [&](int64_t a, int64_t b, int64_t c) { return static_cast<size_t>((a * ny + b) * nx + c); };

    for (int64_t a = 0; a < nz; ++a) {
        for (int64_t b = 0; b < ny; ++b) {
            line.assign(grid.begin() + static_cast<std::ptrdiff_t>(index(a, b, 0)),
                        grid.begin() + static_cast<std::ptrdiff_t>(index(a, b, 0) + static_cast<size_t>(nx)));
            edt_line(line, spacing.x, v, z, out);
            std::copy(line.begin(), line.end(), grid.begin() + static_cast<std::ptrdiff_t>(index(a, b, 0)));
        }
    }
    line.resize(static_cast<size_t>(ny));
    for (int64_t a = 0; a < nz; ++a) {
        for (int64_t c = 0; c < nx; ++c) {
            line.resize(static_cast<size_t>(ny));
            for (int64_t b = 0; b < ny; ++b) line[static_cast<size_t>(b)] = grid[index(a, b, c)];
            edt_line(line, spacing.y, v, z, out);
            for (int64_t b = 0; b < ny; ++b) grid[index(a, b, c)] = line[static_cast<size_t>(b)];
        }
    }
    for (int64_t b = 0; b < ny; ++b) {
        for (int64_t c = 0; c < nx; ++c) {
            line.resize(static_cast<size_t>(nz));
            for (int64_t a = 0; a < nz; ++a) line[static_cast<size_t>(a)] = grid[index(a, b, c)];
            edt_line(line, spacing.z, v, z, out);
            for (int64_t a = 0; a < nz; ++a) grid[index(a, b, c)] = line[static_cast<size_t>(a)];
        }
    }
    return grid;
}

double safe_ratio(int64_t num, int64_t den, bool both_empty) {
    if (den == 0) return both_empty ? 1.0 : 0.0;
    return static_cast<double>(num) / static_cast<double>(den);
}

}  // namespace

double dice(const BinaryVolume& pred, const BinaryVolume& gt) {
    check_shapes(pred, gt, "dice");
    const auto c = confusion(pred, gt);
    const int64_t denom = 2 * c.tp + c.fp + c.fn;
    if (denom == 0) return 1.0;
    return 2.0 * static_cast<double>(c.tp) / static_cast<double>(denom);
}

std::pair<double, double> precision_recall(const BinaryVolume& pred, const BinaryVolume& gt) {
    check_shapes(pred, gt, "precision_recall");
    const auto c = confusion(pred, gt);
    const bool both_empty = c.tp + c.fp + c.fn == 0;
    return {safe_ratio(c.tp, c.tp + c.fp, both_empty), safe_ratio(c.tp, c.tp + c.fn, both_empty)};
}

std::vector<Voxel> surface_points(const BinaryVolume& m) {
    std::vector<Voxel> out;
    auto background = [&](int64_t z, int64_t y, int64_t x) {
        if (z < 0 || y < 0 || x < 0 || z >= m.depth || y >= m.rows || x >= m.cols) return true;
        return m.at(z, y, x) == 0;
    };
    for (int64_t z = 0; z < m.depth; ++z) {
        for (int64_t y = 0; y < m.rows; ++y) {
            for (int64_t x = 0; x < m.cols; ++x) {
                if (m.at(z, y, x) == 0) continue;
                if (background(z - 1, y, x) || background(z + 1, y, x) || background(z, y - 1, x) ||
                    background(z, y + 1, x) || background(z, y, x - 1) || background(z, y, x + 1)) {
                    out.push_back({z, y, x});
                }
            }
        }
    }
    return out;
}

double percentile(std::vector<double> values, double q) {
    if (values.empty()) throw ArgumentError("percentile of an empty set");
    if (q < 0.0 || q > 100.0) throw ArgumentError("percentile rank must lie in [0, 100]");
    std::sort(values.begin(), values.end());
    const double pos = q / 100.0 * static_cast<double>(values.size() - 1);
    const auto lo = static_cast<size_t>(std::floor(pos));
    const auto hi = std::min(lo + 1, values.size() - 1);
    const double frac = pos - static_cast<double>(lo);
    return values[lo] + (values[hi] - values[lo]) * frac;
}

std::vector<double> directed_surface_distances(const BinaryVolume& from, const BinaryVolume& to,
                                               const Spacing& spacing) {
    check_shapes(from, to, "surface distance");
    const auto from_surface = surface_points(from);
    const auto to_surface = surface_points(to);
    if (from_surface.empty()) return {};
    if (to_surface.empty()) return std::vector<double>(from_surface.size(), kInf);

    // The transform only needs the box spanning both surfaces to stay exact.
    Box box;
    for (const auto& p : from_surface) box.include(p);
    for (const auto& p : to_surface) box.include(p);
    const std::array<int64_t, 3> dims{box.extent(0), box.extent(1), box.extent(2)};
    std::vector<double> grid(static_cast<size_t>(dims[0] * dims[1] * dims[2]), kInf);
    auto local = [&](const Voxel& p) {
        return static_cast<size_t>(((p[0] - box.lo[0]) * dims[1] + (p[1] - box.lo[1])) * dims[2] + (p[2] - box.lo[2]));
    };
    for (const auto& p : to_surface) grid[local(p)] = 0.0;
    grid = squared_edt(std::move(grid), dims, spacing);

    std::vector<double> out;
    out.reserve(from_surface.size());
    for (const auto& p : from_surface) out.push_back(std::sqrt(grid[local(p)]));
    return out;
}

std::optional<double> hd95(const BinaryVolume& pred, const BinaryVolume& gt, const Spacing& spacing) {
    check_shapes(pred, gt, "hd95");
    const bool pred_empty = std::none_of(pred.data.begin(), pred.data.end(), [](uint8_t v) { return v != 0; });
    const bool gt_empty = std::none_of(gt.data.begin(), gt.data.end(), [](uint8_t v) { return v != 0; });
    if (pred_empty && gt_empty) return 0.0;
    if (pred_empty || gt_empty) return std::nullopt;
    const auto d_pg = directed_surface_distances(pred, gt, spacing);
    const auto d_gp = directed_surface_distances(gt, pred, spacing);
    return std::max(percentile(d_pg, 95.0), percentile(d_gp, 95.0));
}

double hd95_penalty(const std::array<int64_t, 3>& shape, const Spacing& spacing) {
    const double z = static_cast<double>(shape[0]) * spacing.z;
    const double y = static_cast<double>(shape[1]) * spacing.y;
    const double x = static_cast<double>(shape[2]) * spacing.x;
    return std::sqrt(z * z + y * y + x * x);
}

namespace {

void finish_macro(MetricsReport& r) {
    double dsc = 0, prec = 0, rec = 0, hd = 0;
    int n = 0;
    for (const auto& [organ, m] : r.per_class) {
        if (!m.present_in_gt) continue;
        dsc += m.dsc;
        prec += m.precision;
        rec += m.recall;
        hd += m.hd95_mm.value_or(r.hd95_penalty_mm);
        ++n;
    }
    r.classes_evaluated = n;
    if (n > 0) {
        r.macro_dsc = dsc / n;
        r.macro_precision = prec / n;
        r.macro_recall = rec / n;
        r.macro_hd95 = hd / n;
    }
}

}  // namespace

MetricsReport evaluate_multilabel(const std::vector<BinaryVolume>& per_class, const LabelMask& gt,
                                  const Spacing& spacing) {
    if (static_cast<int>(per_class.size()) != gt.class_count) {
        throw ArgumentError("evaluate: expected one prediction volume per class");
    }
    MetricsReport report;
    report.hd95_penalty_mm = hd95_penalty(gt.labels.shape(), spacing);
    for (int label = 1; label <= gt.class_count; ++label) {
        const auto& pred = per_class[static_cast<size_t>(label - 1)];
        check_shapes(pred, gt.labels, "evaluate");
        const auto truth = preproc::binarize_mask(gt, label);
        ClassMetrics m;
        m.present_in_gt = std::any_of(truth.data.begin(), truth.data.end(), [](uint8_t v) { return v != 0; });
        m.dsc = dice(pred, truth);
        std::tie(m.precision, m.recall) = precision_recall(pred, truth);
        m.hd95_mm = hd95(pred, truth, spacing);
        report.per_class[organ_from_label(label)] = m;
    }
    finish_macro(report);
    return report;
}

MetricsReport evaluate_prediction(const LabelMask& pred, const LabelMask& gt, const Spacing& spacing) {
    if (pred.labels.shape() != gt.labels.shape()) throw ArgumentError("evaluate: prediction and ground truth shapes differ");
    std::vector<BinaryVolume> per_class;
    for (int label = 1; label <= gt.class_count; ++label) {
        LabelMask p = pred;
        p.class_count = std::max(pred.class_count, gt.class_count);
        per_class.push_back(preproc::binarize_mask(p, label));
    }
    return evaluate_multilabel(per_class, gt, spacing);
}

MetricsReport aggregate(const std::vector<MetricsReport>& reports) {
    MetricsReport out;
    if (reports.empty()) return out;
    std::map<Organ, int> counts;
    std::map<Organ, double> penalties;
    for (const auto& r : reports) {
        out.hd95_penalty_mm = std::max(out.hd95_penalty_mm, r.hd95_penalty_mm);
        for (const auto& [organ, m] : r.per_class) {
            auto& acc = out.per_class[organ];
            if (!m.present_in_gt) continue;
            acc.present_in_gt = true;
            acc.dsc += m.dsc;
            acc.precision += m.precision;
            acc.recall += m.recall;
            acc.hd95_mm = acc.hd95_mm.value_or(0.0) + m.hd95_mm.value_or(r.hd95_penalty_mm);
            ++counts[organ];
        }
    }
    for (auto& [organ, m] : out.per_class) {
        const int n = counts[organ];
        if (n == 0) continue;
        m.dsc /= n;
        m.precision /= n;
        m.recall /= n;
        m.hd95_mm = *m.hd95_mm / n;
    }
    finish_macro(out);
    return out;
}

}  // namespace segens::metrics
