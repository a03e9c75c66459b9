#include "segens/phantom.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numbers>
#include <random>

#include "segens/volume_io.hpp"

namespace segens::phantom {

namespace {

// Canonical layout on a 512 grid; rows grow posteriorly. The template is
// rescaled for other grid sizes.
struct Ellipse {
    double row, col, ry, rx;
};

enum class Profile { Ellipsoid, Cylinder };

struct OrganShape {
    Organ organ;
    Ellipse section;
    int z_begin;  // relative to the volume centre slice
    int z_end;    // inclusive
    Profile profile;
};

constexpr double kCanonicalGrid = 512.0;

const std::array<OrganShape, kOrganCount>& canonical_shapes() {
    static const std::array<OrganShape, kOrganCount> shapes = {{
        {Organ::LeftLung, {245, 342, 80, 45}, -32, 32, Profile::Ellipsoid},
        {Organ::RightLung, {245, 170, 80, 45}, -32, 32, Profile::Ellipsoid},
        {Organ::Heart, {280, 256, 40, 38}, -10, 26, Profile::Ellipsoid},
        {Organ::Esophagus, {228, 262, 7, 7}, -36, 36, Profile::Cylinder},
        {Organ::Trachea, {200, 256, 9, 9}, -36, 4, Profile::Cylinder},
        {Organ::SpinalCord, {350, 256, 8, 8}, -38, 38, Profile::Cylinder},
    }};
    return shapes;
}

constexpr Ellipse kBody{256, 256, 150, 200};
constexpr double kBoneOuterRadius = 18.0;
constexpr double kAirHu = -1000.0;

struct Jitter {
    double scale;
    double shift_row;
    double shift_col;
    double angle;
};

bool inside(const Ellipse& e, double row, double col, double radius_scale) {
    if (radius_scale <= 0.0) return false;
    const double dr = (row - e.row) / (e.ry * radius_scale);
    const double dc = (col - e.col) / (e.rx * radius_scale);
    return dr * dr + dc * dc <= 1.0;
}

double section_scale(const OrganShape& shape, int rel_z) {
    if (rel_z < shape.z_begin || rel_z > shape.z_end) return 0.0;
    if (shape.profile == Profile::Cylinder) return 1.0;
    const double mid = 0.5 * (shape.z_begin + shape.z_end);
    const double half = 0.5 * (shape.z_end - shape.z_begin) + 1.0;
    const double t = (rel_z - mid) / half;
    return std::sqrt(std::max(0.0, 1.0 - t * t));
}

}  // namespace

std::map<Organ, std::pair<double, double>> PhantomSpec::default_hu_ranges() {
    return {
        {Organ::LeftLung, {-750.0, -650.0}},
        {Organ::RightLung, {-750.0, -650.0}},
        {Organ::Heart, {130.0, 170.0}},
        {Organ::Esophagus, {90.0, 110.0}},
        {Organ::Trachea, {-850.0, -750.0}},
        {Organ::SpinalCord, {30.0, 50.0}},
    };
}

void PhantomSpec::validate() const {
    if (n_patients < 1) throw ArgumentError("phantom: n_patients must be positive");
    if (slices_min < 80 || slices_max > 127 || slices_min > slices_max) {
        throw ArgumentError("phantom: slices per patient must lie in [80, 127]");
    }
    if (grid < 320) throw ArgumentError("phantom: grid must be at least 320");
    if (!(spacing.x > 0 && spacing.y > 0 && spacing.z > 0)) throw ArgumentError("phantom: spacing must be positive");
    if (noise_sigma < 0) throw ArgumentError("phantom: noise_sigma must be non-negative");
    for (auto organ : kAllOrgans) {
        auto it = organ_hu_ranges.find(organ);
        if (it == organ_hu_ranges.end()) throw ArgumentError("phantom: missing HU range for an organ");
        const auto [lo, hi] = it->second;
        if (lo > hi || lo < kHuMin || hi > kHuMax) throw ArgumentError("phantom: invalid HU range");
    }
}

PhantomCase generate_patient(const PhantomSpec& spec, int index) {
    spec.validate();
    if (index < 0 || index >= spec.n_patients) throw ArgumentError("phantom: patient index out of range");

    std::mt19937_64 rng(derive_seed(spec.rng_seed, static_cast<uint64_t>(index)));
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    auto uniform = [&](double lo, double hi) { return lo + (hi - lo) * unit(rng); };

    const int depth = spec.slices_min + static_cast<int>(rng() % static_cast<uint64_t>(spec.slices_max - spec.slices_min + 1));
    const Jitter jitter{uniform(0.95, 1.05), uniform(-6.0, 6.0), uniform(-6.0, 6.0),
                        uniform(-4.0, 4.0) * std::numbers::pi / 180.0};
    std::array<double, kOrganCount> organ_hu{};
    for (auto organ : kAllOrgans) {
        const auto [lo, hi] = spec.organ_hu_ranges.at(organ);
        organ_hu[static_cast<size_t>(organ_label(organ) - 1)] = uniform(lo, hi);
    }
    const double bone_hu = spec.bone_hu + uniform(-50.0, 50.0);

    const int n = spec.grid;
    const double g = n / kCanonicalGrid;
    const double centre = (n - 1) / 2.0;
    const double cos_a = std::cos(jitter.angle);
    const double sin_a = std::sin(jitter.angle);

    // Pixel -> canonical template coordinates (inverse similarity transform).
    std::vector<double> canon_row(static_cast<size_t>(n) * n);
    std::vector<double> canon_col(static_cast<size_t>(n) * n);
    for (int r = 0; r < n; ++r) {
        for (int c = 0; c < n; ++c) {
            const double y = (r - centre - jitter.shift_row * g) / (jitter.scale * g);
            const double x = (c - centre - jitter.shift_col * g) / (jitter.scale * g);
            const auto i = static_cast<size_t>(r) * n + c;
            canon_row[i] = cos_a * y - sin_a * x + kCanonicalGrid / 2.0;
            canon_col[i] = sin_a * y + cos_a * x + kCanonicalGrid / 2.0;
        }
    }

    PhantomCase out;
    char pid[64];
    std::snprintf(pid, sizeof(pid), "%s_%03d", spec.id_prefix.c_str(), index);
    out.volume.patient_id = pid;
    out.volume.spacing = spec.spacing;
    out.volume.voxels = Grid3<int16_t>(depth, n, n);
    out.mask.class_count = kOrganCount;
    out.mask.labels = Grid3<uint8_t>(depth, n, n);

    std::normal_distribution<double> noise(0.0, 1.0);
    const int z_centre = depth / 2;
    const auto& cord = canonical_shapes()[5];

    for (int z = 0; z < depth; ++z) {
        const int rel_z = z - z_centre;
        std::array<double, kOrganCount> scales{};
        for (size_t k = 0; k < kOrganCount; ++k) scales[k] = section_scale(canonical_shapes()[k], rel_z);
        const bool bone = scales[5] > 0.0;

        for (int r = 0; r < n; ++r) {
            for (int c = 0; c < n; ++c) {
                const auto i = static_cast<size_t>(r) * n + c;
                const double y = canon_row[i];
                const double x = canon_col[i];
                double hu = kAirHu;
                int label = 0;
                if (inside(kBody, y, x, 1.0)) {
                    hu = spec.background_hu;
                    for (size_t k = 0; k < kOrganCount; ++k) {
                        if (inside(canonical_shapes()[k].section, y, x, scales[k])) {
                            label = static_cast<int>(k) + 1;
                            hu = organ_hu[k];
                            break;
                        }
                    }
                    if (label == 0 && bone) {
                        const double dr = y - cord.section.row;
                        const double dc = x - cord.section.col;
                        if (dr * dr + dc * dc <= kBoneOuterRadius * kBoneOuterRadius) hu = bone_hu;
                    }
                    hu += spec.hu_offset;
                }
                hu += spec.noise_sigma * noise(rng);
                const double clamped = std::clamp(std::round(hu), static_cast<double>(kHuMin), static_cast<double>(kHuMax));
                out.volume.voxels.at(z, r, c) = static_cast<int16_t>(clamped);
                out.mask.labels.at(z, r, c) = static_cast<uint8_t>(label);
            }
        }
    }
    return out;
}

std::vector<PhantomCase> generate_phantom(const PhantomSpec& spec) {
    spec.validate();
    std::vector<PhantomCase> cases;
    cases.reserve(static_cast<size_t>(spec.n_patients));
    for (int i = 0; i < spec.n_patients; ++i) cases.push_back(generate_patient(spec, i));
    return cases;
}

std::vector<std::filesystem::path> write_phantom_dataset(const PhantomSpec& spec, const std::filesystem::path& out_dir) {
    spec.validate();
    std::vector<std::filesystem::path> dirs;
    for (int i = 0; i < spec.n_patients; ++i) {
        const auto c = generate_patient(spec, i);
        const auto dir = out_dir / c.volume.patient_id;
        io::save_volume(dir / "data.nii.gz", c.volume);
        io::save_mask(dir / "label.nii.gz", c.mask, c.volume.spacing);
        dirs.push_back(dir);
    }
    return dirs;
}

}  // namespace segens::phantom
