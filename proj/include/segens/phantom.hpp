#ifndef SEGENS_PHANTOM_HPP
#define SEGENS_PHANTOM_HPP

#include <filesystem>
#include <map>
#include <utility>
#include <vector>

#include "segens/core.hpp"

namespace segens::phantom {

/// Synthetic thoracic phantom parameters. Each organ's mean HU is drawn per
/// patient from its range; Gaussian noise is added everywhere inside the body.
struct PhantomSpec {
    int n_patients = 12;
    int slices_min = 80;
    int slices_max = 127;
    int grid = 512;
    uint64_t rng_seed = 0;
    std::map<Organ, std::pair<double, double>> organ_hu_ranges = default_hu_ranges();
    double background_hu = 40.0;
    double bone_hu = 700.0;
    double noise_sigma = 10.0;
    /// Added to every tissue value; used to emulate a second acquisition site.
    double hu_offset = 0.0;
    Spacing spacing{5.0, 1.2, 1.2};
    std::string id_prefix = "phantom";

    static std::map<Organ, std::pair<double, double>> default_hu_ranges();
    void validate() const;
};

struct PhantomCase {
    CtVolume volume;
    LabelMask mask;
};

/// Generates patient `index` of the cohort; the result depends only on
/// (spec, index) so patients can be produced independently.
PhantomCase generate_patient(const PhantomSpec& spec, int index);

std::vector<PhantomCase> generate_phantom(const PhantomSpec& spec);

/// Writes `<out>/<patient_id>/data.nii.gz` and `label.nii.gz` for every patient
/// and returns the case directories.
std::vector<std::filesystem::path> write_phantom_dataset(const PhantomSpec& spec, const std::filesystem::path& out_dir);

}  // namespace segens::phantom

#endif  // SEGENS_PHANTOM_HPP
