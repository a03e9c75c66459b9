#include <doctest.h>

#include <map>
#include <numeric>
#include <set>

#include "segens/phantom.hpp"
#include "segens/preprocessing.hpp"
#include "segens/volume_io.hpp"
#include "support.hpp"

using namespace segens;

namespace {

std::map<int, int64_t> label_counts(const LabelMask& m) {
    std::map<int, int64_t> out;
    for (auto v : m.labels.data) ++out[v];
    return out;
}

}  // namespace

TEST_SUITE("phantom") {

TEST_CASE("generation is deterministic") {
    const auto spec = testsupport::small_phantom(2, 21);
    const auto a = phantom::generate_patient(spec, 1);
    const auto b = phantom::generate_patient(spec, 1);
    CHECK(a.volume.voxels == b.volume.voxels);
    CHECK(a.mask.labels == b.mask.labels);
    auto other = spec;
    other.rng_seed = 22;
    CHECK_FALSE(phantom::generate_patient(other, 1).volume.voxels == a.volume.voxels);
}

TEST_CASE("volumes are well formed") {
    const auto spec = testsupport::small_phantom(3, 4);
    const auto cohort = phantom::generate_phantom(spec);
    REQUIRE(cohort.size() == 3);
    std::set<std::string> ids;
    for (const auto& c : cohort) {
        ids.insert(c.volume.patient_id);
        const auto& v = c.volume.voxels;
        CHECK(v.rows == 512);
        CHECK(v.cols == 512);
        CHECK(v.depth >= spec.slices_min);
        CHECK(v.depth <= spec.slices_max);
        CHECK(c.mask.labels.shape() == v.shape());
        CHECK(c.volume.spacing == spec.spacing);
        const auto [lo, hi] = std::minmax_element(v.data.begin(), v.data.end());
        CHECK(*lo >= kHuMin);
        CHECK(*hi <= kHuMax);
        const auto counts = label_counts(c.mask);
        for (int l = 0; l <= kOrganCount; ++l) CHECK(counts.count(l) == 1);
        CHECK(counts.rbegin()->first <= kOrganCount);
    }
    CHECK(ids.size() == 3);
}

TEST_CASE("organ intensities follow the spec ranges") {
    const auto spec = testsupport::small_phantom(1, 8);
    const auto c = phantom::generate_patient(spec, 0);
    std::map<int, double> sum;
    std::map<int, int64_t> n;
    for (size_t i = 0; i < c.mask.labels.data.size(); ++i) {
        sum[c.mask.labels.data[i]] += c.volume.voxels.data[i];
        ++n[c.mask.labels.data[i]];
    }
    for (auto organ : kAllOrgans) {
        const int l = organ_label(organ);
        const double mean = sum[l] / static_cast<double>(n[l]);
        const auto [lo, hi] = spec.organ_hu_ranges.at(organ);
        CHECK(mean >= lo - 10.0);
        CHECK(mean <= hi + 10.0);
    }
    const double lung = sum[organ_label(Organ::LeftLung)] / static_cast<double>(n[organ_label(Organ::LeftLung)]);
    CHECK(preproc::window_value(lung, default_window(Organ::LeftLung)) == doctest::Approx(0.43).epsilon(0.05));
}

TEST_CASE("organ sizes are stable across patients and small organs are small") {
    const auto cohort = phantom::generate_phantom(testsupport::small_phantom(4, 30));
    std::map<int, std::vector<double>> per_slice;
    for (const auto& c : cohort) {
        const auto counts = label_counts(c.mask);
        const double depth = static_cast<double>(c.mask.labels.depth);
        for (int l = 1; l <= kOrganCount; ++l) per_slice[l].push_back(static_cast<double>(counts.at(l)) / depth);
        for (auto small : {Organ::Esophagus, Organ::Trachea}) {
            for (auto lung : {Organ::LeftLung, Organ::RightLung}) {
                CHECK(counts.at(organ_label(small)) * 10 <= counts.at(organ_label(lung)));
            }
        }
    }
    for (const auto& [label, values] : per_slice) {
        const double mean = std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(values.size());
        for (double v : values) CHECK(std::abs(v - mean) <= 0.2 * mean);
    }
}

TEST_CASE("invalid specs are rejected") {
    auto spec = testsupport::small_phantom();
    spec.slices_min = 40;
    CHECK_THROWS_AS(spec.validate(), ArgumentError);
    spec = testsupport::small_phantom();
    spec.n_patients = 0;
    CHECK_THROWS_AS(spec.validate(), ArgumentError);
    spec = testsupport::small_phantom();
    spec.grid = 256;
    CHECK_THROWS_AS(spec.validate(), ArgumentError);
    CHECK_THROWS_AS(phantom::generate_patient(testsupport::small_phantom(2), 2), ArgumentError);
}

TEST_CASE("written datasets round trip through the loader") {
    const auto dir = testsupport::temp_dir("phantom_ds");
    const auto spec = testsupport::small_phantom(2, 13);
    const auto cases = phantom::write_phantom_dataset(spec, dir);
    REQUIRE(cases.size() == 2);
    for (int i = 0; i < 2; ++i) {
        const auto expected = phantom::generate_patient(spec, i);
        const auto loaded = io::load_volume(cases[static_cast<size_t>(i)]);
        CHECK(loaded.volume.voxels == expected.volume.voxels);
        CHECK(loaded.volume.spacing == expected.volume.spacing);
        REQUIRE(loaded.mask.has_value());
        CHECK(loaded.mask->labels == expected.mask.labels);
    }
}

}
