#include <doctest.h>

#include <fstream>
#include <set>

#include "segens/experiments.hpp"
#include "segens/phantom.hpp"
#include "support.hpp"

using namespace segens;
using namespace segens::experiments;
using models::Backbone;
namespace fs = std::filesystem;

namespace {

std::vector<std::string> ids(int n) {
    std::vector<std::string> out;
    for (int i = 0; i < n; ++i) out.push_back("p_" + std::to_string(100 + i));
    return out;
}

nlohmann::json reference_tables() {
    std::ifstream f(fs::path(SEGENS_TEST_DATA) / "reference_tables.json");
    REQUIRE(f.good());
    return nlohmann::json::parse(f);
}

double ref(const nlohmann::json& t, const std::string& exp, const std::string& method, int col) {
    return t.at(exp).at(method).at(static_cast<size_t>(col)).get<double>();
}

ResultsTable sample_table() {
    ResultsTable t;
    t.experiment = "EXP1";
    t.rows = {{"Argmax", 0.1 + 1e-17, 1.0 / 3.0, 0.7, 2.445}, {"Logits Conv", 0.8790000000000001, 0.869, 0.899, 21.761}};
    for (auto organ : kAllOrgans) t.per_class.push_back({"Argmax", organ, 1.0 / organ_label(organ), 0.5, 0.25, 3.6});
    return t;
}

ExperimentResult report_fixture(int patients) {
    ExperimentResult r;
    r.plan = desk_plan(ExperimentId::Exp1, 3);
    r.plan.overlay_slices = 2;
    r.table = sample_table();
    r.selection.report = {"left_lung: unet (val loss 0.1)"};
    r.overlay_method = "Argmax";
    for (int p = 0; p < patients; ++p) {
        const auto c = phantom::generate_patient(testsupport::small_phantom(patients, 8), p);
        r.overlays.push_back({c.volume, c.mask, c.mask});
    }
    return r;
}

std::set<std::string> png_names(const fs::path& dir) {
    std::set<std::string> out;
    for (const auto& e : fs::directory_iterator(dir)) out.insert(e.path().filename().string());
    return out;
}

}  // namespace

TEST_SUITE("experiments") {

TEST_CASE("patient splits are disjoint and cover every id") {
    for (int n = 1; n <= 30; ++n) {
        for (uint64_t seed : {0ull, 1ull, 42ull}) {
            const auto s = split_patients(ids(n), 0.70, 0.15, seed);
            std::set<std::string> all;
            for (const auto* part : {&s.train, &s.val, &s.test}) {
                for (const auto& id : *part) CHECK(all.insert(id).second);
            }
            CHECK(all.size() == static_cast<size_t>(n));
            if (n >= 3) {
                CHECK_FALSE(s.train.empty());
                CHECK_FALSE(s.val.empty());
                CHECK_FALSE(s.test.empty());
            }
        }
    }
    const auto s = split_patients(ids(12), 0.70, 0.15, 42);
    CHECK(s.train.size() == 8);
    CHECK(s.val.size() == 2);
    CHECK(s.test.size() == 2);
    auto shuffled = ids(12);
    std::reverse(shuffled.begin(), shuffled.end());
    const auto again = split_patients(shuffled, 0.70, 0.15, 42);
    CHECK(again.train == s.train);
    CHECK(again.test == s.test);
    CHECK(split_patients(ids(12), 0.70, 0.15, 43).train != s.train);
    CHECK_THROWS_AS(split_patients({"a", "a", "b"}, 0.7, 0.15, 0), ConfigError);
}

TEST_CASE("patient subsampling") {
    const auto all = ids(8);
    const auto a = subsample_patients(all, 0.2, 5);
    CHECK(a.size() == 2);
    CHECK(a == subsample_patients(all, 0.2, 5));
    CHECK(std::is_sorted(a.begin(), a.end()));
    for (const auto& id : a) CHECK(std::find(all.begin(), all.end(), id) != all.end());
    CHECK(subsample_patients(all, 0.01, 5).size() == 1);
    CHECK(subsample_patients(all, 1.0, 5) == all);
    CHECK_THROWS_AS(subsample_patients(all, 0.0, 5), ConfigError);
}

TEST_CASE("z subsampling scales the slice spacing") {
    const auto pc = phantom::generate_patient(testsupport::small_phantom(1, 2), 0);
    Case c{pc.volume, pc.mask, "A"};
    const auto s = subsample_z(c, 4);
    CHECK(s.volume.voxels.depth == (c.volume.voxels.depth + 3) / 4);
    CHECK(s.volume.spacing.z == doctest::Approx(c.volume.spacing.z * 4));
    CHECK(s.volume.spacing.y == c.volume.spacing.y);
    CHECK(s.mask.labels.slice(1).data == c.mask.labels.slice(4).data);
}

TEST_CASE("plans") {
    SUBCASE("desk plans") {
        const auto p3 = desk_plan(ExperimentId::Exp3);
        CHECK(p3.sources.size() == 2);
        CHECK(p3.source_partition.at(Organ::Trachea) == "B");
        CHECK(p3.source_partition.at(Organ::Heart) == "A");
        CHECK(desk_plan(ExperimentId::Exp5).train_fraction == 0.2);
        CHECK(desk_plan(ExperimentId::Exp1).output_dir == fs::path("out/exp1"));
        for (auto id : {ExperimentId::Baseline, ExperimentId::Exp1, ExperimentId::Exp2, ExperimentId::Exp3,
                        ExperimentId::Exp4, ExperimentId::Exp5}) {
            CHECK(experiment_from_name(experiment_name(id)) == id);
            CHECK_NOTHROW(desk_plan(id).validate());
        }
    }
    SUBCASE("json round trip") {
        auto p = desk_plan(ExperimentId::Exp3, 9);
        p.threshold = 0.4;
        p.backbones = {Backbone::DeepLabV3};
        const auto back = ExperimentPlan::from_json(p.to_json());
        CHECK(back.to_json() == p.to_json());
        CHECK(back.digest() == p.digest());
        p.seed = 10;
        CHECK(p.digest() != back.digest());
    }
    SUBCASE("invalid plans") {
        auto j = desk_plan(ExperimentId::Exp1).to_json();
        auto bad = j;
        bad["learning_rate"] = 1.0;
        CHECK_THROWS_AS(ExperimentPlan::from_json(bad), ConfigError);
        bad = j;
        bad["train_fraction"] = 0.0;
        CHECK_THROWS_AS(ExperimentPlan::from_json(bad), ConfigError);
        bad = j;
        bad["backbones"] = {"resnet"};
        CHECK_THROWS_AS(ExperimentPlan::from_json(bad), ConfigError);
        bad = j;
        bad["schema_version"] = 2;
        CHECK_THROWS_AS(ExperimentPlan::from_json(bad), ConfigError);
        auto p3 = desk_plan(ExperimentId::Exp3).to_json();
        p3["source_partition"].erase("heart");
        CHECK_THROWS_AS(ExperimentPlan::from_json(p3), ConfigError);
    }
    SUBCASE("relative paths resolve against the plan file") {
        const auto dir = testsupport::temp_dir("plan");
        auto j = desk_plan(ExperimentId::Exp1).to_json();
        j["work_dir"] = "w";
        j["output_dir"] = "/abs/out";
        std::ofstream(dir / "plan.json") << j.dump(2);
        const auto p = read_plan(dir / "plan.json");
        CHECK(p.work_dir == dir / "w");
        CHECK(p.output_dir == fs::path("/abs/out"));
        std::ofstream(dir / "broken.json") << "{ nope";
        CHECK_THROWS_AS(read_plan(dir / "broken.json"), ConfigError);
        CHECK_THROWS_AS(read_plan(dir / "missing.json"), IoError);
    }
}

TEST_CASE("best binary selection") {
    std::vector<Candidate> c{{Organ::Heart, Backbone::UNet, 0.12, "a", "A"},
                             {Organ::Heart, Backbone::DeepLabV3, 0.10, "b", "A"},
                             {Organ::Trachea, Backbone::SEResUNet, 0.2, "c", "A"},
                             {Organ::Trachea, Backbone::UNet, 0.2, "d", "A"}};
    CHECK_THROWS_AS(select_best_binaries(c), ConfigError);
    for (auto organ : {Organ::LeftLung, Organ::RightLung, Organ::Esophagus, Organ::SpinalCord}) {
        c.push_back({organ, Backbone::SEResUNet, 0.3, "e", "A"});
    }
    const auto s = select_best_binaries(c);
    CHECK(s.best.at(Organ::Heart).backbone == Backbone::DeepLabV3);
    CHECK(s.best.at(Organ::Trachea).backbone == Backbone::UNet);
    CHECK(std::any_of(s.report.begin(), s.report.end(), [](const std::string& l) { return l.find("tie") != std::string::npos; }));
    CHECK(s.best.size() == 6);
}

TEST_CASE("selection reproduces the published branch choice") {
    const auto t = reference_tables();
    std::vector<Candidate> c;
    for (const auto& [organ, chosen] : t.at("selection").items()) {
        for (auto b : models::kAllBackbones) {
            const bool best = models::backbone_name(b) == chosen.get<std::string>();
            c.push_back({organ_from_name(organ), b, best ? 0.1 : 0.2, "", "A"});
        }
    }
    const auto s = select_best_binaries(c);
    for (const auto& [organ, chosen] : t.at("selection").items()) {
        CHECK(models::backbone_name(s.best.at(organ_from_name(organ)).backbone) == chosen.get<std::string>());
    }
}

TEST_CASE("result tables") {
    const auto dir = testsupport::temp_dir("tables");
    const auto t = sample_table();
    write_table_csv(dir / "s.csv", t);
    write_per_class_csv(dir / "c.csv", t);
    auto back = read_table_csv(dir / "s.csv", "EXP1");
    back.per_class = read_per_class_csv(dir / "c.csv");
    CHECK((back == t));
    CHECK(t.row("Argmax").hd95_mm == 2.445);
    CHECK(t.class_dice("Argmax", Organ::SpinalCord) == 1.0 / 6);
    CHECK_THROWS(static_cast<void>(t.row("nope")));
    const auto text = format_table(t);
    CHECK(text.find("DICE") != std::string::npos);
    CHECK(text.find("Logits Conv") != std::string::npos);
}

TEST_CASE("report emission") {
    const auto dir = testsupport::temp_dir("report");
    const auto r = report_fixture(2);
    const auto written = emit_report(r, dir);
    for (const auto* name : {"exp1_summary.csv", "exp1_per_class.csv", "exp1_summary.txt", "resolved_config.json",
                             "config.sha256"}) {
        CHECK_MESSAGE(fs::exists(dir / name), name);
    }
    const auto pngs = png_names(dir / "overlays");
    CHECK(pngs.size() == 4);
    std::ifstream cfg(dir / "resolved_config.json");
    CHECK(ExperimentPlan::from_json(nlohmann::json::parse(cfg)).digest() == r.plan.digest());
    std::ifstream sha(dir / "config.sha256");
    std::string digest;
    sha >> digest;
    CHECK(digest == r.plan.digest());

    // A rerun with fewer cases replaces every file and drops stale overlays.
    emit_report(report_fixture(1), dir);
    CHECK(png_names(dir / "overlays").size() == 2);
    CHECK((read_table_csv(dir / "exp1_summary.csv").rows == r.table.rows));
    for (const auto& e : fs::recursive_directory_iterator(dir)) {
        CHECK(e.path().string().find(".tmp") == std::string::npos);
    }

    std::ofstream(dir / "blocker") << "x";
    CHECK_THROWS_AS(emit_report(r, dir / "blocker" / "sub"), IoError);
}

TEST_CASE("overlay slices are foreground slices") {
    const auto c = phantom::generate_patient(testsupport::small_phantom(1, 4), 0);
    const auto z = overlay_slice_indices(c.mask, 3);
    CHECK(z.size() == 3);
    CHECK(std::is_sorted(z.begin(), z.end()));
    for (auto s : z) {
        const auto sl = c.mask.labels.slice(s);
        CHECK(std::any_of(sl.data.begin(), sl.data.end(), [](uint8_t v) { return v != 0; }));
    }
}

TEST_CASE("published tables show the expected trends") {
    const auto t = reference_tables();
    const double argmax = ref(t, "BASELINE", "Argmax", 0);
    const double argmax_hd = ref(t, "BASELINE", "Argmax", 3);
    bool better_hd = false;
    for (const auto* m : {"Layer Fusion", "Logits Conv", "Meta U-Net"}) {
        CAPTURE(m);
        CHECK(ref(t, "EXP1", m, 0) >= argmax - 0.02);
        better_hd |= ref(t, "EXP1", m, 3) <= argmax_hd;
        CHECK(ref(t, "EXP2", m, 0) >= ref(t, "EXP1", m, 0) - 0.01);
        CHECK(std::abs(ref(t, "EXP5", m, 0) - ref(t, "EXP1", m, 0)) <= 0.05);
        CHECK(ref(t, "EXP3", m, 0) >= ref(t, "EXP3", "Argmax", 0));
    }
    CHECK(better_hd);
    CHECK(ref(t, "EXP3", "Layer Fusion", 0) > ref(t, "EXP3", "Logits Conv", 0));
    CHECK(ref(t, "EXP3", "Layer Fusion", 0) > ref(t, "EXP3", "Meta U-Net", 0));
    CHECK(argmax > ref(t, "BASELINE", "DeepLabV3", 0));
    for (const auto* m : {"U-Net", "SE-ResUNet", "DeepLabV3"}) CHECK(argmax >= ref(t, "BASELINE", m, 0));
}

}
