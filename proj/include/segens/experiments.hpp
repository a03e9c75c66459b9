#ifndef SEGENS_EXPERIMENTS_HPP
#define SEGENS_EXPERIMENTS_HPP

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "segens/core.hpp"
#include "segens/ensembles.hpp"
#include "segens/metrics.hpp"
#include "segens/models.hpp"
#include "segens/phantom.hpp"
#include "segens/training.hpp"

namespace segens::experiments {

enum class ExperimentId { Baseline, Exp1, Exp2, Exp3, Exp4, Exp5 };

std::string_view experiment_name(ExperimentId id);  // "BASELINE", "EXP1", ...
ExperimentId experiment_from_name(std::string_view name);

inline constexpr int kPlanSchemaVersion = 1;

/// One data source: generated phantoms, or a directory of case folders.
struct DataSource {
    std::string name = "A";
    std::optional<std::filesystem::path> root;  // real data; phantoms when empty
    phantom::PhantomSpec phantom;
    /// File label value -> organ; values not listed become background.
    std::map<int, Organ> label_map;
};

struct ExperimentPlan {
    ExperimentId id = ExperimentId::Exp1;
    uint64_t seed = 0;
    std::filesystem::path work_dir = "work";
    std::filesystem::path output_dir = "out";
    std::vector<DataSource> sources{DataSource{}};
    /// EXP3: organ -> source name. Empty means every organ uses the first source.
    std::map<Organ, std::string> source_partition;
    double train_split = 0.70;
    double val_split = 0.15;
    int64_t z_stride = 1;
    double width = models::NetConfig{}.width;
    std::vector<models::Backbone> backbones{models::kAllBackbones.begin(), models::kAllBackbones.end()};
    std::vector<ensembles::Strategy> strategies{ensembles::Strategy::LogitsConv, ensembles::Strategy::MetaModel,
                                                ensembles::Strategy::LayerFusion};
    /// EXP5: fraction of training patients used to fit the ensembles.
    double train_fraction = 1.0;
    /// EXP2: extra branch per organ.
    std::map<Organ, models::Backbone> supplementary{{Organ::Esophagus, models::Backbone::DeepLabV3},
                                                    {Organ::Trachea, models::Backbone::UNet}};
    /// EXP4: backbone of the added multiclass branch.
    models::Backbone multiclass_branch = models::Backbone::DeepLabV3;
    double threshold = ensembles::kDefaultThreshold;
    training::TrainConfig binary_training;
    training::TrainConfig multiclass_training;
    training::TrainConfig ensemble_training;
    int overlay_slices = 3;

    void validate() const;
    [[nodiscard]] nlohmann::json to_json() const;
    static ExperimentPlan from_json(const nlohmann::json& j);
    /// Digest of the resolved configuration.
    [[nodiscard]] std::string digest() const;
};

ExperimentPlan read_plan(const std::filesystem::path& path);

/// The scaled-down defaults used for phantom runs.
ExperimentPlan desk_plan(ExperimentId id, uint64_t seed = 42);

// Data ------------------------------------------------------------------------

struct Case {
    CtVolume volume;
    LabelMask mask;
    std::string source;
};

struct Split {
    std::vector<std::string> train, val, test;
};

/// Patient-level split of sorted ids with a seeded shuffle; every part gets at
/// least one patient when there are three or more.
Split split_patients(std::vector<std::string> ids, double train, double val, uint64_t seed);

/// Seeded subset of max(1, round(fraction * n)) ids, in input order.
std::vector<std::string> subsample_patients(const std::vector<std::string>& ids, double fraction, uint64_t seed);

/// Keeps slices 0, stride, 2*stride, ...; spacing.z is scaled by the stride.
Case subsample_z(const Case& c, int64_t stride);

/// Loads (generating phantoms into `work_dir` on first use) and z-subsamples
/// every case of a source.
std::vector<Case> load_source(const DataSource& source, const std::filesystem::path& work_dir, int64_t z_stride);

training::SliceSet slices_of(const std::vector<const Case*>& cases);

/// Split of source `index` of a plan; every consumer of the plan uses this one.
Split plan_split(const ExperimentPlan& plan, size_t index, const std::vector<Case>& cases);

// Binary pool ---------------------------------------------------------------

struct Candidate {
    Organ organ = Organ::LeftLung;
    models::Backbone backbone = models::Backbone::UNet;
    double best_val_loss = 0.0;
    std::filesystem::path checkpoint;
    std::string source;
};

struct Selection {
    std::map<Organ, Candidate> best;
    std::vector<std::string> report;  // one line per organ, plus tie notes
};

/// Per organ, the candidate with the lowest best smoothed validation loss.
/// Ties go to the lower backbone enum value and are noted in the report.
Selection select_best_binaries(const std::vector<Candidate>& candidates);

// Results ---------------------------------------------------------------------

struct ResultRow {
    std::string method;
    double dice = 0.0;
    double precision = 0.0;
    double recall = 0.0;
    double hd95_mm = 0.0;

    friend bool operator==(const ResultRow&, const ResultRow&) = default;
};

struct ClassRow {
    std::string method;
    Organ organ = Organ::LeftLung;
    double dice = 0.0;
    double precision = 0.0;
    double recall = 0.0;
    double hd95_mm = 0.0;

    friend bool operator==(const ClassRow&, const ClassRow&) = default;
};

struct ResultsTable {
    std::string experiment;
    std::vector<ResultRow> rows;
    std::vector<ClassRow> per_class;

    [[nodiscard]] const ResultRow& row(const std::string& method) const;
    [[nodiscard]] double class_dice(const std::string& method, Organ organ) const;

    friend bool operator==(const ResultsTable&, const ResultsTable&) = default;
};

void write_table_csv(const std::filesystem::path& path, const ResultsTable& table);
ResultsTable read_table_csv(const std::filesystem::path& path, const std::string& experiment = "");
void write_per_class_csv(const std::filesystem::path& path, const ResultsTable& table);
std::vector<ClassRow> read_per_class_csv(const std::filesystem::path& path);

/// Paper-layout text table (rows = methods, columns = DICE/PRECISION/RECALL/HD95).
std::string format_table(const ResultsTable& table);

struct OverlayCase {
    CtVolume volume;
    LabelMask truth;
    LabelMask prediction;
};

struct ExperimentResult {
    ExperimentPlan plan;
    ResultsTable table;
    Selection selection;
    std::string overlay_method;
    std::vector<OverlayCase> overlays;
    Split split;
    std::vector<std::string> ensemble_train_patients;
};

/// Baseline: multiclass networks of every backbone plus the argmax ensemble.
ExperimentResult run_baseline(const ExperimentPlan& plan);

/// EXP1-EXP5: trains the planned ensembles over the selected binaries and
/// evaluates them with the argmax ensemble on the test split.
ExperimentResult run_experiment(const ExperimentPlan& plan);

/// Dispatches on plan.id and writes the report into plan.output_dir.
ExperimentResult run_plan(const ExperimentPlan& plan);

/// Writes <id>_summary.csv, <id>_per_class.csv, <id>_summary.txt,
/// resolved_config.json, config.sha256 and overlays/*.png. Every file is
/// replaced atomically.
std::vector<std::filesystem::path> emit_report(const ExperimentResult& result, const std::filesystem::path& out_dir);

/// Slices chosen for overlays: `count` evenly spaced foreground slices.
std::vector<int64_t> overlay_slice_indices(const LabelMask& truth, int count);

}  // namespace segens::experiments

#endif  // SEGENS_EXPERIMENTS_HPP
