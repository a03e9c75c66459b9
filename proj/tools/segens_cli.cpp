#include <filesystem>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>
#include <torch/torch.h>

#include "segens/checkpoint.hpp"
#include "segens/ensembles.hpp"
#include "segens/experiments.hpp"
#include "segens/log.hpp"
#include "segens/metrics.hpp"
#include "segens/phantom.hpp"
#include "segens/training.hpp"
#include "segens/volume_io.hpp"

namespace fs = std::filesystem;
using namespace segens;
namespace ex = segens::experiments;

namespace {

struct DataView {
    std::vector<ex::Case> cases;
    ex::Split split;

    std::vector<const ex::Case*> pick(const std::vector<std::string>& ids) const {
        std::vector<const ex::Case*> out;
        for (const auto& c : cases) {
            if (std::find(ids.begin(), ids.end(), c.volume.patient_id) != ids.end()) out.push_back(&c);
        }
        return out;
    }
};

DataView load_plan_source(const ex::ExperimentPlan& plan, const std::string& name) {
    for (size_t i = 0; i < plan.sources.size(); ++i) {
        if (plan.sources[i].name != name) continue;
        DataView d;
        d.cases = ex::load_source(plan.sources[i], plan.work_dir, plan.z_stride);
        d.split = ex::plan_split(plan, i, d.cases);
        return d;
    }
    throw ConfigError("plan has no source named '" + name + "'");
}

std::string source_for(const ex::ExperimentPlan& plan, std::optional<Organ> organ, const std::string& requested) {
    if (!requested.empty()) return requested;
    if (organ) {
        const auto it = plan.source_partition.find(*organ);
        if (it != plan.source_partition.end()) return it->second;
    }
    return plan.sources.front().name;
}

void save_model(const fs::path& out, training::TrainedModel& trained, const std::string& source) {
    trained.model.source_dataset = source;
    models::write_checkpoint(out, models::save_checkpoint(trained.model, models::training_meta(trained.checkpoint)));
    std::cout << "wrote " << out.string() << " (best epoch " << trained.result.best_epoch << ", smoothed val loss "
              << trained.result.best_smoothed_val << ")\n";
}

std::optional<fs::path> find_prediction(const fs::path& dir, const std::string& id) {
    for (const auto* ext : {".nii.gz", ".nii"}) {
        const auto p = dir / (id + ext);
        if (fs::exists(p)) return p;
    }
    if (fs::is_directory(dir / id)) {
        for (const auto* name : {"label.nii.gz", "label.nii", "prediction.nii.gz", "prediction.nii"}) {
            const auto p = dir / id / name;
            if (fs::exists(p)) return p;
        }
    }
    return std::nullopt;
}

int evaluate(const fs::path& pred_dir, const fs::path& gt_dir, const std::string& csv) {
    if (!fs::is_directory(gt_dir)) throw IoError("'" + gt_dir.string() + "' is not a directory");
    std::vector<fs::path> cases;
    for (const auto& e : fs::directory_iterator(gt_dir)) {
        if (e.is_directory()) cases.push_back(e.path());
    }
    std::sort(cases.begin(), cases.end());
    std::vector<metrics::MetricsReport> reports;
    std::ostringstream rows;
    rows << "patient,organ,dice,precision,recall,hd95_mm\n";
    for (const auto& dir : cases) {
        auto gt = io::load_volume(dir);
        if (!gt.mask) continue;
        const auto id = gt.volume.patient_id.empty() ? dir.filename().string() : gt.volume.patient_id;
        const auto pred_path = find_prediction(pred_dir, dir.filename().string());
        if (!pred_path) throw IoError("no prediction for case '" + id + "' in '" + pred_dir.string() + "'");
        const auto pred = io::load_mask(*pred_path);
        const auto r = metrics::evaluate_prediction(pred, *gt.mask, gt.volume.spacing);
        for (const auto& [organ, m] : r.per_class) {
            if (!m.present_in_gt) continue;
            rows << id << ',' << organ_name(organ) << ',' << m.dsc << ',' << m.precision << ',' << m.recall << ','
                 << m.hd95_mm.value_or(r.hd95_penalty_mm) << '\n';
        }
        std::printf("%-16s DSC %.4f  P %.4f  R %.4f  HD95 %.3f mm\n", id.c_str(), r.macro_dsc, r.macro_precision,
                    r.macro_recall, r.macro_hd95);
        reports.push_back(r);
    }
    if (reports.empty()) throw IoError("no labelled cases under '" + gt_dir.string() + "'");
    const auto agg = metrics::aggregate(reports);
    std::printf("%-16s DSC %.4f  P %.4f  R %.4f  HD95 %.3f mm\n", "mean", agg.macro_dsc, agg.macro_precision,
                agg.macro_recall, agg.macro_hd95);
    if (!csv.empty()) {
        std::ofstream f(csv);
        if (!f) throw IoError("cannot write '" + csv + "'");
        f << rows.str();
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    torch::set_num_threads(1);
    CLI::App app{"Organ-at-risk segmentation ensembles"};
    app.require_subcommand(1);
    bool verbose = false, quiet = false;
    app.add_flag("-v,--verbose", verbose, "debug logging");
    app.add_flag("-q,--quiet", quiet, "warnings only");

    // phantom generate
    auto* phantom_cmd = app.add_subcommand("phantom", "synthetic data");
    phantom_cmd->require_subcommand(1);
    auto* gen = phantom_cmd->add_subcommand("generate", "write a phantom cohort as NIfTI case folders");
    phantom::PhantomSpec pspec;
    fs::path phantom_out;
    gen->add_option("--patients", pspec.n_patients, "number of patients")->required();
    gen->add_option("--seed", pspec.rng_seed, "cohort seed")->required();
    gen->add_option("--out", phantom_out, "output directory")->required();
    gen->add_option("--grid", pspec.grid, "in-plane size");
    gen->add_option("--slices-min", pspec.slices_min);
    gen->add_option("--slices-max", pspec.slices_max);
    gen->add_option("--noise", pspec.noise_sigma, "noise sigma (HU)");
    gen->add_option("--hu-offset", pspec.hu_offset, "tissue HU shift");
    gen->add_option("--prefix", pspec.id_prefix, "patient id prefix");

    // train binary | multiclass | ensemble
    auto* train_cmd = app.add_subcommand("train", "train a model");
    train_cmd->require_subcommand(1);
    std::string organ_name_arg, backbone_arg, source_arg;
    fs::path config_path, train_out, spec_path;
    auto* tb = train_cmd->add_subcommand("binary", "single-organ network");
    tb->add_option("--organ", organ_name_arg, "left_lung, right_lung, heart, esophagus, trachea, spinal_cord")->required();
    tb->add_option("--backbone", backbone_arg, "unet, se_resunet, deeplabv3")->required();
    tb->add_option("--config", config_path, "plan file providing data and training settings")->required();
    tb->add_option("--source", source_arg, "data source name");
    tb->add_option("--out", train_out, "checkpoint path");
    auto* tm = train_cmd->add_subcommand("multiclass", "all-organ network");
    tm->add_option("--backbone", backbone_arg)->required();
    tm->add_option("--config", config_path)->required();
    tm->add_option("--source", source_arg);
    tm->add_option("--out", train_out);
    auto* te = train_cmd->add_subcommand("ensemble", "fusion stage over trained branches");
    te->add_option("--spec", spec_path, "ensemble spec")->required();
    te->add_option("--config", config_path, "plan file providing data and training settings")->required();
    te->add_option("--out", train_out, "checkpoint path");

    // run experiment
    auto* run_cmd = app.add_subcommand("run", "run an experiment");
    run_cmd->require_subcommand(1);
    auto* re = run_cmd->add_subcommand("experiment", "train, evaluate and report");
    fs::path plan_path;
    re->add_option("--plan", plan_path, "plan file")->required()->check(CLI::ExistingFile);

    // plan init
    auto* plan_cmd = app.add_subcommand("plan", "write a default plan file");
    std::string plan_id = "EXP1";
    uint64_t plan_seed = 42;
    fs::path plan_out;
    plan_cmd->add_option("--id", plan_id, "BASELINE, EXP1 .. EXP5");
    plan_cmd->add_option("--seed", plan_seed);
    plan_cmd->add_option("--out", plan_out, "plan file")->required();

    // predict
    auto* predict_cmd = app.add_subcommand("predict", "segment one case with a trained ensemble");
    fs::path ensemble_ck, input_case, predict_out;
    predict_cmd->add_option("--spec", spec_path)->required();
    predict_cmd->add_option("--ensemble", ensemble_ck, "trained ensemble checkpoint (argmax when omitted)");
    predict_cmd->add_option("--input", input_case, "case folder or image")->required();
    predict_cmd->add_option("--out", predict_out, "label volume (.nii.gz)")->required();

    // evaluate
    auto* eval_cmd = app.add_subcommand("evaluate", "score label volumes against ground truth");
    fs::path pred_dir, gt_dir;
    std::string eval_csv;
    eval_cmd->add_option("--pred", pred_dir, "predictions: <id>.nii.gz or <id>/label.nii.gz")->required();
    eval_cmd->add_option("--gt", gt_dir, "ground-truth case folders")->required();
    eval_cmd->add_option("--csv", eval_csv, "per-class CSV output");

    CLI11_PARSE(app, argc, argv);
    log::threshold() = verbose ? log::Level::Debug : quiet ? log::Level::Warn : log::Level::Info;

    try {
        if (gen->parsed()) {
            const auto dirs = phantom::write_phantom_dataset(pspec, phantom_out);
            std::cout << "wrote " << dirs.size() << " cases to " << phantom_out.string() << "\n";
        } else if (tb->parsed() || tm->parsed()) {
            const auto plan = ex::read_plan(config_path);
            const auto backbone = models::backbone_from_name(backbone_arg);
            std::optional<Organ> organ;
            if (tb->parsed()) organ = organ_from_name(organ_name_arg);
            const auto source = source_for(plan, organ, source_arg);
            const auto data = load_plan_source(plan, source);
            const auto train = ex::slices_of(data.pick(data.split.train));
            const auto val = ex::slices_of(data.pick(data.split.val));
            const auto stem = (organ ? std::string(segens::organ_name(*organ)) : std::string("multiclass")) + "_" +
                              std::string(models::backbone_name(backbone));
            if (train_out.empty()) train_out = plan.output_dir / (stem + ".ck");
            fs::create_directories(train_out.parent_path().empty() ? fs::path(".") : train_out.parent_path());
            auto log_path = train_out;
            log_path.replace_extension(".csv");
            fs::remove(log_path);
            auto trained = organ ? training::train_binary(*organ, backbone, train, val, plan.binary_training, plan.width,
                                                          log_path)
                                 : training::train_multiclass(backbone, train, val, plan.multiclass_training,
                                                              plan.width, log_path);
            save_model(train_out, trained, source);
        } else if (te->parsed()) {
            const auto plan = ex::read_plan(config_path);
            const auto spec = ensembles::read_spec(spec_path);
            auto branches = ensembles::load_branches(spec);
            auto e = ensembles::make_ensemble(spec, branches, plan.ensemble_training.seed, plan.width);
            models::TrainingMeta meta;
            if (e->trainable()) {
                std::vector<const ex::Case*> fit, val;
                std::vector<DataView> views;
                for (const auto& s : plan.sources) views.push_back(load_plan_source(plan, s.name));
                for (const auto& v : views) {
                    for (auto* c : v.pick(v.split.train)) fit.push_back(c);
                    for (auto* c : v.pick(v.split.val)) val.push_back(c);
                }
                const auto train_data = ensembles::build_ensemble_data(branches, ex::slices_of(fit), spec.class_count,
                                                                       e->needs_trunks());
                const auto val_data = ensembles::build_ensemble_data(branches, ex::slices_of(val), spec.class_count,
                                                                     e->needs_trunks());
                if (train_out.empty()) train_out = plan.output_dir / (std::string(ensembles::strategy_name(spec.strategy)) + ".ck");
                fs::create_directories(train_out.parent_path().empty() ? fs::path(".") : train_out.parent_path());
                auto log_path = train_out;
                log_path.replace_extension(".csv");
                fs::remove(log_path);
                const auto fit_result = ensembles::train_ensemble(*e, train_data, val_data, plan.ensemble_training, log_path);
                meta = {static_cast<int>(fit_result.history.size()), fit_result.best_smoothed_val,
                        plan.ensemble_training.seed, training::json_digest(plan.ensemble_training.to_json())};
            }
            if (train_out.empty()) train_out = plan.output_dir / (std::string(ensembles::strategy_name(spec.strategy)) + ".ck");
            fs::create_directories(train_out.parent_path().empty() ? fs::path(".") : train_out.parent_path());
            models::write_checkpoint(train_out, ensembles::save_ensemble(*e, branches, meta));
            std::cout << "wrote " << train_out.string() << "\n";
        } else if (re->parsed()) {
            const auto plan = ex::read_plan(plan_path);
            const auto result = ex::run_plan(plan);
            std::cout << ex::format_table(result.table) << "report: " << plan.output_dir.string() << "\n";
        } else if (plan_cmd->parsed()) {
            const auto plan = ex::desk_plan(ex::experiment_from_name(plan_id), plan_seed);
            std::ofstream f(plan_out);
            if (!f) throw IoError("cannot write '" + plan_out.string() + "'");
            f << plan.to_json().dump(2) << "\n";
            std::cout << "wrote " << plan_out.string() << "\n";
        } else if (predict_cmd->parsed()) {
            const auto spec = ensembles::read_spec(spec_path);
            auto branches = ensembles::load_branches(spec);
            auto e = ensemble_ck.empty() ? ensembles::make_ensemble(spec, branches)
                                         : ensembles::load_ensemble(models::read_checkpoint(ensemble_ck), branches);
            const auto loaded = io::load_volume(input_case);
            const auto pred = ensembles::predict_volume(*e, branches, loaded.volume);
            io::save_mask(predict_out, pred.labels, loaded.volume.spacing);
            std::cout << "wrote " << predict_out.string() << "\n";
        } else if (eval_cmd->parsed()) {
            return evaluate(pred_dir, gt_dir, eval_csv);
        }
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const ArgumentError& e) {
        std::cerr << "invalid argument: " << e.what() << "\n";
        return 2;
    } catch (const IoError& e) {
        std::cerr << "i/o error: " << e.what() << "\n";
        return 3;
    } catch (const IntegrityError& e) {
        std::cerr << "integrity error: " << e.what() << "\n";
        return 4;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
