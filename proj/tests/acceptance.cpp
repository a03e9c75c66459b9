// Acceptance runner: one PASS/FAIL line per criterion, non-zero exit on any failure.
#include <algorithm>
#include <cctype>
#include <chrono>
#include <cstdio>
#include <fstream>
#include <functional>
#include <random>
#include <set>
#include <sstream>

#include <CLI11.hpp>
#include <torch/torch.h>

#include "segens/ensembles.hpp"
#include "segens/experiments.hpp"
#include "segens/log.hpp"
#include "segens/metrics.hpp"
#include "segens/preprocessing.hpp"
#include "segens/training.hpp"
#include "oracles.hpp"
#include "support.hpp"

using namespace segens;
using ensembles::Strategy;
using experiments::ExperimentId;
using models::Backbone;
namespace fs = std::filesystem;

namespace {

const std::vector<std::string> kEnsembleRows{"Logits Conv", "Meta U-Net", "Layer Fusion"};

struct Outcome {
    bool pass = false;
    std::string detail;
};

std::string fmt(const char* f, double a) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), f, a);
    return buf;
}

// Shared desk-scale runs ------------------------------------------------------

struct DeskRuns {
    fs::path work;
    std::map<ExperimentId, experiments::ExperimentResult> results;

    experiments::ExperimentPlan plan(ExperimentId id) const {
        auto p = experiments::desk_plan(id, 42);
        p.work_dir = work / "desk";
        std::string name(experiments::experiment_name(id));
        std::transform(name.begin(), name.end(), name.begin(), [](unsigned char ch) { return std::tolower(ch); });
        p.output_dir = work / "out" / name;
        return p;
    }

    const experiments::ExperimentResult& get(ExperimentId id) {
        auto it = results.find(id);
        if (it == results.end()) {
            const auto t0 = std::chrono::steady_clock::now();
            it = results.emplace(id, experiments::run_plan(plan(id))).first;
            const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
            std::printf("  [%s finished in %.0f s]\n%s", std::string(experiments::experiment_name(id)).c_str(), s,
                        experiments::format_table(it->second.table).c_str());
            std::fflush(stdout);
        }
        return it->second;
    }
};

std::vector<ensembles::Branch> selected_branches(const experiments::ExperimentResult& r) {
    std::vector<ensembles::Branch> out;
    for (auto organ : kAllOrgans) {
        const auto ck = models::read_checkpoint(r.selection.best.at(organ).checkpoint);
        out.push_back({models::load_checkpoint(ck), ck.digest});
    }
    return out;
}

training::SliceSet desk_slices(const experiments::ExperimentPlan& plan, bool train_part, size_t limit) {
    const auto cases = experiments::load_source(plan.sources.front(), plan.work_dir, plan.z_stride);
    const auto split = experiments::plan_split(plan, 0, cases);
    const auto& ids = train_part ? split.train : split.test;
    std::vector<const experiments::Case*> picked;
    for (const auto& c : cases) {
        if (std::find(ids.begin(), ids.end(), c.volume.patient_id) != ids.end()) picked.push_back(&c);
    }
    auto all = experiments::slices_of(picked);
    training::SliceSet out;
    // Evenly spaced, so the subset spans the whole body.
    const size_t step = std::max<size_t>(1, all.size() / limit);
    for (size_t i = 0; i < all.size() && out.size() < limit; i += step) out.push_back(all[i]);
    return out;
}

// Criteria --------------------------------------------------------------------

Outcome metric_oracles() {
    std::mt19937_64 rng(2024);
    std::uniform_int_distribution<int64_t> dim(1, 24);
    std::uniform_real_distribution<double> sp(0.5, 5.0);
    double worst = 0.0;
    bool defined_ok = true;
    const int n = 60;
    for (int trial = 0; trial < n; ++trial) {
        const int64_t d = dim(rng), r = dim(rng), c = dim(rng);
        const Spacing s{sp(rng), sp(rng), sp(rng)};
        const auto p = testsupport::random_volume(rng, d, r, c);
        const auto g = testsupport::random_volume(rng, d, r, c);
        worst = std::max(worst, std::abs(metrics::dice(p, g) - testsupport::ref_dice(p, g)));
        const auto [pp, pr] = metrics::precision_recall(p, g);
        const auto [rp, rr] = testsupport::ref_precision_recall(p, g);
        worst = std::max({worst, std::abs(pp - rp), std::abs(pr - rr)});
        const double ref = testsupport::ref_hd95(p, g, s);
        const auto got = metrics::hd95(p, g, s);
        if (std::isnan(ref) != !got.has_value()) {
            defined_ok = false;
        } else if (got) {
            worst = std::max(worst, std::abs(*got - ref));
        }
    }
    return {defined_ok && worst <= 1e-9, std::to_string(n) + " volumes, max abs error " + fmt("%.3g", worst)};
}

Outcome gradient_check() {
    using training::HeadKind;
    double worst = 0.0;
    for (auto [head, k] : {std::pair{HeadKind::Binary, int64_t{1}}, std::pair{HeadKind::Multilabel, int64_t{6}},
                           std::pair{HeadKind::Multiclass, int64_t{7}}}) {
        for (uint64_t seed = 0; seed < 10; ++seed) worst = std::max(worst, testsupport::loss_gradient_error(head, k, 100 + seed));
    }
    return {worst < 1e-4, "30 fixtures, max relative error " + fmt("%.3g", worst)};
}

Outcome freezing(DeskRuns& runs) {
    const auto& r = runs.get(ExperimentId::Exp1);
    auto branches = selected_branches(r);
    const auto slices = desk_slices(r.plan, true, 8);
    const auto data = ensembles::build_ensemble_data(branches, slices, kOrganCount, true);
    training::TrainConfig cfg = r.plan.ensemble_training;
    cfg.max_epochs = 2;
    cfg.samples_per_epoch = 8;
    cfg.batch_size = 2;

    const auto head_only = [](const std::string& n) { return n.rfind("head.", 0) == 0; };
    std::vector<std::string> full_before;
    for (auto& b : branches) full_before.push_back(models::state_digest(*b.model.net));
    bool ok = true;
    std::ostringstream detail;
    for (auto strategy : {Strategy::LogitsConv, Strategy::MetaModel, Strategy::LayerFusion}) {
        auto e = ensembles::make_ensemble(strategy, branches, kOrganCount, r.plan.threshold, 5);
        ensembles::train_ensemble(*e, data, data, cfg);
        bool frozen = true, heads_moved = true;
        for (size_t i = 0; i < branches.size(); ++i) {
            frozen &= models::state_digest(*branches[i].model.net) == full_before[i];
        }
        if (auto* lf = dynamic_cast<ensembles::LayerFusionEnsemble*>(e.get())) {
            for (size_t i = 0; i < branches.size(); ++i) {
                auto& copy = *lf->branch_nets()[i];
                frozen &= ensembles::frozen_digest(copy, strategy) ==
                          ensembles::frozen_digest(*branches[i].model.net, strategy);
                heads_moved &= models::state_digest(copy, head_only) != models::state_digest(*branches[i].model.net, head_only);
            }
        }
        detail << ensembles::strategy_name(strategy) << (frozen && heads_moved ? " ok " : " BROKEN ");
        ok &= frozen && heads_moved;
    }
    return {ok, detail.str()};
}

Outcome argmax_grid() {
    const std::vector<double> levels{0.0, 0.25, 0.5, 0.75, 1.0};
    auto probs = torch::zeros({3, 1, 125}, torch::kFloat64);
    std::vector<int64_t> expected;
    for (int i = 0; i < 125; ++i) {
        const std::vector<double> p{levels[static_cast<size_t>(i / 25)], levels[static_cast<size_t>(i / 5 % 5)],
                                    levels[static_cast<size_t>(i % 5)]};
        for (int c = 0; c < 3; ++c) probs[c][0][i] = p[static_cast<size_t>(c)];
        expected.push_back(testsupport::reference_argmax(p, 0.5));
    }
    // Same grid through the logit path used by fuse_argmax.
    ensembles::LogitStack stack;
    stack.values = torch::logit(probs, 1e-12).to(torch::kFloat32);
    for (int c = 1; c <= 3; ++c) stack.meta.push_back({organ_from_label(c), Backbone::UNet, "", static_cast<size_t>(c - 1)});
    const auto direct = ensembles::argmax_labels(probs, 0.5);
    const auto fused = ensembles::fuse_argmax(stack, 0.5, 3);
    int mismatches = 0;
    for (int i = 0; i < 125; ++i) {
        mismatches += direct[0][i].item<int64_t>() != expected[static_cast<size_t>(i)];
        mismatches += fused[0][i].item<int64_t>() != expected[static_cast<size_t>(i)];
    }
    return {mismatches == 0, "125 points, " + std::to_string(mismatches) + " mismatches"};
}

Outcome identity_selection(DeskRuns& runs) {
    const auto& r = runs.get(ExperimentId::Exp1);
    auto branches = selected_branches(r);
    auto e = ensembles::make_ensemble(Strategy::LogitsConv, branches, kOrganCount, r.plan.threshold);
    const auto slices = desk_slices(r.plan, false, 20);
    int differing = 0;
    for (const auto& s : slices) {
        const auto a = ensembles::compute_activations(branches, s.hu, false);
        const auto pred = e->predict(a);
        const auto expected = (torch::sigmoid(a.logits) >= r.plan.threshold).to(torch::kUInt8);
        differing += !torch::equal(pred.masks, expected);
    }
    return {slices.size() == 20 && differing == 0,
            std::to_string(slices.size()) + " slices, " + std::to_string(differing) + " differing"};
}

Outcome exp1_trend(DeskRuns& runs) {
    const auto& t = runs.get(ExperimentId::Exp1).table;
    const auto& argmax = t.row("Argmax");
    bool dsc_ok = true, hd_ok = false;
    std::ostringstream d;
    d << "argmax " << fmt("%.4f", argmax.dice) << "/" << fmt("%.3f", argmax.hd95_mm);
    for (const auto& m : kEnsembleRows) {
        const auto& row = t.row(m);
        dsc_ok &= row.dice >= argmax.dice - 0.02;
        hd_ok |= row.hd95_mm <= argmax.hd95_mm;
        d << "; " << m << " " << fmt("%.4f", row.dice) << "/" << fmt("%.3f", row.hd95_mm);
    }
    return {dsc_ok && hd_ok, d.str()};
}

Outcome exp2_trend(DeskRuns& runs) {
    const auto& t1 = runs.get(ExperimentId::Exp1).table;
    const auto& t2 = runs.get(ExperimentId::Exp2).table;
    bool ok = true;
    double gain = 0.0;
    std::ostringstream d;
    for (const auto& m : kEnsembleRows) {
        const double delta = t2.row(m).dice - t1.row(m).dice;
        ok &= delta >= -0.01;
        for (auto organ : {Organ::Esophagus, Organ::Trachea}) gain += t2.class_dice(m, organ) - t1.class_dice(m, organ);
        d << m << " " << fmt("%+.4f", delta) << "; ";
    }
    gain /= 2.0 * static_cast<double>(kEnsembleRows.size());
    d << "esophagus+trachea mean " << fmt("%+.4f", gain);
    return {ok && gain >= 0.0, d.str()};
}

Outcome exp5_trend(DeskRuns& runs) {
    const auto& r1 = runs.get(ExperimentId::Exp1);
    const auto& r5 = runs.get(ExperimentId::Exp5);
    bool ok = r1.split.test == r5.split.test;
    std::ostringstream d;
    d << "test sets " << (ok ? "identical" : "DIFFER") << ", " << r5.ensemble_train_patients.size() << " of "
      << r1.ensemble_train_patients.size() << " training patients; ";
    for (const auto& m : kEnsembleRows) {
        const double delta = r5.table.row(m).dice - r1.table.row(m).dice;
        ok &= std::abs(delta) <= 0.05;
        d << m << " " << fmt("%+.4f", delta) << "; ";
    }
    return {ok, d.str()};
}

double overfit_backbone(Backbone b, const training::SliceSample& sample) {
    torch::manual_seed(derive_seed(9, static_cast<uint64_t>(b)));
    auto model = models::make_binary_model(Organ::Heart, b);
    const auto [input, labels] = training::make_input(model, sample, std::nullopt);
    const auto bin = preproc::binarize_mask(labels, organ_label(Organ::Heart));
    const auto target = torch::from_blob(const_cast<uint8_t*>(bin.data.data()), {1, 1, bin.rows, bin.cols}, torch::kUInt8)
                            .to(torch::kFloat32);
    const auto x = input.unsqueeze(0);
    torch::optim::Adam opt(model.net->parameters(), torch::optim::AdamOptions(3e-3));
    double best = 0.0;
    for (int step = 1; step <= 200; ++step) {
        model.net->train();
        opt.zero_grad();
        training::composite_loss(model.net->forward(x), target, training::HeadKind::Binary).total.backward();
        opt.step();
        if (step % 10 == 0) {
            torch::NoGradGuard g;
            model.net->eval();
            const auto pred = (model.net->forward(x) >= 0.0).to(torch::kFloat32);
            const double inter = (pred * target).sum().item<double>();
            const double denom = pred.sum().item<double>() + target.sum().item<double>();
            best = std::max(best, denom == 0.0 ? 1.0 : 2.0 * inter / denom);
            if (best > 0.95) break;
        }
    }
    return best;
}

Outcome overfit() {
    const auto c = phantom::generate_patient(testsupport::small_phantom(1, 77), 0);
    const int64_t z = c.volume.voxels.depth / 2;
    const training::SliceSample sample{preproc::center_crop(c.volume.voxels.slice(z)),
                                       preproc::center_crop(c.mask.labels.slice(z)), c.volume.patient_id, z};
    bool ok = true;
    std::ostringstream d;
    for (auto b : models::kAllBackbones) {
        const auto t0 = std::chrono::steady_clock::now();
        const double dsc = overfit_backbone(b, sample);
        const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        ok &= dsc > 0.95 && s < 300.0;
        d << models::backbone_name(b) << " " << fmt("%.4f", dsc) << " (" << fmt("%.0f", s) << " s); ";
    }
    return {ok, d.str()};
}

experiments::ExperimentPlan tiny_plan(const fs::path& dir) {
    auto p = experiments::desk_plan(ExperimentId::Exp1, 7);
    p.work_dir = dir / "work";
    p.output_dir = dir / "out";
    auto& ph = p.sources.front().phantom;
    ph.n_patients = 4;
    ph.slices_min = ph.slices_max = 80;
    p.z_stride = 16;
    p.backbones = {Backbone::DeepLabV3};
    for (auto* cfg : {&p.binary_training, &p.ensemble_training}) {
        cfg->max_epochs = 2;
        cfg->samples_per_epoch = 8;
        cfg->batch_size = 2;
    }
    p.overlay_slices = 1;
    return p;
}

Outcome determinism(const fs::path& work) {
    std::vector<experiments::ResultsTable> tables;
    std::vector<std::string> files;
    for (const auto* name : {"det_a", "det_b"}) {
        const auto dir = work / name;
        fs::remove_all(dir);
        const auto r = experiments::run_plan(tiny_plan(dir));
        tables.push_back(r.table);
        std::ifstream f(dir / "out" / "exp1_summary.csv", std::ios::binary);
        files.emplace_back(std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>());
    }
    const bool same = tables[0] == tables[1] && files[0] == files[1] && !files[0].empty();
    return {same, same ? "tables and summary CSVs identical across two fresh runs" : "tables differ"};
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Acceptance criteria runner"};
    fs::path work = "acceptance_work";
    std::vector<int> only;
    app.add_option("--work", work, "Working directory (binary cache is reused across runs)");
    app.add_option("--only", only, "Run only these criteria")->check(CLI::Range(1, 10));
    CLI11_PARSE(app, argc, argv);

    torch::set_num_threads(1);
    log::threshold() = log::Level::Warn;
    fs::create_directories(work);
    DeskRuns runs{work, {}};

    const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
        {"metric oracles", metric_oracles},
        {"loss gradient check", gradient_check},
        {"freezing contracts", [&] { return freezing(runs); }},
        {"argmax oracle", argmax_grid},
        {"identity-selection logits conv", [&] { return identity_selection(runs); }},
        {"EXP1 trend", [&] { return exp1_trend(runs); }},
        {"EXP2 trend", [&] { return exp2_trend(runs); }},
        {"EXP5 trend", [&] { return exp5_trend(runs); }},
        {"single-slice overfit", overfit},
        {"determinism", [&] { return determinism(work); }},
    };
    int failed = 0, ran = 0;
    for (size_t i = 0; i < criteria.size(); ++i) {
        const int n = static_cast<int>(i) + 1;
        if (!only.empty() && std::find(only.begin(), only.end(), n) == only.end()) continue;
        const auto t0 = std::chrono::steady_clock::now();
        Outcome o;
        try {
            o = criteria[i].second();
        } catch (const std::exception& e) {
            o = {false, std::string("exception: ") + e.what()};
        }
        const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        std::printf("%s criterion %d (%s): %s [%.1f s]\n", o.pass ? "PASS" : "FAIL", n, criteria[i].first.c_str(),
                    o.detail.c_str(), s);
        std::fflush(stdout);
        failed += !o.pass;
        ++ran;
    }
    std::printf("acceptance complete: %d of %d criteria passed\n", ran - failed, ran);
    return failed == 0 ? 0 : 1;
}
