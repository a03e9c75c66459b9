#include "segens/experiments.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "segens/checkpoint.hpp"
#include "segens/log.hpp"
#include "segens/preprocessing.hpp"
#include "segens/volume_io.hpp"

namespace segens::experiments {

namespace fs = std::filesystem;
using models::Backbone;
using ensembles::Strategy;

std::string_view experiment_name(ExperimentId id) {
    switch (id) {
        case ExperimentId::Baseline: return "BASELINE";
        case ExperimentId::Exp1: return "EXP1";
        case ExperimentId::Exp2: return "EXP2";
        case ExperimentId::Exp3: return "EXP3";
        case ExperimentId::Exp4: return "EXP4";
        case ExperimentId::Exp5: return "EXP5";
    }
    throw ArgumentError("invalid experiment id");
}

ExperimentId experiment_from_name(std::string_view name) {
    std::string upper(name);
    std::transform(upper.begin(), upper.end(), upper.begin(), [](unsigned char c) { return std::toupper(c); });
    for (auto id : {ExperimentId::Baseline, ExperimentId::Exp1, ExperimentId::Exp2, ExperimentId::Exp3,
                    ExperimentId::Exp4, ExperimentId::Exp5}) {
        if (experiment_name(id) == upper) return id;
    }
    throw ConfigError("unknown experiment '" + std::string(name) + "'");
}

namespace {

std::string lower(std::string_view s) {
    std::string out(s);
    std::transform(out.begin(), out.end(), out.begin(), [](unsigned char c) { return std::tolower(c); });
    return out;
}

std::string method_name(Strategy s) {
    switch (s) {
        case Strategy::Argmax: return "Argmax";
        case Strategy::LogitsConv: return "Logits Conv";
        case Strategy::MetaModel: return "Meta U-Net";
        case Strategy::LayerFusion: return "Layer Fusion";
    }
    return "?";
}

std::string display_name(Backbone b) {
    switch (b) {
        case Backbone::UNet: return "U-Net";
        case Backbone::SEResUNet: return "SE-ResUNet";
        case Backbone::DeepLabV3: return "DeepLabV3";
    }
    return "?";
}

nlohmann::json phantom_json(const phantom::PhantomSpec& p) {
    nlohmann::json ranges;
    for (const auto& [organ, r] : p.organ_hu_ranges) ranges[std::string(organ_name(organ))] = {r.first, r.second};
    return {{"patients", p.n_patients},
            {"seed", p.rng_seed},
            {"slices_min", p.slices_min},
            {"slices_max", p.slices_max},
            {"grid", p.grid},
            {"organ_hu_ranges", ranges},
            {"background_hu", p.background_hu},
            {"bone_hu", p.bone_hu},
            {"noise_sigma", p.noise_sigma},
            {"hu_offset", p.hu_offset},
            {"spacing", {p.spacing.z, p.spacing.y, p.spacing.x}},
            {"id_prefix", p.id_prefix}};
}

phantom::PhantomSpec phantom_from_json(const nlohmann::json& j) {
    phantom::PhantomSpec p;
    p.n_patients = j.value("patients", p.n_patients);
    p.rng_seed = j.value("seed", p.rng_seed);
    p.slices_min = j.value("slices_min", p.slices_min);
    p.slices_max = j.value("slices_max", p.slices_max);
    p.grid = j.value("grid", p.grid);
    if (j.contains("organ_hu_ranges")) {
        for (const auto& [name, r] : j.at("organ_hu_ranges").items()) {
            p.organ_hu_ranges[organ_from_name(name)] = {r.at(0).get<double>(), r.at(1).get<double>()};
        }
    }
    p.background_hu = j.value("background_hu", p.background_hu);
    p.bone_hu = j.value("bone_hu", p.bone_hu);
    p.noise_sigma = j.value("noise_sigma", p.noise_sigma);
    p.hu_offset = j.value("hu_offset", p.hu_offset);
    if (j.contains("spacing")) {
        const auto& s = j.at("spacing");
        p.spacing = {s.at(0).get<double>(), s.at(1).get<double>(), s.at(2).get<double>()};
    }
    p.id_prefix = j.value("id_prefix", p.id_prefix);
    return p;
}

nlohmann::json source_json(const DataSource& s) {
    nlohmann::json j{{"name", s.name}};
    if (s.root) {
        j["root"] = s.root->string();
    } else {
        j["phantom"] = phantom_json(s.phantom);
    }
    if (!s.label_map.empty()) {
        nlohmann::json m;
        for (const auto& [value, organ] : s.label_map) m[std::to_string(value)] = std::string(organ_name(organ));
        j["label_map"] = m;
    }
    return j;
}

DataSource source_from_json(const nlohmann::json& j) {
    DataSource s;
    s.name = j.value("name", s.name);
    if (j.contains("root")) s.root = fs::path(j.at("root").get<std::string>());
    if (j.contains("phantom")) s.phantom = phantom_from_json(j.at("phantom"));
    if (j.contains("label_map")) {
        for (const auto& [value, organ] : j.at("label_map").items()) {
            s.label_map[std::stoi(value)] = organ_from_name(organ.get<std::string>());
        }
    }
    return s;
}

const DataSource& source_named(const ExperimentPlan& plan, const std::string& name) {
    for (const auto& s : plan.sources) {
        if (s.name == name) return s;
    }
    throw ConfigError("unknown data source '" + name + "'");
}

const std::set<std::string> kPlanKeys = {
    "schema_version", "id", "seed", "work_dir", "output_dir", "sources", "source_partition", "split", "z_stride",
    "width", "backbones", "strategies", "train_fraction", "supplementary", "multiclass_branch", "threshold",
    "binary_training", "multiclass_training", "ensemble_training", "overlay_slices"};

}  // namespace

// Plan --------------------------------------------------------------------------

void ExperimentPlan::validate() const {
    if (!(train_fraction > 0.0 && train_fraction <= 1.0)) throw ConfigError("train_fraction must lie in (0, 1]");
    if (!(train_split > 0.0 && val_split > 0.0 && train_split + val_split < 1.0)) {
        throw ConfigError("split fractions must be positive and leave room for a test set");
    }
    if (z_stride < 1) throw ConfigError("z_stride must be >= 1");
    if (!(width > 0.0)) throw ConfigError("width must be positive");
    if (backbones.empty()) throw ConfigError("no backbones planned");
    if (!(threshold > 0.0 && threshold < 1.0)) throw ConfigError("threshold must lie in (0, 1)");
    if (overlay_slices < 0) throw ConfigError("overlay_slices must be >= 0");
    if (sources.empty()) throw ConfigError("plan has no data source");
    std::set<std::string> names;
    for (const auto& s : sources) {
        if (!names.insert(s.name).second) throw ConfigError("duplicate source name '" + s.name + "'");
        if (!s.root) s.phantom.validate();
    }
    for (const auto& [organ, name] : source_partition) {
        if (!names.count(name)) throw ConfigError("source_partition names unknown source '" + name + "'");
    }
    if (id == ExperimentId::Exp3) {
        if (sources.size() < 2) throw ConfigError("EXP3 needs two data sources");
        for (auto organ : kAllOrgans) {
            if (!source_partition.count(organ)) {
                throw ConfigError("EXP3 partition does not cover organ '" + std::string(organ_name(organ)) + "'");
            }
        }
    }
    binary_training.validate();
    multiclass_training.validate();
    ensemble_training.validate();
}

nlohmann::json ExperimentPlan::to_json() const {
    nlohmann::json src = nlohmann::json::array();
    for (const auto& s : sources) src.push_back(source_json(s));
    nlohmann::json partition = nlohmann::json::object();
    for (const auto& [organ, name] : source_partition) partition[std::string(organ_name(organ))] = name;
    nlohmann::json bbs = nlohmann::json::array();
    for (auto b : backbones) bbs.push_back(std::string(models::backbone_name(b)));
    nlohmann::json strats = nlohmann::json::array();
    for (auto s : strategies) strats.push_back(std::string(ensembles::strategy_name(s)));
    nlohmann::json supp = nlohmann::json::object();
    for (const auto& [organ, b] : supplementary) supp[std::string(organ_name(organ))] = std::string(models::backbone_name(b));
    return {{"schema_version", kPlanSchemaVersion},
            {"id", std::string(experiment_name(id))},
            {"seed", seed},
            {"work_dir", work_dir.string()},
            {"output_dir", output_dir.string()},
            {"sources", src},
            {"source_partition", partition},
            {"split", {{"train", train_split}, {"val", val_split}}},
            {"z_stride", z_stride},
            {"width", width},
            {"backbones", bbs},
            {"strategies", strats},
            {"train_fraction", train_fraction},
            {"supplementary", supp},
            {"multiclass_branch", std::string(models::backbone_name(multiclass_branch))},
            {"threshold", threshold},
            {"binary_training", binary_training.to_json()},
            {"multiclass_training", multiclass_training.to_json()},
            {"ensemble_training", ensemble_training.to_json()},
            {"overlay_slices", overlay_slices}};
}

ExperimentPlan ExperimentPlan::from_json(const nlohmann::json& j) {
    for (const auto& [key, _] : j.items()) {
        if (!kPlanKeys.count(key)) throw ConfigError("unknown plan key '" + key + "'");
    }
    if (j.value("schema_version", kPlanSchemaVersion) != kPlanSchemaVersion) {
        throw ConfigError("unsupported plan schema_version");
    }
    ExperimentPlan p;
    try {
        p.id = experiment_from_name(j.at("id").get<std::string>());
        p = desk_plan(p.id, j.value("seed", uint64_t{42}));
        if (j.contains("work_dir")) p.work_dir = j.at("work_dir").get<std::string>();
        if (j.contains("output_dir")) p.output_dir = j.at("output_dir").get<std::string>();
        if (j.contains("sources")) {
            p.sources.clear();
            for (const auto& s : j.at("sources")) p.sources.push_back(source_from_json(s));
        }
        if (j.contains("source_partition")) {
            p.source_partition.clear();
            for (const auto& [organ, name] : j.at("source_partition").items()) {
                p.source_partition[organ_from_name(organ)] = name.get<std::string>();
            }
        }
        if (j.contains("split")) {
            p.train_split = j.at("split").value("train", p.train_split);
            p.val_split = j.at("split").value("val", p.val_split);
        }
        p.z_stride = j.value("z_stride", p.z_stride);
        p.width = j.value("width", p.width);
        if (j.contains("backbones")) {
            p.backbones.clear();
            for (const auto& b : j.at("backbones")) p.backbones.push_back(models::backbone_from_name(b.get<std::string>()));
        }
        if (j.contains("strategies")) {
            p.strategies.clear();
            for (const auto& s : j.at("strategies")) {
                const auto st = ensembles::strategy_from_name(s.get<std::string>());
                if (st != Strategy::Argmax) p.strategies.push_back(st);
            }
        }
        p.train_fraction = j.value("train_fraction", p.train_fraction);
        if (j.contains("supplementary")) {
            p.supplementary.clear();
            for (const auto& [organ, b] : j.at("supplementary").items()) {
                p.supplementary[organ_from_name(organ)] = models::backbone_from_name(b.get<std::string>());
            }
        }
        if (j.contains("multiclass_branch")) {
            p.multiclass_branch = models::backbone_from_name(j.at("multiclass_branch").get<std::string>());
        }
        p.threshold = j.value("threshold", p.threshold);
        if (j.contains("binary_training")) p.binary_training = training::TrainConfig::from_json(j.at("binary_training"));
        if (j.contains("multiclass_training")) {
            p.multiclass_training = training::TrainConfig::from_json(j.at("multiclass_training"));
        }
        if (j.contains("ensemble_training")) {
            p.ensemble_training = training::TrainConfig::from_json(j.at("ensemble_training"));
        }
        p.overlay_slices = j.value("overlay_slices", p.overlay_slices);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("malformed plan: ") + e.what());
    } catch (const ArgumentError& e) {
        throw ConfigError(std::string("malformed plan: ") + e.what());
    }
    p.validate();
    return p;
}

std::string ExperimentPlan::digest() const { return training::json_digest(to_json()); }

ExperimentPlan read_plan(const fs::path& path) {
    std::ifstream f(path);
    if (!f) throw IoError("cannot open plan '" + path.string() + "'");
    nlohmann::json j;
    try {
        f >> j;
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("cannot parse plan '" + path.string() + "': " + e.what());
    }
    auto plan = ExperimentPlan::from_json(j);
    const auto base = path.parent_path();
    if (plan.work_dir.is_relative()) plan.work_dir = base / plan.work_dir;
    if (plan.output_dir.is_relative()) plan.output_dir = base / plan.output_dir;
    for (auto& s : plan.sources) {
        if (s.root && s.root->is_relative()) s.root = base / *s.root;
    }
    return plan;
}

ExperimentPlan desk_plan(ExperimentId id, uint64_t seed) {
    ExperimentPlan p;
    p.id = id;
    p.seed = seed;
    p.output_dir = fs::path("out") / lower(experiment_name(id));
    p.z_stride = 4;
    p.sources.front().phantom.rng_seed = seed;

    p.binary_training.initial_lr = 1e-2;
    p.binary_training.max_epochs = 10;
    p.binary_training.samples_per_epoch = 60;
    p.binary_training.batch_size = 4;
    p.binary_training.augment = false;
    p.multiclass_training = p.binary_training;
    p.multiclass_training.max_epochs = 15;
    p.ensemble_training = p.binary_training;
    p.ensemble_training.initial_lr = 3e-3;
    p.ensemble_training.max_epochs = 20;

    if (id == ExperimentId::Exp3) {
        DataSource b;
        b.name = "B";
        b.phantom.rng_seed = derive_seed(seed, 3);
        b.phantom.noise_sigma = 14.0;
        b.phantom.hu_offset = 15.0;
        b.phantom.id_prefix = "siteb";
        p.sources.front().phantom.id_prefix = "sitea";
        p.sources.push_back(b);
        for (auto organ : {Organ::LeftLung, Organ::RightLung, Organ::Heart, Organ::SpinalCord}) p.source_partition[organ] = "A";
        for (auto organ : {Organ::Esophagus, Organ::Trachea}) p.source_partition[organ] = "B";
    }
    if (id == ExperimentId::Exp5) p.train_fraction = 0.2;
    return p;
}

// Data ------------------------------------------------------------------------

Split split_patients(std::vector<std::string> ids, double train, double val, uint64_t seed) {
    std::sort(ids.begin(), ids.end());
    if (std::adjacent_find(ids.begin(), ids.end()) != ids.end()) throw ConfigError("duplicate patient id");
    std::mt19937_64 rng(derive_seed(seed, 0x5711));
    std::shuffle(ids.begin(), ids.end(), rng);
    const auto n = static_cast<int64_t>(ids.size());
    auto n_train = static_cast<int64_t>(std::llround(train * static_cast<double>(n)));
    auto n_val = static_cast<int64_t>(std::llround(val * static_cast<double>(n)));
    if (n >= 3) {
        n_val = std::max<int64_t>(n_val, 1);
        n_train = std::clamp<int64_t>(n_train, 1, n - n_val - 1);
    }
    Split s;
    s.train.assign(ids.begin(), ids.begin() + n_train);
    s.val.assign(ids.begin() + n_train, ids.begin() + std::min(n, n_train + n_val));
    s.test.assign(ids.begin() + std::min(n, n_train + n_val), ids.end());
    for (auto* part : {&s.train, &s.val, &s.test}) std::sort(part->begin(), part->end());
    return s;
}

std::vector<std::string> subsample_patients(const std::vector<std::string>& ids, double fraction, uint64_t seed) {
    if (!(fraction > 0.0 && fraction <= 1.0)) throw ConfigError("train_fraction must lie in (0, 1]");
    if (ids.empty()) return {};
    const auto k = std::max<size_t>(1, static_cast<size_t>(std::llround(fraction * static_cast<double>(ids.size()))));
    std::vector<size_t> order(ids.size());
    std::iota(order.begin(), order.end(), size_t{0});
    std::mt19937_64 rng(derive_seed(seed, 0x5ca7));
    std::shuffle(order.begin(), order.end(), rng);
    order.resize(std::min(k, ids.size()));
    std::sort(order.begin(), order.end());
    std::vector<std::string> out;
    for (auto i : order) out.push_back(ids[i]);
    return out;
}

Case subsample_z(const Case& c, int64_t stride) {
    if (stride < 1) throw ArgumentError("z stride must be >= 1");
    if (stride == 1) return c;
    const auto& v = c.volume.voxels;
    const int64_t depth = (v.depth + stride - 1) / stride;
    Case out;
    out.source = c.source;
    out.volume.patient_id = c.volume.patient_id;
    out.volume.spacing = c.volume.spacing;
    out.volume.spacing.z *= static_cast<double>(stride);
    out.volume.voxels = Grid3<int16_t>(depth, v.rows, v.cols);
    out.mask.class_count = c.mask.class_count;
    out.mask.labels = Grid3<uint8_t>(depth, v.rows, v.cols);
    for (int64_t z = 0; z < depth; ++z) {
        out.volume.voxels.set_slice(z, v.slice(z * stride));
        out.mask.labels.set_slice(z, c.mask.labels.slice(z * stride));
    }
    return out;
}

std::vector<Case> load_source(const DataSource& source, const fs::path& work_dir, int64_t z_stride) {
    std::vector<fs::path> case_paths;
    if (source.root) {
        if (!fs::is_directory(*source.root)) throw IoError("data root '" + source.root->string() + "' is not a directory");
        for (const auto& entry : fs::directory_iterator(*source.root)) case_paths.push_back(entry.path());
        std::sort(case_paths.begin(), case_paths.end());
    } else {
        const auto key = training::json_digest(phantom_json(source.phantom)).substr(0, 16);
        const auto dir = work_dir / "data" / (source.name + "_" + key);
        if (!fs::exists(dir / "COMPLETE")) {
            log::info("generating ", source.phantom.n_patients, " phantom patients into ", dir.string());
            const auto tmp = fs::path(dir.string() + ".partial");
            fs::remove_all(tmp);
            phantom::write_phantom_dataset(source.phantom, tmp);
            std::ofstream(tmp / "COMPLETE") << "ok\n";
            fs::remove_all(dir);
            fs::create_directories(dir.parent_path());
            fs::rename(tmp, dir);
        }
        for (const auto& entry : fs::directory_iterator(dir)) {
            if (entry.is_directory()) case_paths.push_back(entry.path());
        }
        std::sort(case_paths.begin(), case_paths.end());
    }

    std::vector<Case> out;
    for (const auto& path : case_paths) {
        auto loaded = io::load_volume(path, 255);
        if (!loaded.mask) throw ConfigError("case '" + path.string() + "' has no label file");
        Case c{std::move(loaded.volume), std::move(*loaded.mask), source.name};
        if (!source.label_map.empty()) {
            for (auto& v : c.mask.labels.data) {
                const auto it = source.label_map.find(v);
                v = it == source.label_map.end() ? 0 : static_cast<uint8_t>(organ_label(it->second));
            }
        }
        c.mask.class_count = kOrganCount;
        for (auto v : c.mask.labels.data) {
            if (v > kOrganCount) throw ConfigError("case '" + path.string() + "' has labels outside 0..6; set label_map");
        }
        out.push_back(subsample_z(c, z_stride));
    }
    if (out.empty()) throw ConfigError("data source '" + source.name + "' has no cases");
    return out;
}

training::SliceSet slices_of(const std::vector<const Case*>& cases) {
    training::SliceSet out;
    for (const auto* c : cases) {
        auto s = training::extract_slices(c->volume, c->mask, 1);
        std::move(s.begin(), s.end(), std::back_inserter(out));
    }
    return out;
}

Split plan_split(const ExperimentPlan& plan, size_t index, const std::vector<Case>& cases) {
    std::vector<std::string> ids;
    for (const auto& c : cases) ids.push_back(c.volume.patient_id);
    return split_patients(ids, plan.train_split, plan.val_split, derive_seed(plan.seed, 0xD0 + index));
}

// Selection -------------------------------------------------------------------

Selection select_best_binaries(const std::vector<Candidate>& candidates) {
    Selection sel;
    std::set<Organ> organs;
    for (const auto& c : candidates) organs.insert(c.organ);
    for (auto organ : kAllOrgans) {
        if (!organs.count(organ)) throw ConfigError("no binary candidate for organ '" + std::string(organ_name(organ)) + "'");
    }
    for (auto organ : kAllOrgans) {
        const Candidate* best = nullptr;
        for (const auto& c : candidates) {
            if (c.organ != organ) continue;
            if (!best || c.best_val_loss < best->best_val_loss ||
                (c.best_val_loss == best->best_val_loss && c.backbone < best->backbone)) {
                if (best && c.best_val_loss == best->best_val_loss) {
                    sel.report.push_back("tie for " + std::string(organ_name(organ)) + ": " +
                                         std::string(models::backbone_name(c.backbone)) + " preferred over " +
                                         std::string(models::backbone_name(best->backbone)));
                }
                best = &c;
            } else if (c.best_val_loss == best->best_val_loss) {
                sel.report.push_back("tie for " + std::string(organ_name(organ)) + ": " +
                                     std::string(models::backbone_name(best->backbone)) + " preferred over " +
                                     std::string(models::backbone_name(c.backbone)));
            }
        }
        sel.best[organ] = *best;
        std::ostringstream line;
        line << organ_name(organ) << ": " << models::backbone_name(best->backbone) << " (val loss "
             << best->best_val_loss << ")";
        sel.report.push_back(line.str());
    }
    for (const auto& line : sel.report) {
        if (line.rfind("tie", 0) == 0) log::info(line);
    }
    return sel;
}

// Results tables ----------------------------------------------------------------

const ResultRow& ResultsTable::row(const std::string& method) const {
    for (const auto& r : rows) {
        if (r.method == method) return r;
    }
    throw ArgumentError("no result row for '" + method + "'");
}

double ResultsTable::class_dice(const std::string& method, Organ organ) const {
    for (const auto& r : per_class) {
        if (r.method == method && r.organ == organ) return r.dice;
    }
    throw ArgumentError("no per-class row for '" + method + "'");
}

namespace {

std::string fmt(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

void write_atomic(const fs::path& path, const std::string& content) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    const auto tmp = fs::path(path.string() + ".tmp");
    {
        std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
        if (!f) throw IoError("cannot write '" + tmp.string() + "'");
        f << content;
        if (!f) throw IoError("write failed for '" + tmp.string() + "'");
    }
    fs::rename(tmp, path);
}

std::vector<std::vector<std::string>> read_csv(const fs::path& path) {
    std::ifstream f(path);
    if (!f) throw IoError("cannot open '" + path.string() + "'");
    std::vector<std::vector<std::string>> rows;
    std::string line;
    while (std::getline(f, line)) {
        if (line.empty()) continue;
        std::vector<std::string> cells;
        std::stringstream ss(line);
        std::string cell;
        while (std::getline(ss, cell, ',')) cells.push_back(cell);
        rows.push_back(std::move(cells));
    }
    return rows;
}

}  // namespace

void write_table_csv(const fs::path& path, const ResultsTable& table) {
    std::string out = "method,dice,precision,recall,hd95_mm\n";
    for (const auto& r : table.rows) {
        out += r.method + "," + fmt(r.dice) + "," + fmt(r.precision) + "," + fmt(r.recall) + "," + fmt(r.hd95_mm) + "\n";
    }
    write_atomic(path, out);
}

ResultsTable read_table_csv(const fs::path& path, const std::string& experiment) {
    const auto rows = read_csv(path);
    if (rows.empty() || rows.front() != std::vector<std::string>{"method", "dice", "precision", "recall", "hd95_mm"}) {
        throw IoError("'" + path.string() + "' is not a results table");
    }
    ResultsTable t;
    t.experiment = experiment;
    for (size_t i = 1; i < rows.size(); ++i) {
        if (rows[i].size() != 5) throw IoError("malformed row in '" + path.string() + "'");
        t.rows.push_back({rows[i][0], std::stod(rows[i][1]), std::stod(rows[i][2]), std::stod(rows[i][3]),
                          std::stod(rows[i][4])});
    }
    return t;
}

void write_per_class_csv(const fs::path& path, const ResultsTable& table) {
    std::string out = "method,organ,dice,precision,recall,hd95_mm\n";
    for (const auto& r : table.per_class) {
        out += r.method + "," + std::string(organ_name(r.organ)) + "," + fmt(r.dice) + "," + fmt(r.precision) + "," +
               fmt(r.recall) + "," + fmt(r.hd95_mm) + "\n";
    }
    write_atomic(path, out);
}

std::vector<ClassRow> read_per_class_csv(const fs::path& path) {
    const auto rows = read_csv(path);
    if (rows.empty() || rows.front().size() != 6) throw IoError("'" + path.string() + "' is not a per-class table");
    std::vector<ClassRow> out;
    for (size_t i = 1; i < rows.size(); ++i) {
        if (rows[i].size() != 6) throw IoError("malformed row in '" + path.string() + "'");
        out.push_back({rows[i][0], organ_from_name(rows[i][1]), std::stod(rows[i][2]), std::stod(rows[i][3]),
                       std::stod(rows[i][4]), std::stod(rows[i][5])});
    }
    return out;
}

std::string format_table(const ResultsTable& table) {
    std::ostringstream out;
    char line[160];
    std::snprintf(line, sizeof(line), "%-22s %8s %10s %8s %10s\n", "Method", "DICE", "PRECISION", "RECALL", "HD95 (mm)");
    out << table.experiment << "\n" << line;
    for (const auto& r : table.rows) {
        std::snprintf(line, sizeof(line), "%-22s %8.3f %10.3f %8.3f %10.3f\n", r.method.c_str(), r.dice, r.precision,
                      r.recall, r.hd95_mm);
        out << line;
    }
    return out.str();
}

// Running -----------------------------------------------------------------------

namespace {

struct Partitioned {
    std::vector<Case> cases;
    Split split;
};

struct SourceData {
    std::map<std::string, Partitioned> by_source;

    std::vector<const Case*> pick(const std::string& source, const std::vector<std::string>& ids) const {
        std::vector<const Case*> out;
        const auto& p = by_source.at(source);
        for (const auto& id : ids) {
            for (const auto& c : p.cases) {
                if (c.volume.patient_id == id) out.push_back(&c);
            }
        }
        return out;
    }
};

SourceData load_data(const ExperimentPlan& plan, std::optional<std::set<std::string>> only = std::nullopt) {
    SourceData d;
    for (size_t i = 0; i < plan.sources.size(); ++i) {
        const auto& s = plan.sources[i];
        if (only && !only->count(s.name)) continue;
        Partitioned p;
        p.cases = load_source(s, plan.work_dir, plan.z_stride);
        p.split = plan_split(plan, i, p.cases);
        d.by_source[s.name] = std::move(p);
    }
    return d;
}

// Everything that determines a trained binary besides organ and backbone.
nlohmann::json pool_key(const ExperimentPlan& plan, const DataSource& source, const Split& split) {
    return {{"source", source_json(source)},
            {"train", split.train},
            {"val", split.val},
            {"z_stride", plan.z_stride},
            {"width", plan.width},
            {"seed", plan.seed}};
}

struct TrainedPool {
    std::vector<Candidate> candidates;
};

std::string model_seed_salt(Organ organ, Backbone b) {
    return std::string(organ_name(organ)) + "/" + std::string(models::backbone_name(b));
}

uint64_t name_seed(uint64_t seed, const std::string& name) {
    uint64_t h = 1469598103934665603ull;
    for (unsigned char ch : name) h = (h ^ ch) * 1099511628211ull;
    return derive_seed(seed, h);
}

// Trains (or reuses from the work directory) one binary per organ and backbone.
std::vector<Candidate> ensure_binaries(const ExperimentPlan& plan, const SourceData& data, const std::string& source,
                                       const std::vector<Organ>& organs) {
    const auto& part = data.by_source.at(source);
    const auto key = pool_key(plan, source_named(plan, source), part.split);
    const auto dir = plan.work_dir / "binaries" / training::json_digest(key).substr(0, 16);
    std::optional<training::SliceSet> train, val;
    std::vector<Candidate> out;
    for (auto organ : organs) {
        for (auto backbone : plan.backbones) {
            auto cfg = plan.binary_training;
            cfg.seed = name_seed(plan.seed, model_seed_salt(organ, backbone));
            const auto expected = training::json_digest({{"train", cfg.to_json()}, {"pool", key}});
            const auto stem = std::string(organ_name(organ)) + "_" + std::string(models::backbone_name(backbone));
            const auto path = dir / (stem + ".ck");
            Candidate cand{organ, backbone, 0.0, path, source};
            if (fs::exists(path)) {
                try {
                    const auto ck = models::read_checkpoint(path);
                    const auto meta = models::training_meta(ck);
                    if (meta.config_digest == expected) {
                        cand.best_val_loss = meta.best_val_loss;
                        out.push_back(cand);
                        continue;
                    }
                } catch (const std::exception& e) {
                    log::warn("ignoring cached binary ", path.string(), ": ", e.what());
                }
            }
            if (!train) {
                train = slices_of(data.pick(source, part.split.train));
                val = slices_of(data.pick(source, part.split.val));
            }
            log::info("training binary ", stem, " on source ", source, " (", train->size(), " slices)");
            const auto log_path = dir / (stem + ".csv");
            fs::create_directories(dir);
            fs::remove(log_path);
            auto trained = training::train_binary(organ, backbone, *train, *val, cfg, plan.width, log_path);
            trained.model.source_dataset = source;
            models::TrainingMeta meta = models::training_meta(trained.checkpoint);
            meta.config_digest = expected;
            auto ck = models::save_checkpoint(trained.model, meta);
            models::write_checkpoint(path, ck);
            cand.best_val_loss = meta.best_val_loss;
            out.push_back(cand);
        }
    }
    return out;
}

fs::path ensure_multiclass(const ExperimentPlan& plan, const SourceData& data, const std::string& source,
                           Backbone backbone) {
    const auto& part = data.by_source.at(source);
    const auto key = pool_key(plan, source_named(plan, source), part.split);
    const auto dir = plan.work_dir / "multiclass" / training::json_digest(key).substr(0, 16);
    auto cfg = plan.multiclass_training;
    cfg.seed = name_seed(plan.seed, "multiclass/" + std::string(models::backbone_name(backbone)));
    const auto expected = training::json_digest({{"train", cfg.to_json()}, {"pool", key}});
    const auto stem = "multiclass_" + std::string(models::backbone_name(backbone));
    const auto path = dir / (stem + ".ck");
    if (fs::exists(path)) {
        try {
            if (models::training_meta(models::read_checkpoint(path)).config_digest == expected) return path;
        } catch (const std::exception& e) {
            log::warn("ignoring cached model ", path.string(), ": ", e.what());
        }
    }
    const auto train = slices_of(data.pick(source, part.split.train));
    const auto val = slices_of(data.pick(source, part.split.val));
    log::info("training ", stem, " (", train.size(), " slices)");
    fs::create_directories(dir);
    const auto log_path = dir / (stem + ".csv");
    fs::remove(log_path);
    auto trained = training::train_multiclass(backbone, train, val, cfg, plan.width, log_path);
    trained.model.source_dataset = source;
    auto meta = models::training_meta(trained.checkpoint);
    meta.config_digest = expected;
    models::write_checkpoint(path, models::save_checkpoint(trained.model, meta));
    return path;
}

ensembles::Branch load_branch(const fs::path& path) {
    const auto ck = models::read_checkpoint(path);
    return {models::load_checkpoint(ck), ck.digest};
}

void add_report_rows(ResultsTable& table, const std::string& method, const metrics::MetricsReport& r) {
    table.rows.push_back({method, r.macro_dsc, r.macro_precision, r.macro_recall, r.macro_hd95});
    for (const auto& [organ, m] : r.per_class) {
        if (!m.present_in_gt) continue;
        table.per_class.push_back({method, organ, m.dsc, m.precision, m.recall, m.hd95_mm.value_or(r.hd95_penalty_mm)});
    }
}

LabelMask predict_multiclass_volume(models::SegmentationModel& model, const CtVolume& volume) {
    const auto& v = volume.voxels;
    LabelMask out;
    out.class_count = static_cast<int>(model.out_channels() - 1);
    out.labels = Grid3<uint8_t>(v.depth, v.rows, v.cols);
    for (int64_t z = 0; z < v.depth; ++z) {
        const auto crop = preproc::center_crop(v.slice(z));
        const auto labels = models::forward_logits(model, models::preprocess(model, crop)).argmax(0).to(torch::kUInt8);
        Image2D<uint8_t> img(crop.rows, crop.cols);
        std::copy_n(labels.contiguous().data_ptr<uint8_t>(), img.size(), img.data.begin());
        out.labels.set_slice(z, preproc::uncrop(img, v.rows, v.cols));
    }
    return out;
}

struct EnsembleStage {
    std::vector<std::unique_ptr<ensembles::EnsembleModel>> models;
    std::vector<std::string> names;
};

// Trains every planned ensemble over `branches` and evaluates them, with the
// argmax ensemble first, on the test cases.
void run_ensembles(const ExperimentPlan& plan, std::vector<ensembles::Branch>& branches,
                   const std::vector<const Case*>& fit_cases, const std::vector<const Case*>& val_cases,
                   const std::vector<const Case*>& test_cases, ExperimentResult& result) {
    const auto out_dir = plan.output_dir;
    EnsembleStage stage;
    stage.models.push_back(ensembles::make_ensemble(Strategy::Argmax, branches, kOrganCount, plan.threshold));
    stage.names.push_back(method_name(Strategy::Argmax));

    const bool trunks = std::find(plan.strategies.begin(), plan.strategies.end(), Strategy::LayerFusion) !=
                        plan.strategies.end();
    if (!plan.strategies.empty()) {
        log::info("caching branch outputs for ", fit_cases.size(), " training and ", val_cases.size(),
                  " validation patients");
        const auto train_data = ensembles::build_ensemble_data(branches, slices_of(fit_cases), kOrganCount, trunks);
        const auto val_data = ensembles::build_ensemble_data(branches, slices_of(val_cases), kOrganCount, trunks);
        for (auto strategy : plan.strategies) {
            if (strategy == Strategy::Argmax) continue;
            const auto name = std::string(ensembles::strategy_name(strategy));
            const auto seed = name_seed(plan.seed, "ensemble/" + name);
            auto e = ensembles::make_ensemble(strategy, branches, kOrganCount, plan.threshold, seed, plan.width);
            auto cfg = plan.ensemble_training;
            cfg.seed = seed;
            const auto log_path = out_dir / "logs" / (name + ".csv");
            fs::create_directories(log_path.parent_path());
            fs::remove(log_path);
            log::info("training ", name, " ensemble");
            const auto fit = ensembles::train_ensemble(*e, train_data, val_data, cfg, log_path);
            models::TrainingMeta meta{static_cast<int>(fit.history.size()), fit.best_smoothed_val, cfg.seed,
                                      training::json_digest(cfg.to_json())};
            models::write_checkpoint(out_dir / "ensembles" / (name + ".ck"), ensembles::save_ensemble(*e, branches, meta));
            stage.names.push_back(method_name(strategy));
            stage.models.push_back(std::move(e));
        }
    }

    std::vector<ensembles::EnsembleModel*> ptrs;
    for (auto& m : stage.models) ptrs.push_back(m.get());
    std::vector<std::vector<metrics::MetricsReport>> reports(ptrs.size());
    std::vector<std::vector<LabelMask>> predictions(ptrs.size());
    for (const auto* c : test_cases) {
        auto preds = ensembles::predict_volume(ptrs, branches, c->volume);
        for (size_t k = 0; k < preds.size(); ++k) {
            reports[k].push_back(metrics::evaluate_prediction(preds[k].labels, c->mask, c->volume.spacing));
            predictions[k].push_back(std::move(preds[k].labels));
        }
    }
    size_t best = 0;
    for (size_t k = 0; k < ptrs.size(); ++k) {
        const auto agg = metrics::aggregate(reports[k]);
        add_report_rows(result.table, stage.names[k], agg);
        if (agg.macro_dsc > result.table.rows[best].dice) best = k;
    }
    result.overlay_method = stage.names[best];
    for (size_t i = 0; i < test_cases.size(); ++i) {
        result.overlays.push_back({test_cases[i]->volume, test_cases[i]->mask, predictions[best][i]});
    }
}

std::vector<std::string> concat(const std::vector<std::string>& a, const std::vector<std::string>& b) {
    auto out = a;
    out.insert(out.end(), b.begin(), b.end());
    return out;
}

}  // namespace

ExperimentResult run_baseline(const ExperimentPlan& plan) {
    plan.validate();
    ExperimentResult result;
    result.plan = plan;
    result.table.experiment = std::string(experiment_name(plan.id));
    const auto& source = plan.sources.front().name;
    const auto data = load_data(plan, std::set<std::string>{source});
    const auto& split = data.by_source.at(source).split;
    result.split = split;

    const auto test = data.pick(source, split.test);
    for (auto backbone : plan.backbones) {
        auto model = load_branch(ensure_multiclass(plan, data, source, backbone)).model;
        std::vector<metrics::MetricsReport> reports;
        for (const auto* c : test) {
            reports.push_back(metrics::evaluate_prediction(predict_multiclass_volume(model, c->volume), c->mask,
                                                           c->volume.spacing));
        }
        add_report_rows(result.table, display_name(backbone), metrics::aggregate(reports));
    }

    const auto candidates = ensure_binaries(plan, data, source, {kAllOrgans.begin(), kAllOrgans.end()});
    result.selection = select_best_binaries(candidates);
    std::vector<ensembles::Branch> branches;
    for (auto organ : kAllOrgans) branches.push_back(load_branch(result.selection.best.at(organ).checkpoint));
    auto baseline_plan = plan;
    baseline_plan.strategies.clear();
    run_ensembles(baseline_plan, branches, {}, {}, test, result);
    return result;
}

ExperimentResult run_experiment(const ExperimentPlan& plan) {
    plan.validate();
    if (plan.id == ExperimentId::Baseline) return run_baseline(plan);
    ExperimentResult result;
    result.plan = plan;
    result.table.experiment = std::string(experiment_name(plan.id));

    const bool exp3 = plan.id == ExperimentId::Exp3;
    const auto primary = plan.sources.front().name;
    std::map<Organ, std::string> organ_source;
    for (auto organ : kAllOrgans) organ_source[organ] = exp3 ? plan.source_partition.at(organ) : primary;
    std::set<std::string> used;
    for (const auto& [organ, s] : organ_source) used.insert(s);
    const auto data = load_data(plan, used);

    std::vector<Candidate> candidates;
    for (const auto& s : used) {
        std::vector<Organ> organs;
        for (const auto& [organ, src] : organ_source) {
            if (src == s) organs.push_back(organ);
        }
        const auto c = ensure_binaries(plan, data, s, organs);
        candidates.insert(candidates.end(), c.begin(), c.end());
    }
    result.selection = select_best_binaries(candidates);

    std::vector<ensembles::Branch> branches;
    for (auto organ : kAllOrgans) {
        auto b = load_branch(result.selection.best.at(organ).checkpoint);
        if (b.model.source_dataset != organ_source.at(organ)) {
            throw IntegrityError("branch for " + std::string(organ_name(organ)) + " was trained on source '" +
                                 b.model.source_dataset + "', expected '" + organ_source.at(organ) + "'");
        }
        branches.push_back(std::move(b));
    }

    if (plan.id == ExperimentId::Exp2) {
        for (const auto& [organ, wanted] : plan.supplementary) {
            auto backbone = wanted;
            const auto chosen = result.selection.best.at(organ).backbone;
            if (backbone == chosen) {
                const Candidate* next = nullptr;
                for (const auto& c : candidates) {
                    if (c.organ != organ || c.backbone == chosen) continue;
                    if (!next || c.best_val_loss < next->best_val_loss) next = &c;
                }
                if (!next) throw ConfigError("no alternative backbone for the supplementary branch");
                backbone = next->backbone;
                result.selection.report.push_back("supplementary " + std::string(organ_name(organ)) + ": " +
                                                  std::string(models::backbone_name(wanted)) +
                                                  " is already selected, using " +
                                                  std::string(models::backbone_name(backbone)));
            } else {
                result.selection.report.push_back("supplementary " + std::string(organ_name(organ)) + ": " +
                                                  std::string(models::backbone_name(backbone)));
            }
            for (const auto& c : candidates) {
                if (c.organ == organ && c.backbone == backbone) branches.push_back(load_branch(c.checkpoint));
            }
        }
    }
    if (plan.id == ExperimentId::Exp4) {
        branches.push_back(load_branch(ensure_multiclass(plan, data, primary, plan.multiclass_branch)));
        result.selection.report.push_back("multiclass branch: " + std::string(models::backbone_name(plan.multiclass_branch)));
    }

    std::vector<const Case*> fit_cases, val_cases, test_cases;
    for (const auto& s : used) {
        const auto& split = data.by_source.at(s).split;
        auto fit_ids = split.train;
        if (plan.train_fraction < 1.0) fit_ids = subsample_patients(split.train, plan.train_fraction, derive_seed(plan.seed, 5));
        result.ensemble_train_patients = concat(result.ensemble_train_patients, fit_ids);
        result.split.train = concat(result.split.train, split.train);
        result.split.val = concat(result.split.val, split.val);
        result.split.test = concat(result.split.test, split.test);
        for (auto* c : data.pick(s, fit_ids)) fit_cases.push_back(c);
        for (auto* c : data.pick(s, split.val)) val_cases.push_back(c);
        for (auto* c : data.pick(s, split.test)) test_cases.push_back(c);
    }
    run_ensembles(plan, branches, fit_cases, val_cases, test_cases, result);
    return result;
}

ExperimentResult run_plan(const ExperimentPlan& plan) {
    auto result = plan.id == ExperimentId::Baseline ? run_baseline(plan) : run_experiment(plan);
    emit_report(result, plan.output_dir);
    return result;
}

// Reporting -------------------------------------------------------------------

std::vector<int64_t> overlay_slice_indices(const LabelMask& truth, int count) {
    std::vector<int64_t> fg;
    const auto& l = truth.labels;
    const auto plane = static_cast<size_t>(l.rows * l.cols);
    for (int64_t z = 0; z < l.depth; ++z) {
        const auto begin = l.data.begin() + static_cast<std::ptrdiff_t>(static_cast<size_t>(z) * plane);
        if (std::any_of(begin, begin + static_cast<std::ptrdiff_t>(plane), [](uint8_t v) { return v != 0; })) fg.push_back(z);
    }
    if (count <= 0 || fg.empty()) return {};
    if (static_cast<int>(fg.size()) <= count) return fg;
    std::vector<int64_t> out;
    for (int i = 0; i < count; ++i) {
        const double pos = count == 1 ? (static_cast<double>(fg.size()) - 1.0) / 2.0
                                      : i * (static_cast<double>(fg.size()) - 1.0) / (count - 1);
        out.push_back(fg[static_cast<size_t>(std::llround(pos))]);
    }
    return out;
}

namespace {

void write_overlay(const fs::path& path, const OverlayCase& c, int64_t z) {
    const auto& v = c.volume.voxels;
    const WindowSpec window{400.0, 40.0};
    cv::Mat gray(static_cast<int>(v.rows), static_cast<int>(v.cols), CV_8UC1);
    for (int64_t r = 0; r < v.rows; ++r) {
        for (int64_t col = 0; col < v.cols; ++col) {
            gray.at<uint8_t>(static_cast<int>(r), static_cast<int>(col)) =
                static_cast<uint8_t>(std::lround(255.0 * preproc::window_value(v.at(z, r, col), window)));
        }
    }
    cv::Mat image;
    cv::cvtColor(gray, image, cv::COLOR_GRAY2BGR);
    for (int label = 1; label <= kOrganCount; ++label) {
        for (const auto* mask : {&c.truth, &c.prediction}) {
            cv::Mat bin(static_cast<int>(v.rows), static_cast<int>(v.cols), CV_8UC1);
            for (int64_t r = 0; r < v.rows; ++r) {
                for (int64_t col = 0; col < v.cols; ++col) {
                    bin.at<uint8_t>(static_cast<int>(r), static_cast<int>(col)) = mask->labels.at(z, r, col) == label ? 255 : 0;
                }
            }
            std::vector<std::vector<cv::Point>> contours;
            cv::findContours(bin, contours, cv::RETR_EXTERNAL, cv::CHAIN_APPROX_NONE);
            // Ground truth green, prediction red.
            cv::drawContours(image, contours, -1, mask == &c.truth ? cv::Scalar(0, 200, 0) : cv::Scalar(0, 0, 255), 1);
        }
    }
    const auto tmp = fs::path(path.string() + ".tmp.png");
    if (!cv::imwrite(tmp.string(), image)) throw IoError("cannot write overlay '" + tmp.string() + "'");
    fs::rename(tmp, path);
}

}  // namespace

std::vector<fs::path> emit_report(const ExperimentResult& result, const fs::path& out_dir) {
    std::error_code ec;
    fs::create_directories(out_dir, ec);
    if (ec || !fs::is_directory(out_dir)) throw IoError("cannot create report directory '" + out_dir.string() + "'");
    const auto id = lower(result.table.experiment.empty() ? experiment_name(result.plan.id) : result.table.experiment);
    std::vector<fs::path> written;

    const auto summary = out_dir / (id + "_summary.csv");
    write_table_csv(summary, result.table);
    written.push_back(summary);
    const auto per_class = out_dir / (id + "_per_class.csv");
    write_per_class_csv(per_class, result.table);
    written.push_back(per_class);

    std::ostringstream text;
    text << format_table(result.table) << "\nseed: " << result.plan.seed << "\nconfig digest: " << result.plan.digest()
         << "\n\nbranch selection:\n";
    for (const auto& line : result.selection.report) text << "  " << line << "\n";
    auto ids = [](const std::vector<std::string>& v) {
        std::string s;
        for (const auto& x : v) s += (s.empty() ? "" : " ") + x;
        return s;
    };
    text << "\nsplit:\n  train: " << ids(result.split.train) << "\n  val: " << ids(result.split.val)
         << "\n  test: " << ids(result.split.test) << "\n";
    if (!result.ensemble_train_patients.empty()) text << "  ensemble train: " << ids(result.ensemble_train_patients) << "\n";
    if (!result.overlay_method.empty()) text << "\noverlays show: " << result.overlay_method << "\n";
    const auto txt = out_dir / (id + "_summary.txt");
    write_atomic(txt, text.str());
    written.push_back(txt);

    const auto cfg = out_dir / "resolved_config.json";
    write_atomic(cfg, result.plan.to_json().dump(2) + "\n");
    written.push_back(cfg);
    const auto dig = out_dir / "config.sha256";
    write_atomic(dig, result.plan.digest() + "\n");
    written.push_back(dig);

    const auto overlay_dir = out_dir / "overlays";
    fs::create_directories(overlay_dir);
    std::set<fs::path> fresh;
    for (const auto& c : result.overlays) {
        for (auto z : overlay_slice_indices(c.truth, result.plan.overlay_slices)) {
            char name[128];
            std::snprintf(name, sizeof(name), "%s_slice%03lld.png", c.volume.patient_id.c_str(), static_cast<long long>(z));
            const auto path = overlay_dir / name;
            write_overlay(path, c, z);
            fresh.insert(path);
            written.push_back(path);
        }
    }
    for (const auto& entry : fs::directory_iterator(overlay_dir)) {
        if (entry.path().extension() == ".png" && !fresh.count(entry.path())) fs::remove(entry.path());
    }
    return written;
}

}  // namespace segens::experiments
