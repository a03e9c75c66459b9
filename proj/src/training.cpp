#include "segens/training.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <numeric>
#include <random>

#include "segens/log.hpp"

namespace segens::training {

namespace fs = std::filesystem;

LossReport composite_loss(const torch::Tensor& logits, const torch::Tensor& target, HeadKind head, double smoothing) {
    if (logits.dim() != 4 || logits.sizes() != target.sizes()) {
        throw ArgumentError("composite_loss: logits and target must share a (B, K, H, W) shape");
    }
    if (head == HeadKind::Binary && logits.size(1) != 1) throw ArgumentError("composite_loss: binary head needs K = 1");
    if (head == HeadKind::Multiclass && logits.size(1) < 2) {
        throw ArgumentError("composite_loss: multiclass head needs K >= 2");
    }
    const auto t = target.to(logits.scalar_type());

    torch::Tensor probs;
    torch::Tensor ce;
    if (head == HeadKind::Multiclass) {
        const auto log_p = torch::log_softmax(logits, 1);
        probs = log_p.exp();
        ce = -(t * log_p).sum(1).mean();
    } else {
        probs = torch::sigmoid(logits);
        ce = torch::binary_cross_entropy_with_logits(logits, t);
    }

    auto inter = (probs * t).sum({0, 2, 3});
    auto denom = probs.sum({0, 2, 3}) + t.sum({0, 2, 3});
    if (head == HeadKind::Multiclass) {
        inter = inter.slice(0, 1);
        denom = denom.slice(0, 1);
    }
    const auto soft_dice = (2.0 * inter + smoothing) / (denom + smoothing);
    LossReport r;
    r.dice_term = 1.0 - soft_dice.mean();
    r.ce_term = ce;
    r.total = 0.5 * r.dice_term + 0.5 * r.ce_term;
    return r;
}

// Config ----------------------------------------------------------------------

void TrainConfig::validate() const {
    auto rate = [](double v, const char* name) {
        if (!(v > 0.0 && v <= 1.0)) throw ConfigError(std::string(name) + " must lie in (0, 1]");
    };
    auto positive = [](int64_t v, const char* name) {
        if (v < 1) throw ConfigError(std::string(name) + " must be a positive integer");
    };
    rate(initial_lr, "initial_lr");
    rate(lr_decay, "lr_decay");
    rate(plateau_factor, "plateau_factor");
    positive(plateau_patience, "plateau_patience");
    positive(moving_average_window, "moving_average_window");
    positive(early_stop_patience, "early_stop_patience");
    positive(max_epochs, "max_epochs");
    positive(batch_size, "batch_size");
    if (samples_per_epoch < 0) throw ConfigError("samples_per_epoch must be >= 0");
    rate(augmentation.probability, "augmentation.probability");
}

nlohmann::json TrainConfig::to_json() const {
    return {{"initial_lr", initial_lr},
            {"lr_decay", lr_decay},
            {"plateau_factor", plateau_factor},
            {"plateau_patience", plateau_patience},
            {"moving_average_window", moving_average_window},
            {"early_stop_patience", early_stop_patience},
            {"max_epochs", max_epochs},
            {"batch_size", batch_size},
            {"seed", seed},
            {"augment", augment},
            {"samples_per_epoch", samples_per_epoch},
            {"augmentation",
             {{"probability", augmentation.probability},
              {"max_rotation_deg", augmentation.max_rotation_deg},
              {"grid_steps", augmentation.grid_steps},
              {"grid_limit", augmentation.grid_limit},
              {"elastic_alpha", augmentation.elastic_alpha},
              {"elastic_sigma", augmentation.elastic_sigma}}}};
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
    TrainConfig c;
    const auto defaults = c.to_json();
    for (const auto& [key, _] : j.items()) {
        if (!defaults.contains(key)) throw ConfigError("unknown training option '" + key + "'");
    }
    try {
        c.initial_lr = j.value("initial_lr", c.initial_lr);
        c.lr_decay = j.value("lr_decay", c.lr_decay);
        c.plateau_factor = j.value("plateau_factor", c.plateau_factor);
        c.plateau_patience = j.value("plateau_patience", c.plateau_patience);
        c.moving_average_window = j.value("moving_average_window", c.moving_average_window);
        c.early_stop_patience = j.value("early_stop_patience", c.early_stop_patience);
        c.max_epochs = j.value("max_epochs", c.max_epochs);
        c.batch_size = j.value("batch_size", c.batch_size);
        c.seed = j.value("seed", c.seed);
        c.augment = j.value("augment", c.augment);
        c.samples_per_epoch = j.value("samples_per_epoch", c.samples_per_epoch);
        if (j.contains("augmentation")) {
            const auto& a = j.at("augmentation");
            auto& g = c.augmentation;
            g.probability = a.value("probability", g.probability);
            g.max_rotation_deg = a.value("max_rotation_deg", g.max_rotation_deg);
            g.grid_steps = a.value("grid_steps", g.grid_steps);
            g.grid_limit = a.value("grid_limit", g.grid_limit);
            g.elastic_alpha = a.value("elastic_alpha", g.elastic_alpha);
            g.elastic_sigma = a.value("elastic_sigma", g.elastic_sigma);
        }
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("bad training option: ") + e.what());
    }
    c.validate();
    return c;
}

std::string json_digest(const nlohmann::json& j) { return models::sha256_hex(j.dump()); }

// Schedule --------------------------------------------------------------------

LrState LrState::from(const TrainConfig& config) {
    LrState s;
    s.initial_lr = config.initial_lr;
    s.decay = config.lr_decay;
    s.plateau_factor = config.plateau_factor;
    s.plateau_patience = config.plateau_patience;
    return s;
}

double lr_schedule_step(LrState& state, int epoch, double smoothed_val_loss) {
    state.loss_history.push_back(smoothed_val_loss);
    if (!state.best || smoothed_val_loss < *state.best) {
        state.best = smoothed_val_loss;
        state.since_best = 0;
    } else if (++state.since_best >= state.plateau_patience) {
        ++state.reductions;
        state.since_best = 0;
    }
    const double lr = state.initial_lr * std::pow(state.decay, epoch) * std::pow(state.plateau_factor, state.reductions);
    state.lr_history.push_back(lr);
    return lr;
}

bool early_stop_check(const std::vector<double>& history, int patience) {
    if (history.empty()) return false;
    const auto best = std::min_element(history.begin(), history.end());
    const auto age = std::distance(best, history.end()) - 1;
    return age >= patience;
}

double moving_average(const std::vector<double>& values, int window) {
    if (values.empty()) return 0.0;
    const auto n = std::min<size_t>(values.size(), static_cast<size_t>(std::max(window, 1)));
    return std::accumulate(values.end() - static_cast<std::ptrdiff_t>(n), values.end(), 0.0) / static_cast<double>(n);
}

// Data ------------------------------------------------------------------------

SliceSet extract_slices(const CtVolume& volume, const LabelMask& mask, int64_t z_stride) {
    if (z_stride < 1) throw ArgumentError("z_stride must be >= 1");
    if (volume.voxels.shape() != mask.labels.shape()) throw ArgumentError("volume and mask shapes differ");
    SliceSet out;
    for (int64_t z = 0; z < volume.voxels.depth; z += z_stride) {
        SliceSample s;
        s.hu = preproc::center_crop(volume.voxels.slice(z));
        s.labels = preproc::center_crop(mask.labels.slice(z));
        s.patient_id = volume.patient_id;
        s.slice_index = z;
        out.push_back(std::move(s));
    }
    return out;
}

std::pair<torch::Tensor, Image2D<uint8_t>> make_input(const models::SegmentationModel& model,
                                                       const SliceSample& sample,
                                                       const std::optional<preproc::AugmentParams>& aug) {
    const auto channels = static_cast<int64_t>(model.windows.size());
    auto input = torch::empty({channels, sample.hu.rows, sample.hu.cols});
    Image2D<uint8_t> labels = sample.labels;
    for (int64_t c = 0; c < channels; ++c) {
        Slice2D slice{preproc::apply_window(sample.hu, model.windows[static_cast<size_t>(c)]), sample.patient_id,
                      sample.slice_index};
        if (aug) {
            auto [img, lab] = preproc::augment_with(slice, sample.labels, *aug);
            slice = std::move(img);
            if (c == 0) labels = std::move(lab);
        }
        std::copy(slice.pixels.data.begin(), slice.pixels.data.end(), input[c].data_ptr<float>());
    }
    return {input, labels};
}

// Loop ------------------------------------------------------------------------

namespace {

struct DiceCounts {
    std::vector<double> inter, pred, truth;

    void add(const torch::Tensor& logits, const torch::Tensor& target, HeadKind head) {
        torch::Tensor hard;
        if (head == HeadKind::Multiclass) {
            const auto k = logits.size(1);
            hard = torch::one_hot(logits.argmax(1), k).permute({0, 3, 1, 2}).to(torch::kFloat32).slice(1, 1);
        } else {
            hard = (logits >= 0).to(torch::kFloat32);
        }
        const auto t = head == HeadKind::Multiclass ? target.slice(1, 1) : target;
        const auto i = (hard * t).sum({0, 2, 3}).to(torch::kFloat64);
        const auto p = hard.sum({0, 2, 3}).to(torch::kFloat64);
        const auto g = t.sum({0, 2, 3}).to(torch::kFloat64);
        if (inter.empty()) {
            inter.assign(static_cast<size_t>(i.size(0)), 0.0);
            pred = truth = inter;
        }
        for (int64_t c = 0; c < i.size(0); ++c) {
            inter[static_cast<size_t>(c)] += i[c].item<double>();
            pred[static_cast<size_t>(c)] += p[c].item<double>();
            truth[static_cast<size_t>(c)] += g[c].item<double>();
        }
    }

    [[nodiscard]] double macro() const {
        double sum = 0.0;
        int n = 0;
        for (size_t c = 0; c < inter.size(); ++c) {
            if (truth[c] == 0.0) continue;
            sum += 2.0 * inter[c] / (pred[c] + truth[c]);
            ++n;
        }
        return n ? sum / n : 0.0;
    }
};

Example collate(const std::vector<Example>& items) {
    std::vector<torch::Tensor> in, tg;
    for (const auto& e : items) {
        in.push_back(e.input);
        tg.push_back(e.target);
    }
    return {torch::stack(in), torch::stack(tg)};
}

}  // namespace

void write_log_header(const fs::path& path) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw IoError("cannot write training log '" + path.string() + "'");
    f << "epoch,lr,train_total,val_total,val_dsc_macro\n";
}

FitResult fit(FitTask& task, const TrainConfig& config, const std::optional<fs::path>& log_path) {
    config.validate();
    if (task.train_size == 0) throw ArgumentError("training set is empty");
    if (task.val_size == 0) throw ArgumentError("validation set is empty");

    std::ofstream log;
    if (log_path) {
        if (!fs::exists(*log_path)) write_log_header(*log_path);
        log.open(*log_path, std::ios::app);
        if (!log) throw IoError("cannot append to training log '" + log_path->string() + "'");
        log << std::setprecision(10);
    }

    torch::optim::Adam optimizer(task.parameters,
                                 torch::optim::AdamOptions(config.initial_lr).betas({0.9, 0.999}));
    auto state = LrState::from(config);
    double lr = config.initial_lr;
    const auto batch = static_cast<size_t>(config.batch_size);
    const size_t per_epoch = config.samples_per_epoch > 0
                                 ? std::min(task.train_size, static_cast<size_t>(config.samples_per_epoch))
                                 : task.train_size;

    FitResult result;
    std::vector<double> val_losses, smoothed;
    models::NamedTensors best_state;

    for (int epoch = 0; epoch < config.max_epochs; ++epoch) {
        for (auto& group : optimizer.param_groups()) static_cast<torch::optim::AdamOptions&>(group.options()).lr(lr);

        std::vector<size_t> order(task.train_size);
        std::iota(order.begin(), order.end(), size_t{0});
        std::mt19937_64 rng(derive_seed(config.seed, static_cast<uint64_t>(epoch)));
        std::shuffle(order.begin(), order.end(), rng);
        order.resize(per_epoch);

        task.set_training(true);
        const uint64_t epoch_seed = derive_seed(config.seed ^ 0xA5A5A5A5ull, static_cast<uint64_t>(epoch));
        double train_sum = 0.0;
        for (size_t start = 0; start < order.size(); start += batch) {
            std::vector<Example> items;
            for (size_t k = start; k < std::min(order.size(), start + batch); ++k) {
                std::optional<uint64_t> aug;
                if (config.augment) aug = derive_seed(epoch_seed, order[k]);
                items.push_back(task.train_example(order[k], aug));
            }
            const auto b = collate(items);
            optimizer.zero_grad();
            auto loss = composite_loss(task.forward(b.input), b.target, task.head).total;
            loss.backward();
            optimizer.step();
            train_sum += loss.item<double>() * static_cast<double>(items.size());
        }

        task.set_training(false);
        double val_sum = 0.0;
        DiceCounts counts;
        {
            torch::NoGradGuard no_grad;
            for (size_t start = 0; start < task.val_size; start += batch) {
                std::vector<Example> items;
                for (size_t k = start; k < std::min(task.val_size, start + batch); ++k) items.push_back(task.val_example(k));
                const auto b = collate(items);
                const auto logits = task.forward(b.input);
                val_sum += composite_loss(logits, b.target, task.head).total.item<double>() *
                           static_cast<double>(items.size());
                counts.add(logits, b.target, task.head);
            }
        }

        EpochLog entry;
        entry.epoch = epoch;
        entry.lr = lr;
        entry.train_total = train_sum / static_cast<double>(order.size());
        entry.val_total = val_sum / static_cast<double>(task.val_size);
        val_losses.push_back(entry.val_total);
        entry.smoothed_val = moving_average(val_losses, config.moving_average_window);
        entry.val_dsc_macro = counts.macro();
        result.history.push_back(entry);
        smoothed.push_back(entry.smoothed_val);

        if (epoch == 0 || entry.smoothed_val < result.best_smoothed_val) {
            result.best_smoothed_val = entry.smoothed_val;
            result.best_epoch = epoch;
            best_state = task.snapshot();
        }
        if (log.is_open()) {
            log << entry.epoch << ',' << entry.lr << ',' << entry.train_total << ',' << entry.val_total << ','
                << entry.val_dsc_macro << '\n';
            log.flush();
        }
        log::debug("epoch ", epoch, " lr ", lr, " train ", entry.train_total, " val ", entry.val_total, " dsc ",
                   entry.val_dsc_macro);

        if (early_stop_check(smoothed, config.early_stop_patience)) {
            result.early_stopped = true;
            break;
        }
        lr = lr_schedule_step(state, epoch + 1, entry.smoothed_val);
    }

    task.restore(best_state);
    task.set_training(false);
    return result;
}

// Model training --------------------------------------------------------------

namespace {

models::NamedTensors clone_state(torch::nn::Module& module) {
    models::NamedTensors out;
    for (auto& [name, t] : models::module_state(module)) out.emplace_back(name, t.detach().clone());
    return out;
}

FitTask model_task(models::SegmentationModel& model, HeadKind head, const SliceSet& train, const SliceSet& val,
                   const TrainConfig& config, std::function<torch::Tensor(const Image2D<uint8_t>&)> encode) {
    FitTask task;
    auto net = model.net;
    task.parameters = net->parameters();
    task.forward = [net](const torch::Tensor& x) { return net->forward(x); };
    task.set_training = [net](bool on) { net->train(on); };
    task.snapshot = [net] { return clone_state(*net); };
    task.restore = [net](const models::NamedTensors& s) { models::load_module_state(*net, s); };
    task.head = head;
    task.train_size = train.size();
    task.val_size = val.size();
    const auto aug_cfg = config.augmentation;
    task.train_example = [&model, &train, encode, aug_cfg](size_t i, std::optional<uint64_t> seed) {
        std::optional<preproc::AugmentParams> params;
        if (seed) params = preproc::sample_augment_params(*seed, aug_cfg);
        auto [input, labels] = make_input(model, train[i], params);
        return Example{input, encode(labels)};
    };
    // Validation inputs never change, so they are built once.
    auto val_cache = std::make_shared<std::vector<Example>>();
    for (const auto& s : val) {
        auto [input, labels] = make_input(model, s, std::nullopt);
        val_cache->push_back({input, encode(labels)});
    }
    task.val_example = [val_cache](size_t i) { return (*val_cache)[i]; };
    return task;
}

torch::Tensor labels_tensor(const Image2D<uint8_t>& labels) {
    return torch::from_blob(const_cast<uint8_t*>(labels.data.data()), {labels.rows, labels.cols}, torch::kUInt8)
        .to(torch::kInt64);
}

TrainedModel finish(models::SegmentationModel model, const FitResult& result, const TrainConfig& config) {
    models::TrainingMeta meta;
    meta.epochs = static_cast<int>(result.history.size());
    meta.best_val_loss = result.best_smoothed_val;
    meta.seed = config.seed;
    meta.config_digest = json_digest(config.to_json());
    auto ck = models::save_checkpoint(model, meta);
    return {std::move(model), std::move(ck), result};
}

}  // namespace

TrainedModel train_binary(Organ organ, models::Backbone backbone, const SliceSet& train, const SliceSet& val,
                          const TrainConfig& config, double width, const std::optional<fs::path>& log_path) {
    config.validate();
    if (train.empty()) throw ArgumentError("train_binary: empty training set");
    if (val.empty()) throw ArgumentError("train_binary: empty validation set");
    torch::manual_seed(config.seed);
    auto model = models::make_binary_model(organ, backbone, width);
    const int label = organ_label(organ);
    auto encode = [label](const Image2D<uint8_t>& labels) {
        return labels_tensor(labels).eq(label).to(torch::kFloat32).unsqueeze(0);
    };
    auto task = model_task(model, HeadKind::Binary, train, val, config, encode);
    const auto result = fit(task, config, log_path);
    return finish(std::move(model), result, config);
}

TrainedModel train_multiclass(models::Backbone backbone, const SliceSet& train, const SliceSet& val,
                              const TrainConfig& config, double width, const std::optional<fs::path>& log_path) {
    config.validate();
    if (train.empty()) throw ArgumentError("train_multiclass: empty training set");
    if (val.empty()) throw ArgumentError("train_multiclass: empty validation set");
    torch::manual_seed(config.seed);
    auto model = models::make_multiclass_model(backbone, width);
    const auto classes = model.out_channels();
    auto encode = [classes](const Image2D<uint8_t>& labels) {
        return torch::one_hot(labels_tensor(labels), classes).permute({2, 0, 1}).to(torch::kFloat32);
    };
    auto task = model_task(model, HeadKind::Multiclass, train, val, config, encode);
    const auto result = fit(task, config, log_path);
    return finish(std::move(model), result, config);
}

}  // namespace segens::training
