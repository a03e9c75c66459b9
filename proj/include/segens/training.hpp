#ifndef SEGENS_TRAINING_HPP
#define SEGENS_TRAINING_HPP

#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>
#include <torch/torch.h>

#include "segens/checkpoint.hpp"
#include "segens/core.hpp"
#include "segens/models.hpp"
#include "segens/preprocessing.hpp"

namespace segens::training {

enum class HeadKind { Binary, Multilabel, Multiclass };

struct LossReport {
    torch::Tensor dice_term;
    torch::Tensor ce_term;
    torch::Tensor total;
};

/// 0.5 * (1 - soft Dice) + 0.5 * cross-entropy.
///
/// `logits` and `target` are (B, K, H, W). Binary and multilabel heads use a
/// per-channel sigmoid with binary CE; multiclass heads use softmax CE against
/// a one-hot target, and the Dice term skips channel 0 (background).
LossReport composite_loss(const torch::Tensor& logits, const torch::Tensor& target, HeadKind head,
                          double smoothing = 1.0);

struct TrainConfig {
    double initial_lr = 1e-3;
    double lr_decay = 0.97;
    double plateau_factor = 0.5;
    int plateau_patience = 5;
    int moving_average_window = 5;
    int early_stop_patience = 15;
    int max_epochs = 30;
    int batch_size = 8;
    uint64_t seed = 0;
    bool augment = true;
    preproc::AugmentConfig augmentation;
    // Training slices drawn per epoch; 0 means the whole training set.
    int64_t samples_per_epoch = 0;

    void validate() const;
    [[nodiscard]] nlohmann::json to_json() const;
    static TrainConfig from_json(const nlohmann::json& j);
};

struct LrState {
    double initial_lr = 1e-3;
    double decay = 0.97;
    double plateau_factor = 0.5;
    int plateau_patience = 5;
    int reductions = 0;
    int since_best = 0;
    std::optional<double> best;
    std::vector<double> lr_history;
    std::vector<double> loss_history;

    static LrState from(const TrainConfig& config);
};

/// Records `smoothed_val_loss` and returns initial_lr * decay^epoch *
/// factor^reductions, where a reduction is applied each time the loss has gone
/// `plateau_patience` observations without strictly improving on its best.
double lr_schedule_step(LrState& state, int epoch, double smoothed_val_loss);

/// True iff the best (first minimum) entry is at least `patience` entries old.
bool early_stop_check(const std::vector<double>& history, int patience);

/// Trailing mean over at most `window` values.
double moving_average(const std::vector<double>& values, int window);

// Slice data ----------------------------------------------------------------

/// One cropped axial slice with its labels.
struct SliceSample {
    Image2D<int16_t> hu;
    Image2D<uint8_t> labels;
    std::string patient_id;
    int64_t slice_index = 0;
};

using SliceSet = std::vector<SliceSample>;

/// Center-cropped slices z = 0, stride, 2*stride, ...
SliceSet extract_slices(const CtVolume& volume, const LabelMask& mask, int64_t z_stride = 1);

/// Stacks windowed slices through the model's windows, optionally augmented.
/// Returns (input (C, H, W), labels after augmentation).
std::pair<torch::Tensor, Image2D<uint8_t>> make_input(const models::SegmentationModel& model,
                                                       const SliceSample& sample,
                                                       const std::optional<preproc::AugmentParams>& aug);

// Generic loop ------------------------------------------------------------

struct Example {
    torch::Tensor input;   // (C, H, W)
    torch::Tensor target;  // (K, H, W) float
};

/// What `fit` needs to know about a trainable problem.
struct FitTask {
    std::vector<torch::Tensor> parameters;
    std::function<torch::Tensor(const torch::Tensor&)> forward;  // batched logits
    std::function<void(bool)> set_training;
    std::function<models::NamedTensors()> snapshot;
    std::function<void(const models::NamedTensors&)> restore;
    HeadKind head = HeadKind::Binary;
    size_t train_size = 0;
    size_t val_size = 0;
    // Augmentation seed is empty when augmentation is off.
    std::function<Example(size_t, std::optional<uint64_t>)> train_example;
    std::function<Example(size_t)> val_example;
};

struct EpochLog {
    int epoch = 0;
    double lr = 0.0;
    double train_total = 0.0;
    double val_total = 0.0;
    double smoothed_val = 0.0;
    double val_dsc_macro = 0.0;
};

struct FitResult {
    std::vector<EpochLog> history;
    int best_epoch = 0;
    double best_smoothed_val = 0.0;
    bool early_stopped = false;
};

/// Adam on `task.parameters` with the configured schedule. The state at the
/// epoch with the lowest smoothed validation loss is restored on return.
/// When `log_path` is set, one CSV row per epoch is appended.
FitResult fit(FitTask& task, const TrainConfig& config, const std::optional<std::filesystem::path>& log_path = {});

void write_log_header(const std::filesystem::path& path);

struct TrainedModel {
    models::SegmentationModel model;
    models::Checkpoint checkpoint;
    FitResult result;
};

TrainedModel train_binary(Organ organ, models::Backbone backbone, const SliceSet& train, const SliceSet& val,
                          const TrainConfig& config, double width = models::NetConfig{}.width,
                          const std::optional<std::filesystem::path>& log_path = {});

TrainedModel train_multiclass(models::Backbone backbone, const SliceSet& train, const SliceSet& val,
                              const TrainConfig& config, double width = models::NetConfig{}.width,
                              const std::optional<std::filesystem::path>& log_path = {});

/// SHA-256 of the canonical JSON form of `j`.
std::string json_digest(const nlohmann::json& j);

}  // namespace segens::training

#endif  // SEGENS_TRAINING_HPP
