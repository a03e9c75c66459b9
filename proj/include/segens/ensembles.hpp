#ifndef SEGENS_ENSEMBLES_HPP
#define SEGENS_ENSEMBLES_HPP

#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>
#include <torch/torch.h>

#include "segens/checkpoint.hpp"
#include "segens/core.hpp"
#include "segens/metrics.hpp"
#include "segens/models.hpp"
#include "segens/training.hpp"

namespace segens::ensembles {

enum class Strategy { Argmax, LogitsConv, MetaModel, LayerFusion };

std::string_view strategy_name(Strategy s);
Strategy strategy_from_name(std::string_view name);

inline constexpr double kDefaultThreshold = 0.5;

struct BranchRef {
    std::filesystem::path checkpoint;
    std::optional<Organ> organ;  // empty for a multiclass branch
    models::Backbone backbone = models::Backbone::UNet;
    std::vector<WindowSpec> windows;
    std::string digest;  // expected checkpoint digest; empty skips the check
};

struct EnsembleSpec {
    Strategy strategy = Strategy::Argmax;
    std::vector<BranchRef> branches;
    int class_count = kOrganCount;
    double threshold = kDefaultThreshold;
    bool includes_multiclass_branch = false;

    void validate() const;
    [[nodiscard]] nlohmann::json to_json() const;
    static EnsembleSpec from_json(const nlohmann::json& j);
};

EnsembleSpec read_spec(const std::filesystem::path& path);
void write_spec(const std::filesystem::path& path, const EnsembleSpec& spec);

struct Branch {
    models::SegmentationModel model;
    std::string digest;
};

/// Loads every branch checkpoint. Missing files raise ConfigError; a digest
/// differing from the spec raises IntegrityError.
std::vector<Branch> load_branches(const EnsembleSpec& spec);

/// One stack channel. A multiclass branch contributes one channel per organ
/// (its background channel is dropped).
struct ChannelMeta {
    Organ organ = Organ::LeftLung;
    models::Backbone backbone = models::Backbone::UNet;
    std::string digest;
    size_t branch = 0;
};

std::vector<ChannelMeta> channel_layout(const std::vector<Branch>& branches);

struct LogitStack {
    torch::Tensor values;  // (N, H, W)
    std::vector<ChannelMeta> meta;
};

/// Frozen branch outputs for one slice: the logit stack, plus each branch's
/// trunk output when layer fusion needs it.
struct BranchActivations {
    torch::Tensor logits;               // (N, H, W)
    std::vector<torch::Tensor> trunks;  // one per branch, without batch dim
};

/// `hu` may be the full slice; it is center-cropped to the model input size.
BranchActivations compute_activations(std::vector<Branch>& branches, const Image2D<int16_t>& hu, bool with_trunks);

LogitStack stack_branch_logits(std::vector<Branch>& branches, const Image2D<int16_t>& hu);

struct MultiLabelPrediction {
    torch::Tensor masks;          // (C, H, W) uint8 in {0, 1}
    torch::Tensor probabilities;  // (C, H, W) float, may be undefined
};

/// Label map from per-class probabilities (C, H, W): argmax class (1-based)
/// where its probability reaches `tau`, else 0. Ties go to the lowest class.
torch::Tensor argmax_labels(const torch::Tensor& class_probs, double tau);

/// Per-class max over channels of the same organ, as logits (C, H, W).
torch::Tensor per_class_max(const LogitStack& stack, int class_count);

/// Eq.-style argmax fusion of a logit stack; returns an int64 (H, W) label map.
torch::Tensor fuse_argmax(const LogitStack& stack, double tau, int class_count = kOrganCount);

MultiLabelPrediction threshold_logits(const torch::Tensor& class_logits, double tau);

/// 1x1 convolution of the stack with weight (C, N) and bias (C), then sigmoid
/// and threshold.
MultiLabelPrediction fuse_logits_conv(const LogitStack& stack, const torch::Tensor& weight, const torch::Tensor& bias,
                                      double tau);

/// Exclusive labels from a multilabel prediction: among classes above
/// threshold, the most probable wins (lowest index on ties or without
/// probabilities).
torch::Tensor exclusive_label_map(const MultiLabelPrediction& prediction);

// Trainable ensembles ---------------------------------------------------------

class EnsembleModel {
public:
    EnsembleModel(std::vector<ChannelMeta> channels, int class_count, double threshold);
    virtual ~EnsembleModel() = default;

    [[nodiscard]] virtual Strategy strategy() const = 0;
    [[nodiscard]] virtual bool needs_trunks() const { return false; }
    [[nodiscard]] virtual bool trainable() const { return true; }

    /// Class logits (B, C, H, W) from batched stacks (B, N, H, W) and batched trunks.
    virtual torch::Tensor forward(const torch::Tensor& logits, const std::vector<torch::Tensor>& trunks) = 0;

    virtual std::vector<torch::Tensor> parameters() = 0;
    /// Everything the ensemble owns that training may change.
    virtual models::NamedTensors state() = 0;
    virtual void load_state(const models::NamedTensors& state) = 0;
    virtual void set_training(bool) {}

    /// Thresholded per-class prediction for one slice. Eval mode, no grad.
    virtual MultiLabelPrediction predict(const BranchActivations& activations);

    [[nodiscard]] int class_count() const { return class_count_; }
    [[nodiscard]] double threshold() const { return threshold_; }
    [[nodiscard]] const std::vector<ChannelMeta>& channels() const { return channels_; }

    /// Stack channel representing `organ` in identity selection: its first channel.
    [[nodiscard]] size_t designated_channel(Organ organ) const;

protected:
    std::vector<ChannelMeta> channels_;
    int class_count_;
    double threshold_;
};

class ArgmaxEnsemble : public EnsembleModel {
public:
    using EnsembleModel::EnsembleModel;
    [[nodiscard]] Strategy strategy() const override { return Strategy::Argmax; }
    [[nodiscard]] bool trainable() const override { return false; }
    torch::Tensor forward(const torch::Tensor& logits, const std::vector<torch::Tensor>& trunks) override;
    std::vector<torch::Tensor> parameters() override { return {}; }
    models::NamedTensors state() override { return {}; }
    void load_state(const models::NamedTensors&) override {}
    MultiLabelPrediction predict(const BranchActivations& activations) override;
};

class LogitsConvEnsemble : public EnsembleModel {
public:
    /// Starts from identity selection (one unit weight per class on its
    /// designated channel, zero bias).
    LogitsConvEnsemble(std::vector<ChannelMeta> channels, int class_count, double threshold);

    [[nodiscard]] Strategy strategy() const override { return Strategy::LogitsConv; }
    torch::Tensor forward(const torch::Tensor& logits, const std::vector<torch::Tensor>& trunks) override;
    std::vector<torch::Tensor> parameters() override;
    models::NamedTensors state() override;
    void load_state(const models::NamedTensors& state) override;

    void set_identity_selection();
    /// (C, N) weight matrix; row c holds the weight of every branch channel for class c+1.
    [[nodiscard]] torch::Tensor weights() const;
    [[nodiscard]] torch::Tensor class_weights(Organ organ) const;
    [[nodiscard]] torch::Tensor bias() const;
    void set_parameters(const torch::Tensor& weight, const torch::Tensor& bias);

private:
    torch::nn::Conv2d conv_{nullptr};
};

inline constexpr double kMetaChannelsPerInput = 2.0;

class MetaModelEnsemble : public EnsembleModel {
public:
    /// Reduced-depth U-Net with N inputs and C outputs; parameters come from
    /// the global torch generator. The width is raised when needed so the
    /// first level has at least kMetaChannelsPerInput channels per input.
    MetaModelEnsemble(std::vector<ChannelMeta> channels, int class_count, double threshold,
                      double width = models::NetConfig{}.width, int depth = 3);

    [[nodiscard]] Strategy strategy() const override { return Strategy::MetaModel; }
    torch::Tensor forward(const torch::Tensor& logits, const std::vector<torch::Tensor>& trunks) override;
    std::vector<torch::Tensor> parameters() override { return meta_->parameters(); }
    models::NamedTensors state() override;
    void load_state(const models::NamedTensors& state) override;
    void set_training(bool on) override { meta_->train(on); }

    [[nodiscard]] const models::SegmentationNet& meta() const { return meta_; }

private:
    models::SegmentationNet meta_;
};

class LayerFusionEnsemble : public EnsembleModel {
public:
    /// Copies every branch network so the originals stay untouched. The fusion
    /// weight (C, sum F) starts with each class's designated branch projection
    /// in its block and zeros elsewhere.
    LayerFusionEnsemble(const std::vector<Branch>& branches, std::vector<ChannelMeta> channels, int class_count,
                        double threshold);

    [[nodiscard]] Strategy strategy() const override { return Strategy::LayerFusion; }
    [[nodiscard]] bool needs_trunks() const override { return true; }
    torch::Tensor forward(const torch::Tensor& logits, const std::vector<torch::Tensor>& trunks) override;
    std::vector<torch::Tensor> parameters() override;
    models::NamedTensors state() override;
    void load_state(const models::NamedTensors& state) override;

    /// Class logits from full feature maps (one (B, F_b, H, W) tensor per branch).
    torch::Tensor fuse_features(const std::vector<torch::Tensor>& features);

    [[nodiscard]] int64_t fused_channel_count() const { return fusion_weight_.size(1); }
    [[nodiscard]] const torch::Tensor& fusion_weight() const { return fusion_weight_; }
    [[nodiscard]] const torch::Tensor& fusion_bias() const { return fusion_bias_; }
    std::vector<models::SegmentationNet>& branch_nets() { return nets_; }

private:
    std::vector<models::SegmentationNet> nets_;
    std::vector<int64_t> offsets_;
    torch::Tensor fusion_weight_;
    torch::Tensor fusion_bias_;
};

/// Builds the ensemble named by `spec.strategy` over loaded branches.
std::unique_ptr<EnsembleModel> make_ensemble(const EnsembleSpec& spec, const std::vector<Branch>& branches,
                                             uint64_t seed = 0, double width = models::NetConfig{}.width);
std::unique_ptr<EnsembleModel> make_ensemble(Strategy strategy, const std::vector<Branch>& branches, int class_count,
                                             double threshold, uint64_t seed = 0,
                                             double width = models::NetConfig{}.width);

/// Digest of a branch network restricted to the parameters that stay frozen
/// under `strategy`; layer fusion excludes the fused head ("head.*").
std::string frozen_digest(models::SegmentationNetImpl& net, Strategy strategy);

// Training data ---------------------------------------------------------------

struct EnsembleSample {
    BranchActivations activations;  // stored in half precision
    torch::Tensor target;           // (C, H, W) uint8
};

using EnsembleData = std::vector<EnsembleSample>;

EnsembleData build_ensemble_data(std::vector<Branch>& branches, const training::SliceSet& slices, int class_count,
                                 bool with_trunks);

/// Trains the fusion parameters with the composite multilabel loss. Branch
/// outputs are fixed, so no augmentation is applied.
training::FitResult train_ensemble(EnsembleModel& ensemble, const EnsembleData& train, const EnsembleData& val,
                                   const training::TrainConfig& config,
                                   const std::optional<std::filesystem::path>& log_path = {});

// Persistence -----------------------------------------------------------------

models::Checkpoint save_ensemble(EnsembleModel& ensemble, const std::vector<Branch>& branches,
                                 const models::TrainingMeta& meta = {});

/// Rebuilds a trained ensemble over `branches`; fails with IntegrityError if a
/// branch digest differs from the one recorded at save time.
std::unique_ptr<EnsembleModel> load_ensemble(const models::Checkpoint& checkpoint, const std::vector<Branch>& branches);

// Volumes -----------------------------------------------------------------------

struct VolumePrediction {
    LabelMask labels;                                // exclusive map
    std::vector<metrics::BinaryVolume> per_class;   // multilabel maps, index organ - 1
};

/// Per-slice inference stacked along z; crops are pasted back into the full grid.
VolumePrediction predict_volume(EnsembleModel& ensemble, std::vector<Branch>& branches, const CtVolume& volume);

/// Same, for several ensembles sharing one pass over the branches.
std::vector<VolumePrediction> predict_volume(const std::vector<EnsembleModel*>& ensembles,
                                             std::vector<Branch>& branches, const CtVolume& volume);

}  // namespace segens::ensembles

#endif  // SEGENS_ENSEMBLES_HPP
