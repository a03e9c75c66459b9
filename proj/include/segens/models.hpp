#ifndef SEGENS_MODELS_HPP
#define SEGENS_MODELS_HPP

#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <torch/torch.h>

#include "segens/core.hpp"

namespace segens::models {

enum class Backbone : int { UNet = 0, SEResUNet = 1, DeepLabV3 = 2 };

inline constexpr std::array<Backbone, 3> kAllBackbones = {Backbone::UNet, Backbone::SEResUNet, Backbone::DeepLabV3};

std::string_view backbone_name(Backbone b);
Backbone backbone_from_name(std::string_view name);

/// Channel width of the layer feeding the final 1x1 projection.
int64_t penultimate_feature_count(Backbone b);

// Reference channel counts are multiplied by `width`; the penultimate feature
// count is never scaled.
struct NetConfig {
    Backbone backbone = Backbone::UNet;
    int64_t in_channels = 1;
    int64_t out_channels = 1;
    double width = 0.0625;
    int depth = 4;  // pooling levels for the U-Net family

    friend bool operator==(const NetConfig&, const NetConfig&) = default;
};

/// Common contract of every backbone: logits = projection(head(trunk(x))).
/// The head is the last layer before the logits (the layer whose output is the
/// penultimate feature map); the trunk is everything before it.
class SegmentationNetImpl : public torch::nn::Module {
public:
    explicit SegmentationNetImpl(NetConfig config);
    ~SegmentationNetImpl() override = default;

    /// Training-path logits; equal to projection(features(x)) up to float rounding.
    torch::Tensor forward(const torch::Tensor& x) {
        return project(trunk_forward(x), projection->weight, projection->bias, x.size(2), x.size(3));
    }
    torch::Tensor features(const torch::Tensor& x) { return head_forward(trunk_forward(x), x.size(2), x.size(3)); }

    virtual torch::Tensor trunk_forward(const torch::Tensor& x) = 0;
    virtual torch::Tensor head_forward(const torch::Tensor& trunk_out, int64_t height, int64_t width) = 0;

    /// conv1x1(head_forward(trunk_out), weight, bias). Backbones whose head
    /// upsamples apply the linear map before upsampling, which is equivalent
    /// and cheaper. `bias` may be undefined.
    virtual torch::Tensor project(const torch::Tensor& trunk_out, const torch::Tensor& weight, const torch::Tensor& bias,
                                  int64_t height, int64_t width);

    [[nodiscard]] const NetConfig& config() const { return config_; }
    [[nodiscard]] int64_t feature_count() const { return penultimate_feature_count(config_.backbone); }

    /// Parameters/buffers of the head, i.e. names starting with "head.".
    std::vector<torch::Tensor> head_parameters();
    std::vector<torch::Tensor> trunk_parameters();

    torch::nn::Conv2d projection{nullptr};

protected:
    void finish_init();  // registers the projection and applies He-uniform init

    NetConfig config_;
};

using SegmentationNet = std::shared_ptr<SegmentationNetImpl>;

/// Builds the network for `config`. Parameters are drawn from the global torch
/// generator, so seed it first for reproducibility.
SegmentationNet make_net(const NetConfig& config);

int64_t parameter_count(torch::nn::Module& module);

/// Network plus the metadata needed to feed it raw HU slices.
struct SegmentationModel {
    SegmentationNet net;
    /// Organ for binary models; empty for multiclass models.
    std::optional<Organ> organ;
    /// One window per input channel.
    std::vector<WindowSpec> windows;
    std::string source_dataset = "default";

    [[nodiscard]] bool is_binary() const { return organ.has_value(); }
    [[nodiscard]] Backbone backbone() const { return net->config().backbone; }
    [[nodiscard]] int64_t out_channels() const { return net->config().out_channels; }
    [[nodiscard]] int64_t penultimate_feature_count() const { return net->feature_count(); }
};

/// Binary (1 output channel) model for one organ, input windowed with that organ's LUT.
SegmentationModel make_binary_model(Organ organ, Backbone backbone, double width = NetConfig{}.width);

/// Multiclass (C+1 outputs) model; input channels are the distinct organ windows.
SegmentationModel make_multiclass_model(Backbone backbone, double width = NetConfig{}.width);

/// Distinct windows used as multiclass input channels (lungs, heart, esophagus, trachea, cord).
std::vector<WindowSpec> multiclass_windows();

/// Windows and stacks a cropped HU slice into a (channels, H, W) float tensor.
torch::Tensor preprocess(const SegmentationModel& model, const Image2D<int16_t>& hu_crop);

/// Logits (out_channels, H, W) for a normalized single-channel 320x320 slice. Eval mode, no grad.
torch::Tensor forward_logits(SegmentationModel& model, const Slice2D& slice);
torch::Tensor forward_logits(SegmentationModel& model, const torch::Tensor& input);

/// Penultimate features (feature_count, H, W). Eval mode, no grad.
torch::Tensor forward_features(SegmentationModel& model, const Slice2D& slice);
torch::Tensor forward_features(SegmentationModel& model, const torch::Tensor& input);

/// Applies the model's own final 1x1 projection to a feature map (F, H, W).
torch::Tensor final_projection(SegmentationModel& model, const torch::Tensor& features);

}  // namespace segens::models

#endif  // SEGENS_MODELS_HPP
