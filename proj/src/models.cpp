#include "segens/models.hpp"

#include <algorithm>
#include <cmath>

#include "segens/preprocessing.hpp"

namespace segens::models {

namespace F = torch::nn::functional;

std::string_view backbone_name(Backbone b) {
    switch (b) {
        case Backbone::UNet: return "unet";
        case Backbone::SEResUNet: return "se_resunet";
        case Backbone::DeepLabV3: return "deeplabv3";
    }
    throw ArgumentError("invalid backbone");
}

Backbone backbone_from_name(std::string_view name) {
    std::string s(name);
    std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    s.erase(std::remove(s.begin(), s.end(), '-'), s.end());
    if (s == "unet") return Backbone::UNet;
    if (s == "se_resunet" || s == "seresunet") return Backbone::SEResUNet;
    if (s == "deeplabv3" || s == "deeplab") return Backbone::DeepLabV3;
    throw ArgumentError("unknown backbone '" + std::string(name) + "'");
}

int64_t penultimate_feature_count(Backbone b) { return b == Backbone::DeepLabV3 ? 256 : 64; }

namespace {

int64_t scaled(int64_t reference, double width, int64_t floor) {
    return std::max<int64_t>(floor, std::llround(static_cast<double>(reference) * width));
}

torch::nn::Conv2dOptions conv3x3(int64_t in, int64_t out, int64_t stride = 1, int64_t dilation = 1) {
    return torch::nn::Conv2dOptions(in, out, 3).stride(stride).padding(dilation).dilation(dilation).bias(false);
}

torch::nn::Conv2dOptions conv1x1(int64_t in, int64_t out, bool bias = false) {
    return torch::nn::Conv2dOptions(in, out, 1).bias(bias);
}

struct ConvBnReluImpl : torch::nn::Module {
    ConvBnReluImpl(const torch::nn::Conv2dOptions& options)
        : conv(register_module("conv", torch::nn::Conv2d(options))),
          bn(register_module("bn", torch::nn::BatchNorm2d(options.out_channels()))) {}

    torch::Tensor forward(const torch::Tensor& x) { return torch::relu(bn->forward(conv->forward(x))); }

    torch::nn::Conv2d conv;
    torch::nn::BatchNorm2d bn;
};
TORCH_MODULE(ConvBnRelu);

struct DoubleConvImpl : torch::nn::Module {
    DoubleConvImpl(int64_t in, int64_t out)
        : first(register_module("0", ConvBnRelu(conv3x3(in, out)))),
          second(register_module("1", ConvBnRelu(conv3x3(out, out)))) {}

    torch::Tensor forward(const torch::Tensor& x) { return second->forward(first->forward(x)); }

    ConvBnRelu first;
    ConvBnRelu second;
};
TORCH_MODULE(DoubleConv);

// Squeeze-and-excitation channel recalibration.
struct SEBlockImpl : torch::nn::Module {
    SEBlockImpl(int64_t channels, int64_t reduction)
        : fc1(register_module("fc1", torch::nn::Linear(channels, std::max<int64_t>(1, channels / reduction)))),
          fc2(register_module("fc2", torch::nn::Linear(std::max<int64_t>(1, channels / reduction), channels))) {}

    torch::Tensor forward(const torch::Tensor& x) {
        auto s = x.mean({2, 3});
        s = torch::sigmoid(fc2->forward(torch::relu(fc1->forward(s))));
        return x * s.unsqueeze(-1).unsqueeze(-1);
    }

    torch::nn::Linear fc1;
    torch::nn::Linear fc2;
};
TORCH_MODULE(SEBlock);

struct ResBlockImpl : torch::nn::Module {
    ResBlockImpl(int64_t in, int64_t out, int64_t stride, int64_t dilation, bool squeeze_excite)
        : conv1(register_module("conv1", torch::nn::Conv2d(conv3x3(in, out, stride, dilation)))),
          bn1(register_module("bn1", torch::nn::BatchNorm2d(out))),
          conv2(register_module("conv2", torch::nn::Conv2d(conv3x3(out, out, 1, dilation)))),
          bn2(register_module("bn2", torch::nn::BatchNorm2d(out))) {
        if (in != out || stride != 1) {
            shortcut = register_module(
                "shortcut", torch::nn::Sequential(torch::nn::Conv2d(conv1x1(in, out).stride(stride)),
                                                  torch::nn::BatchNorm2d(out)));
        }
        if (squeeze_excite) se = register_module("se", SEBlock(out, 16));
    }

    torch::Tensor forward(const torch::Tensor& x) {
        auto out = torch::relu(bn1->forward(conv1->forward(x)));
        out = bn2->forward(conv2->forward(out));
        if (se) out = se->forward(out);
        return torch::relu(out + (shortcut ? shortcut->forward(x) : x));
    }

    torch::nn::Conv2d conv1;
    torch::nn::BatchNorm2d bn1;
    torch::nn::Conv2d conv2;
    torch::nn::BatchNorm2d bn2;
    torch::nn::Sequential shortcut{nullptr};
    SEBlock se{nullptr};
};
TORCH_MODULE(ResBlock);

// Encoder/decoder with skip connections; the block type distinguishes
// U-Net (double conv) from SE-ResUNet (residual + SE).
class UNetFamilyNet : public SegmentationNetImpl {
public:
    explicit UNetFamilyNet(NetConfig config) : SegmentationNetImpl(config) {
        if (config_.depth < 1) throw ArgumentError("U-Net depth must be >= 1");
        const bool residual = config_.backbone == Backbone::SEResUNet;
        const int64_t base = scaled(64, config_.width, 4);
        std::vector<int64_t> ch;
        for (int i = 0; i <= config_.depth; ++i) ch.push_back(base << i);

        auto block = [&](int64_t in, int64_t out) {
            return residual ? torch::nn::Sequential(ResBlock(in, out, 1, 1, true))
                            : torch::nn::Sequential(DoubleConv(in, out));
        };
        for (int i = 0; i <= config_.depth; ++i) {
            encoders_.push_back(register_module("enc" + std::to_string(i),
                                                block(i == 0 ? config_.in_channels : ch[static_cast<size_t>(i - 1)],
                                                      ch[static_cast<size_t>(i)])));
        }
        for (int i = 0; i < config_.depth; ++i) {
            const auto c = ch[static_cast<size_t>(i)];
            ups_.push_back(register_module(
                "up" + std::to_string(i),
                torch::nn::ConvTranspose2d(torch::nn::ConvTranspose2dOptions(2 * c, c, 2).stride(2))));
            decoders_.push_back(register_module("dec" + std::to_string(i), block(2 * c, c)));
        }
        head_ = register_module("head", torch::nn::Sequential(torch::nn::Conv2d(conv1x1(base, feature_count(), true)),
                                                              torch::nn::ReLU()));
        finish_init();
    }

    torch::Tensor trunk_forward(const torch::Tensor& input) override {
        std::vector<torch::Tensor> skips;
        auto x = encoders_[0]->forward(input);
        for (size_t i = 1; i < encoders_.size(); ++i) {
            skips.push_back(x);
            x = encoders_[i]->forward(F::max_pool2d(x, F::MaxPool2dFuncOptions(2)));
        }
        for (int i = config_.depth - 1; i >= 0; --i) {
            const auto k = static_cast<size_t>(i);
            x = ups_[k]->forward(x);
            x = decoders_[k]->forward(torch::cat({skips[k], x}, 1));
        }
        return x;
    }

    torch::Tensor head_forward(const torch::Tensor& trunk_out, int64_t, int64_t) override {
        return head_->forward(trunk_out);
    }

private:
    std::vector<torch::nn::Sequential> encoders_;
    std::vector<torch::nn::ConvTranspose2d> ups_;
    std::vector<torch::nn::Sequential> decoders_;
    torch::nn::Sequential head_{nullptr};
};

struct AsppImpl : torch::nn::Module {
    AsppImpl(int64_t in, int64_t out, std::array<int64_t, 3> rates) {
        branches.push_back(register_module("b0", ConvBnRelu(conv1x1(in, out))));
        for (size_t i = 0; i < rates.size(); ++i) {
            branches.push_back(register_module("b" + std::to_string(i + 1), ConvBnRelu(conv3x3(in, out, 1, rates[i]))));
        }
        // Image-level branch: no batch norm so batch size 1 stays valid in training.
        pool_conv = register_module("pool", torch::nn::Conv2d(conv1x1(in, out, true)));
        project = register_module("project", ConvBnRelu(conv1x1(out * 5, out)));
    }

    torch::Tensor forward(const torch::Tensor& x) {
        std::vector<torch::Tensor> outs;
        for (auto& b : branches) outs.push_back(b->forward(x));
        auto pooled = torch::relu(pool_conv->forward(F::adaptive_avg_pool2d(x, F::AdaptiveAvgPool2dFuncOptions(1))));
        outs.push_back(pooled.expand({-1, -1, x.size(2), x.size(3)}));
        return project->forward(torch::cat(outs, 1));
    }

    std::vector<ConvBnRelu> branches;
    torch::nn::Conv2d pool_conv{nullptr};
    ConvBnRelu project{nullptr};
};
TORCH_MODULE(Aspp);

// Output-stride-8 residual encoder, ASPP, 3x3 head; the head output is
// bilinearly upsampled to the input resolution before the projection.
class DeepLabV3Net : public SegmentationNetImpl {
public:
    explicit DeepLabV3Net(NetConfig config) : SegmentationNetImpl(config) {
        const int64_t c = scaled(64, config_.width, 4);
        const int64_t a = scaled(256, config_.width, 8);
        stem_ = register_module("stem", ConvBnRelu(conv3x3(config_.in_channels, c, 2)));
        layer1_ = register_module("layer1", ResBlock(c, 2 * c, 2, 1, false));
        layer2_ = register_module("layer2", ResBlock(2 * c, 4 * c, 2, 1, false));
        layer3_ = register_module("layer3", ResBlock(4 * c, 4 * c, 1, 2, false));
        aspp_ = register_module("aspp", Aspp(4 * c, a, std::array<int64_t, 3>{6, 12, 18}));
        head_ = register_module("head", ConvBnRelu(conv3x3(a, feature_count())));
        finish_init();
    }

    torch::Tensor trunk_forward(const torch::Tensor& x) override {
        auto y = stem_->forward(x);
        y = layer1_->forward(y);
        y = layer2_->forward(y);
        y = layer3_->forward(y);
        return aspp_->forward(y);
    }

    torch::Tensor head_forward(const torch::Tensor& trunk_out, int64_t height, int64_t width) override {
        return upsample(head_->forward(trunk_out), height, width);
    }

    torch::Tensor project(const torch::Tensor& trunk_out, const torch::Tensor& weight, const torch::Tensor& bias,
                          int64_t height, int64_t width) override {
        return upsample(F::conv2d(head_->forward(trunk_out), weight, F::Conv2dFuncOptions().bias(bias)), height, width);
    }

private:
    static torch::Tensor upsample(const torch::Tensor& t, int64_t height, int64_t width) {
        return F::interpolate(t, F::InterpolateFuncOptions()
                                     .size(std::vector<int64_t>{height, width})
                                     .mode(torch::kBilinear)
                                     .align_corners(false));
    }

    ConvBnRelu stem_{nullptr};
    ResBlock layer1_{nullptr};
    ResBlock layer2_{nullptr};
    ResBlock layer3_{nullptr};
    Aspp aspp_{nullptr};
    ConvBnRelu head_{nullptr};
};

bool starts_with(const std::string& s, std::string_view prefix) { return s.rfind(prefix, 0) == 0; }

}  // namespace

SegmentationNetImpl::SegmentationNetImpl(NetConfig config) : config_(config) {
    if (config_.in_channels < 1 || config_.out_channels < 1) throw ArgumentError("channel counts must be positive");
    if (!(config_.width > 0.0)) throw ArgumentError("width multiplier must be positive");
}

torch::Tensor SegmentationNetImpl::project(const torch::Tensor& trunk_out, const torch::Tensor& weight,
                                           const torch::Tensor& bias, int64_t height, int64_t width) {
    return F::conv2d(head_forward(trunk_out, height, width), weight, F::Conv2dFuncOptions().bias(bias));
}

void SegmentationNetImpl::finish_init() {
    projection = register_module("projection", torch::nn::Conv2d(conv1x1(feature_count(), config_.out_channels, true)));
    torch::NoGradGuard no_grad;
    for (auto& m : modules(/*include_self=*/false)) {
        if (auto* conv = m->as<torch::nn::Conv2d>()) {
            torch::nn::init::kaiming_uniform_(conv->weight, 0.0, torch::kFanIn, torch::kReLU);
            if (conv->bias.defined()) conv->bias.zero_();
        } else if (auto* up = m->as<torch::nn::ConvTranspose2d>()) {
            torch::nn::init::kaiming_uniform_(up->weight, 0.0, torch::kFanIn, torch::kReLU);
            if (up->bias.defined()) up->bias.zero_();
        } else if (auto* fc = m->as<torch::nn::Linear>()) {
            torch::nn::init::kaiming_uniform_(fc->weight, 0.0, torch::kFanIn, torch::kReLU);
            fc->bias.zero_();
        }
    }
}

std::vector<torch::Tensor> SegmentationNetImpl::head_parameters() {
    std::vector<torch::Tensor> out;
    for (auto& p : named_parameters()) {
        if (starts_with(p.key(), "head.")) out.push_back(p.value());
    }
    return out;
}

std::vector<torch::Tensor> SegmentationNetImpl::trunk_parameters() {
    std::vector<torch::Tensor> out;
    for (auto& p : named_parameters()) {
        if (!starts_with(p.key(), "head.") && !starts_with(p.key(), "projection.")) out.push_back(p.value());
    }
    return out;
}

SegmentationNet make_net(const NetConfig& config) {
    switch (config.backbone) {
        case Backbone::UNet:
        case Backbone::SEResUNet: return std::make_shared<UNetFamilyNet>(config);
        case Backbone::DeepLabV3: return std::make_shared<DeepLabV3Net>(config);
    }
    throw ArgumentError("make_net: invalid backbone");
}

int64_t parameter_count(torch::nn::Module& module) {
    int64_t n = 0;
    for (const auto& p : module.parameters()) n += p.numel();
    return n;
}

std::vector<WindowSpec> multiclass_windows() {
    return {default_window(Organ::LeftLung), default_window(Organ::Heart), default_window(Organ::Esophagus),
            default_window(Organ::Trachea), default_window(Organ::SpinalCord)};
}

SegmentationModel make_binary_model(Organ organ, Backbone backbone, double width) {
    NetConfig cfg;
    cfg.backbone = backbone;
    cfg.width = width;
    return SegmentationModel{make_net(cfg), organ, {default_window(organ)}};
}

SegmentationModel make_multiclass_model(Backbone backbone, double width) {
    NetConfig cfg;
    cfg.backbone = backbone;
    cfg.width = width;
    const auto windows = multiclass_windows();
    cfg.in_channels = static_cast<int64_t>(windows.size());
    cfg.out_channels = kOrganCount + 1;
    return SegmentationModel{make_net(cfg), std::nullopt, windows};
}

torch::Tensor preprocess(const SegmentationModel& model, const Image2D<int16_t>& hu_crop) {
    if (model.windows.empty()) throw ConfigError("model has no input windows");
    auto out = torch::empty({static_cast<int64_t>(model.windows.size()), hu_crop.rows, hu_crop.cols}, torch::kFloat32);
    for (size_t c = 0; c < model.windows.size(); ++c) {
        const auto windowed = preproc::apply_window(hu_crop, model.windows[c]);
        std::copy(windowed.data.begin(), windowed.data.end(), out[static_cast<int64_t>(c)].data_ptr<float>());
    }
    return out;
}

namespace {

void check_input(const SegmentationModel& model, const torch::Tensor& input) {
    if (input.dim() != 3 || input.size(0) != model.net->config().in_channels || input.size(1) != preproc::kCropSize ||
        input.size(2) != preproc::kCropSize) {
        throw ArgumentError("model input must have shape (" + std::to_string(model.net->config().in_channels) +
                            ", 320, 320)");
    }
}

torch::Tensor slice_tensor(const Slice2D& slice) {
    const auto& px = slice.pixels;
    return torch::from_blob(const_cast<float*>(px.data.data()), {1, px.rows, px.cols}, torch::kFloat32).clone();
}

}  // namespace

torch::Tensor forward_logits(SegmentationModel& model, const torch::Tensor& input) {
    check_input(model, input);
    torch::NoGradGuard no_grad;
    model.net->eval();
    auto& net = *model.net;
    return net.projection->forward(net.features(input.unsqueeze(0))).squeeze(0);
}

torch::Tensor forward_logits(SegmentationModel& model, const Slice2D& slice) {
    return forward_logits(model, slice_tensor(slice));
}

torch::Tensor forward_features(SegmentationModel& model, const torch::Tensor& input) {
    check_input(model, input);
    torch::NoGradGuard no_grad;
    model.net->eval();
    return model.net->features(input.unsqueeze(0)).squeeze(0);
}

torch::Tensor forward_features(SegmentationModel& model, const Slice2D& slice) {
    return forward_features(model, slice_tensor(slice));
}

torch::Tensor final_projection(SegmentationModel& model, const torch::Tensor& features) {
    if (features.dim() != 3 || features.size(0) != model.penultimate_feature_count()) {
        throw ArgumentError("final_projection: expected (" + std::to_string(model.penultimate_feature_count()) +
                            ", H, W) features");
    }
    torch::NoGradGuard no_grad;
    return model.net->projection->forward(features.unsqueeze(0)).squeeze(0);
}

}  // namespace segens::models
