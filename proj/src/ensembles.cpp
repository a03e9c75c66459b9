#include "segens/ensembles.hpp"

#include <algorithm>
#include <fstream>

#include "segens/log.hpp"
#include "segens/preprocessing.hpp"

namespace segens::ensembles {

namespace fs = std::filesystem;
namespace F = torch::nn::functional;

std::string_view strategy_name(Strategy s) {
    switch (s) {
        case Strategy::Argmax: return "argmax";
        case Strategy::LogitsConv: return "logits_conv";
        case Strategy::MetaModel: return "meta_model";
        case Strategy::LayerFusion: return "layer_fusion";
    }
    throw ArgumentError("invalid strategy");
}

Strategy strategy_from_name(std::string_view name) {
    for (auto s : {Strategy::Argmax, Strategy::LogitsConv, Strategy::MetaModel, Strategy::LayerFusion}) {
        if (strategy_name(s) == name) return s;
    }
    throw ConfigError("unknown ensemble strategy '" + std::string(name) + "'");
}

// Spec ------------------------------------------------------------------------

void EnsembleSpec::validate() const {
    if (class_count < 1 || class_count > kOrganCount) throw ConfigError("class_count must lie in [1, 6]");
    if (!(threshold > 0.0 && threshold < 1.0)) throw ConfigError("threshold must lie in (0, 1)");
    if (branches.empty()) throw ConfigError("ensemble has no branches");
    std::vector<bool> covered(static_cast<size_t>(class_count) + 1, false);
    bool multiclass = false;
    for (const auto& b : branches) {
        if (b.organ) {
            const int label = organ_label(*b.organ);
            if (label > class_count) throw ConfigError("branch organ outside the class range");
            covered[static_cast<size_t>(label)] = true;
        } else {
            multiclass = true;
            std::fill(covered.begin() + 1, covered.end(), true);
        }
    }
    for (int c = 1; c <= class_count; ++c) {
        if (!covered[static_cast<size_t>(c)]) {
            throw ConfigError("no branch covers organ '" + std::string(organ_name(organ_from_label(c))) + "'");
        }
    }
    if (multiclass != includes_multiclass_branch) {
        throw ConfigError("includes_multiclass_branch does not match the branch list");
    }
}

nlohmann::json EnsembleSpec::to_json() const {
    nlohmann::json br = nlohmann::json::array();
    for (const auto& b : branches) {
        nlohmann::json windows = nlohmann::json::array();
        for (const auto& w : b.windows) windows.push_back({{"width", w.width}, {"level", w.level}});
        br.push_back({{"checkpoint", b.checkpoint.string()},
                      {"organ", b.organ ? std::string(organ_name(*b.organ)) : std::string("multiclass")},
                      {"backbone", std::string(models::backbone_name(b.backbone))},
                      {"windows", windows},
                      {"digest", b.digest}});
    }
    return {{"version", 1},
            {"strategy", std::string(strategy_name(strategy))},
            {"class_count", class_count},
            {"threshold", threshold},
            {"includes_multiclass_branch", includes_multiclass_branch},
            {"branches", br}};
}

EnsembleSpec EnsembleSpec::from_json(const nlohmann::json& j) {
    EnsembleSpec s;
    try {
        if (j.value("version", 1) != 1) throw ConfigError("unsupported ensemble spec version");
        s.strategy = strategy_from_name(j.at("strategy").get<std::string>());
        s.class_count = j.value("class_count", s.class_count);
        s.threshold = j.value("threshold", s.threshold);
        s.includes_multiclass_branch = j.value("includes_multiclass_branch", false);
        for (const auto& b : j.at("branches")) {
            BranchRef r;
            r.checkpoint = b.at("checkpoint").get<std::string>();
            const auto organ = b.value("organ", std::string("multiclass"));
            if (organ != "multiclass") r.organ = organ_from_name(organ);
            r.backbone = models::backbone_from_name(b.at("backbone").get<std::string>());
            if (b.contains("windows")) {
                for (const auto& w : b.at("windows")) r.windows.push_back({w.at("width"), w.at("level")});
            }
            r.digest = b.value("digest", "");
            s.branches.push_back(std::move(r));
        }
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("malformed ensemble spec: ") + e.what());
    } catch (const ArgumentError& e) {
        throw ConfigError(std::string("malformed ensemble spec: ") + e.what());
    }
    s.validate();
    return s;
}

EnsembleSpec read_spec(const fs::path& path) {
    std::ifstream f(path);
    if (!f) throw IoError("cannot open ensemble spec '" + path.string() + "'");
    nlohmann::json j;
    try {
        f >> j;
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("cannot parse '" + path.string() + "': " + e.what());
    }
    auto spec = EnsembleSpec::from_json(j);
    for (auto& b : spec.branches) {
        if (b.checkpoint.is_relative()) b.checkpoint = path.parent_path() / b.checkpoint;
    }
    return spec;
}

void write_spec(const fs::path& path, const EnsembleSpec& spec) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    const auto tmp = fs::path(path.string() + ".tmp");
    {
        std::ofstream f(tmp, std::ios::trunc);
        if (!f) throw IoError("cannot write '" + tmp.string() + "'");
        f << spec.to_json().dump(2) << '\n';
    }
    fs::rename(tmp, path);
}

std::vector<Branch> load_branches(const EnsembleSpec& spec) {
    spec.validate();
    std::vector<Branch> out;
    for (const auto& ref : spec.branches) {
        if (!fs::exists(ref.checkpoint)) throw ConfigError("missing branch checkpoint '" + ref.checkpoint.string() + "'");
        const auto ck = models::read_checkpoint(ref.checkpoint);
        if (!ref.digest.empty() && ref.digest != ck.digest) {
            throw IntegrityError("branch checkpoint '" + ref.checkpoint.string() + "' changed since the spec was written");
        }
        Branch b{models::load_checkpoint(ck), ck.digest};
        if (b.model.organ != ref.organ || b.model.backbone() != ref.backbone) {
            throw ConfigError("branch checkpoint '" + ref.checkpoint.string() + "' does not match its spec entry");
        }
        if (!ref.windows.empty()) {
            if (ref.windows.size() != b.model.windows.size()) throw ConfigError("branch window count mismatch");
            b.model.windows = ref.windows;
        }
        out.push_back(std::move(b));
    }
    return out;
}

std::vector<ChannelMeta> channel_layout(const std::vector<Branch>& branches) {
    std::vector<ChannelMeta> out;
    for (size_t i = 0; i < branches.size(); ++i) {
        const auto& m = branches[i].model;
        if (m.organ) {
            out.push_back({*m.organ, m.backbone(), branches[i].digest, i});
        } else {
            for (int64_t c = 1; c < m.out_channels(); ++c) {
                out.push_back({organ_from_label(static_cast<int>(c)), m.backbone(), branches[i].digest, i});
            }
        }
    }
    return out;
}

// Stacking --------------------------------------------------------------------

BranchActivations compute_activations(std::vector<Branch>& branches, const Image2D<int16_t>& hu, bool with_trunks) {
    const auto crop = hu.rows == preproc::kCropSize && hu.cols == preproc::kCropSize ? hu : preproc::center_crop(hu);
    torch::NoGradGuard no_grad;
    BranchActivations out;
    std::vector<torch::Tensor> parts;
    for (auto& b : branches) {
        auto& net = b.model.net;
        net->eval();
        const auto input = models::preprocess(b.model, crop).unsqueeze(0);
        const auto trunk = net->trunk_forward(input);
        auto logits = net->projection->forward(net->head_forward(trunk, input.size(2), input.size(3)))[0];
        parts.push_back(b.model.is_binary() ? logits : logits.slice(0, 1));
        if (with_trunks) out.trunks.push_back(trunk[0]);
    }
    out.logits = torch::cat(parts, 0);
    return out;
}

LogitStack stack_branch_logits(std::vector<Branch>& branches, const Image2D<int16_t>& hu) {
    return {compute_activations(branches, hu, false).logits, channel_layout(branches)};
}

// Fusion primitives -----------------------------------------------------------

namespace {

// Winner index along dim `dim`; strict comparison keeps the lowest index on ties.
std::pair<torch::Tensor, torch::Tensor> first_max(const torch::Tensor& scores, int64_t dim) {
    auto best = scores.select(dim, 0).clone();
    auto index = torch::zeros_like(best, torch::kInt64);
    for (int64_t c = 1; c < scores.size(dim); ++c) {
        const auto s = scores.select(dim, c);
        const auto better = s > best;
        best = torch::where(better, s, best);
        index.masked_fill_(better, c);
    }
    return {best, index};
}

}  // namespace

torch::Tensor argmax_labels(const torch::Tensor& class_probs, double tau) {
    if (class_probs.dim() != 3) throw ArgumentError("argmax_labels expects (C, H, W) probabilities");
    const auto [best, index] = first_max(class_probs, 0);
    return torch::where(best >= tau, index + 1, torch::zeros_like(index));
}

torch::Tensor per_class_max(const LogitStack& stack, int class_count) {
    if (stack.values.dim() != 3 || stack.values.size(0) != static_cast<int64_t>(stack.meta.size())) {
        throw ArgumentError("logit stack values do not match its metadata");
    }
    std::vector<torch::Tensor> classes;
    for (int c = 1; c <= class_count; ++c) {
        torch::Tensor m;
        for (size_t i = 0; i < stack.meta.size(); ++i) {
            if (organ_label(stack.meta[i].organ) != c) continue;
            const auto v = stack.values[static_cast<int64_t>(i)];
            m = m.defined() ? torch::maximum(m, v) : v;
        }
        if (!m.defined()) throw ConfigError("no branch channel for organ '" + std::string(organ_name(organ_from_label(c))) + "'");
        classes.push_back(m);
    }
    return torch::stack(classes);
}

torch::Tensor fuse_argmax(const LogitStack& stack, double tau, int class_count) {
    return argmax_labels(torch::sigmoid(per_class_max(stack, class_count)), tau);
}

MultiLabelPrediction threshold_logits(const torch::Tensor& class_logits, double tau) {
    MultiLabelPrediction p;
    p.probabilities = torch::sigmoid(class_logits);
    p.masks = (p.probabilities >= tau).to(torch::kUInt8);
    return p;
}

MultiLabelPrediction fuse_logits_conv(const LogitStack& stack, const torch::Tensor& weight, const torch::Tensor& bias,
                                      double tau) {
    const auto n = stack.values.size(0);
    if (weight.dim() != 2 || weight.size(1) != n || bias.dim() != 1 || bias.size(0) != weight.size(0)) {
        throw ConfigError("logits-conv parameters must be (C, N) and (C) for N = " + std::to_string(n));
    }
    const auto h = stack.values.size(1);
    const auto w = stack.values.size(2);
    const auto logits =
        weight.to(torch::kFloat32).matmul(stack.values.reshape({n, h * w})).reshape({weight.size(0), h, w}) +
        bias.to(torch::kFloat32).view({-1, 1, 1});
    return threshold_logits(logits, tau);
}

torch::Tensor exclusive_label_map(const MultiLabelPrediction& prediction) {
    const auto positive = prediction.masks.to(torch::kBool);
    const auto scores = prediction.probabilities.defined()
                            ? torch::where(positive, prediction.probabilities.to(torch::kFloat32), torch::full({}, -1.0f))
                            : torch::where(positive, torch::ones({}), torch::full({}, -1.0f));
    const auto [best, index] = first_max(scores, 0);
    return torch::where(best >= 0, index + 1, torch::zeros_like(index));
}

// Ensemble models ---------------------------------------------------------------

EnsembleModel::EnsembleModel(std::vector<ChannelMeta> channels, int class_count, double threshold)
    : channels_(std::move(channels)), class_count_(class_count), threshold_(threshold) {
    if (!(threshold > 0.0 && threshold < 1.0)) throw ConfigError("threshold must lie in (0, 1)");
    for (int c = 1; c <= class_count_; ++c) (void)designated_channel(organ_from_label(c));
}

size_t EnsembleModel::designated_channel(Organ organ) const {
    for (size_t i = 0; i < channels_.size(); ++i) {
        if (channels_[i].organ == organ) return i;
    }
    throw ConfigError("no branch channel for organ '" + std::string(organ_name(organ)) + "'");
}

namespace {

std::vector<torch::Tensor> batch_trunks(const std::vector<torch::Tensor>& trunks) {
    std::vector<torch::Tensor> out;
    for (const auto& t : trunks) out.push_back(t.unsqueeze(0).to(torch::kFloat32));
    return out;
}

}  // namespace

MultiLabelPrediction EnsembleModel::predict(const BranchActivations& activations) {
    torch::NoGradGuard no_grad;
    set_training(false);
    const auto logits = forward(activations.logits.unsqueeze(0).to(torch::kFloat32), batch_trunks(activations.trunks));
    return threshold_logits(logits[0], threshold_);
}

torch::Tensor ArgmaxEnsemble::forward(const torch::Tensor& logits, const std::vector<torch::Tensor>&) {
    std::vector<torch::Tensor> per_sample;
    for (int64_t b = 0; b < logits.size(0); ++b) per_sample.push_back(per_class_max({logits[b], channels_}, class_count_));
    return torch::stack(per_sample);
}

MultiLabelPrediction ArgmaxEnsemble::predict(const BranchActivations& activations) {
    torch::NoGradGuard no_grad;
    const auto probs = torch::sigmoid(per_class_max({activations.logits.to(torch::kFloat32), channels_}, class_count_));
    const auto labels = argmax_labels(probs, threshold_);
    MultiLabelPrediction p;
    p.probabilities = probs;
    p.masks = torch::one_hot(labels, class_count_ + 1).permute({2, 0, 1}).slice(0, 1).to(torch::kUInt8).contiguous();
    return p;
}

LogitsConvEnsemble::LogitsConvEnsemble(std::vector<ChannelMeta> channels, int class_count, double threshold)
    : EnsembleModel(std::move(channels), class_count, threshold) {
    conv_ = torch::nn::Conv2d(
        torch::nn::Conv2dOptions(static_cast<int64_t>(channels_.size()), class_count_, 1).bias(true));
    set_identity_selection();
}

void LogitsConvEnsemble::set_identity_selection() {
    torch::NoGradGuard no_grad;
    conv_->weight.zero_();
    conv_->bias.zero_();
    for (int c = 1; c <= class_count_; ++c) {
        conv_->weight[c - 1][static_cast<int64_t>(designated_channel(organ_from_label(c)))].fill_(1.0);
    }
}

torch::Tensor LogitsConvEnsemble::forward(const torch::Tensor& logits, const std::vector<torch::Tensor>&) {
    return conv_->forward(logits);
}

std::vector<torch::Tensor> LogitsConvEnsemble::parameters() { return {conv_->weight, conv_->bias}; }

models::NamedTensors LogitsConvEnsemble::state() {
    return {{"fusion.weight", conv_->weight.detach().clone()}, {"fusion.bias", conv_->bias.detach().clone()}};
}

void LogitsConvEnsemble::load_state(const models::NamedTensors& state) {
    if (state.size() != 2 || state[0].first != "fusion.weight" || state[1].first != "fusion.bias") {
        throw IntegrityError("logits-conv state does not match");
    }
    set_parameters(state[0].second.view({class_count_, -1}), state[1].second);
}

torch::Tensor LogitsConvEnsemble::weights() const { return conv_->weight.detach().view({class_count_, -1}).clone(); }

torch::Tensor LogitsConvEnsemble::class_weights(Organ organ) const {
    const int c = organ_label(organ);
    if (c > class_count_) throw ArgumentError("organ outside the class range");
    return weights()[c - 1];
}

torch::Tensor LogitsConvEnsemble::bias() const { return conv_->bias.detach().clone(); }

void LogitsConvEnsemble::set_parameters(const torch::Tensor& weight, const torch::Tensor& bias) {
    const auto n = static_cast<int64_t>(channels_.size());
    if (weight.dim() != 2 || weight.size(0) != class_count_ || weight.size(1) != n || bias.dim() != 1 ||
        bias.size(0) != class_count_) {
        throw ConfigError("logits-conv parameters must be (C, N) and (C)");
    }
    torch::NoGradGuard no_grad;
    conv_->weight.copy_(weight.view({class_count_, n, 1, 1}));
    conv_->bias.copy_(bias);
}

MetaModelEnsemble::MetaModelEnsemble(std::vector<ChannelMeta> channels, int class_count, double threshold, double width,
                                     int depth)
    : EnsembleModel(std::move(channels), class_count, threshold) {
    models::NetConfig cfg;
    cfg.backbone = models::Backbone::UNet;
    cfg.in_channels = static_cast<int64_t>(channels_.size());
    cfg.out_channels = class_count_;
    cfg.width = std::max(width, kMetaChannelsPerInput * static_cast<double>(cfg.in_channels) / 64.0);
    cfg.depth = depth;
    meta_ = models::make_net(cfg);
}

torch::Tensor MetaModelEnsemble::forward(const torch::Tensor& logits, const std::vector<torch::Tensor>&) {
    if (logits.size(1) != meta_->config().in_channels) throw ConfigError("meta-model channel mismatch");
    return meta_->forward(logits);
}

models::NamedTensors MetaModelEnsemble::state() {
    models::NamedTensors out;
    for (auto& [name, t] : models::module_state(*meta_)) out.emplace_back("meta." + name, t.detach().clone());
    return out;
}

void MetaModelEnsemble::load_state(const models::NamedTensors& state) {
    models::NamedTensors inner;
    for (const auto& [name, t] : state) {
        if (name.rfind("meta.", 0) != 0) throw IntegrityError("unexpected tensor '" + name + "' in meta-model state");
        inner.emplace_back(name.substr(5), t);
    }
    models::load_module_state(*meta_, inner);
}

namespace {

bool is_head(const std::string& name) { return name.rfind("head.", 0) == 0; }

models::SegmentationNet copy_net(models::SegmentationNetImpl& source) {
    auto net = models::make_net(source.config());
    models::load_module_state(*net, models::module_state(source));
    net->eval();
    for (auto& p : net->named_parameters()) p.value().set_requires_grad(is_head(p.key()));
    return net;
}

}  // namespace

LayerFusionEnsemble::LayerFusionEnsemble(const std::vector<Branch>& branches, std::vector<ChannelMeta> channels,
                                         int class_count, double threshold)
    : EnsembleModel(std::move(channels), class_count, threshold) {
    int64_t total = 0;
    for (const auto& b : branches) {
        nets_.push_back(copy_net(*b.model.net));
        offsets_.push_back(total);
        total += b.model.penultimate_feature_count();
    }
    fusion_weight_ = torch::zeros({class_count_, total});
    fusion_bias_ = torch::zeros({class_count_});
    for (int c = 1; c <= class_count_; ++c) {
        const auto& ch = channels_[designated_channel(organ_from_label(c))];
        const auto& net = nets_[ch.branch];
        const int64_t row = net->config().out_channels == 1 ? 0 : c;
        const auto f = net->feature_count();
        fusion_weight_[c - 1].slice(0, offsets_[ch.branch], offsets_[ch.branch] + f).copy_(
            net->projection->weight.detach()[row].view({f}));
        fusion_bias_[c - 1].copy_(net->projection->bias.detach()[row]);
    }
    fusion_weight_.set_requires_grad(true);
    fusion_bias_.set_requires_grad(true);
}

torch::Tensor LayerFusionEnsemble::forward(const torch::Tensor& logits, const std::vector<torch::Tensor>& trunks) {
    if (trunks.size() != nets_.size()) throw ArgumentError("layer fusion needs one trunk output per branch");
    const auto h = logits.size(2);
    const auto w = logits.size(3);
    torch::Tensor out;
    for (size_t b = 0; b < nets_.size(); ++b) {
        const auto f = nets_[b]->feature_count();
        const auto block = fusion_weight_.slice(1, offsets_[b], offsets_[b] + f).reshape({class_count_, f, 1, 1});
        auto part = nets_[b]->project(trunks[b], block, torch::Tensor(), h, w);
        out = out.defined() ? out + part : part;
    }
    return out + fusion_bias_.view({1, -1, 1, 1});
}

torch::Tensor LayerFusionEnsemble::fuse_features(const std::vector<torch::Tensor>& features) {
    if (features.size() != nets_.size()) throw ArgumentError("layer fusion needs one feature map per branch");
    const auto h = features[0].size(2);
    const auto w = features[0].size(3);
    torch::Tensor out;
    for (size_t b = 0; b < nets_.size(); ++b) {
        const auto f = nets_[b]->feature_count();
        if (features[b].size(1) != f) throw ArgumentError("feature count mismatch for branch " + std::to_string(b));
        if (features[b].size(2) != h || features[b].size(3) != w) {
            throw std::logic_error("layer fusion: branch feature maps are not spatially aligned");
        }
        const auto block = fusion_weight_.slice(1, offsets_[b], offsets_[b] + f).reshape({class_count_, f, 1, 1});
        auto part = F::conv2d(features[b], block);
        out = out.defined() ? out + part : part;
    }
    return out + fusion_bias_.view({1, -1, 1, 1});
}

std::vector<torch::Tensor> LayerFusionEnsemble::parameters() {
    std::vector<torch::Tensor> out{fusion_weight_, fusion_bias_};
    for (auto& net : nets_) {
        for (auto& p : net->head_parameters()) out.push_back(p);
    }
    return out;
}

models::NamedTensors LayerFusionEnsemble::state() {
    models::NamedTensors out{{"fusion.weight", fusion_weight_.detach().clone()},
                             {"fusion.bias", fusion_bias_.detach().clone()}};
    for (size_t b = 0; b < nets_.size(); ++b) {
        for (auto& [name, t] : models::module_state(*nets_[b])) {
            if (is_head(name)) out.emplace_back("branch" + std::to_string(b) + "." + name, t.detach().clone());
        }
    }
    return out;
}

void LayerFusionEnsemble::load_state(const models::NamedTensors& state) {
    const auto current = this->state();
    if (current.size() != state.size()) throw IntegrityError("layer-fusion state size mismatch");
    for (size_t i = 0; i < state.size(); ++i) {
        if (current[i].first != state[i].first || current[i].second.sizes() != state[i].second.sizes()) {
            throw IntegrityError("layer-fusion state tensor '" + state[i].first + "' does not match");
        }
    }
    torch::NoGradGuard no_grad;
    fusion_weight_.copy_(state[0].second);
    fusion_bias_.copy_(state[1].second);
    size_t k = 2;
    for (auto& net : nets_) {
        for (auto& [name, t] : models::module_state(*net)) {
            if (is_head(name)) t.copy_(state[k++].second);
        }
    }
}

std::unique_ptr<EnsembleModel> make_ensemble(Strategy strategy, const std::vector<Branch>& branches, int class_count,
                                             double threshold, uint64_t seed, double width) {
    auto channels = channel_layout(branches);
    switch (strategy) {
        case Strategy::Argmax: return std::make_unique<ArgmaxEnsemble>(std::move(channels), class_count, threshold);
        case Strategy::LogitsConv:
            return std::make_unique<LogitsConvEnsemble>(std::move(channels), class_count, threshold);
        case Strategy::MetaModel:
            torch::manual_seed(seed);
            return std::make_unique<MetaModelEnsemble>(std::move(channels), class_count, threshold, width);
        case Strategy::LayerFusion:
            return std::make_unique<LayerFusionEnsemble>(branches, std::move(channels), class_count, threshold);
    }
    throw ArgumentError("invalid strategy");
}

std::unique_ptr<EnsembleModel> make_ensemble(const EnsembleSpec& spec, const std::vector<Branch>& branches,
                                             uint64_t seed, double width) {
    spec.validate();
    if (branches.size() != spec.branches.size()) throw ConfigError("branch count differs from the spec");
    return make_ensemble(spec.strategy, branches, spec.class_count, spec.threshold, seed, width);
}

std::string frozen_digest(models::SegmentationNetImpl& net, Strategy strategy) {
    if (strategy == Strategy::LayerFusion) {
        return models::state_digest(net, [](const std::string& name) { return !is_head(name); });
    }
    return models::state_digest(net);
}

// Training ------------------------------------------------------------------------

EnsembleData build_ensemble_data(std::vector<Branch>& branches, const training::SliceSet& slices, int class_count,
                                 bool with_trunks) {
    EnsembleData out;
    out.reserve(slices.size());
    for (const auto& s : slices) {
        auto a = compute_activations(branches, s.hu, with_trunks);
        a.logits = a.logits.to(torch::kHalf);
        for (auto& t : a.trunks) t = t.to(torch::kHalf);
        const auto labels =
            torch::from_blob(const_cast<uint8_t*>(s.labels.data.data()), {s.labels.rows, s.labels.cols}, torch::kUInt8);
        std::vector<torch::Tensor> target;
        for (int c = 1; c <= class_count; ++c) target.push_back(labels.eq(c).to(torch::kUInt8));
        out.push_back({std::move(a), torch::stack(target)});
    }
    return out;
}

training::FitResult train_ensemble(EnsembleModel& ensemble, const EnsembleData& train, const EnsembleData& val,
                                   const training::TrainConfig& config,
                                   const std::optional<fs::path>& log_path) {
    if (!ensemble.trainable()) throw ArgumentError("the argmax ensemble has no trainable parameters");
    if (train.empty()) throw ArgumentError("train_ensemble: empty training set");
    if (val.empty()) throw ArgumentError("train_ensemble: empty validation set");
    if (ensemble.needs_trunks() && train.front().activations.trunks.empty()) {
        throw ArgumentError("layer fusion needs cached trunk outputs");
    }
    torch::manual_seed(config.seed);

    // Samples are addressed by index; the batch tensor carries indices, with
    // the sign distinguishing the validation set.
    auto gather = [&train, &val](const torch::Tensor& ids) {
        std::vector<torch::Tensor> logits;
        std::vector<std::vector<torch::Tensor>> trunks;
        for (int64_t k = 0; k < ids.size(0); ++k) {
            const auto id = ids[k].item<int64_t>();
            const auto& s = id >= 0 ? train[static_cast<size_t>(id)] : val[static_cast<size_t>(-id - 1)];
            logits.push_back(s.activations.logits);
            trunks.resize(s.activations.trunks.size());
            for (size_t b = 0; b < s.activations.trunks.size(); ++b) trunks[b].push_back(s.activations.trunks[b]);
        }
        std::vector<torch::Tensor> batched;
        for (auto& t : trunks) batched.push_back(torch::stack(t).to(torch::kFloat32));
        return std::make_pair(torch::stack(logits).to(torch::kFloat32), batched);
    };

    training::FitTask task;
    task.parameters = ensemble.parameters();
    task.forward = [&ensemble, gather](const torch::Tensor& ids) {
        auto [logits, trunks] = gather(ids);
        return ensemble.forward(logits, trunks);
    };
    task.set_training = [&ensemble](bool on) { ensemble.set_training(on); };
    task.snapshot = [&ensemble] { return ensemble.state(); };
    task.restore = [&ensemble](const models::NamedTensors& s) { ensemble.load_state(s); };
    task.head = training::HeadKind::Multilabel;
    task.train_size = train.size();
    task.val_size = val.size();
    task.train_example = [&train](size_t i, std::optional<uint64_t>) {
        return training::Example{torch::tensor(static_cast<int64_t>(i)), train[i].target.to(torch::kFloat32)};
    };
    task.val_example = [&val](size_t i) {
        return training::Example{torch::tensor(-static_cast<int64_t>(i) - 1), val[i].target.to(torch::kFloat32)};
    };
    auto cfg = config;
    cfg.augment = false;
    return training::fit(task, cfg, log_path);
}

// Persistence -----------------------------------------------------------------------

models::Checkpoint save_ensemble(EnsembleModel& ensemble, const std::vector<Branch>& branches,
                                 const models::TrainingMeta& meta) {
    nlohmann::json header;
    header["kind"] = "ensemble";
    header["strategy"] = std::string(strategy_name(ensemble.strategy()));
    header["class_count"] = ensemble.class_count();
    header["threshold"] = ensemble.threshold();
    nlohmann::json br = nlohmann::json::array();
    for (const auto& b : branches) {
        br.push_back({{"digest", b.digest},
                      {"backbone", std::string(models::backbone_name(b.model.backbone()))},
                      {"organ", b.model.organ ? std::string(organ_name(*b.model.organ)) : std::string("multiclass")}});
    }
    header["branches"] = br;
    if (auto* m = dynamic_cast<MetaModelEnsemble*>(&ensemble)) {
        header["meta"] = {{"width", m->meta()->config().width}, {"depth", m->meta()->config().depth}};
    }
    header["training"] = {{"epochs", meta.epochs},
                          {"best_val_loss", meta.best_val_loss},
                          {"seed", meta.seed},
                          {"config_digest", meta.config_digest}};
    return models::make_checkpoint(std::move(header), ensemble.state());
}

std::unique_ptr<EnsembleModel> load_ensemble(const models::Checkpoint& checkpoint, const std::vector<Branch>& branches) {
    checkpoint.verify();
    const auto& h = checkpoint.header;
    if (h.value("kind", "") != "ensemble") throw ConfigError("checkpoint does not hold an ensemble");
    const auto& recorded = h.at("branches");
    if (recorded.size() != branches.size()) throw IntegrityError("ensemble was saved over a different branch count");
    for (size_t i = 0; i < branches.size(); ++i) {
        if (recorded[i].at("digest").get<std::string>() != branches[i].digest) {
            throw IntegrityError("branch " + std::to_string(i) + " changed since the ensemble was trained");
        }
    }
    const auto strategy = strategy_from_name(h.at("strategy").get<std::string>());
    std::unique_ptr<EnsembleModel> e;
    if (strategy == Strategy::MetaModel) {
        e = std::make_unique<MetaModelEnsemble>(channel_layout(branches), h.at("class_count").get<int>(),
                                                h.at("threshold").get<double>(),
                                                h.at("meta").at("width").get<double>(),
                                                h.at("meta").at("depth").get<int>());
    } else {
        e = make_ensemble(strategy, branches, h.at("class_count").get<int>(), h.at("threshold").get<double>());
    }
    e->load_state(models::deserialize_tensors(checkpoint.blob));
    return e;
}

// Volumes -----------------------------------------------------------------------------

std::vector<VolumePrediction> predict_volume(const std::vector<EnsembleModel*>& ensembles, std::vector<Branch>& branches,
                                             const CtVolume& volume) {
    const auto& v = volume.voxels;
    if (v.rows < preproc::kCropSize || v.cols < preproc::kCropSize) {
        throw ArgumentError("volume slices are smaller than the model input");
    }
    if (!(volume.spacing.z > 0 && volume.spacing.y > 0 && volume.spacing.x > 0)) {
        log::warn("volume '", volume.patient_id, "' has no valid spacing; HD95 will be in voxels");
    }
    const bool trunks = std::any_of(ensembles.begin(), ensembles.end(), [](auto* e) { return e->needs_trunks(); });
    std::vector<VolumePrediction> out(ensembles.size());
    for (size_t k = 0; k < ensembles.size(); ++k) {
        const int c = ensembles[k]->class_count();
        out[k].labels.labels = Grid3<uint8_t>(v.depth, v.rows, v.cols);
        out[k].labels.class_count = c;
        out[k].per_class.assign(static_cast<size_t>(c), Grid3<uint8_t>(v.depth, v.rows, v.cols));
    }
    auto paste = [&](Grid3<uint8_t>& dst, int64_t z, const torch::Tensor& crop) {
        const auto t = crop.to(torch::kUInt8).contiguous();
        Image2D<uint8_t> img(t.size(0), t.size(1));
        std::copy_n(t.data_ptr<uint8_t>(), img.size(), img.data.begin());
        dst.set_slice(z, preproc::uncrop(img, v.rows, v.cols));
    };
    for (int64_t z = 0; z < v.depth; ++z) {
        const auto acts = compute_activations(branches, v.slice(z), trunks);
        for (size_t k = 0; k < ensembles.size(); ++k) {
            const auto pred = ensembles[k]->predict(acts);
            for (int c = 0; c < ensembles[k]->class_count(); ++c) paste(out[k].per_class[static_cast<size_t>(c)], z, pred.masks[c]);
            paste(out[k].labels.labels, z, exclusive_label_map(pred));
        }
    }
    return out;
}

VolumePrediction predict_volume(EnsembleModel& ensemble, std::vector<Branch>& branches, const CtVolume& volume) {
    return std::move(predict_volume(std::vector<EnsembleModel*>{&ensemble}, branches, volume).front());
}

}  // namespace segens::ensembles
