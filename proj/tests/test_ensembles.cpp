#include <doctest.h>

#include <random>

#include "segens/ensembles.hpp"
#include "segens/phantom.hpp"
#include "segens/preprocessing.hpp"
#include "oracles.hpp"
#include "support.hpp"

using namespace segens;
using ensembles::Strategy;
using models::Backbone;

namespace {

ensembles::Branch fresh_branch(Organ organ, Backbone b, uint64_t seed) {
    torch::manual_seed(seed);
    auto m = models::make_binary_model(organ, b);
    auto digest = models::save_checkpoint(m).digest;
    return {std::move(m), std::move(digest)};
}

std::vector<ensembles::Branch> fresh_pool(Backbone b = Backbone::DeepLabV3, uint64_t seed = 1) {
    std::vector<ensembles::Branch> out;
    for (auto organ : kAllOrgans) out.push_back(fresh_branch(organ, b, seed + static_cast<uint64_t>(organ_label(organ))));
    return out;
}

const phantom::PhantomCase& phantom_case() {
    static const auto c = phantom::generate_patient(testsupport::small_phantom(1, 6), 0);
    return c;
}

Image2D<int16_t> phantom_slice(int64_t offset = 0) {
    const auto& c = phantom_case();
    return c.volume.voxels.slice(c.volume.voxels.depth / 2 + offset);
}

ensembles::LogitStack stack_of(const torch::Tensor& values, int classes) {
    ensembles::LogitStack s;
    s.values = values;
    for (int c = 1; c <= classes; ++c) s.meta.push_back({organ_from_label(c), Backbone::UNet, "", static_cast<size_t>(c - 1)});
    return s;
}

torch::Tensor logit(double p) {
    if (p <= 0.0) return torch::tensor(-1e4);
    if (p >= 1.0) return torch::tensor(1e4);
    return torch::tensor(std::log(p / (1 - p)));
}

}  // namespace

TEST_SUITE("ensembles") {

TEST_CASE("argmax examples") {
    const std::vector<double> probs{0.9, 0.2, 0.7, 0.1, 0.1, 0.1};
    auto values = torch::zeros({6, 1, 1});
    for (int c = 0; c < 6; ++c) values[c][0][0] = logit(probs[static_cast<size_t>(c)]);
    CHECK(ensembles::fuse_argmax(stack_of(values, 6), 0.5).item<int64_t>() == 1);
    CHECK(ensembles::fuse_argmax(stack_of(torch::full({6, 1, 1}, -1.0), 6), 0.5).item<int64_t>() == 0);
}

TEST_CASE("argmax matches the reference on the full 3-class grid") {
    const std::vector<double> levels{0.0, 0.25, 0.5, 0.75, 1.0};
    auto probs = torch::zeros({3, 5, 25}, torch::kFloat64);
    std::vector<int64_t> expected;
    for (int i = 0; i < 125; ++i) {
        const std::vector<double> p{levels[static_cast<size_t>(i / 25)], levels[static_cast<size_t>(i / 5 % 5)],
                                    levels[static_cast<size_t>(i % 5)]};
        for (int c = 0; c < 3; ++c) probs[c][i / 25][i % 25] = p[static_cast<size_t>(c)];
        expected.push_back(testsupport::reference_argmax(p, 0.5));
    }
    const auto labels = ensembles::argmax_labels(probs, 0.5);
    for (int i = 0; i < 125; ++i) CHECK(labels[i / 25][i % 25].item<int64_t>() == expected[static_cast<size_t>(i)]);
}

TEST_CASE("argmax is invariant under monotone transforms") {
    auto gen = at::detail::createCPUGenerator(2);
    const auto values = torch::randn({6, 16, 16}, gen) * 3;
    const auto base = ensembles::fuse_argmax(stack_of(values, 6), 0.5);
    const auto scaled = ensembles::argmax_labels(torch::sigmoid(values).pow(3), std::pow(0.5, 3));
    CHECK(torch::equal(base, scaled));
}

TEST_CASE("redundant branches contribute through the per-class max") {
    auto values = torch::full({7, 1, 1}, -5.0);
    values[6][0][0] = 3.0;  // second esophagus channel
    auto s = stack_of(values.slice(0, 0, 6), 6);
    s.values = values;
    s.meta.push_back({Organ::Esophagus, Backbone::DeepLabV3, "", 6});
    CHECK(ensembles::fuse_argmax(s, 0.5).item<int64_t>() == organ_label(Organ::Esophagus));
    const auto pcm = ensembles::per_class_max(s, 6);
    CHECK(pcm[3][0][0].item<float>() == 3.0f);
}

TEST_CASE("logits convolution") {
    auto gen = at::detail::createCPUGenerator(9);
    const auto values = torch::randn({6, 3, 3}, gen);
    const auto s = stack_of(values, 6);

    SUBCASE("single-pixel affine combination") {
        const auto w = torch::randn({6, 6}, gen);
        const auto b = torch::randn({6}, gen);
        const auto pred = ensembles::fuse_logits_conv(s, w, b, 0.5);
        for (int c = 0; c < 6; ++c) {
            double z = b[c].item<double>();
            for (int i = 0; i < 6; ++i) z += w[c][i].item<double>() * values[i][1][2].item<double>();
            const double p = 1.0 / (1.0 + std::exp(-z));
            CHECK(pred.probabilities[c][1][2].item<double>() == doctest::Approx(p).epsilon(1e-5));
            CHECK(pred.masks[c][1][2].item<uint8_t>() == (p >= 0.5 ? 1 : 0));
        }
    }
    SUBCASE("identity selection reproduces per-branch thresholding") {
        const auto pred = ensembles::fuse_logits_conv(s, torch::eye(6), torch::zeros({6}), 0.5);
        CHECK(torch::equal(pred.masks, (torch::sigmoid(values) >= 0.5).to(torch::kUInt8)));
    }
    SUBCASE("permuting branches with the weights leaves the output unchanged") {
        const auto w = torch::randn({6, 6}, gen);
        const auto b = torch::randn({6}, gen);
        const auto perm = torch::tensor({3, 0, 5, 1, 4, 2});
        auto ps = s;
        ps.values = values.index_select(0, perm);
        const auto a = ensembles::fuse_logits_conv(s, w, b, 0.5);
        const auto p = ensembles::fuse_logits_conv(ps, w.index_select(1, perm), b, 0.5);
        CHECK(torch::allclose(a.probabilities, p.probabilities, 1e-6, 1e-6));
    }
    SUBCASE("shape mismatches are configuration errors") {
        CHECK_THROWS_AS(ensembles::fuse_logits_conv(s, torch::zeros({6, 5}), torch::zeros({6}), 0.5), ConfigError);
        CHECK_THROWS_AS(ensembles::fuse_logits_conv(s, torch::zeros({6, 6}), torch::zeros({5}), 0.5), ConfigError);
    }
}

TEST_CASE("exclusive label map resolves overlaps by probability") {
    ensembles::MultiLabelPrediction p;
    p.masks = torch::zeros({3, 1, 3}, torch::kUInt8);
    p.probabilities = torch::zeros({3, 1, 3});
    // Pixel 0: classes 1 and 3 both on, class 3 more confident.
    p.masks[0][0][0] = 1;
    p.masks[2][0][0] = 1;
    p.probabilities[0][0][0] = 0.6;
    p.probabilities[2][0][0] = 0.9;
    // Pixel 1: tie goes to the lower class.
    p.masks[1][0][1] = 1;
    p.masks[2][0][1] = 1;
    p.probabilities[1][0][1] = 0.7;
    p.probabilities[2][0][1] = 0.7;
    const auto labels = ensembles::exclusive_label_map(p);
    CHECK(labels[0][0].item<int64_t>() == 3);
    CHECK(labels[0][1].item<int64_t>() == 2);
    CHECK(labels[0][2].item<int64_t>() == 0);
}

TEST_CASE("branch logit stacks") {
    auto pool = fresh_pool();
    const auto hu = phantom_slice();
    const auto s = ensembles::stack_branch_logits(pool, hu);
    CHECK(s.values.sizes() == std::vector<int64_t>{6, 320, 320});
    CHECK(torch::equal(s.values, ensembles::stack_branch_logits(pool, hu).values));
    for (size_t i = 0; i < pool.size(); ++i) {
        const auto direct = models::forward_logits(pool[i].model, models::preprocess(pool[i].model, preproc::center_crop(hu)));
        CHECK(torch::equal(s.values[static_cast<int64_t>(i)], direct[0]));
        CHECK(s.meta[i].digest == pool[i].digest);
    }
    pool.push_back(fresh_branch(Organ::Esophagus, Backbone::DeepLabV3, 50));
    pool.push_back(fresh_branch(Organ::Trachea, Backbone::UNet, 51));
    CHECK(ensembles::stack_branch_logits(pool, hu).values.size(0) == 8);

    torch::manual_seed(4);
    auto multi = models::make_multiclass_model(Backbone::DeepLabV3);
    pool.push_back({multi, "x"});
    const auto layout = ensembles::channel_layout(pool);
    CHECK(layout.size() == 14);
    CHECK(layout.back().organ == Organ::SpinalCord);
    CHECK(layout.back().branch == 8);
}

TEST_CASE("identity-selection logits conv ensemble reproduces the branches") {
    auto pool = fresh_pool(Backbone::UNet, 20);
    auto e = ensembles::make_ensemble(Strategy::LogitsConv, pool, kOrganCount, 0.5);
    auto& lc = dynamic_cast<ensembles::LogitsConvEnsemble&>(*e);
    CHECK(torch::equal(lc.weights(), torch::eye(6)));
    CHECK(torch::equal(lc.class_weights(Organ::Heart), torch::eye(6)[2]));
    for (int64_t off : {-10, 0, 10}) {
        const auto a = ensembles::compute_activations(pool, phantom_slice(off), false);
        const auto pred = e->predict(a);
        CHECK(torch::equal(pred.masks, (torch::sigmoid(a.logits) >= 0.5).to(torch::kUInt8)));
    }
}

TEST_CASE("meta model output") {
    auto pool = fresh_pool(Backbone::DeepLabV3, 30);
    auto e = ensembles::make_ensemble(Strategy::MetaModel, pool, kOrganCount, 0.5, 7);
    const auto pred = e->predict(ensembles::compute_activations(pool, phantom_slice(), false));
    CHECK(pred.masks.sizes() == std::vector<int64_t>{6, 320, 320});
    CHECK(((pred.masks == 0) | (pred.masks == 1)).all().item<bool>());
    auto& meta = dynamic_cast<ensembles::MetaModelEnsemble&>(*e);
    CHECK(meta.meta()->config().in_channels == 6);
    CHECK(meta.meta()->config().out_channels == 6);
    CHECK(meta.meta()->config().depth == 3);
}

TEST_CASE("layer fusion") {
    SUBCASE("fused channel count for four SE-ResUNets and two DeepLabV3s") {
        std::vector<ensembles::Branch> pool;
        for (auto organ : {Organ::LeftLung, Organ::RightLung, Organ::Esophagus, Organ::SpinalCord}) {
            pool.push_back(fresh_branch(organ, Backbone::SEResUNet, 3));
        }
        for (auto organ : {Organ::Heart, Organ::Trachea}) pool.push_back(fresh_branch(organ, Backbone::DeepLabV3, 4));
        ensembles::LayerFusionEnsemble lf(pool, ensembles::channel_layout(pool), kOrganCount, 0.5);
        CHECK(lf.fused_channel_count() == 768);
    }

    auto pool = fresh_pool(Backbone::DeepLabV3, 40);
    pool[0] = fresh_branch(Organ::LeftLung, Backbone::UNet, 41);
    ensembles::LayerFusionEnsemble lf(pool, ensembles::channel_layout(pool), kOrganCount, 0.5);

    SUBCASE("initialised to reproduce every branch") {
        const auto a = ensembles::compute_activations(pool, phantom_slice(), true);
        const auto fused = lf.forward(a.logits.unsqueeze(0), [&] {
            std::vector<torch::Tensor> t;
            for (const auto& x : a.trunks) t.push_back(x.unsqueeze(0));
            return t;
        }());
        CHECK(torch::allclose(fused.squeeze(0), a.logits, 1e-4, 1e-4));
    }
    SUBCASE("forward agrees with fusing full feature maps") {
        const auto hu = preproc::center_crop(phantom_slice(5));
        std::vector<torch::Tensor> feats, trunks;
        for (auto& b : pool) {
            const auto x = models::preprocess(b.model, hu).unsqueeze(0);
            torch::NoGradGuard g;
            b.model.net->eval();
            feats.push_back(b.model.net->features(x));
            trunks.push_back(b.model.net->trunk_forward(x));
        }
        torch::NoGradGuard g;
        const auto via_features = lf.fuse_features(feats);
        const auto via_trunks = lf.forward(torch::zeros({1, 6, 320, 320}), trunks);
        CHECK(torch::allclose(via_features, via_trunks, 1e-4, 1e-4));
    }
    SUBCASE("all-zero features yield the bias") {
        std::vector<torch::Tensor> feats;
        for (auto& b : pool) feats.push_back(torch::zeros({1, b.model.penultimate_feature_count(), 8, 8}));
        torch::NoGradGuard g;
        const auto out = lf.fuse_features(feats);
        for (int c = 0; c < 6; ++c) CHECK(torch::allclose(out[0][c], lf.fusion_bias()[c].expand({8, 8})));
    }
    SUBCASE("misaligned feature maps are an internal error") {
        std::vector<torch::Tensor> feats;
        int64_t size = 8;
        for (auto& b : pool) feats.push_back(torch::zeros({1, b.model.penultimate_feature_count(), size, size++}));
        CHECK_THROWS_AS(lf.fuse_features(feats), std::logic_error);
    }
}

TEST_CASE("training keeps frozen parameters fixed") {
    auto pool = fresh_pool(Backbone::DeepLabV3, 60);
    const auto& c = phantom_case();
    training::SliceSet slices;
    for (int64_t z = c.volume.voxels.depth / 2 - 4; z < c.volume.voxels.depth / 2 + 4; z += 2) {
        slices.push_back({preproc::center_crop(c.volume.voxels.slice(z)), preproc::center_crop(c.mask.labels.slice(z)),
                          c.volume.patient_id, z});
    }
    const auto data = ensembles::build_ensemble_data(pool, slices, kOrganCount, true);
    training::TrainConfig cfg;
    cfg.max_epochs = 2;
    cfg.batch_size = 2;
    cfg.initial_lr = 1e-2;
    for (auto strategy : {Strategy::LogitsConv, Strategy::MetaModel, Strategy::LayerFusion}) {
        CAPTURE(ensembles::strategy_name(strategy));
        std::vector<std::string> before;
        for (auto& b : pool) before.push_back(models::state_digest(*b.model.net));
        auto e = ensembles::make_ensemble(strategy, pool, kOrganCount, 0.5, 3);
        const auto state_before = e->state();
        std::vector<std::string> frozen_before, head_before;
        auto* lf = dynamic_cast<ensembles::LayerFusionEnsemble*>(e.get());
        if (lf) {
            for (auto& net : lf->branch_nets()) {
                frozen_before.push_back(ensembles::frozen_digest(*net, strategy));
                head_before.push_back(models::state_digest(*net, [](const std::string& n) { return n.rfind("head.", 0) == 0; }));
            }
        }
        ensembles::train_ensemble(*e, data, data, cfg);
        for (size_t i = 0; i < pool.size(); ++i) CHECK(models::state_digest(*pool[i].model.net) == before[i]);
        const auto state_after = e->state();
        bool changed = false;
        for (size_t i = 0; i < state_after.size(); ++i) changed |= !torch::equal(state_before[i].second, state_after[i].second);
        CHECK(changed);
        if (lf) {
            for (size_t b = 0; b < lf->branch_nets().size(); ++b) {
                auto& net = *lf->branch_nets()[b];
                CHECK(ensembles::frozen_digest(net, strategy) == frozen_before[b]);
                CHECK(models::state_digest(net, [](const std::string& n) { return n.rfind("head.", 0) == 0; }) !=
                      head_before[b]);
            }
        }
    }
    auto argmax = ensembles::make_ensemble(Strategy::Argmax, pool, kOrganCount, 0.5);
    CHECK_THROWS_AS(ensembles::train_ensemble(*argmax, data, data, cfg), ArgumentError);
}

TEST_CASE("specs, persistence and integrity") {
    const auto dir = testsupport::temp_dir("ensemble_spec");
    auto pool = fresh_pool(Backbone::DeepLabV3, 70);
    ensembles::EnsembleSpec spec;
    spec.strategy = Strategy::LogitsConv;
    for (size_t i = 0; i < pool.size(); ++i) {
        const auto name = std::string(organ_name(*pool[i].model.organ)) + ".ck";
        models::write_checkpoint(dir / name, models::save_checkpoint(pool[i].model));
        spec.branches.push_back({name, pool[i].model.organ, Backbone::DeepLabV3, pool[i].model.windows, pool[i].digest});
    }
    ensembles::write_spec(dir / "spec.json", spec);
    const auto read = ensembles::read_spec(dir / "spec.json");
    CHECK(read.branches.size() == 6);
    CHECK(read.branches[0].checkpoint == dir / "left_lung.ck");
    CHECK(read.to_json()["strategy"] == "logits_conv");
    auto loaded = ensembles::load_branches(read);
    CHECK(loaded.size() == 6);

    SUBCASE("ensemble checkpoints round trip") {
        auto e = ensembles::make_ensemble(read, loaded);
        auto& lc = dynamic_cast<ensembles::LogitsConvEnsemble&>(*e);
        auto gen = at::detail::createCPUGenerator(1);
        lc.set_parameters(torch::randn({6, 6}, gen), torch::randn({6}, gen));
        const auto ck = ensembles::save_ensemble(*e, loaded);
        models::write_checkpoint(dir / "ens.ck", ck);
        auto back = ensembles::load_ensemble(models::read_checkpoint(dir / "ens.ck"), loaded);
        const auto a = ensembles::compute_activations(loaded, phantom_slice(), false);
        CHECK(torch::equal(back->predict(a).masks, e->predict(a).masks));

        auto changed = loaded;
        changed[2] = fresh_branch(Organ::Heart, Backbone::DeepLabV3, 999);
        CHECK_THROWS_AS(ensembles::load_ensemble(ck, changed), IntegrityError);
    }
    SUBCASE("missing organs and files") {
        auto partial = spec;
        partial.branches.pop_back();
        CHECK_THROWS_AS(partial.validate(), ConfigError);
        auto missing = read;
        missing.branches[1].checkpoint = dir / "nope.ck";
        CHECK_THROWS_AS(ensembles::load_branches(missing), ConfigError);
        auto tampered = read;
        tampered.branches[1].digest = std::string(64, '0');
        CHECK_THROWS_AS(ensembles::load_branches(tampered), IntegrityError);
    }
}

TEST_CASE("volume prediction") {
    auto pool = fresh_pool(Backbone::DeepLabV3, 80);
    auto e = ensembles::make_ensemble(Strategy::Argmax, pool, kOrganCount, 0.5);
    const auto& c = phantom_case();
    CtVolume v = c.volume;
    const int64_t mid = c.volume.voxels.depth / 2;
    v.voxels = Grid3<int16_t>(2, c.volume.voxels.rows, c.volume.voxels.cols);
    for (int64_t z = 0; z < 2; ++z) v.voxels.set_slice(z, c.volume.voxels.slice(mid + z));
    const auto p = ensembles::predict_volume(*e, pool, v);
    CHECK(p.labels.labels.shape() == v.voxels.shape());
    CHECK(p.per_class.size() == 6);

    // A strongly negative bias silences every class, leaving only background.
    auto lc = ensembles::make_ensemble(Strategy::LogitsConv, pool, kOrganCount, 0.5);
    dynamic_cast<ensembles::LogitsConvEnsemble&>(*lc).set_parameters(torch::zeros({6, 6}), torch::full({6}, -50.0));
    const auto empty = ensembles::predict_volume(*lc, pool, v);
    CHECK(std::all_of(empty.labels.labels.data.begin(), empty.labels.labels.data.end(), [](uint8_t x) { return x == 0; }));
}

}
