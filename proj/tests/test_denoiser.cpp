#include <filesystem>

#include <gtest/gtest.h>

#include "loraview/denoiser/train.hpp"

using namespace loraview;
using namespace loraview::denoiser;

namespace {

DenoiserConfig tiny_config() {
    DenoiserConfig c;
    c.grid = 16;
    c.embed_dim = 16;
    c.n_blocks = 1;
    c.n_heads = 2;
    c.n_timesteps = 10;
    return c;
}

// Init leaves every adaLN gate at zero; randomizing them lets the attention
// path and the prompt reach the output.
ModelWeights live_weights(const DenoiserConfig& cfg, std::uint64_t seed) {
    ModelWeights w = init_weights(cfg, seed);
    Rng r(seed + 1);
    for (auto& [k, m] : w.tensors)
        if (k.find(".mod") != std::string::npos || k == "head.w") m = r.normal_matrix(m.rows(), m.cols(), 0.3);
    return w;
}

scenegen::Dataset tiny_grid(std::size_t grid) {
    scenegen::PretrainOptions po;
    po.grid = grid;
    po.repeats = 1;
    return scenegen::make_pretrain_split(po);
}

}  // namespace

TEST(Schedule, MatchesHandComputedProducts) {
    DenoiserConfig cfg;
    NoiseSchedule s(cfg);
    ASSERT_EQ(s.size(), 100u);
    double prod = 1.0;
    for (std::size_t t = 0; t < 100; ++t) {
        const double beta = (1e-4 + (0.02 - 1e-4) * t / 99.0) * 5.0;
        prod *= 1.0 - beta;
        EXPECT_NEAR(s.beta(t), beta, 1e-15);
        EXPECT_NEAR(s.alpha_bar(t), prod, 1e-14);
    }
    EXPECT_NEAR(s.alpha_bar(99), 0.0055, 1e-4);
    EXPECT_EQ(s.alpha_bar_prev(0), 1.0);
}

TEST(Schedule, SamplingTimesteps) {
    EXPECT_EQ(sampling_timesteps(100, 4), (std::vector<std::size_t>{75, 50, 25, 0}));
    EXPECT_EQ(sampling_timesteps(10, 10).front(), 9u);
    EXPECT_THROW(sampling_timesteps(10, 0), ParameterError);
    EXPECT_THROW(sampling_timesteps(10, 11), ParameterError);
}

TEST(Layout, PatchifyRasterOrderAndInverse) {
    Matrix img(8, 8);
    for (std::size_t i = 0; i < 64; ++i) img[i] = static_cast<float>(i);
    Matrix p = patchify(img, 4);
    ASSERT_EQ(p.rows(), 4u);
    // patch 1 is the top-right block; its second row starts at pixel (1, 4)
    EXPECT_EQ(p(1, 4), img(1, 4));
    EXPECT_EQ(p(2, 0), img(4, 0));
    EXPECT_TRUE(unpatchify(p, 4).bit_equal(img));
}

TEST(Layout, TimestepFeaturesAreSinusoids) {
    Matrix f = timestep_features(30, 100, 8);
    for (std::size_t i = 0; i < 4; ++i) {
        const double w = std::pow(1000.0, -static_cast<double>(i) / 4.0);
        EXPECT_NEAR(f(0, i), std::sin(300.0 * w), 1e-6);
        EXPECT_NEAR(f(0, 4 + i), std::cos(300.0 * w), 1e-6);
    }
}

TEST(Model, InitShapesAndDeterminism) {
    const auto cfg = tiny_config();
    auto a = init_weights(cfg, 3), b = init_weights(cfg, 3), c = init_weights(cfg, 4);
    EXPECT_TRUE(a.bit_equal(b));
    EXPECT_FALSE(a.bit_equal(c));
    for (const auto& [k, shape] : canonical_shapes(cfg)) {
        EXPECT_EQ(a.at(k).rows(), shape.first) << k;
        EXPECT_EQ(a.at(k).cols(), shape.second) << k;
    }
    EXPECT_EQ(attention_projection_keys(cfg).size(), 8u);
}

TEST(Model, FreshBlocksAreTheIdentity) {
    // zero gates: attention weights cannot influence the output
    const auto cfg = tiny_config();
    auto w = init_weights(cfg, 0);
    Rng r(1);
    const Matrix x = r.normal_matrix(16, 16);
    const auto prompt = scenegen::class_caption(scenegen::ObjectId::star);
    Matrix before = forward(w, nullptr, x, 5, prompt);
    w.tensors.at("block0.self.q") = r.normal_matrix(16, 16);
    EXPECT_TRUE(forward(w, nullptr, x, 5, prompt).bit_equal(before));
}

TEST(Model, ForwardDependsOnPromptAndDeltas) {
    const auto cfg = tiny_config();
    auto w = live_weights(cfg, 0);
    Rng r(2);
    const Matrix x = r.normal_matrix(16, 16);
    const auto star = scenegen::class_caption(scenegen::ObjectId::star);
    Matrix a = forward(w, nullptr, x, 5, star);
    ASSERT_EQ(a.rows(), 16u);
    EXPECT_TRUE(forward(w, nullptr, x, 5, star).bit_equal(a));
    EXPECT_GT(relative_error(forward(w, nullptr, x, 5, scenegen::PromptTokens{}), a), 1e-4);
    EXPECT_GT(relative_error(forward(w, nullptr, x, 5, scenegen::class_caption(scenegen::ObjectId::ring)), a), 1e-4);
    std::map<std::string, Matrix> d{{"block0.cross.v", r.normal_matrix(16, 16)}};
    EXPECT_GT(relative_error(forward(w, &d, x, 5, star), a), 1e-4);
    std::map<std::string, Matrix> bad{{"block7.cross.v", Matrix(16, 16)}};
    EXPECT_THROW(forward(w, &bad, x, 5, star), KeyError);
    EXPECT_THROW(forward(w, nullptr, Matrix(8, 8), 5, star), ShapeError);
    EXPECT_THROW(forward(w, nullptr, x, 10, star), ParameterError);
}

TEST(Diffusion, LossIsWeightedNoiseError) {
    const auto cfg = tiny_config();
    auto w = live_weights(cfg, 0);
    const NoiseSchedule sched(cfg);
    auto scene = scenegen::render({scenegen::ObjectId::ring, scenegen::ViewId::from_index(4),
                                   scenegen::BackgroundId::plain, 16}, 0);
    const auto prompt = scenegen::class_caption(scenegen::ObjectId::ring);
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        Tape tape;
        Rng rng(seed);
        Var l = diffusion_loss(bind(tape, w, false), {}, sched, scene.image, prompt, rng);
        // replay the same draws by hand
        Rng replay(seed);
        const std::size_t t = replay.below(cfg.n_timesteps);
        Matrix eps = replay.normal_matrix(16, 16);
        Matrix x0 = scene.image;
        for (auto& v : x0.values()) v = 2 * v - 1;
        Matrix xt(16, 16);
        const double ab = sched.alpha_bar(t);
        for (std::size_t i = 0; i < xt.size(); ++i)
            xt[i] = static_cast<float>(std::sqrt(ab) * x0[i] + std::sqrt(1 - ab) * eps[i]);
        Matrix pred = forward(w, nullptr, xt, t, prompt);
        double se = 0;
        for (std::size_t i = 0; i < pred.size(); ++i) se += (pred[i] - eps[i]) * (pred[i] - eps[i]);
        EXPECT_NEAR(l.value()[0], se / 256.0 / ab, 1e-5 * (se / 256.0 / ab));
    }
}

TEST(Sampling, DeterministicAndInPixelRange) {
    const auto cfg = tiny_config();
    auto w = live_weights(cfg, 0);
    const auto prompt = scenegen::class_caption(scenegen::ObjectId::cross);
    Matrix a = sample_ddim(w, nullptr, prompt, 11, {5, true});
    EXPECT_TRUE(sample_ddim(w, nullptr, prompt, 11, {5, true}).bit_equal(a));
    EXPECT_FALSE(sample_ddim(w, nullptr, prompt, 12, {5, true}).bit_equal(a));
    for (float v : a.values()) {
        EXPECT_GE(v, 0.0f);
        EXPECT_LE(v, 1.0f);
    }
    Matrix m = sample_ancestral_mean(w, nullptr, prompt, 11);
    EXPECT_TRUE(sample_ancestral_mean(w, nullptr, prompt, 11).bit_equal(m));
}

TEST(Sampling, SingleDdimStepFromPureNoiseIsTheClippedEstimate) {
    // one step: x_prev = x0_hat with abar_prev = 1
    const auto cfg = tiny_config();
    auto w = live_weights(cfg, 0);
    const auto prompt = scenegen::class_caption(scenegen::ObjectId::cross);
    const NoiseSchedule s(cfg);
    Rng rng(5);
    Matrix x = rng.normal_matrix(16, 16);
    Matrix eps = forward(w, nullptr, x, 0, prompt);
    Matrix got = sample_ddim(w, nullptr, prompt, 5, {1, false});
    const double a = std::sqrt(s.alpha_bar(0)), b = std::sqrt(1 - s.alpha_bar(0));
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double x0 = (x[i] - b * eps[i]) / a;
        EXPECT_NEAR(got[i], std::clamp(0.5 * (x0 + 1), 0.0, 1.0), 1e-5);
    }
}

TEST(Persistence, ModelRoundTripByteExact) {
    const auto cfg = tiny_config();
    auto w = live_weights(cfg, 0);
    const auto dir = std::filesystem::temp_directory_path();
    save(w, dir / "lv_model.lvt");
    auto back = load_model(dir / "lv_model.lvt");
    EXPECT_TRUE(back.bit_equal(w));
    EXPECT_EQ(back.config.embed_dim, 16u);
    save(back, dir / "lv_model2.lvt");
    EXPECT_EQ(lora::read_bytes(dir / "lv_model.lvt"), lora::read_bytes(dir / "lv_model2.lvt"));
    auto f = to_tensor_file(w);
    f.tensors.erase("head.b");
    EXPECT_THROW(model_from_tensor_file(f), FormatError);
    std::filesystem::remove(dir / "lv_model.lvt");
    std::filesystem::remove(dir / "lv_model2.lvt");
}

TEST(Training, PretrainIsDeterministicAndChecksTheGrid) {
    const auto cfg = tiny_config();
    auto ds = tiny_grid(16);
    PretrainConfig pc;
    pc.iterations = 4;
    pc.warmup = 2;
    auto a = pretrain(cfg, ds, pc), b = pretrain(cfg, ds, pc);
    EXPECT_TRUE(a.weights.bit_equal(b.weights));
    ASSERT_EQ(a.log.rows.size(), 4u);
    ds.items.pop_back();
    ds.items.erase(ds.items.begin());
    EXPECT_THROW(pretrain(cfg, ds, pc), ContractError);
}

TEST(Training, LearningRateScheduleWarmsUpThenDecays) {
    PretrainConfig pc;
    pc.iterations = 1200;
    pc.warmup = 200;
    EXPECT_NEAR(pretrain_lr(pc, 0), pc.lr / 200, 1e-12);
    EXPECT_NEAR(pretrain_lr(pc, 200), pc.lr, 1e-12);
    EXPECT_NEAR(pretrain_lr(pc, 700), 0.5 * pc.lr, 1e-9);
    EXPECT_NEAR(pretrain_lr(pc, 1200), 0.0, 1e-12);
}

TEST(Training, FinetuneTouchesOnlyTheAdapter) {
    const auto cfg = tiny_config();
    auto base = live_weights(cfg, 0);
    const auto snapshot = base;
    Rng r(3);
    auto adapter = lora::make_adapter(attention_projection_shapes(cfg), 2, r, 0.3, "view");
    auto shot = scenegen::render({scenegen::ObjectId::star, scenegen::ViewId::from_index(2),
                                  scenegen::BackgroundId::table_edge, 16}, 0);
    std::vector<scenegen::DatasetItem> items{{shot, scenegen::tokenize_prompt("v0", "o0", "star"), 0}};
    TrainConfig tc;
    tc.iterations = 40;
    tc.lr = 0.05;
    auto res = finetune_lora(base, adapter, items, tc);
    EXPECT_TRUE(base.bit_equal(snapshot));
    EXPECT_GT(frobenius(lora::materialize(res.adapter, "block0.cross.v")), 0.0);
    // same 64 (t, eps) draws before and after
    auto eval = [&](const lora::LoraAdapter& a) {
        const auto deltas = lora::materialize_all(a);
        const NoiseSchedule sched(cfg);
        Rng rng(99);
        double s = 0;
        for (int i = 0; i < 64; ++i) {
            Tape tape;
            DeltaMap dm;
            for (const auto& [k, m] : deltas) dm.emplace(k, tape.constant(m));
            s += diffusion_loss(bind(tape, base, false), dm, sched, shot.image, items[0].prompt, rng).value()[0];
        }
        return s;
    };
    EXPECT_LT(eval(res.adapter), eval(adapter));
    auto again = finetune_lora(base, adapter, items, tc);
    for (const auto& [k, l] : res.adapter.layers) EXPECT_TRUE(again.adapter.layers.at(k).b.bit_equal(l.b));

    auto stray = lora::make_adapter({{"head.w", {16, 16}}}, 2, r, 0.1);
    EXPECT_THROW(finetune_lora(base, stray, items, tc), ContractError);
    EXPECT_THROW(finetune_lora(base, adapter, {}, tc), ParameterError);
}
