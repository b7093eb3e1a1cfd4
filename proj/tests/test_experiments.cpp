#include <filesystem>
#include <set>

#include <gtest/gtest.h>

#include "loraview/experiments/experiments.hpp"

using namespace loraview;
using namespace loraview::experiments;

namespace {

fs::path scratch(const std::string& name) {
    auto p = fs::temp_directory_path() / ("loraview_" + name);
    fs::remove_all(p);
    return p;
}

// A few iterations of everything on a small model; exercises the plumbing only.
ExperimentManifest tiny_manifest(const fs::path& out) {
    ExperimentManifest m;
    m.seeds = {0};
    m.denoiser.grid = 16;
    m.denoiser.embed_dim = 16;
    m.denoiser.n_blocks = 1;
    m.denoiser.n_heads = 2;
    m.denoiser.n_timesteps = 10;
    m.pretrain_data.repeats = 1;
    m.pretrain.iterations = 3;
    m.pretrain.warmup = 1;
    m.view_train.iterations = 3;
    m.view_train.lr = 0.1;
    m.object_train = m.view_train;
    m.merge.iterations = 2;
    m.merge.lr = 0.1;
    m.rank = 2;
    m.n_samples = 1;
    m.sample_steps = 2;
    m.sweep_weights = {0.0, 1.0};
    m.views_per_lora = {2};
    m.output_dir = out.string();
    return m;
}

}  // namespace

TEST(Manifest, JsonRoundTripAndDefaults) {
    const auto dir = scratch("manifest");
    fs::create_directories(dir);
    ExperimentManifest m;
    m.target_view = "mid-045";
    m.merge.lambda = 1000;
    m.view_train.lr = 0.2;
    save_manifest(m, dir / "m.json");
    auto back = load_manifest(dir / "m.json");
    EXPECT_EQ(nlohmann::json(back), nlohmann::json(m));

    std::ofstream(dir / "partial.json") << R"({"seeds":[3],"merge":{"lambda":5}})";
    auto partial = load_manifest(dir / "partial.json");
    EXPECT_EQ(partial.seeds, std::vector<std::uint64_t>{3});
    EXPECT_EQ(partial.merge.lambda, 5);
    EXPECT_EQ(partial.merge.iterations, 100u);
    EXPECT_EQ(partial.rank, 8u);

    std::ofstream(dir / "bad.json") << R"({"seeds":"many"})";
    EXPECT_THROW(load_manifest(dir / "bad.json"), ParameterError);
    EXPECT_THROW(load_manifest(dir / "missing.json"), Error);
    fs::remove_all(dir);
}

TEST(Trial, SeedsAreFixedAndDistinct) {
    auto a = trial_seeds(4), b = trial_seeds(4), c = trial_seeds(5);
    EXPECT_EQ(a.view_train, b.view_train);
    EXPECT_EQ(a.sample, b.sample);
    EXPECT_NE(a.view_train, c.view_train);
    std::set<std::uint64_t> s{a.selection, a.view_init, a.view_train, a.object_init, a.object_train, a.merge, a.sample};
    EXPECT_EQ(s.size(), 7u);
}

TEST(Trial, ResolveDrawsDistinctObjectsAndHonoursFixedFactors) {
    ExperimentManifest m;
    std::set<std::size_t> views;
    for (std::uint64_t seed = 0; seed < 40; ++seed) {
        auto t = resolve_trial(m, seed, scenegen::BackgroundId::table_edge);
        EXPECT_NE(t.request.view_object, t.request.novel_object);
        views.insert(t.request.target_view.index());
        EXPECT_EQ(t.id(), "seed-" + std::to_string(seed) + "-table-edge");
    }
    EXPECT_GT(views.size(), 10u);
    m.target_view = "mid-045";
    m.view_object = "star";
    m.novel_object = "ring";
    auto t = resolve_trial(m, 7, scenegen::BackgroundId::plain);
    EXPECT_EQ(t.request.target_view.name(), "mid-045");
    EXPECT_EQ(t.request.view_object, scenegen::ObjectId::star);
    EXPECT_EQ(t.request.novel_object, scenegen::ObjectId::ring);
    m.novel_object = "blob";
    EXPECT_THROW(resolve_trial(m, 7, scenegen::BackgroundId::plain), ParameterError);
}

TEST(Stage, ErrorsCarryTheStageName) {
    try {
        run_stage("merge", []() -> int { throw ShapeError("gates 1x3"); });
        FAIL();
    } catch (const StageError& e) {
        EXPECT_EQ(e.stage(), "merge");
        EXPECT_NE(std::string(e.what()).find("gates 1x3"), std::string::npos);
    }
    EXPECT_EQ(arm_name(0.5), "linear-0.5");
    EXPECT_EQ(arm_name(0.9), "linear-0.9");
}

TEST(Pipeline, BaseIsPretrainedOnceThenReused) {
    const auto dir = scratch("base");
    auto m = tiny_manifest(dir);
    auto a = ensure_base(m);
    ASSERT_TRUE(fs::exists(m.base_path()));
    EXPECT_TRUE(fs::exists(dir / "base.loss.csv"));
    auto b = ensure_base(m);
    EXPECT_TRUE(a.bit_equal(b));
    m.denoiser.embed_dim = 32;
    EXPECT_THROW(ensure_base(m), StageError);
    fs::remove_all(dir);
}

TEST(Pipeline, TinyTrialIsByteReproducible) {
    const auto d1 = scratch("trial1"), d2 = scratch("trial2");
    auto m1 = tiny_manifest(d1), m2 = tiny_manifest(d2);
    auto base = ensure_base(m1);
    auto t = resolve_trial(m1, 0, scenegen::BackgroundId::table_edge);
    auto r1 = run_trial(m1, base, t);
    auto r2 = run_trial(m2, base, t);
    std::vector<std::string> arms;
    for (const auto& a : r1.arms) arms.push_back(a.arm);
    EXPECT_EQ(arms, (std::vector<std::string>{"gated", "linear-0.5", "linear-0.9", "object-only", "base"}));
    for (const char* f : {"view.lvt", "object.lvt", "gates.lvt", "metrics.csv", "samples/gated-0.pgm"})
        EXPECT_EQ(lora::read_bytes(m1.root() / t.id() / f), lora::read_bytes(m2.root() / t.id() / f)) << f;
    // a stage rerun from the saved adapters gives the same gates
    auto splits = scenegen::make_splits(t.request);
    auto v = lora::load_adapter(m1.root() / t.id() / "view.lvt");
    auto o = lora::load_adapter(m1.root() / t.id() / "object.lvt");
    const auto again = scratch("trial3");
    fs::create_directories(again);
    stage_merge(m1, base, t, splits, v, o, again);
    EXPECT_EQ(lora::read_bytes(again / "gates.lvt"), lora::read_bytes(m1.root() / t.id() / "gates.lvt"));
    for (const auto& d : {d1, d2, again}) fs::remove_all(d);
}

TEST(Pipeline, AblationsWriteTheirTables) {
    const auto dir = scratch("ablate");
    auto m = tiny_manifest(dir);
    auto base = ensure_base(m);
    auto sweep = ablate_linear_weights(m, base);
    EXPECT_EQ(sweep.size(), 2u);
    EXPECT_TRUE(fs::exists(m.root() / "ablate-linear" / "linear_sweep.csv"));
    auto mv = ablate_multiview(m, base);
    EXPECT_EQ(mv.rows.size(), 2u);  // k = 1 and k = 2
    auto bg = ablate_background(m, base, {"plain", "table-edge"});
    EXPECT_EQ(bg.rows.size(), 2u);
    fs::remove_all(dir);
}
