#include <filesystem>

#include <gtest/gtest.h>

#include "loraview/scenegen/dataset.hpp"
#include "loraview/scenegen/pgm.hpp"

using namespace loraview;
using namespace loraview::scenegen;

namespace {

// Circle of radius 0.95 * 0.3 * grid around the view centre, squashed
// vertically by the elevation's foreshortening; written out from the scene
// description rather than through the renderer's frame transform.
bool circle_oracle(std::size_t x, std::size_t y, double grid, double centre_y_frac, double squash) {
    const double r = 0.95 * 0.3 * grid;
    const double dx = (x + 0.5 - 0.5 * grid) / r;
    const double dy = (y + 0.5 - centre_y_frac * grid) / (r * squash);
    return dx * dx + dy * dy <= 1.0;
}

}  // namespace

TEST(Scene, MaskIsExactlyTheBrightPixels) {
    // Backgrounds stay <= 0.7 and objects >= 0.8, so the mask is recoverable
    // by thresholding; checked on every (object, view, background).
    for (std::size_t o = 0; o < kObjectCount; ++o)
        for (std::size_t v = 0; v < kViewCount; ++v)
            for (std::size_t b = 0; b < kBackgroundCount; ++b) {
                auto s = render({static_cast<ObjectId>(o), ViewId::from_index(v), static_cast<BackgroundId>(b), 24}, 3);
                std::size_t area = 0;
                for (std::size_t i = 0; i < s.image.size(); ++i) {
                    ASSERT_EQ(s.mask[i] > 0.5f, s.image[i] >= 0.75f) << o << ' ' << v << ' ' << b << ' ' << i;
                    area += s.mask[i] > 0.5f;
                }
                ASSERT_GE(area, 12u) << "object " << o << " nearly invisible at view " << v;
            }
}

TEST(Scene, CircleMaskMatchesAnalyticOracle) {
    const std::pair<Elevation, std::pair<double, double>> cases[] = {
        {Elevation::top, {0.5, 1.0}}, {Elevation::high, {0.56, 0.85}}, {Elevation::low, {0.64, 0.5}}};
    for (auto [elev, geo] : cases)
        for (std::uint8_t az = 0; az < kAzimuthCount; ++az) {
            auto s = render({ObjectId::circle, ViewId{elev, az}, BackgroundId::plain, 24}, 0);
            for (std::size_t y = 0; y < 24; ++y)
                for (std::size_t x = 0; x < 24; ++x)
                    EXPECT_EQ(s.mask(y, x) > 0.5f, circle_oracle(x, y, 24, geo.first, geo.second)) << x << ',' << y;
        }
}

TEST(Scene, SquareAtTopViewRotatesWithAzimuth) {
    auto axis = render({ObjectId::square, ViewId{Elevation::top, 0}, BackgroundId::plain, 24}, 0);
    auto rot = render({ObjectId::square, ViewId{Elevation::top, 1}, BackgroundId::plain, 24}, 0);
    // axis-aligned: half side 0.78 * 7.2 = 5.6 px around (12, 12)
    for (std::size_t y = 0; y < 24; ++y)
        for (std::size_t x = 0; x < 24; ++x) {
            const double dx = std::abs(x + 0.5 - 12), dy = std::abs(y + 0.5 - 12);
            EXPECT_EQ(axis.mask(y, x) > 0.5f, dx <= 5.616 && dy <= 5.616);
            // 45 degrees: a diamond |dx| + |dy| <= 5.616 * sqrt(2)
            EXPECT_EQ(rot.mask(y, x) > 0.5f, dx + dy <= 5.616 * std::sqrt(2.0) + 1e-9);
        }
}

TEST(Scene, RenderIsDeterministicAndValidated) {
    SceneSpec spec{ObjectId::star, ViewId::from_index(13), BackgroundId::grass_noise, 24};
    auto a = render(spec, 77), b = render(spec, 77), c = render(spec, 78);
    EXPECT_TRUE(a.image.bit_equal(b.image));
    EXPECT_TRUE(a.mask.bit_equal(c.mask));
    EXPECT_FALSE(a.image.bit_equal(c.image));  // grass noise follows the seed
    spec.grid = 8;
    EXPECT_THROW(render(spec, 0), ParameterError);
}

TEST(Scene, ObjectPixelsLieOverTheBackgroundRender) {
    SceneSpec spec{ObjectId::arrow, ViewId::from_index(20), BackgroundId::table_edge, 24};
    auto s = render(spec, 1);
    Matrix bg = render_background(spec, 1);
    for (std::size_t i = 0; i < bg.size(); ++i) {
        if (s.mask[i] < 0.5f) {
            EXPECT_EQ(s.image[i], bg[i]);
        }
    }
}

TEST(Scene, NamesRoundTrip) {
    for (std::size_t v = 0; v < kViewCount; ++v) EXPECT_EQ(parse_view(ViewId::from_index(v).name()).index(), v);
    for (std::size_t o = 0; o < kObjectCount; ++o)
        EXPECT_EQ(parse_object(to_string(static_cast<ObjectId>(o))), static_cast<ObjectId>(o));
    EXPECT_EQ(ViewId::from_index(9).name(), "mid-045");
    EXPECT_THROW(parse_view("mid-046"), ParameterError);
    EXPECT_THROW(parse_object("blob"), ParameterError);
    EXPECT_THROW(ViewId::from_index(kViewCount), ParameterError);
}

TEST(Vocabulary, IdsAndWordsAreABijection) {
    for (int i = 0; i < Vocabulary::kSize; ++i) EXPECT_EQ(Vocabulary::id(Vocabulary::word(i)), i);
    EXPECT_EQ(Vocabulary::kSize, 101);
    EXPECT_THROW(Vocabulary::word(Vocabulary::kSize), TokenError);
    EXPECT_THROW(Vocabulary::view_uid(24), TokenError);
    // identifier pools never overlap the words seen in pretraining
    for (int i = 0; i < Vocabulary::kFirstViewUid; ++i) EXPECT_FALSE(Vocabulary::is_uid(i));
}

TEST(Prompt, TokenizeLayouts) {
    auto full = tokenize_prompt("v3", "o5", "circle");
    EXPECT_EQ(detokenize(full), "A v3 VIEW OF o5 CIRCLE");
    auto no_view = tokenize_prompt(std::nullopt, "o5", "CIRCLE");
    EXPECT_EQ(detokenize(no_view), "A OF o5 CIRCLE");
    EXPECT_EQ(parse_prompt("A v3 VIEW OF o5 CIRCLE"), full);
    EXPECT_THROW(tokenize_prompt("v3", "o5", "blob"), TokenError);
    EXPECT_THROW(tokenize_prompt("v3", "CIRCLE", "circle"), TokenError);
    EXPECT_THROW(tokenize_prompt("v3", "v3", "circle"), TokenError);
    EXPECT_THROW(tokenize_prompt("o1", "o1", "circle"), TokenError);
}

TEST(Prompt, ClassCaptionOptionalParts) {
    EXPECT_EQ(detokenize(class_caption(ObjectId::ring)), "A RING");
    EXPECT_EQ(detokenize(class_caption(ObjectId::ring, ViewId::from_index(9), BackgroundId::table_edge)),
              "A MID-045 VIEW OF RING TABLE-EDGE");
}

TEST(Dataset, PretrainSplitCoversTheFactorGrid) {
    PretrainOptions po;
    po.repeats = 1;
    auto ds = make_pretrain_split(po);
    ASSERT_EQ(ds.items.size(), kObjectCount * kViewCount);
    std::size_t with_view = 0;
    for (const auto& it : ds.items) {
        with_view += it.prompt.ids.size() >= 5 && it.prompt.ids[2] == Vocabulary::kView;
        for (int id : it.prompt.ids) EXPECT_FALSE(Vocabulary::is_uid(id));
    }
    // keep_view_word = 0.7 on 384 draws
    EXPECT_GT(with_view, 230u);
    EXPECT_LT(with_view, 310u);
    po.repeats = 0;
    EXPECT_THROW(make_pretrain_split(po), ParameterError);
}

TEST(Dataset, TrialSplitsRespectTheProtocol) {
    SplitRequest req;
    req.target_view = ViewId::from_index(5);
    req.view_object = ObjectId::cross;
    req.novel_object = ObjectId::triangle;
    req.selection_seed = 4;
    auto sp = make_splits(req);
    ASSERT_EQ(sp.view_shot.items.size(), 1u);
    ASSERT_EQ(sp.object_shots.items.size(), 3u);
    for (const auto& it : sp.object_shots.items) {
        EXPECT_NE(it.scene.spec.view, req.target_view);
        EXPECT_EQ(it.scene.spec.object, ObjectId::triangle);
        EXPECT_EQ(it.prompt, sp.object_prompt);
    }
    EXPECT_EQ(sp.heldout.items[0].scene.spec.view, req.target_view);
    EXPECT_EQ(detokenize(sp.transfer_prompt), "A v0 VIEW OF o1 TRIANGLE");
    EXPECT_EQ(detokenize(sp.view_prompt), "A v0 VIEW OF o0 CROSS");

    auto again = make_splits(req);
    for (std::size_t i = 0; i < 3; ++i)
        EXPECT_EQ(again.object_shots.items[i].scene.spec.view, sp.object_shots.items[i].scene.spec.view);

    auto bad = req;
    bad.novel_object = bad.view_object;
    EXPECT_THROW(make_splits(bad), ProtocolError);
    bad = req;
    bad.object_shot_views = {ViewId::from_index(1), ViewId::from_index(5), ViewId::from_index(7)};
    EXPECT_THROW(make_splits(bad), ProtocolError);
    bad.object_shot_views = {ViewId::from_index(1), ViewId::from_index(1), ViewId::from_index(7)};
    EXPECT_THROW(make_splits(bad), ProtocolError);
    bad = req;
    bad.n_object_shots = 0;
    EXPECT_THROW(make_splits(bad), ParameterError);
}

TEST(Pgm, RoundTripWithinQuantization) {
    auto s = render({ObjectId::hexagon, ViewId::from_index(3), BackgroundId::beach_gradient, 24}, 0);
    const auto path = std::filesystem::temp_directory_path() / "loraview_test.pgm";
    write_pgm(path, s.image);
    Matrix back = read_pgm(path);
    ASSERT_TRUE(back.same_shape(s.image));
    for (std::size_t i = 0; i < back.size(); ++i) EXPECT_NEAR(back[i], s.image[i], 0.5 / 255.0 + 1e-6);
    std::filesystem::remove(path);
}
