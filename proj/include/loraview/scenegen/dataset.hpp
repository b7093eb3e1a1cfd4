#pragma once

#include <algorithm>
#include <optional>
#include <string>
#include <vector>

#include "loraview/numerics/rng.hpp"
#include "loraview/scenegen/prompt.hpp"
#include "loraview/scenegen/scene.hpp"

namespace loraview::scenegen {

enum class Split { pretrain, view_shot, object_shots, heldout_eval };

inline std::string_view to_string(Split s) {
    switch (s) {
    case Split::pretrain: return "pretrain";
    case Split::view_shot: return "view-shot";
    case Split::object_shots: return "object-shots";
    case Split::heldout_eval: return "heldout-eval";
    }
    return "?";
}

struct DatasetItem {
    RenderedScene scene;
    PromptTokens prompt;
    std::uint64_t seed = 0;  // render seed
};

/// Items are stored exactly as rendered; nothing in the library flips,
/// crops or otherwise warps them, since that would change the view.
struct Dataset {
    Split split = Split::pretrain;
    std::vector<DatasetItem> items;
};

struct PretrainOptions {
    std::size_t grid = 24;
    std::size_t repeats = 4;  // occurrences of every (object, view) pair
    std::vector<BackgroundId> backgrounds = {BackgroundId::plain, BackgroundId::grass_noise,
                                             BackgroundId::forest_stripes, BackgroundId::table_edge,
                                             BackgroundId::beach_gradient};
    double keep_view_word = 0.7;        // caption dropout for the view word
    double keep_background_word = 0.5;  // and for the background word
    std::uint64_t seed = 0;
};

/// Full factor grid: every (object, view) pair `repeats` times, backgrounds
/// cycled so each pair meets several backgrounds. Captions name the class
/// always and the view / background with the configured probabilities.
inline Dataset make_pretrain_split(const PretrainOptions& opts) {
    if (opts.backgrounds.empty()) throw ParameterError("pretrain split needs at least one background");
    if (opts.repeats == 0) throw ParameterError("pretrain repeats must be >= 1");
    Dataset ds{Split::pretrain, {}};
    ds.items.reserve(kObjectCount * kViewCount * opts.repeats);
    std::size_t counter = 0;
    Rng caption_rng(opts.seed ^ 0x5EEDC0DEull);
    for (std::size_t o = 0; o < kObjectCount; ++o) {
        for (std::size_t v = 0; v < kViewCount; ++v) {
            for (std::size_t k = 0; k < opts.repeats; ++k) {
                SceneSpec spec{static_cast<ObjectId>(o), ViewId::from_index(v),
                               opts.backgrounds[(o + v + k) % opts.backgrounds.size()], opts.grid};
                std::uint64_t seed = opts.seed * 1000003ull + counter++;
                std::optional<ViewId> view;
                std::optional<BackgroundId> bg;
                if (caption_rng.uniform() < opts.keep_view_word) view = spec.view;
                if (caption_rng.uniform() < opts.keep_background_word) bg = spec.background;
                ds.items.push_back({render(spec, seed), class_caption(spec.object, view, bg), seed});
            }
        }
    }
    return ds;
}

/// Token identities used by one view-transfer trial.
struct TrialTokens {
    int view_uid = 0;         // index into the view identifier pool
    int view_object_uid = 0;  // object identifier of the view scene's object
    int novel_object_uid = 1;
};

struct SplitRequest {
    ViewId target_view{};
    ObjectId view_object = ObjectId::square;
    ObjectId novel_object = ObjectId::circle;
    std::size_t n_object_shots = 3;
    BackgroundId background = BackgroundId::table_edge;
    std::size_t grid = 24;
    std::uint64_t scene_seed = 0;          // render seed shared by every scene of the trial
    std::uint64_t selection_seed = 0;      // picks the object-shot views
    std::vector<ViewId> object_shot_views;  // explicit views; empty = random distinct views
    TrialTokens tokens{};
};

struct TrialSplits {
    Dataset view_shot;
    Dataset object_shots;
    Dataset heldout;  // ground truth of the novel object at the target view
    PromptTokens view_prompt;
    PromptTokens object_prompt;
    PromptTokens transfer_prompt;  // view uid + novel object uid
};

inline PromptTokens view_prompt(const TrialTokens& t, ObjectId object) {
    return tokenize_prompt(Vocabulary::word(Vocabulary::view_uid(t.view_uid)),
                           Vocabulary::word(Vocabulary::object_uid(t.view_object_uid)), to_string(object));
}

inline PromptTokens transfer_prompt(const TrialTokens& t, ObjectId object) {
    return tokenize_prompt(Vocabulary::word(Vocabulary::view_uid(t.view_uid)),
                           Vocabulary::word(Vocabulary::object_uid(t.novel_object_uid)), to_string(object));
}

inline PromptTokens object_prompt(const TrialTokens& t, ObjectId object) {
    return tokenize_prompt(std::nullopt, Vocabulary::word(Vocabulary::object_uid(t.novel_object_uid)),
                           to_string(object));
}

/// One view scene, `n_object_shots` scenes of the novel object at distinct
/// non-target views, and the held-out ground truth.
inline TrialSplits make_splits(const SplitRequest& req) {
    if (req.novel_object == req.view_object)
        throw ProtocolError("novel object must differ from the view-training object");
    if (req.n_object_shots == 0 || req.n_object_shots >= kViewCount)
        throw ParameterError("n_object_shots must be in [1, " + std::to_string(kViewCount - 1) + "]");

    std::vector<ViewId> shot_views = req.object_shot_views;
    if (shot_views.empty()) {
        std::vector<std::size_t> candidates;
        for (std::size_t v = 0; v < kViewCount; ++v)
            if (v != req.target_view.index()) candidates.push_back(v);
        Rng rng(req.selection_seed);
        for (std::size_t i = 0; i < req.n_object_shots; ++i) {
            std::size_t j = i + rng.below(candidates.size() - i);
            std::swap(candidates[i], candidates[j]);
            shot_views.push_back(ViewId::from_index(candidates[i]));
        }
    }
    if (shot_views.size() != req.n_object_shots)
        throw ParameterError("expected " + std::to_string(req.n_object_shots) + " object-shot views, got " +
                             std::to_string(shot_views.size()));
    for (std::size_t i = 0; i < shot_views.size(); ++i) {
        if (shot_views[i] == req.target_view)
            throw ProtocolError("object-shot view " + shot_views[i].name() + " overlaps the target view");
        for (std::size_t j = 0; j < i; ++j)
            if (shot_views[i] == shot_views[j]) throw ProtocolError("object-shot views must be distinct");
    }

    TrialSplits out;
    out.view_prompt = view_prompt(req.tokens, req.view_object);
    out.object_prompt = object_prompt(req.tokens, req.novel_object);
    out.transfer_prompt = transfer_prompt(req.tokens, req.novel_object);

    out.view_shot.split = Split::view_shot;
    SceneSpec view_spec{req.view_object, req.target_view, req.background, req.grid};
    out.view_shot.items.push_back({render(view_spec, req.scene_seed), out.view_prompt, req.scene_seed});

    out.object_shots.split = Split::object_shots;
    for (ViewId v : shot_views) {
        SceneSpec s{req.novel_object, v, req.background, req.grid};
        out.object_shots.items.push_back({render(s, req.scene_seed), out.object_prompt, req.scene_seed});
    }

    out.heldout.split = Split::heldout_eval;
    SceneSpec gt{req.novel_object, req.target_view, req.background, req.grid};
    out.heldout.items.push_back({render(gt, req.scene_seed), out.transfer_prompt, req.scene_seed});
    return out;
}

}  // namespace loraview::scenegen
