#pragma once

#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "loraview/scenegen/scene.hpp"

namespace loraview::scenegen {

/// Fixed vocabulary table:
///   0..3     PAD, A, VIEW, OF
///   4..15    class nouns (one per ObjectId, upper-case)
///   16..47   view words, one per ViewId ("MID-045")
///   48..52   background words ("TABLE-EDGE")
///   53..76   view identifier pool  v0..v23
///   77..100  object identifier pool o0..o23
/// The identifier pools are the "rare tokens": disjoint from every word the
/// base model sees during pretraining.
class Vocabulary {
public:
    static constexpr int kPad = 0;
    static constexpr int kA = 1;
    static constexpr int kView = 2;
    static constexpr int kOf = 3;
    static constexpr int kFirstClass = 4;
    static constexpr int kFirstViewWord = kFirstClass + static_cast<int>(kObjectCount);
    static constexpr int kFirstBackgroundWord = kFirstViewWord + static_cast<int>(kViewCount);
    static constexpr int kUidPoolSize = 24;
    static constexpr int kFirstViewUid = kFirstBackgroundWord + static_cast<int>(kBackgroundCount);
    static constexpr int kFirstObjectUid = kFirstViewUid + kUidPoolSize;
    static constexpr int kSize = kFirstObjectUid + kUidPoolSize;

    static std::string word(int id) {
        auto upper = [](std::string s) {
            for (auto& ch : s) ch = static_cast<char>(std::toupper(static_cast<unsigned char>(ch)));
            return s;
        };
        if (id == kPad) return "<pad>";
        if (id == kA) return "A";
        if (id == kView) return "VIEW";
        if (id == kOf) return "OF";
        if (id >= kFirstClass && id < kFirstViewWord)
            return upper(std::string(kObjectNames[static_cast<std::size_t>(id - kFirstClass)]));
        if (id >= kFirstViewWord && id < kFirstBackgroundWord)
            return upper(ViewId::from_index(static_cast<std::size_t>(id - kFirstViewWord)).name());
        if (id >= kFirstBackgroundWord && id < kFirstViewUid)
            return upper(std::string(kBackgroundNames[static_cast<std::size_t>(id - kFirstBackgroundWord)]));
        if (id >= kFirstViewUid && id < kFirstObjectUid) return "v" + std::to_string(id - kFirstViewUid);
        if (id >= kFirstObjectUid && id < kSize) return "o" + std::to_string(id - kFirstObjectUid);
        throw TokenError("token id " + std::to_string(id) + " outside vocabulary");
    }

    static int id(std::string_view w) {
        for (int i = 0; i < kSize; ++i)
            if (word(i) == w) return i;
        throw TokenError("unknown word '" + std::string(w) + "'");
    }

    static bool is_class(int id) { return id >= kFirstClass && id < kFirstViewWord; }
    static bool is_uid(int id) { return id >= kFirstViewUid && id < kSize; }
    static int class_token(ObjectId o) { return kFirstClass + static_cast<int>(o); }
    static int view_word(ViewId v) { return kFirstViewWord + static_cast<int>(v.index()); }
    static int background_word(BackgroundId b) { return kFirstBackgroundWord + static_cast<int>(b); }
    static int view_uid(int k) { return pool_token(kFirstViewUid, k); }
    static int object_uid(int k) { return pool_token(kFirstObjectUid, k); }

private:
    static int pool_token(int first, int k) {
        if (k < 0 || k >= kUidPoolSize) throw TokenError("identifier index " + std::to_string(k) + " outside pool");
        return first + k;
    }
};

/// Token-id sequence (unpadded). The denoiser pads to its max prompt length.
struct PromptTokens {
    std::vector<int> ids;
    friend bool operator==(const PromptTokens&, const PromptTokens&) = default;
};

/// "A <view-uid> VIEW OF <object-uid> <CLASS>", or without a view uid the
/// four-token "A OF <object-uid> <CLASS>" (the view pair is dropped, the
/// object suffix keeps its place).
inline PromptTokens tokenize_prompt(std::optional<std::string_view> view_uid, std::string_view object_uid,
                                    std::string_view class_name) {
    auto uid = [](std::string_view w) {
        int id = Vocabulary::id(w);
        if (!Vocabulary::is_uid(id)) throw TokenError("'" + std::string(w) + "' is not a reserved identifier token");
        return id;
    };
    std::string cls(class_name);
    for (auto& ch : cls) ch = static_cast<char>(std::toupper(static_cast<unsigned char>(ch)));
    int class_id = Vocabulary::id(cls);
    if (!Vocabulary::is_class(class_id)) throw TokenError("'" + std::string(class_name) + "' is not a class noun");
    int object_id = uid(object_uid);
    if (view_uid) {
        int view_id = uid(*view_uid);
        if (view_id == object_id) throw TokenError("view and object identifiers collide");
        return {{Vocabulary::kA, view_id, Vocabulary::kView, Vocabulary::kOf, object_id, class_id}};
    }
    return {{Vocabulary::kA, Vocabulary::kOf, object_id, class_id}};
}

/// Caption used for base-model pretraining:
/// "A [<VIEW-WORD> VIEW OF] <CLASS> [<BACKGROUND>]"; the bracketed parts are
/// optional so the base model also learns view- and background-agnostic
/// generation.
inline PromptTokens class_caption(ObjectId o, std::optional<ViewId> view = std::nullopt,
                                  std::optional<BackgroundId> background = std::nullopt) {
    PromptTokens p{{Vocabulary::kA}};
    if (view) {
        p.ids.push_back(Vocabulary::view_word(*view));
        p.ids.push_back(Vocabulary::kView);
        p.ids.push_back(Vocabulary::kOf);
    }
    p.ids.push_back(Vocabulary::class_token(o));
    if (background) p.ids.push_back(Vocabulary::background_word(*background));
    return p;
}

inline std::string detokenize(const PromptTokens& p) {
    std::string out;
    for (int id : p.ids) {
        if (!out.empty()) out += ' ';
        out += Vocabulary::word(id);
    }
    return out;
}

/// Whitespace-separated words back to ids.
inline PromptTokens parse_prompt(std::string_view text) {
    PromptTokens p;
    std::istringstream in{std::string(text)};
    std::string w;
    while (in >> w) p.ids.push_back(Vocabulary::id(w));
    return p;
}

}  // namespace loraview::scenegen
