#pragma once

#include <cmath>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "loraview/denoiser/config.hpp"
#include "loraview/denoiser/schedule.hpp"
#include "loraview/lora/container.hpp"
#include "loraview/numerics/rng.hpp"
#include "loraview/numerics/tape.hpp"
#include "loraview/scenegen/prompt.hpp"

namespace loraview::denoiser {

/// Base-model parameters keyed by layer name. The key set is fixed by the
/// config (see canonical_keys) and shared with the adapter code.
struct ModelWeights {
    DenoiserConfig config;
    std::map<std::string, Matrix> tensors;

    const Matrix& at(const std::string& key) const {
        auto it = tensors.find(key);
        if (it == tensors.end()) throw KeyError("model has no layer '" + key + "'");
        return it->second;
    }
    bool bit_equal(const ModelWeights& o) const {
        if (tensors.size() != o.tensors.size()) return false;
        for (const auto& [k, m] : tensors) {
            auto it = o.tensors.find(k);
            if (it == o.tensors.end() || !it->second.bit_equal(m)) return false;
        }
        return true;
    }
};

inline std::string block_key(std::size_t block, const std::string& rest) {
    return "block" + std::to_string(block) + "." + rest;
}

/// The adapter-targetable layers: q, k, v and output projections of the
/// self- and cross-attention modules of every block, each embed x embed.
inline std::vector<std::string> attention_projection_keys(const DenoiserConfig& cfg) {
    std::vector<std::string> keys;
    for (std::size_t b = 0; b < cfg.n_blocks; ++b)
        for (const char* kind : {"self", "cross"})
            for (const char* proj : {"q", "k", "v", "out"}) keys.push_back(block_key(b, std::string(kind) + "." + proj));
    return keys;
}

/// Every parameter with its shape, in canonical order.
inline std::vector<std::pair<std::string, std::pair<std::size_t, std::size_t>>> canonical_shapes(
    const DenoiserConfig& cfg) {
    const std::size_t d = cfg.embed_dim, p = cfg.patch_dim(), h = cfg.embed_dim * cfg.mlp_ratio;
    std::vector<std::pair<std::string, std::pair<std::size_t, std::size_t>>> s = {
        {"patch_embed.w", {p, d}},
        {"patch_embed.b", {1, d}},
        {"pos_embed", {cfg.n_patches(), d}},
        {"time_embed", {d, d}},
        {"text_embed", {cfg.vocab_size, d}},
        {"text_pool.w", {d, d}},
    };
    for (std::size_t b = 0; b < cfg.n_blocks; ++b) {
        for (const char* n : {"norm1", "norm2", "norm3"}) {
            s.push_back({block_key(b, std::string(n) + ".g"), {1, d}});
            s.push_back({block_key(b, std::string(n) + ".b"), {1, d}});
        }
        for (const char* kind : {"self", "cross"})
            for (const char* proj : {"q", "k", "v", "out"})
                s.push_back({block_key(b, std::string(kind) + "." + proj), {d, d}});
        for (const char* n : {"mod1", "mod2", "mod3"})
            for (const char* part : {"shift", "scale", "gate"})
                s.push_back({block_key(b, std::string(n) + "." + part), {d, d}});
        s.push_back({block_key(b, "mlp.in.w"), {d, h}});
        s.push_back({block_key(b, "mlp.in.b"), {1, h}});
        s.push_back({block_key(b, "mlp.out.w"), {h, d}});
        s.push_back({block_key(b, "mlp.out.b"), {1, d}});
    }
    s.push_back({"final_norm.g", {1, d}});
    s.push_back({"final_norm.b", {1, d}});
    s.push_back({"head.w", {d, p}});
    s.push_back({"head.b", {1, p}});
    return s;
}

inline std::vector<std::string> canonical_keys(const DenoiserConfig& cfg) {
    std::vector<std::string> keys;
    for (const auto& [k, _] : canonical_shapes(cfg)) keys.push_back(k);
    return keys;
}

inline std::map<std::string, std::pair<std::size_t, std::size_t>> attention_projection_shapes(
    const DenoiserConfig& cfg) {
    std::map<std::string, std::pair<std::size_t, std::size_t>> out;
    for (const auto& k : attention_projection_keys(cfg)) out[k] = {cfg.embed_dim, cfg.embed_dim};
    return out;
}

inline ModelWeights init_weights(const DenoiserConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    Rng rng(seed);
    ModelWeights w{cfg, {}};
    const double residual_scale = 1.0 / std::sqrt(2.0 * static_cast<double>(cfg.n_blocks));
    for (const auto& [key, shape] : canonical_shapes(cfg)) {
        const auto [r, c] = shape;
        Matrix m;
        const bool is_gain = key.ends_with(".g");
        const bool is_bias = key.ends_with(".b");
        if (is_gain) m = Matrix::ones(r, c);
        else if (key.find(".mod") != std::string::npos) m = Matrix::zeros(r, c);
        else if (is_bias) m = Matrix::zeros(r, c);
        else if (key == "pos_embed") m = rng.normal_matrix(r, c, 0.5);
        else if (key == "text_embed") m = rng.normal_matrix(r, c, 1.0);
        else if (key == "head.w") m = rng.normal_matrix(r, c, 0.02);
        else {
            double std = 1.0 / std::sqrt(static_cast<double>(r));
            if (key.ends_with(".out") || key.ends_with("mlp.out.w")) std *= residual_scale;
            m = rng.normal_matrix(r, c, std);
        }
        w.tensors.emplace(key, std::move(m));
    }
    return w;
}

// ---------------------------------------------------------------------------
// Layout helpers

/// grid x grid image -> n_patches x patch_dim, patches in raster order.
inline Matrix patchify(const Matrix& image, std::size_t patch) {
    const std::size_t side = image.rows() / patch;
    Matrix out(side * side, patch * patch);
    for (std::size_t pr = 0; pr < side; ++pr)
        for (std::size_t pc = 0; pc < side; ++pc)
            for (std::size_t y = 0; y < patch; ++y)
                for (std::size_t x = 0; x < patch; ++x)
                    out(pr * side + pc, y * patch + x) = image(pr * patch + y, pc * patch + x);
    return out;
}

inline Matrix unpatchify(const Matrix& patches, std::size_t patch) {
    const auto side = static_cast<std::size_t>(std::lround(std::sqrt(static_cast<double>(patches.rows()))));
    Matrix out(side * patch, side * patch);
    for (std::size_t pr = 0; pr < side; ++pr)
        for (std::size_t pc = 0; pc < side; ++pc)
            for (std::size_t y = 0; y < patch; ++y)
                for (std::size_t x = 0; x < patch; ++x)
                    out(pr * patch + y, pc * patch + x) = patches(pr * side + pc, y * patch + x);
    return out;
}

/// Fixed sinusoidal features of a timestep (1 x width), frequencies from 1
/// down to 1/1000 over the half-width.
inline Matrix timestep_features(std::size_t t, std::size_t n_timesteps, std::size_t width) {
    Matrix f(1, width);
    const std::size_t half = width / 2;
    const double pos = 1000.0 * static_cast<double>(t) / static_cast<double>(n_timesteps);
    for (std::size_t i = 0; i < half; ++i) {
        const double freq = std::exp(-std::log(1000.0) * static_cast<double>(i) / static_cast<double>(half));
        f(0, i) = static_cast<float>(std::sin(pos * freq));
        f(0, half + i) = static_cast<float>(std::cos(pos * freq));
    }
    return f;
}

inline Matrix one_hot(const std::vector<int>& ids, std::size_t width) {
    Matrix m(ids.size(), width);
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= width)
            throw TokenError("token id " + std::to_string(ids[i]) + " outside table of " + std::to_string(width));
        m(i, static_cast<std::size_t>(ids[i])) = 1.0f;
    }
    return m;
}

inline std::vector<int> padded_prompt(const scenegen::PromptTokens& prompt, std::size_t max_len) {
    if (prompt.ids.size() > max_len)
        throw TokenError("prompt of " + std::to_string(prompt.ids.size()) + " tokens exceeds " + std::to_string(max_len));
    std::vector<int> ids = prompt.ids;
    ids.resize(max_len, scenegen::Vocabulary::kPad);
    return ids;
}

// ---------------------------------------------------------------------------
// Forward pass on a tape

/// Base weights as tape leaves.
struct BoundWeights {
    const DenoiserConfig* config = nullptr;
    std::map<std::string, Var> vars;

    const Var& at(const std::string& key) const {
        auto it = vars.find(key);
        if (it == vars.end()) throw KeyError("model has no layer '" + key + "'");
        return it->second;
    }
};

inline BoundWeights bind(Tape& tape, const ModelWeights& w, bool trainable) {
    BoundWeights b{&w.config, {}};
    for (const auto& [k, m] : w.tensors) b.vars.emplace(k, tape.leaf(m, trainable));
    return b;
}

/// Additive per-layer weight deltas already recorded on the same tape.
using DeltaMap = std::map<std::string, Var>;

namespace detail {

inline Var attention(const Var& x, const Var& context, const Var& wq, const Var& wk, const Var& wv, const Var& wo,
                     std::size_t n_heads) {
    // Work on transposed activations so that heads are row blocks.
    Var q_t = matmul(wq, x, Transpose::yes, Transpose::yes);        // d x N
    Var k_t = matmul(wk, context, Transpose::yes, Transpose::yes);  // d x M
    Var v_t = matmul(wv, context, Transpose::yes, Transpose::yes);  // d x M
    const std::size_t d = q_t.rows(), dh = d / n_heads;
    const float inv_sqrt = 1.0f / std::sqrt(static_cast<float>(dh));
    std::vector<Var> heads;
    heads.reserve(n_heads);
    for (std::size_t h = 0; h < n_heads; ++h) {
        Var qh = slice_rows(q_t, h * dh, (h + 1) * dh);
        Var kh = slice_rows(k_t, h * dh, (h + 1) * dh);
        Var vh = slice_rows(v_t, h * dh, (h + 1) * dh);
        Var attn = row_softmax(scale(matmul(qh, kh, Transpose::yes, Transpose::no), inv_sqrt));  // N x M
        heads.push_back(matmul(vh, attn, Transpose::no, Transpose::yes));                         // dh x N
    }
    Var o_t = n_heads == 1 ? heads.front() : concat_rows(heads);  // d x N
    return matmul(o_t, wo, Transpose::yes, Transpose::no);        // N x d
}

}  // namespace detail

/// Predicted noise in patch layout (n_patches x patch_dim).
inline Var predict_noise(const BoundWeights& w, const DeltaMap& deltas, const Matrix& noisy_image, std::size_t t,
                         const scenegen::PromptTokens& prompt) {
    const DenoiserConfig& cfg = *w.config;
    if (noisy_image.rows() != cfg.grid || noisy_image.cols() != cfg.grid)
        throw ShapeError("image " + noisy_image.shape_str() + " does not match grid " + std::to_string(cfg.grid));
    if (t >= cfg.n_timesteps) throw ParameterError("timestep " + std::to_string(t) + " outside [0, T)");
    for (const auto& [k, _] : deltas)
        if (!w.vars.contains(k)) throw KeyError("adapter targets unknown layer '" + k + "'");

    Tape& tape = *w.at("pos_embed").tape();
    auto weight = [&](const std::string& key) {
        const Var& base = w.at(key);
        auto it = deltas.find(key);
        return it == deltas.end() ? base : add(base, it->second);
    };

    const std::size_t n = cfg.n_patches();
    Var patches = tape.constant(patchify(noisy_image, cfg.patch_size));
    Var h = add_row(matmul(patches, w.at("patch_embed.w")), w.at("patch_embed.b"));
    h = add(h, w.at("pos_embed"));
    Var t_row = matmul(tape.constant(timestep_features(t, cfg.n_timesteps, cfg.embed_dim)), w.at("time_embed"));
    h = add(h, broadcast_row(t_row, n));

    const std::vector<int> ids = padded_prompt(prompt, cfg.max_prompt_len);
    Var text = matmul(tape.constant(one_hot(ids, cfg.vocab_size)), w.at("text_embed"));
    // Conditioning vector: time plus the mean of the non-pad token
    // embeddings. It modulates every block's norms and residual gates.
    Var cond = t_row;
    if (!prompt.ids.empty()) {
        Matrix pool(1, ids.size());
        for (std::size_t i = 0; i < prompt.ids.size(); ++i) pool(0, i) = 1.0f / static_cast<float>(prompt.ids.size());
        cond = add(cond, matmul(matmul(tape.constant(std::move(pool)), text), w.at("text_pool.w")));
    }
    cond = gelu(cond);

    for (std::size_t b = 0; b < cfg.n_blocks; ++b) {
        auto key = [b](const std::string& rest) { return block_key(b, rest); };
        // adaLN-zero: the gates start at 0, so every block starts as the identity
        auto modulated = [&](const std::string& norm, const std::string& mod) {
            Var gain = add(w.at(key(norm + ".g")), matmul(cond, w.at(key(mod + ".scale"))));
            Var bias = add(w.at(key(norm + ".b")), matmul(cond, w.at(key(mod + ".shift"))));
            return layer_norm(h, gain, bias);
        };
        auto gated = [&](const Var& y, const std::string& mod) {
            return hadamard(y, broadcast_row(matmul(cond, w.at(key(mod + ".gate"))), n));
        };
        Var x = modulated("norm1", "mod1");
        h = add(h, gated(detail::attention(x, x, weight(key("self.q")), weight(key("self.k")), weight(key("self.v")),
                                           weight(key("self.out")), cfg.n_heads),
                         "mod1"));
        x = modulated("norm2", "mod2");
        h = add(h, gated(detail::attention(x, text, weight(key("cross.q")), weight(key("cross.k")),
                                           weight(key("cross.v")), weight(key("cross.out")), cfg.n_heads),
                         "mod2"));
        x = modulated("norm3", "mod3");
        Var hidden = gelu(add_row(matmul(x, w.at(key("mlp.in.w"))), w.at(key("mlp.in.b"))));
        h = add(h, gated(add_row(matmul(hidden, w.at(key("mlp.out.w"))), w.at(key("mlp.out.b"))), "mod3"));
    }
    Var out = layer_norm(h, w.at("final_norm.g"), w.at("final_norm.b"));
    Var v = add_row(matmul(out, w.at("head.w")), w.at("head.b"));
    // The network output is read as v = sqrt(abar) eps - sqrt(1 - abar) x0;
    // eps follows with a fixed skip from the input, which keeps the target
    // well conditioned at every t.
    const NoiseSchedule sched(cfg);
    const float a = static_cast<float>(std::sqrt(sched.alpha_bar(t)));
    const float b = static_cast<float>(std::sqrt(1.0 - sched.alpha_bar(t)));
    return add(scale(v, a), scale(patches, b));
}

/// Tape-free convenience: epsilon prediction in image layout. `deltas`, when
/// given, are added to the matching base layers (theta + delta).
inline Matrix forward(const ModelWeights& weights, const std::map<std::string, Matrix>* deltas,
                      const Matrix& noisy_image, std::size_t t, const scenegen::PromptTokens& prompt) {
    Tape tape;
    BoundWeights bw = bind(tape, weights, false);
    DeltaMap dm;
    if (deltas)
        for (const auto& [k, m] : *deltas) dm.emplace(k, tape.constant(m));
    Var eps = predict_noise(bw, dm, noisy_image, t, prompt);
    return unpatchify(eps.value(), weights.config.patch_size);
}

// ---------------------------------------------------------------------------
// Persistence (kind = "model")

inline lora::TensorFile to_tensor_file(const ModelWeights& w) {
    lora::TensorFile f;
    f.metadata["kind"] = "model";
    f.metadata["config"] = nlohmann::json(w.config).dump();
    f.tensors = w.tensors;
    return f;
}

inline ModelWeights model_from_tensor_file(const lora::TensorFile& f) {
    auto kind = f.metadata.find("kind");
    if (kind == f.metadata.end() || kind->second != "model") throw FormatError("container kind is not 'model'", 0);
    auto cfg_it = f.metadata.find("config");
    if (cfg_it == f.metadata.end()) throw FormatError("model container lacks a config", 0);
    ModelWeights w;
    try {
        w.config = nlohmann::json::parse(cfg_it->second).get<DenoiserConfig>();
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("bad model config: ") + e.what(), 0);
    }
    w.config.validate();
    for (const auto& [key, shape] : canonical_shapes(w.config)) {
        auto it = f.tensors.find(key);
        if (it == f.tensors.end()) throw FormatError("model container lacks tensor '" + key + "'", 0);
        if (it->second.rows() != shape.first || it->second.cols() != shape.second)
            throw FormatError("tensor '" + key + "' has shape " + it->second.shape_str(), 0);
        w.tensors.emplace(key, it->second);
    }
    return w;
}

inline void save(const ModelWeights& w, const std::filesystem::path& path) { lora::write_file(path, to_tensor_file(w)); }

inline ModelWeights load_model(const std::filesystem::path& path) {
    return model_from_tensor_file(lora::read_file(path));
}

}  // namespace loraview::denoiser
