#pragma once

#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "loraview/denoiser/train.hpp"
#include "loraview/lora/adapter.hpp"

namespace loraview::merge {

enum class MergeMode { linear, gated };

inline std::string to_string(MergeMode m) { return m == MergeMode::linear ? "linear" : "gated"; }

inline MergeMode parse_mode(const std::string& s) {
    if (s == "linear") return MergeMode::linear;
    if (s == "gated") return MergeMode::gated;
    throw ParameterError("unknown merge mode '" + s + "'");
}

NLOHMANN_JSON_SERIALIZE_ENUM(MergeMode, {{MergeMode::linear, "linear"}, {MergeMode::gated, "gated"}})

enum class PenaltyKind {
    gate_cosine,   // |cos(m_v, m_o)| per layer
    delta_column,  // |cos| between the gated deltas, i.e. column dot products summed
};

NLOHMANN_JSON_SERIALIZE_ENUM(PenaltyKind, {{PenaltyKind::gate_cosine, "gate-cosine"},
                                           {PenaltyKind::delta_column, "delta-column"}})

struct MergeConfig {
    double lambda = 0.01;
    std::size_t iterations = 100;
    double lr = 5e-5;
    MergeMode mode = MergeMode::gated;
    PenaltyKind penalty = PenaltyKind::gate_cosine;
    std::size_t noise_draws = 1;  // (t, eps) draws averaged per fidelity term
    std::uint64_t seed = 0;

    void validate() const {
        if (!(lambda >= 0) || !std::isfinite(lambda)) throw ParameterError("merge lambda must be >= 0");
        if (!(lr > 0) || !std::isfinite(lr)) throw ParameterError("merge lr must be > 0");
        if (noise_draws == 0) throw ParameterError("merge noise_draws must be >= 1");
    }
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(MergeConfig, lambda, iterations, lr, mode, penalty, noise_draws, seed)

/// Per-column gates of one layer, both 1 x n.
struct LayerGates {
    Matrix m_v;
    Matrix m_o;
};

struct MergeGates {
    std::map<std::string, LayerGates> layers;
};

namespace detail {

inline void require_same_keys(const lora::LoraAdapter& v, const lora::LoraAdapter& o) {
    if (v.keys() != o.keys()) throw ContractError("view and object adapters target different layers");
    for (const auto& [key, lv] : v.layers) {
        const auto& lo = o.layers.at(key);
        if (lv.in_dim() != lo.in_dim() || lv.out_dim() != lo.out_dim())
            throw ContractError("layer '" + key + "' has different shapes in the two adapters");
    }
}

inline const LayerGates& gates_for(const MergeGates& g, const std::string& key, std::size_t n) {
    auto it = g.layers.find(key);
    if (it == g.layers.end()) throw KeyError("no gates for layer '" + key + "'");
    const LayerGates& lg = it->second;
    if (lg.m_v.rows() != 1 || lg.m_o.rows() != 1 || lg.m_v.cols() != n || lg.m_o.cols() != n)
        throw ShapeError("gates of '" + key + "' are " + lg.m_v.shape_str() + " / " + lg.m_o.shape_str() +
                         ", expected 1x" + std::to_string(n));
    return lg;
}

}  // namespace detail

inline MergeGates init_gates(const lora::LoraAdapter& view, const lora::LoraAdapter& object) {
    detail::require_same_keys(view, object);
    MergeGates g;
    for (const auto& [key, l] : view.layers)
        g.layers[key] = {Matrix::ones(1, l.out_dim()), Matrix::ones(1, l.out_dim())};
    return g;
}

/// w * dv + (1 - w) * do, refactored at rank r_v + r_o (capped at min(m, n)).
inline lora::LoraAdapter merge_linear(const lora::LoraAdapter& view, const lora::LoraAdapter& object, double w) {
    if (!(w >= 0.0 && w <= 1.0)) throw ParameterError("merge weight must lie in [0, 1]");
    detail::require_same_keys(view, object);
    lora::LoraAdapter out;
    out.concept_tag = view.concept_tag + "+" + object.concept_tag;
    out.uid_tokens = view.uid_tokens;
    out.uid_tokens.insert(out.uid_tokens.end(), object.uid_tokens.begin(), object.uid_tokens.end());
    for (const auto& [key, lv] : view.layers) {
        const auto& lo = object.layers.at(key);
        Matrix d = lora::materialize(lv);
        d *= static_cast<float>(w);
        Matrix od = lora::materialize(lo);
        od *= static_cast<float>(1.0 - w);
        d += od;
        const std::size_t rank = std::min(lv.rank() + lo.rank(), std::min(d.rows(), d.cols()));
        out.layers[key] = lora::extract_lora(d, rank);
    }
    return out;
}

/// Column j of the result is m_o[j] * do[:, j] + m_v[j] * dv[:, j].
inline std::map<std::string, Matrix> gated_delta(const lora::LoraAdapter& view, const lora::LoraAdapter& object,
                                                 const MergeGates& gates) {
    detail::require_same_keys(view, object);
    std::map<std::string, Matrix> out;
    for (const auto& [key, lv] : view.layers) {
        const Matrix dv = lora::materialize(lv);
        const Matrix dobj = lora::materialize(object.layers.at(key));
        const LayerGates& g = detail::gates_for(gates, key, dv.cols());
        Matrix d(dv.rows(), dv.cols());
        for (std::size_t i = 0; i < d.rows(); ++i)
            for (std::size_t j = 0; j < d.cols(); ++j)
                d(i, j) = static_cast<float>(static_cast<double>(g.m_o[j]) * dobj(i, j) +
                                             static_cast<double>(g.m_v[j]) * dv(i, j));
        out.emplace(key, std::move(d));
    }
    return out;
}

/// sum over layers of |<m_v, m_o>| / (|m_v| |m_o| + 1e-8).
inline double cosine_penalty(const MergeGates& gates) {
    double total = 0;
    for (const auto& [key, g] : gates.layers) {
        if (!g.m_v.same_shape(g.m_o)) throw ShapeError("gates of '" + key + "' differ in shape");
        const double dot = loraview::detail::dot_f64(g.m_v.data(), g.m_o.data(), g.m_v.size());
        const double nv = std::sqrt(loraview::detail::dot_f64(g.m_v.data(), g.m_v.data(), g.m_v.size()));
        const double no = std::sqrt(loraview::detail::dot_f64(g.m_o.data(), g.m_o.data(), g.m_o.size()));
        total += std::abs(dot) / (nv * no + 1e-8);
    }
    return total;
}

/// Gate variables of one tape, by layer.
struct GateVars {
    std::map<std::string, std::pair<Var, Var>> layers;  // (m_v, m_o)
};

inline GateVars bind_gates(Tape& tape, const MergeGates& gates, bool trainable) {
    GateVars gv;
    for (const auto& [key, g] : gates.layers)
        gv.layers.emplace(key, std::make_pair(tape.leaf(g.m_v, trainable), tape.leaf(g.m_o, trainable)));
    return gv;
}

/// Gated deltas on the tape: dv * diag(m_v) + do * diag(m_o).
inline denoiser::DeltaMap gated_delta(const denoiser::DeltaMap& view, const denoiser::DeltaMap& object,
                                      const GateVars& gates) {
    denoiser::DeltaMap out;
    for (const auto& [key, dv] : view) {
        const Var& dobj = object.at(key);
        auto it = gates.layers.find(key);
        if (it == gates.layers.end()) throw KeyError("no gates for layer '" + key + "'");
        const auto& [mv, mo] = it->second;
        if (mv.cols() != dv.cols() || mo.cols() != dv.cols()) throw ShapeError("gate length mismatch for '" + key + "'");
        Var gv = hadamard(dv, broadcast_row(mv, dv.rows()));
        Var go = hadamard(dobj, broadcast_row(mo, dobj.rows()));
        out.emplace(key, add(gv, go));
    }
    return out;
}

inline Var cosine_penalty(const GateVars& gates) {
    Var total;
    bool first = true;
    for (const auto& [key, mm] : gates.layers) {
        Var c = abs_cosine(mm.first, mm.second);
        total = first ? c : add(total, c);
        first = false;
    }
    if (first) throw ContractError("cosine_penalty: no gate layers");
    return total;
}

/// Alternative penalty: |cos| between the flattened gated deltas per layer,
/// which is the gate-weighted sum of column dot products, normalized.
inline Var delta_column_penalty(const denoiser::DeltaMap& view, const denoiser::DeltaMap& object,
                                const GateVars& gates) {
    Var total;
    bool first = true;
    for (const auto& [key, dv] : view) {
        const auto& [mv, mo] = gates.layers.at(key);
        Var gv = hadamard(dv, broadcast_row(mv, dv.rows()));
        Var go = hadamard(object.at(key), broadcast_row(mo, dv.rows()));
        Var c = abs_cosine(gv, go);
        total = first ? c : add(total, c);
        first = false;
    }
    if (first) throw ContractError("delta_column_penalty: no layers");
    return total;
}

struct MergeTerms {
    Var view_loss;
    Var object_loss;
    Var penalty;
    Var total;
};

/// One step's objective: view-scene loss + one object-scene loss + lambda * penalty.
inline MergeTerms merge_objective(const denoiser::BoundWeights& bw, const denoiser::DeltaMap& view_deltas,
                                  const denoiser::DeltaMap& object_deltas, const GateVars& gates,
                                  const denoiser::NoiseSchedule& sched, const scenegen::DatasetItem& view_item,
                                  const scenegen::DatasetItem& object_item, const MergeConfig& cfg, Rng& rng) {
    denoiser::DeltaMap merged = gated_delta(view_deltas, object_deltas, gates);
    MergeTerms t;
    auto fidelity = [&](const scenegen::DatasetItem& item) {
        Var l = denoiser::diffusion_loss(bw, merged, sched, item.scene.image, item.prompt, rng);
        for (std::size_t k = 1; k < cfg.noise_draws; ++k)
            l = add(l, denoiser::diffusion_loss(bw, merged, sched, item.scene.image, item.prompt, rng));
        return cfg.noise_draws == 1 ? l : scale(l, 1.0f / static_cast<float>(cfg.noise_draws));
    };
    t.view_loss = fidelity(view_item);
    t.object_loss = fidelity(object_item);
    t.penalty = cfg.penalty == PenaltyKind::gate_cosine ? cosine_penalty(gates)
                                                        : delta_column_penalty(view_deltas, object_deltas, gates);
    t.total = add(add(t.view_loss, t.object_loss), scale(t.penalty, static_cast<float>(cfg.lambda)));
    return t;
}

struct MergeLogRow {
    std::size_t iteration = 0;
    double view_loss = 0;
    double object_loss = 0;
    double penalty = 0;
    double total() const noexcept { return view_loss + object_loss; }
};

struct MergeLog {
    std::vector<MergeLogRow> rows;

    void write_csv(const std::filesystem::path& path) const {
        std::ofstream out(path);
        if (!out) throw Error("io error", "cannot open " + path.string());
        out << "iteration,fidelity-loss-view,fidelity-loss-object,cosine-penalty\n";
        out.precision(9);
        for (const auto& r : rows) out << r.iteration << ',' << r.view_loss << ',' << r.object_loss << ',' << r.penalty << '\n';
    }
};

struct MergeResult {
    MergeGates gates;
    MergeLog log;
    double final_penalty = 0;
};

/// Trains the gates only; base weights and both adapters stay frozen. Each
/// iteration sees the view scene and the next object scene in turn.
inline MergeResult train_merge(const denoiser::ModelWeights& base, const lora::LoraAdapter& view,
                               const lora::LoraAdapter& object, const std::vector<scenegen::DatasetItem>& view_data,
                               const std::vector<scenegen::DatasetItem>& object_data, const MergeConfig& cfg) {
    cfg.validate();
    if (view_data.empty() || object_data.empty()) throw ParameterError("train_merge needs view and object scenes");
    denoiser::require_attention_targets(base.config, view);
    denoiser::require_attention_targets(base.config, object);
    MergeResult res{init_gates(view, object), {}, 0};
    const auto dv = lora::materialize_all(view);
    const auto dobj = lora::materialize_all(object);
    const denoiser::NoiseSchedule sched(base.config);
    Rng rng(cfg.seed);

    for (std::size_t it = 0; it < cfg.iterations; ++it) {
        Tape tape;
        denoiser::BoundWeights bw = denoiser::bind(tape, base, false);
        denoiser::DeltaMap vd, od;
        for (const auto& [k, m] : dv) vd.emplace(k, tape.constant(m));
        for (const auto& [k, m] : dobj) od.emplace(k, tape.constant(m));
        GateVars gv = bind_gates(tape, res.gates, true);
        MergeTerms terms = merge_objective(bw, vd, od, gv, sched, view_data[it % view_data.size()],
                                           object_data[it % object_data.size()], cfg, rng);
        MergeLogRow row{it, terms.view_loss.value()[0], terms.object_loss.value()[0], terms.penalty.value()[0]};
        denoiser::detail::check_loss(terms.total.value()[0], it, "merge");
        tape.backward(terms.total);

        std::vector<Matrix*> params;
        std::vector<Matrix> grads;
        for (auto& [key, g] : res.gates.layers) {
            const auto& [mv, mo] = gv.layers.at(key);
            params.push_back(&g.m_v);
            grads.push_back(tape.grad(mv));
            params.push_back(&g.m_o);
            grads.push_back(tape.grad(mo));
        }
        sgd_step(params, grads, static_cast<float>(cfg.lr));
        res.log.rows.push_back(row);
    }
    res.final_penalty = cosine_penalty(res.gates);
    return res;
}

/// Base weights with the gated delta added to every adapted layer.
inline denoiser::ModelWeights compose_for_inference(const denoiser::ModelWeights& base, const lora::LoraAdapter& view,
                                                    const lora::LoraAdapter& object, const MergeGates& gates) {
    denoiser::ModelWeights out = base;
    for (const auto& [key, d] : gated_delta(view, object, gates)) {
        auto it = out.tensors.find(key);
        if (it == out.tensors.end()) throw KeyError("base model has no layer '" + key + "'");
        if (!it->second.same_shape(d)) throw ShapeError("delta for '" + key + "' does not match the base weight");
        it->second += d;
    }
    return out;
}

/// Same, for an adapter in plain (linear-merge) form.
inline denoiser::ModelWeights compose_for_inference(const denoiser::ModelWeights& base, const lora::LoraAdapter& adapter) {
    denoiser::ModelWeights out = base;
    for (const auto& [key, d] : lora::materialize_all(adapter)) {
        auto it = out.tensors.find(key);
        if (it == out.tensors.end()) throw KeyError("base model has no layer '" + key + "'");
        if (!it->second.same_shape(d)) throw ShapeError("delta for '" + key + "' does not match the base weight");
        it->second += d;
    }
    return out;
}

// ---------------------------------------------------------------------------
// Persistence

inline lora::TensorFile to_tensor_file(const MergeGates& g) {
    lora::TensorFile f;
    f.metadata["kind"] = "gates";
    for (const auto& [key, lg] : g.layers) {
        f.tensors.emplace(key + ".m_v", lg.m_v);
        f.tensors.emplace(key + ".m_o", lg.m_o);
    }
    return f;
}

inline MergeGates gates_from_tensor_file(const lora::TensorFile& f) {
    auto kind = f.metadata.find("kind");
    if (kind == f.metadata.end() || kind->second != "gates") throw FormatError("container kind is not 'gates'", 0);
    MergeGates g;
    for (const auto& [name, m] : f.tensors) {
        auto dot = name.rfind('.');
        if (dot == std::string::npos) continue;
        std::string key = name.substr(0, dot), part = name.substr(dot + 1);
        if (part == "m_v") g.layers[key].m_v = m;
        else if (part == "m_o") g.layers[key].m_o = m;
    }
    for (const auto& [key, lg] : g.layers) {
        if (lg.m_v.empty() || lg.m_o.empty()) throw FormatError("gates of '" + key + "' incomplete", 0);
        if (!lg.m_v.same_shape(lg.m_o) || lg.m_v.rows() != 1)
            throw FormatError("gates of '" + key + "' have bad shapes", 0);
    }
    return g;
}

inline void save(const MergeGates& g, const std::filesystem::path& path) { lora::write_file(path, to_tensor_file(g)); }

inline MergeGates load_gates(const std::filesystem::path& path) { return gates_from_tensor_file(lora::read_file(path)); }

}  // namespace loraview::merge
