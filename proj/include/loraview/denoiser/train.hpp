#pragma once

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numeric>
#include <set>
#include <vector>

#include "loraview/denoiser/diffusion.hpp"
#include "loraview/lora/adapter.hpp"
#include "loraview/numerics/optim.hpp"
#include "loraview/scenegen/dataset.hpp"

namespace loraview::denoiser {

/// (iteration, loss) rows, written as CSV.
struct LossLog {
    std::vector<std::pair<std::size_t, double>> rows;

    void add(std::size_t it, double loss) { rows.emplace_back(it, loss); }
    bool empty() const noexcept { return rows.empty(); }

    /// Mean loss over the first / last `window` rows; a noise-robust way to
    /// compare the start and end of a run with batch size 1.
    double head_mean(std::size_t window) const { return mean(0, std::min(window, rows.size())); }
    double tail_mean(std::size_t window) const {
        std::size_t w = std::min(window, rows.size());
        return mean(rows.size() - w, rows.size());
    }

    void write_csv(const std::filesystem::path& path) const {
        std::ofstream out(path);
        if (!out) throw Error("io error", "cannot open " + path.string());
        out << "iteration,loss\n";
        out.precision(9);
        for (const auto& [it, loss] : rows) out << it << ',' << loss << '\n';
    }

private:
    double mean(std::size_t b, std::size_t e) const {
        if (b >= e) return 0.0;
        double s = 0;
        for (std::size_t i = b; i < e; ++i) s += rows[i].second;
        return s / static_cast<double>(e - b);
    }
};

struct PretrainConfig {
    std::size_t iterations = 80000;
    double lr = 1e-3;  // Adam peak rate
    std::size_t warmup = 200;
    double ema_decay = 0.999;  // 0 disables the weight average
    std::size_t batch_size = 1;
    std::uint64_t seed = 0;
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(PretrainConfig, iterations, lr, warmup, ema_decay, batch_size, seed)

/// Linear warmup, then cosine decay to zero at the last iteration.
inline double pretrain_lr(const PretrainConfig& pc, std::size_t it) {
    if (it < pc.warmup) return pc.lr * static_cast<double>(it + 1) / static_cast<double>(pc.warmup);
    const double span = static_cast<double>(std::max<std::size_t>(1, pc.iterations - pc.warmup));
    const double frac = static_cast<double>(it - pc.warmup) / span;
    return pc.lr * 0.5 * (1.0 + std::cos(3.14159265358979323846 * frac));
}

struct PretrainResult {
    ModelWeights weights;
    LossLog log;
};

namespace detail {

inline void require_full_factor_grid(const scenegen::Dataset& ds) {
    std::set<std::pair<std::size_t, std::size_t>> seen;
    for (const auto& item : ds.items)
        seen.emplace(static_cast<std::size_t>(item.scene.spec.object), item.scene.spec.view.index());
    if (seen.size() != scenegen::kObjectCount * scenegen::kViewCount)
        throw ContractError("pretrain dataset covers " + std::to_string(seen.size()) + " of " +
                            std::to_string(scenegen::kObjectCount * scenegen::kViewCount) + " (object, view) pairs");
}

inline void check_loss(double loss, std::size_t it, const char* stage) {
    if (!std::isfinite(loss))
        throw DivergenceError(std::string(stage) + ": non-finite loss at iteration " + std::to_string(it));
}

// Mean of per-item losses over one (mini)batch.
inline Var batch_loss(const BoundWeights& bw, const DeltaMap& deltas, const NoiseSchedule& sched,
                      const std::vector<const scenegen::DatasetItem*>& batch, Rng& rng) {
    Var total = diffusion_loss(bw, deltas, sched, batch[0]->scene.image, batch[0]->prompt, rng);
    for (std::size_t i = 1; i < batch.size(); ++i)
        total = add(total, diffusion_loss(bw, deltas, sched, batch[i]->scene.image, batch[i]->prompt, rng));
    return batch.size() == 1 ? total : scale(total, 1.0f / static_cast<float>(batch.size()));
}

}  // namespace detail

/// Trains the base denoiser from scratch on the full factor grid. Every
/// parameter (text table included) is trainable here; later stages freeze it.
/// The returned weights are the exponential moving average when enabled.
inline PretrainResult pretrain(const DenoiserConfig& cfg, const scenegen::Dataset& dataset, const PretrainConfig& pc,
                               const std::function<void(std::size_t, double)>& progress = {}) {
    cfg.validate();
    if (dataset.items.empty()) throw ParameterError("empty pretrain dataset");
    detail::require_full_factor_grid(dataset);
    Rng rng(pc.seed);
    PretrainResult res{init_weights(cfg, rng.fork_seed()), {}};
    const NoiseSchedule sched(cfg);
    Adam adam({static_cast<float>(pc.lr)});
    ModelWeights ema = res.weights;

    std::vector<std::size_t> order(dataset.items.size());
    std::iota(order.begin(), order.end(), 0);
    std::size_t cursor = order.size();
    const std::size_t bs = std::max<std::size_t>(1, pc.batch_size);

    for (std::size_t it = 0; it < pc.iterations; ++it) {
        std::vector<const scenegen::DatasetItem*> batch;
        for (std::size_t k = 0; k < bs; ++k) {
            if (cursor == order.size()) {
                for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
                cursor = 0;
            }
            batch.push_back(&dataset.items[order[cursor++]]);
        }
        Tape tape;
        BoundWeights bw = bind(tape, res.weights, true);
        Var loss = detail::batch_loss(bw, {}, sched, batch, rng);
        const double lv = loss.value()[0];
        detail::check_loss(lv, it, "pretrain");
        tape.backward(loss);

        std::vector<Matrix*> params;
        std::vector<Matrix> grads;
        for (auto& [key, m] : res.weights.tensors) {
            params.push_back(&m);
            grads.push_back(tape.grad(bw.at(key)));
        }
        adam.set_lr(static_cast<float>(pretrain_lr(pc, it)));
        adam.step(params, grads);
        if (pc.ema_decay > 0) {
            const double d = std::min(pc.ema_decay, (1.0 + it) / (10.0 + it));
            for (auto& [key, m] : ema.tensors) {
                const Matrix& cur = res.weights.tensors.at(key);
                for (std::size_t k = 0; k < m.size(); ++k) m[k] = static_cast<float>(d * m[k] + (1.0 - d) * cur[k]);
            }
        }
        res.log.add(it, lv);
        if (progress) progress(it, lv);
    }
    if (pc.ema_decay > 0) res.weights = std::move(ema);
    return res;
}

struct FinetuneResult {
    lora::LoraAdapter adapter;
    LossLog log;
};

/// Records scale * A * B for every adapter layer as trainable tape nodes.
/// Returns the deltas and fills `a_vars` / `b_vars` (same order as layers).
inline DeltaMap bind_adapter(Tape& tape, const lora::LoraAdapter& adapter, bool trainable, std::vector<Var>* a_vars,
                             std::vector<Var>* b_vars) {
    DeltaMap deltas;
    for (const auto& [key, layer] : adapter.layers) {
        Var a = tape.leaf(layer.a, trainable);
        Var b = tape.leaf(layer.b, trainable);
        Var d = matmul(a, b);
        if (layer.scale != 1.0f) d = scale(d, layer.scale);
        deltas.emplace(key, d);
        if (a_vars) a_vars->push_back(a);
        if (b_vars) b_vars->push_back(b);
    }
    return deltas;
}

inline void require_attention_targets(const DenoiserConfig& cfg, const lora::LoraAdapter& adapter) {
    const auto allowed = attention_projection_keys(cfg);
    for (const auto& [key, layer] : adapter.layers) {
        if (std::find(allowed.begin(), allowed.end(), key) == allowed.end())
            throw ContractError("adapter layer '" + key + "' is not an attention projection");
        lora::validate_layer(key, layer);
        if (layer.in_dim() != cfg.embed_dim || layer.out_dim() != cfg.embed_dim)
            throw ContractError("adapter layer '" + key + "' has the wrong shape");
    }
}

/// Adapter finetuning with frozen base weights: only A and B of the adapter
/// layers are updated, by plain SGD at a constant learning rate. Items are
/// visited in order, `batch_size` per step.
inline FinetuneResult finetune_lora(const ModelWeights& base, lora::LoraAdapter adapter,
                                    const std::vector<scenegen::DatasetItem>& items, const TrainConfig& tc) {
    require_attention_targets(base.config, adapter);
    if (items.empty()) throw ParameterError("finetune_lora: no training items");
    const NoiseSchedule sched(base.config);
    Rng rng(tc.seed);
    FinetuneResult res{std::move(adapter), {}};
    const std::size_t bs = std::max<std::size_t>(1, tc.batch_size);
    std::size_t cursor = 0;

    for (std::size_t it = 0; it < tc.iterations; ++it) {
        std::vector<const scenegen::DatasetItem*> batch;
        for (std::size_t k = 0; k < bs; ++k) batch.push_back(&items[cursor++ % items.size()]);
        Tape tape;
        BoundWeights bw = bind(tape, base, false);
        std::vector<Var> a_vars, b_vars;
        DeltaMap deltas = bind_adapter(tape, res.adapter, true, &a_vars, &b_vars);
        Var loss = detail::batch_loss(bw, deltas, sched, batch, rng);
        const double lv = loss.value()[0];
        detail::check_loss(lv, it, "finetune");
        tape.backward(loss);

        std::vector<Matrix*> params;
        std::vector<Matrix> grads;
        std::size_t i = 0;
        for (auto& [key, layer] : res.adapter.layers) {
            params.push_back(&layer.a);
            grads.push_back(tape.grad(a_vars[i]));
            params.push_back(&layer.b);
            grads.push_back(tape.grad(b_vars[i]));
            ++i;
        }
        sgd_step(params, grads, static_cast<float>(tc.lr));
        res.log.add(it, lv);
    }
    return res;
}

}  // namespace loraview::denoiser
