#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "loraview/lora/container.hpp"
#include "loraview/numerics/linalg.hpp"
#include "loraview/numerics/rng.hpp"

namespace loraview::lora {

/// One adapted layer: delta = scale * A * B, A: m x r, B: r x n.
struct LoraLayer {
    Matrix a;
    Matrix b;
    float scale = 1.0f;

    std::size_t rank() const noexcept { return a.cols(); }
    std::size_t in_dim() const noexcept { return a.rows(); }
    std::size_t out_dim() const noexcept { return b.cols(); }
};

struct LoraAdapter {
    std::map<std::string, LoraLayer> layers;
    std::string concept_tag;
    std::vector<int> uid_tokens;

    std::vector<std::string> keys() const {
        std::vector<std::string> out;
        for (const auto& [k, _] : layers) out.push_back(k);
        return out;
    }
};

inline void validate_layer(const std::string& key, const LoraLayer& l) {
    if (l.a.cols() != l.b.rows())
        throw ShapeError("layer '" + key + "': A " + l.a.shape_str() + " and B " + l.b.shape_str() + " disagree on rank");
    if (l.rank() == 0 || l.rank() > std::min(l.in_dim(), l.out_dim()))
        throw ShapeError("layer '" + key + "': rank " + std::to_string(l.rank()) + " exceeds min(m, n)");
}

/// Fresh adapter: A ~ N(0, init_std^2), B = 0, so the initial delta is zero.
inline LoraAdapter make_adapter(const std::map<std::string, std::pair<std::size_t, std::size_t>>& shapes,
                                std::size_t rank, Rng& rng, double init_std, std::string concept_tag = {}) {
    LoraAdapter out;
    out.concept_tag = std::move(concept_tag);
    for (const auto& [key, mn] : shapes) {
        const auto [m, n] = mn;
        if (rank == 0 || rank > std::min(m, n))
            throw ParameterError("rank " + std::to_string(rank) + " invalid for " + key + " (" + std::to_string(m) + "x" +
                                 std::to_string(n) + ")");
        out.layers[key] = LoraLayer{rng.normal_matrix(m, rank, init_std), Matrix(rank, n), 1.0f};
    }
    return out;
}

inline Matrix materialize(const LoraLayer& layer) {
    Matrix d = matmul(layer.a, layer.b);
    if (layer.scale != 1.0f) d *= layer.scale;
    return d;
}

/// scale * A * B for one layer.
inline Matrix materialize(const LoraAdapter& adapter, const std::string& key) {
    auto it = adapter.layers.find(key);
    if (it == adapter.layers.end()) throw KeyError("adapter has no layer '" + key + "'");
    return materialize(it->second);
}

inline std::map<std::string, Matrix> materialize_all(const LoraAdapter& adapter) {
    std::map<std::string, Matrix> out;
    for (const auto& [k, l] : adapter.layers) out.emplace(k, materialize(l));
    return out;
}

/// Best rank-r factorization of a full delta: A = U sqrt(S), B = sqrt(S) V^T.
inline LoraLayer extract_lora(const Matrix& delta, std::size_t rank) {
    Svd svd = svd_truncated(delta, rank);
    LoraLayer out{Matrix(delta.rows(), rank), Matrix(rank, delta.cols()), 1.0f};
    for (std::size_t k = 0; k < rank; ++k) {
        const float root = std::sqrt(svd.s[k]);
        for (std::size_t i = 0; i < delta.rows(); ++i) out.a(i, k) = svd.u(i, k) * root;
        for (std::size_t j = 0; j < delta.cols(); ++j) out.b(k, j) = root * svd.v(j, k);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Column alignment

struct LayerAlignment {
    std::string key;
    double mean_abs_cos = 0;
    double max_abs_cos = 0;
    std::size_t columns = 0;  // non-zero column pairs compared
};

struct AlignmentReport {
    std::vector<LayerAlignment> layers;
    double mean_abs_cos = 0;         // over all compared columns
    double random_mean_abs_cos = 0;  // Monte-Carlo mean of the same statistic on Gaussian pairs
    double random_p95 = 0;           // 95th percentile of that statistic
    std::size_t random_trials = 0;
};

namespace detail {

struct ColumnStats {
    double sum = 0;
    double max = 0;
    std::size_t count = 0;
};

inline ColumnStats column_cosines(const Matrix& x, const Matrix& y) {
    ColumnStats st;
    for (std::size_t j = 0; j < x.cols(); ++j) {
        double dot = 0, nx = 0, ny = 0;
        for (std::size_t i = 0; i < x.rows(); ++i) {
            dot += static_cast<double>(x(i, j)) * y(i, j);
            nx += static_cast<double>(x(i, j)) * x(i, j);
            ny += static_cast<double>(y(i, j)) * y(i, j);
        }
        if (nx == 0 || ny == 0) continue;
        double c = std::min(1.0, std::abs(dot) / std::sqrt(nx * ny));
        st.sum += c;
        st.max = std::max(st.max, c);
        ++st.count;
    }
    return st;
}

}  // namespace detail

/// Pairs column j of delta_a with column j of delta_b for every layer and
/// reports |cos| statistics, with a same-shape Gaussian baseline.
inline AlignmentReport alignment(const LoraAdapter& a, const LoraAdapter& b, std::size_t random_trials = 200,
                                 std::uint64_t baseline_seed = 7) {
    if (a.keys() != b.keys()) throw ContractError("alignment: adapters target different layer sets");
    AlignmentReport rep;
    double total = 0;
    std::size_t count = 0;
    for (const auto& [key, la] : a.layers) {
        Matrix da = materialize(la);
        Matrix db = materialize(b.layers.at(key));
        if (!da.same_shape(db)) throw ContractError("alignment: layer '" + key + "' shapes differ");
        auto st = detail::column_cosines(da, db);
        rep.layers.push_back({key, st.count ? st.sum / static_cast<double>(st.count) : 0.0, st.max, st.count});
        total += st.sum;
        count += st.count;
    }
    rep.mean_abs_cos = count ? total / static_cast<double>(count) : 0.0;

    rep.random_trials = random_trials;
    if (random_trials > 0) {
        Rng rng(baseline_seed);
        std::vector<double> stats;
        for (std::size_t t = 0; t < random_trials; ++t) {
            double s = 0;
            std::size_t c = 0;
            for (const auto& [key, la] : a.layers) {
                Matrix x = rng.normal_matrix(la.in_dim(), la.out_dim());
                Matrix y = rng.normal_matrix(la.in_dim(), la.out_dim());
                auto st = detail::column_cosines(x, y);
                s += st.sum;
                c += st.count;
            }
            stats.push_back(c ? s / static_cast<double>(c) : 0.0);
        }
        double mean = 0;
        for (double v : stats) mean += v;
        rep.random_mean_abs_cos = mean / static_cast<double>(stats.size());
        std::sort(stats.begin(), stats.end());
        auto idx = static_cast<std::size_t>(std::ceil(0.95 * static_cast<double>(stats.size()))) - 1;
        rep.random_p95 = stats[std::min(idx, stats.size() - 1)];
    }
    return rep;
}

// ---------------------------------------------------------------------------
// Persistence

inline TensorFile to_tensor_file(const LoraAdapter& adapter) {
    TensorFile f;
    f.metadata["kind"] = "adapter";
    f.metadata["concept_tag"] = adapter.concept_tag;
    std::string uids;
    for (std::size_t i = 0; i < adapter.uid_tokens.size(); ++i)
        uids += (i ? "," : "") + std::to_string(adapter.uid_tokens[i]);
    f.metadata["uid_tokens"] = uids;
    for (const auto& [key, l] : adapter.layers) {
        f.tensors.emplace(key + ".A", l.a);
        f.tensors.emplace(key + ".B", l.b);
        f.tensors.emplace(key + ".scale", Matrix(1, 1, l.scale));
    }
    return f;
}

inline LoraAdapter adapter_from_tensor_file(const TensorFile& f) {
    auto kind = f.metadata.find("kind");
    if (kind == f.metadata.end() || kind->second != "adapter")
        throw FormatError("container kind is not 'adapter'", 0);
    LoraAdapter out;
    if (auto it = f.metadata.find("concept_tag"); it != f.metadata.end()) out.concept_tag = it->second;
    if (auto it = f.metadata.find("uid_tokens"); it != f.metadata.end() && !it->second.empty()) {
        std::stringstream ss(it->second);
        std::string tok;
        while (std::getline(ss, tok, ',')) out.uid_tokens.push_back(std::stoi(tok));
    }
    for (const auto& [name, m] : f.tensors) {
        auto dot = name.rfind('.');
        if (dot == std::string::npos) continue;
        std::string key = name.substr(0, dot), part = name.substr(dot + 1);
        if (part == "A") out.layers[key].a = m;
        else if (part == "B") out.layers[key].b = m;
        else if (part == "scale") out.layers[key].scale = m[0];
    }
    for (const auto& [key, l] : out.layers) {
        if (l.a.empty() || l.b.empty()) throw FormatError("layer '" + key + "' lacks A or B", 0);
        validate_layer(key, l);
    }
    return out;
}

inline void save(const LoraAdapter& adapter, const std::filesystem::path& path) {
    write_file(path, to_tensor_file(adapter));
}

inline LoraAdapter load_adapter(const std::filesystem::path& path) { return adapter_from_tensor_file(read_file(path)); }

}  // namespace loraview::lora
