#pragma once

#include <cstdint>
#include <string>

#include <json.hpp>

#include "loraview/numerics/errors.hpp"
#include "loraview/scenegen/prompt.hpp"

namespace loraview::denoiser {

struct DenoiserConfig {
    std::size_t grid = 24;
    std::size_t patch_size = 4;
    std::size_t embed_dim = 64;
    std::size_t n_blocks = 2;
    std::size_t n_heads = 4;
    std::size_t mlp_ratio = 2;
    std::size_t n_timesteps = 100;
    // Linear beta ramp. The endpoints are quoted at `beta_reference_steps`
    // resolution and rescaled by reference/T; with T = 100 and a reference
    // of 500 the chain ends at abar ~ 0.005.
    double beta_start = 1e-4;
    double beta_end = 0.02;
    std::size_t beta_reference_steps = 500;
    std::size_t vocab_size = scenegen::Vocabulary::kSize;
    std::size_t max_prompt_len = 6;

    std::size_t patches_per_side() const { return grid / patch_size; }
    std::size_t n_patches() const { return patches_per_side() * patches_per_side(); }
    std::size_t patch_dim() const { return patch_size * patch_size; }
    std::size_t head_dim() const { return embed_dim / n_heads; }

    void validate() const {
        if (patch_size == 0 || grid % patch_size != 0)
            throw ParameterError("grid " + std::to_string(grid) + " not divisible by patch size " +
                                 std::to_string(patch_size));
        if (n_timesteps < 10) throw ParameterError("n_timesteps must be >= 10");
        if (n_heads == 0 || embed_dim % n_heads != 0) throw ParameterError("embed_dim must be divisible by n_heads");
        if (n_blocks == 0 || mlp_ratio == 0 || max_prompt_len == 0) throw ParameterError("degenerate denoiser config");
        if (vocab_size < static_cast<std::size_t>(scenegen::Vocabulary::kSize))
            throw ParameterError("vocab_size smaller than the token table");
    }
};

/// Training-loop settings shared by adapter finetuning and pretraining.
/// Defaults are the concept-stage values: 1000 iterations, batch 1,
/// constant learning rate 5e-5.
struct TrainConfig {
    std::size_t iterations = 1000;
    double lr = 5e-5;
    std::size_t batch_size = 1;
    std::uint64_t seed = 0;
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(DenoiserConfig, grid, patch_size, embed_dim, n_blocks, n_heads,
                                                mlp_ratio, n_timesteps, beta_start, beta_end, beta_reference_steps,
                                                vocab_size, max_prompt_len)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(TrainConfig, iterations, lr, batch_size, seed)

}  // namespace loraview::denoiser
