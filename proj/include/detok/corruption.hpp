#pragma once

#include <torch/torch.h>

#include <cstdint>

namespace detok {

// Deconstruction settings: interpolative latent noise and randomized masking.
struct CorruptionConfig {
    double gamma = 3.0;          // noise standard deviation scale
    double max_mask_ratio = 0.7; // upper bound M of the masking-ratio distribution
    double mask_bias = -0.1;     // lower bound of the biased uniform, <= 0
    bool additive_mode = false;  // additive-noise ablation baseline

    void validate() const;
};

// Which patches stay visible and how to undo the visible/masked split.
//
// Shuffled order per sample is [visible ascending | masked ascending];
// restore_permutation[b][i] is the index of original token i in that order,
// so gather(shuffled, restore_permutation) recovers original token order.
struct MaskPlan {
    torch::Tensor visible_indices;     // int64 [batch, n_visible], sorted ascending per row
    torch::Tensor restore_permutation; // int64 [batch, n_tokens]
    double ratio = 0.0;                // realized mask ratio m
    int64_t n_tokens = 0;

    int64_t batch_size() const { return visible_indices.size(0); }
    int64_t n_visible() const { return visible_indices.size(1); }
};

// One tau per sample, i.i.d. U(0,1). Returns shape [batch_size].
torch::Tensor sample_noise_level(int64_t batch_size, torch::Generator& gen);

// m = max(0, U(mask_bias, M)). Returns 0 whenever M <= 0.
double sample_mask_ratio(const CorruptionConfig& config, torch::Generator& gen);

// Uniform-without-replacement choice of visible tokens for each sample.
// floor(ratio * n_tokens) tokens are masked.
MaskPlan sample_mask(int64_t batch_size, int64_t n_tokens, double ratio, torch::Generator& gen);

// x' = (1 - tau) * x + tau * eps with eps ~ gamma * N(0, I), tau broadcast
// per sample over tokens and channels. In additive mode, x' = x + tau * eps.
torch::Tensor interpolate_noise(const torch::Tensor& latents, const torch::Tensor& tau,
                                const CorruptionConfig& config, torch::Generator& gen);

}  // namespace detok
