#pragma once

#include <torch/torch.h>

#include <optional>
#include <string>
#include <vector>

#include "detok/corruption.hpp"
#include "detok/transformer.hpp"

namespace detok {

struct SizeSpec {
    int64_t hidden = 512;
    int64_t blocks = 8;
    int64_t heads = 8;

    static SizeSpec small() { return {512, 8, 8}; }
    static SizeSpec base() { return {768, 12, 12}; }
    static SizeSpec preset(const std::string& name);
};

struct TokenizerConfig {
    int64_t image_size = 64;
    int64_t patch_size = 8;
    int64_t latent_dim = 8;
    SizeSpec encoder = SizeSpec::small();
    SizeSpec decoder = SizeSpec::small();
    bool use_rope = true;
    bool use_learned_pos = true;
    double logvar_min = -30.0;
    double logvar_max = 20.0;

    int64_t grid_size() const { return image_size / patch_size; }
    int64_t n_tokens() const { return grid_size() * grid_size(); }
    void validate() const;
};

// Diagonal Gaussian posterior over latent tokens.
struct PosteriorParams {
    torch::Tensor mean;          // [batch, n, latent_dim]
    torch::Tensor log_variance;  // [batch, n, latent_dim]
};

struct LatentBatch {
    torch::Tensor tokens;  // [batch, n, latent_dim]; visible positions only if mask_plan set
    std::optional<MaskPlan> mask_plan;
    bool standardized = false;
};

// [B, 3, H, W] -> [B, N, patch_size^2 * 3], row-major patch order.
torch::Tensor patchify(const torch::Tensor& image, int64_t patch_size);
torch::Tensor unpatchify(const torch::Tensor& tokens, int64_t patch_size, int64_t image_size);

struct TokenizerEncoderImpl : torch::nn::Module {
    explicit TokenizerEncoderImpl(const TokenizerConfig& config);
    PosteriorParams forward(const torch::Tensor& images, const std::optional<MaskPlan>& plan = {});

    TokenizerConfig config;
    torch::nn::Linear patch_embed{nullptr};
    torch::Tensor pos_embed;
    std::vector<Block> blocks;
    RmsNorm norm{nullptr};
    torch::nn::Linear latent_head{nullptr};
};
TORCH_MODULE(TokenizerEncoder);

struct TokenizerDecoderImpl : torch::nn::Module {
    explicit TokenizerDecoderImpl(const TokenizerConfig& config);
    // Rejects standardized latents. Output is clamped to [-1, 1] in eval mode.
    torch::Tensor forward(const LatentBatch& latents);

    TokenizerConfig config;
    torch::nn::Linear input_proj{nullptr};
    torch::Tensor mask_token;
    torch::Tensor pos_embed;
    std::vector<Block> blocks;
    RmsNorm norm{nullptr};
    torch::nn::Linear pixel_head{nullptr};
};
TORCH_MODULE(TokenizerDecoder);

struct TokenizerImpl : torch::nn::Module {
    explicit TokenizerImpl(const TokenizerConfig& config);

    PosteriorParams encode(const torch::Tensor& images, const std::optional<MaskPlan>& plan = {});
    torch::Tensor decode(const LatentBatch& latents);

    TokenizerConfig config;
    TokenizerEncoder encoder{nullptr};
    TokenizerDecoder decoder{nullptr};
};
TORCH_MODULE(Tokenizer);

// mean + exp(0.5 * log_variance) * eps; deterministic mode returns the mean.
LatentBatch sample_posterior(const PosteriorParams& params, torch::Generator& gen,
                             bool deterministic = false);

enum class Component { Encoder, Decoder };
int64_t count_parameters(const TokenizerConfig& config, Component component);

}  // namespace detok
