#include "detok/tokenizer.hpp"

namespace detok {

SizeSpec SizeSpec::preset(const std::string& name) {
    if (name == "small") return small();
    if (name == "base") return base();
    TORCH_CHECK(false, "unknown size preset: ", name);
}

void TokenizerConfig::validate() const {
    TORCH_CHECK(image_size > 0 && patch_size > 0, "TokenizerConfig: sizes must be positive");
    TORCH_CHECK(image_size % patch_size == 0,
                "TokenizerConfig: image_size must be divisible by patch_size");
    TORCH_CHECK(latent_dim >= 1, "TokenizerConfig: latent_dim must be >= 1");
}

torch::Tensor patchify(const torch::Tensor& image, int64_t patch_size) {
    TORCH_CHECK(image.dim() == 4 && image.size(1) == 3,
                "patchify: expected [batch, 3, H, W], got ", image.sizes());
    const int64_t B = image.size(0), H = image.size(2), W = image.size(3);
    TORCH_CHECK(H % patch_size == 0 && W % patch_size == 0,
                "patchify: image dims must be divisible by patch_size");
    const int64_t gh = H / patch_size, gw = W / patch_size;
    auto x = image.reshape({B, 3, gh, patch_size, gw, patch_size});
    x = x.permute({0, 2, 4, 3, 5, 1});  // [B, gh, gw, p, p, 3]
    return x.reshape({B, gh * gw, patch_size * patch_size * 3});
}

torch::Tensor unpatchify(const torch::Tensor& tokens, int64_t patch_size, int64_t image_size) {
    const int64_t B = tokens.size(0);
    const int64_t g = image_size / patch_size;
    TORCH_CHECK(tokens.size(1) == g * g, "unpatchify: token count mismatch");
    auto x = tokens.reshape({B, g, g, patch_size, patch_size, 3});
    x = x.permute({0, 5, 1, 3, 2, 4});  // [B, 3, gh, p, gw, p]
    return x.reshape({B, 3, image_size, image_size});
}

namespace {

// Gather per-sample token rows: values [B, N, C], ids [B, M] -> [B, M, C].
torch::Tensor gather_tokens(const torch::Tensor& values, const torch::Tensor& ids) {
    auto idx = ids.unsqueeze(-1).expand({ids.size(0), ids.size(1), values.size(2)});
    return values.gather(1, idx);
}

torch::Tensor full_pos_ids(int64_t batch, int64_t n_tokens) {
    return torch::arange(n_tokens, torch::kInt64).unsqueeze(0).expand({batch, n_tokens});
}

}  // namespace

TokenizerEncoderImpl::TokenizerEncoderImpl(const TokenizerConfig& cfg) : config(cfg) {
    config.validate();
    const int64_t patch_dim = cfg.patch_size * cfg.patch_size * 3;
    patch_embed = register_module("patch_embed", torch::nn::Linear(patch_dim, cfg.encoder.hidden));
    pos_embed = register_parameter(
        "pos_embed", 0.02 * torch::randn({1, cfg.n_tokens(), cfg.encoder.hidden}));
    for (int64_t i = 0; i < cfg.encoder.blocks; ++i) {
        blocks.push_back(register_module("block_" + std::to_string(i),
                                         Block(cfg.encoder.hidden, cfg.encoder.heads)));
    }
    norm = register_module("norm", RmsNorm(cfg.encoder.hidden));
    latent_head = register_module("latent_head",
                                  torch::nn::Linear(cfg.encoder.hidden, 2 * cfg.latent_dim));
}

PosteriorParams TokenizerEncoderImpl::forward(const torch::Tensor& images,
                                              const std::optional<MaskPlan>& plan) {
    const int64_t B = images.size(0);
    auto patches = patchify(images, config.patch_size);
    torch::Tensor pos_ids;
    if (plan) {
        TORCH_CHECK(plan->n_tokens == config.n_tokens(),
                    "encode: mask plan token count mismatch (", plan->n_tokens, " vs ",
                    config.n_tokens(), ")");
        patches = gather_tokens(patches, plan->visible_indices);
        pos_ids = plan->visible_indices;
    } else {
        pos_ids = full_pos_ids(B, config.n_tokens());
    }

    auto h = patch_embed->forward(patches);
    if (config.use_learned_pos) {
        h = h + gather_tokens(pos_embed.expand({B, -1, -1}), pos_ids);
    }
    std::optional<RopeFreqs> rope;
    if (config.use_rope) {
        rope = rope_freqs_2d(pos_ids, config.grid_size(),
                             config.encoder.hidden / config.encoder.heads,
                             h.scalar_type());
    }
    for (auto& block : blocks) {
        h = block->forward(h, rope);
    }
    h = latent_head->forward(norm->forward(h));
    auto chunks = h.chunk(2, -1);
    return {chunks[0], chunks[1].clamp(config.logvar_min, config.logvar_max)};
}

TokenizerDecoderImpl::TokenizerDecoderImpl(const TokenizerConfig& cfg) : config(cfg) {
    config.validate();
    input_proj = register_module("input_proj",
                                 torch::nn::Linear(cfg.latent_dim, cfg.decoder.hidden));
    mask_token = register_parameter("mask_token", 0.02 * torch::randn({cfg.decoder.hidden}));
    pos_embed = register_parameter(
        "pos_embed", 0.02 * torch::randn({1, cfg.n_tokens(), cfg.decoder.hidden}));
    for (int64_t i = 0; i < cfg.decoder.blocks; ++i) {
        blocks.push_back(register_module("block_" + std::to_string(i),
                                         Block(cfg.decoder.hidden, cfg.decoder.heads)));
    }
    norm = register_module("norm", RmsNorm(cfg.decoder.hidden));
    pixel_head = register_module(
        "pixel_head",
        torch::nn::Linear(cfg.decoder.hidden, cfg.patch_size * cfg.patch_size * 3));
}

torch::Tensor TokenizerDecoderImpl::forward(const LatentBatch& latents) {
    TORCH_CHECK(!latents.standardized,
                "decode: latents must be unstandardized (raw tokenizer scale)");
    const int64_t B = latents.tokens.size(0);
    const int64_t N = config.n_tokens();

    auto h = input_proj->forward(latents.tokens);
    if (latents.mask_plan) {
        const auto& plan = *latents.mask_plan;
        TORCH_CHECK(plan.n_tokens == N, "decode: mask plan token count mismatch");
        TORCH_CHECK(latents.tokens.size(1) == plan.n_visible(),
                    "decode: latents must cover exactly the visible positions");
        auto fill = mask_token.to(h.dtype()).reshape({1, 1, -1})
                        .expand({B, N - plan.n_visible(), config.decoder.hidden});
        auto shuffled = torch::cat({h, fill}, 1);
        h = gather_tokens(shuffled, plan.restore_permutation);
    } else {
        TORCH_CHECK(latents.tokens.size(1) == N, "decode: token count mismatch");
    }

    h = h + pos_embed.expand({B, -1, -1});
    std::optional<RopeFreqs> rope;
    if (config.use_rope) {
        rope = rope_freqs_2d(full_pos_ids(B, N), config.grid_size(),
                             config.decoder.hidden / config.decoder.heads, h.scalar_type());
    }
    for (auto& block : blocks) {
        h = block->forward(h, rope);
    }
    auto pixels = pixel_head->forward(norm->forward(h));
    auto image = unpatchify(pixels, config.patch_size, config.image_size);
    if (!is_training()) {
        image = image.clamp(-1.0, 1.0);
    }
    return image;
}

TokenizerImpl::TokenizerImpl(const TokenizerConfig& cfg) : config(cfg) {
    encoder = register_module("encoder", TokenizerEncoder(cfg));
    decoder = register_module("decoder", TokenizerDecoder(cfg));
}

PosteriorParams TokenizerImpl::encode(const torch::Tensor& images,
                                      const std::optional<MaskPlan>& plan) {
    return encoder->forward(images, plan);
}

torch::Tensor TokenizerImpl::decode(const LatentBatch& latents) {
    return decoder->forward(latents);
}

LatentBatch sample_posterior(const PosteriorParams& params, torch::Generator& gen,
                             bool deterministic) {
    TORCH_CHECK(params.mean.isfinite().all().item<bool>() &&
                    params.log_variance.isfinite().all().item<bool>(),
                "sample_posterior: params must be finite");
    LatentBatch out;
    if (deterministic) {
        out.tokens = params.mean.clone();
    } else {
        auto eps = torch::randn(params.mean.sizes(), gen,
                                params.mean.options().requires_grad(false));
        out.tokens = params.mean + torch::exp(0.5 * params.log_variance) * eps;
    }
    return out;
}

int64_t count_parameters(const TokenizerConfig& config, Component component) {
    config.validate();
    torch::NoGradGuard no_grad;
    std::shared_ptr<torch::nn::Module> mod;
    if (component == Component::Encoder) {
        mod = std::make_shared<TokenizerEncoderImpl>(config);
    } else {
        mod = std::make_shared<TokenizerDecoderImpl>(config);
    }
    int64_t count = 0;
    for (const auto& p : mod->parameters()) {
        count += p.numel();
    }
    return count;
}

}  // namespace detok
