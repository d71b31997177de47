#include "detok/corruption.hpp"

#include <cmath>

namespace detok {

void CorruptionConfig::validate() const {
    TORCH_CHECK(gamma >= 0.0, "CorruptionConfig: gamma must be >= 0, got ", gamma);
    TORCH_CHECK(max_mask_ratio >= 0.0 && max_mask_ratio <= 1.0,
                "CorruptionConfig: max_mask_ratio must be in [0,1], got ", max_mask_ratio);
    TORCH_CHECK(mask_bias <= 0.0, "CorruptionConfig: mask_bias must be <= 0, got ", mask_bias);
}

torch::Tensor sample_noise_level(int64_t batch_size, torch::Generator& gen) {
    TORCH_CHECK(batch_size >= 1, "sample_noise_level: batch_size must be >= 1");
    return torch::rand({batch_size}, gen, torch::kFloat32);
}

double sample_mask_ratio(const CorruptionConfig& config, torch::Generator& gen) {
    config.validate();
    if (config.max_mask_ratio <= 0.0) {
        return 0.0;
    }
    double u = torch::rand({1}, gen, torch::kFloat64).item<double>();
    double draw = config.mask_bias + u * (config.max_mask_ratio - config.mask_bias);
    return std::max(0.0, draw);
}

MaskPlan sample_mask(int64_t batch_size, int64_t n_tokens, double ratio, torch::Generator& gen) {
    TORCH_CHECK(batch_size >= 1, "sample_mask: batch_size must be >= 1");
    TORCH_CHECK(n_tokens >= 1, "sample_mask: n_tokens must be >= 1");
    TORCH_CHECK(ratio >= 0.0 && ratio <= 1.0, "sample_mask: ratio must be in [0,1], got ", ratio);

    const int64_t n_masked = static_cast<int64_t>(std::floor(ratio * static_cast<double>(n_tokens)));
    const int64_t n_visible = n_tokens - n_masked;

    auto visible = torch::empty({batch_size, n_visible}, torch::kInt64);
    auto restore = torch::empty({batch_size, n_tokens}, torch::kInt64);
    for (int64_t b = 0; b < batch_size; ++b) {
        auto perm = torch::randperm(n_tokens, gen, torch::kInt64);
        auto vis = std::get<0>(perm.slice(0, 0, n_visible).sort());
        auto masked = std::get<0>(perm.slice(0, n_visible, n_tokens).sort());
        visible[b] = vis;
        // shuffled order = [vis | masked]; invert it.
        auto shuffled = torch::cat({vis, masked});
        restore[b].scatter_(0, shuffled, torch::arange(n_tokens, torch::kInt64));
    }

    MaskPlan plan;
    plan.visible_indices = visible;
    plan.restore_permutation = restore;
    plan.ratio = ratio;
    plan.n_tokens = n_tokens;
    return plan;
}

torch::Tensor interpolate_noise(const torch::Tensor& latents, const torch::Tensor& tau,
                                const CorruptionConfig& config, torch::Generator& gen) {
    config.validate();
    TORCH_CHECK(latents.dim() == 3, "interpolate_noise: latents must be [batch, tokens, channels]");
    TORCH_CHECK(latents.isfinite().all().item<bool>(), "interpolate_noise: latents must be finite");
    TORCH_CHECK(tau.numel() == latents.size(0), "interpolate_noise: one tau per sample expected");
    TORCH_CHECK((tau.ge(0.0).logical_and(tau.le(1.0))).all().item<bool>(),
                "interpolate_noise: tau must lie in [0,1]");

    auto t = tau.to(latents.dtype()).reshape({-1, 1, 1});
    auto noise = config.gamma *
                 torch::randn(latents.sizes(), gen, latents.options().requires_grad(false));
    if (config.additive_mode) {
        return latents + t * noise;
    }
    return (1.0 - t) * latents + t * noise;
}

}  // namespace detok
