#pragma once

#include <torch/torch.h>

#include <functional>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "detok/rng.hpp"
#include "detok/transformer.hpp"

namespace detok {

struct NoiseSchedule {
    std::function<double(double)> a;  // clean-signal coefficient
    std::function<double(double)> b;  // noise coefficient

    // a(t) = 1 - t, b(t) = t.
    static NoiseSchedule linear();
};

enum class GenFamily { Flow, MaskedAr, RasterAr, RandomAr };

GenFamily gen_family_from_string(const std::string& name);
std::string to_string(GenFamily family);

struct DiffHeadConfig {
    int64_t layers = 3;
    int64_t channels = 1024;
};

struct GenModelConfig {
    GenFamily family = GenFamily::Flow;
    int64_t width = 256;
    int64_t depth = 6;
    int64_t heads = 8;
    DiffHeadConfig diffhead{3, 256};
    int64_t num_classes = 10;
    int64_t n_tokens = 64;
    int64_t latent_dim = 8;
    bool cfg_all_channels = true;
    double class_drop_prob = 0.1;

    bool is_ar() const { return family != GenFamily::Flow; }
    int64_t null_class() const { return num_classes; }
    void validate() const;
};

struct SamplerSettings {
    int64_t ar_steps = 64;
    int64_t denoise_steps = 100;  // 250 for flow models
    double cfg_scale = 1.0;
    double temperature = 1.0;
    double t_start = 0.999;  // time endpoint used in place of the singular t = 1

    void validate() const;
};

// x_t = a(t) * x0 + b(t) * eps; returns (x_t, eps), eps not resampled.
std::pair<torch::Tensor, torch::Tensor> forward_noising(const torch::Tensor& x0,
                                                        const torch::Tensor& t,
                                                        const NoiseSchedule& schedule,
                                                        torch::Generator& gen);

// uncond + scale * (cond - uncond), every channel.
torch::Tensor cfg_combine(const torch::Tensor& cond, const torch::Tensor& uncond, double scale);

// Cosine reveal schedule for masked-AR sampling: tokens revealed per step.
// Every entry is >= 1 and the entries sum to n_tokens.
std::vector<int64_t> masked_ar_reveal_schedule(int64_t n_tokens, int64_t ar_steps);

// Replace labels by the null class with probability prob (CFG training).
torch::Tensor drop_labels(const torch::Tensor& labels, double prob, int64_t null_class,
                          torch::Generator& gen, struct ClassDropStats* stats = nullptr);

// Running tally of CFG label dropping during training.
struct ClassDropStats {
    int64_t dropped = 0;
    int64_t total = 0;
    double rate() const { return total > 0 ? static_cast<double>(dropped) / total : 0.0; }
};

// Per-token noise-estimator MLP (diffloss head): residual blocks over
// concat-projected (x_t, timestep, condition).
struct DiffHeadImpl : torch::nn::Module {
    DiffHeadImpl(int64_t latent_dim, int64_t cond_dim, const DiffHeadConfig& config);
    // x_t: [*, latent_dim], t: [*], cond: [*, cond_dim] -> eps estimate [*, latent_dim]
    torch::Tensor forward(const torch::Tensor& x_t, const torch::Tensor& t,
                          const torch::Tensor& cond);

    torch::nn::Linear x_proj{nullptr}, t_proj{nullptr}, cond_proj{nullptr}, out{nullptr};
    std::vector<RmsNorm> norms;
    std::vector<torch::nn::Linear> fc1s, fc2s;
    int64_t channels;
};
TORCH_MODULE(DiffHead);

// Per-element Eq.-2-style loss for tokens under the given conditions.
torch::Tensor diffhead_loss(DiffHead& head, const torch::Tensor& x0_tokens,
                            const torch::Tensor& cond, const NoiseSchedule& schedule,
                            torch::Generator& time_gen, torch::Generator& noise_gen);

// Iterative per-token denoising; temperature scales injected noise only.
torch::Tensor diffhead_sample(DiffHead& head, const torch::Tensor& cond,
                              const SamplerSettings& settings, torch::Generator& gen);
torch::Tensor diffhead_sample_cfg(DiffHead& head, const torch::Tensor& cond,
                                  const torch::Tensor& uncond_cond,
                                  const SamplerSettings& settings, torch::Generator& gen);

// DiT-style block with adaptive-norm conditioning (shift/scale/gate from the
// conditioning vector) around attention and FFN.
struct DitBlockImpl : torch::nn::Module {
    DitBlockImpl(int64_t width, int64_t heads);
    torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& cond);

    RmsNorm norm1{nullptr}, norm2{nullptr};
    Attention attn{nullptr};
    SwiGluFfn ffn{nullptr};
    torch::nn::Linear modulation{nullptr};
};
TORCH_MODULE(DitBlock);

struct FlowModelImpl : torch::nn::Module {
    explicit FlowModelImpl(const GenModelConfig& config);
    // x_t: [B, N, latent], t: [B], labels: [B] int64 (num_classes = null class)
    torch::Tensor forward(const torch::Tensor& x_t, const torch::Tensor& t,
                          const torch::Tensor& labels);

    GenModelConfig config;
    torch::nn::Linear input_proj{nullptr};
    torch::Tensor pos_embed;
    torch::nn::Embedding class_embed{nullptr};
    torch::nn::Linear time_fc1{nullptr}, time_fc2{nullptr};
    std::vector<DitBlock> blocks;
    RmsNorm final_norm{nullptr};
    torch::nn::Linear final_mod{nullptr}, output_proj{nullptr};
};
TORCH_MODULE(FlowModel);

torch::Tensor denoising_loss(FlowModel& model, const torch::Tensor& x0,
                             const torch::Tensor& labels, const NoiseSchedule& schedule,
                             RngStreams& rng, ClassDropStats* drop_stats = nullptr);

// Transformer over latent tokens producing per-position condition vectors for
// the diffloss head. MaskedAr is bidirectional over mask-token-filled input;
// RasterAr/RandomAr are causal over (class token | ordered latent tokens).
struct ArModelImpl : torch::nn::Module {
    explicit ArModelImpl(const GenModelConfig& config);

    // Masked family: mask [B, N] bool, true = predict this position.
    // Returns condition vectors [B, N, width].
    torch::Tensor masked_conditions(const torch::Tensor& x0, const torch::Tensor& mask,
                                    const torch::Tensor& labels);
    // Causal families: order [B, N] generation-order permutation. Condition i
    // is for the token generated at step i (i.e. position order[:, i]).
    torch::Tensor causal_conditions(const torch::Tensor& x0, const torch::Tensor& order,
                                    const torch::Tensor& labels);

    GenModelConfig config;
    torch::nn::Linear token_embed{nullptr};
    torch::Tensor mask_token;
    torch::Tensor pos_embed;       // [1, N, width]
    torch::Tensor next_pos_embed;  // [1, N, width], target-position conditioning
    torch::nn::Embedding class_embed{nullptr};
    std::vector<Block> blocks;
    RmsNorm norm{nullptr};
    DiffHead head{nullptr};
};
TORCH_MODULE(ArModel);

// Family-dispatching training losses. The _with variants take the masking /
// ordering explicitly; ar_training_step samples them.
torch::Tensor masked_ar_loss(ArModel& model, const torch::Tensor& x0,
                             const torch::Tensor& labels, const torch::Tensor& mask,
                             const NoiseSchedule& schedule, RngStreams& rng,
                             ClassDropStats* drop_stats = nullptr);
torch::Tensor causal_ar_loss(ArModel& model, const torch::Tensor& x0,
                             const torch::Tensor& labels, const torch::Tensor& order,
                             const NoiseSchedule& schedule, RngStreams& rng,
                             ClassDropStats* drop_stats = nullptr);
torch::Tensor ar_training_step(ArModel& model, const torch::Tensor& x0,
                               const torch::Tensor& labels, const NoiseSchedule& schedule,
                               RngStreams& rng, ClassDropStats* drop_stats = nullptr);

// Reverse-process integration from pure noise; CFG applied at every step.
torch::Tensor sample_flow(FlowModel& model, const SamplerSettings& settings,
                          const torch::Tensor& labels, const NoiseSchedule& schedule,
                          torch::Generator& gen);

// MaskedAr reveals tokens over ar_steps with a cosine schedule; causal
// families generate one token per step in their order.
torch::Tensor sample_ar(ArModel& model, const SamplerSettings& settings,
                        const torch::Tensor& labels, const NoiseSchedule& schedule,
                        torch::Generator& gen);

}  // namespace detok
