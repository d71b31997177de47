#include "detok/gen_models.hpp"

#include <cmath>

namespace detok {

NoiseSchedule NoiseSchedule::linear() {
    return {[](double t) { return 1.0 - t; }, [](double t) { return t; }};
}

GenFamily gen_family_from_string(const std::string& name) {
    if (name == "flow") return GenFamily::Flow;
    if (name == "masked_ar") return GenFamily::MaskedAr;
    if (name == "raster_ar") return GenFamily::RasterAr;
    if (name == "random_ar") return GenFamily::RandomAr;
    TORCH_CHECK(false, "unknown generative model family: ", name);
}

std::string to_string(GenFamily family) {
    switch (family) {
        case GenFamily::Flow: return "flow";
        case GenFamily::MaskedAr: return "masked_ar";
        case GenFamily::RasterAr: return "raster_ar";
        case GenFamily::RandomAr: return "random_ar";
    }
    return "?";
}

void GenModelConfig::validate() const {
    TORCH_CHECK(width > 0 && depth > 0 && heads > 0, "GenModelConfig: bad transformer shape");
    TORCH_CHECK(width % heads == 0, "GenModelConfig: width must be divisible by heads");
    TORCH_CHECK(num_classes >= 1, "GenModelConfig: num_classes must be >= 1");
    TORCH_CHECK(n_tokens >= 1 && latent_dim >= 1, "GenModelConfig: bad token shape");
    TORCH_CHECK(class_drop_prob >= 0 && class_drop_prob <= 1,
                "GenModelConfig: class_drop_prob must be in [0,1]");
    if (is_ar()) {
        TORCH_CHECK(diffhead.layers >= 1 && diffhead.channels >= 1,
                    "GenModelConfig: bad diffhead shape");
    }
}

void SamplerSettings::validate() const {
    TORCH_CHECK(ar_steps >= 1 && denoise_steps >= 1, "SamplerSettings: steps must be >= 1");
    TORCH_CHECK(cfg_scale >= 1.0, "SamplerSettings: cfg_scale must be >= 1");
    TORCH_CHECK(temperature >= 0.0, "SamplerSettings: temperature must be >= 0");
    TORCH_CHECK(t_start > 0.0 && t_start < 1.0, "SamplerSettings: t_start must be in (0,1)");
}

namespace {

torch::Tensor apply_schedule(const std::function<double(double)>& f, const torch::Tensor& t) {
    auto td = t.to(torch::kFloat64).contiguous();
    auto out = torch::empty_like(td);
    auto* in_p = td.data_ptr<double>();
    auto* out_p = out.data_ptr<double>();
    for (int64_t i = 0; i < td.numel(); ++i) {
        out_p[i] = f(in_p[i]);
    }
    return out.to(t.dtype());
}

// Sinusoidal embedding of t in [0,1], scaled to the conventional 0..1000 range.
torch::Tensor timestep_embedding(const torch::Tensor& t, int64_t dim) {
    TORCH_CHECK(dim % 2 == 0, "timestep_embedding: dim must be even");
    const int64_t half = dim / 2;
    auto opts = torch::TensorOptions().dtype(t.dtype());
    auto k = torch::arange(half, opts);
    auto freqs = torch::exp(-std::log(10000.0) * k / static_cast<double>(half));
    auto args = (1000.0 * t).unsqueeze(-1) * freqs;
    return torch::cat({args.cos(), args.sin()}, -1);
}

}  // namespace

torch::Tensor drop_labels(const torch::Tensor& labels, double prob, int64_t null_class,
                          torch::Generator& gen, ClassDropStats* stats) {
    auto draw = torch::rand(labels.sizes(), gen, torch::kFloat32);
    auto mask = draw.lt(prob);
    if (stats) {
        stats->dropped += mask.sum().item<int64_t>();
        stats->total += labels.numel();
    }
    return torch::where(mask, torch::full_like(labels, null_class), labels);
}

std::vector<int64_t> masked_ar_reveal_schedule(int64_t n_tokens, int64_t ar_steps) {
    const int64_t S = std::min<int64_t>(ar_steps, n_tokens);
    std::vector<int64_t> reveals;
    int64_t n_masked = n_tokens;
    for (int64_t i = 0; i < S; ++i) {
        int64_t target = static_cast<int64_t>(
            std::floor(n_tokens * std::cos(M_PI_2 * static_cast<double>(i + 1) / S)));
        target = std::min<int64_t>(target, n_masked - 1);
        target = std::max<int64_t>(target, S - i - 1);
        if (i + 1 == S) {
            target = 0;
        }
        reveals.push_back(n_masked - target);
        n_masked = target;
    }
    return reveals;
}

namespace {

torch::Tensor gather_rows(const torch::Tensor& values, const torch::Tensor& ids) {
    auto idx = ids.unsqueeze(-1).expand({ids.size(0), ids.size(1), values.size(2)});
    return values.gather(1, idx);
}

// Uniform time grid avoiding the singular t = 1 endpoint.
std::vector<double> denoise_time_grid(int64_t steps, double t_start) {
    std::vector<double> grid(steps + 1);
    for (int64_t i = 0; i <= steps; ++i) {
        grid[i] = std::min(t_start,
                           static_cast<double>(steps - i) / static_cast<double>(steps + 1));
    }
    return grid;
}

// One denoising pass x_1 -> x_0 given a per-state eps estimator.
// Update: x0_hat = (x - t*eps)/(1-t); x_s = (1-s)*x0_hat + s*eps + T*sigma*z,
// sigma = s*sqrt((t-s)/t). Deterministic when temperature = 0.
torch::Tensor denoise_iterate(const std::function<torch::Tensor(const torch::Tensor&, double)>& eps_fn,
                              torch::Tensor x, const SamplerSettings& settings,
                              torch::Generator& gen) {
    auto grid = denoise_time_grid(settings.denoise_steps, settings.t_start);
    for (int64_t i = 0; i < settings.denoise_steps; ++i) {
        const double t = grid[i], s = grid[i + 1];
        auto eps_hat = eps_fn(x, t);
        auto x0_hat = (x - t * eps_hat) / (1.0 - t);
        if (s <= 0.0) {
            x = x0_hat;
        } else {
            const double sigma = s * std::sqrt((t - s) / t);
            auto z = torch::randn(x.sizes(), gen, x.options());
            x = (1.0 - s) * x0_hat + s * eps_hat + settings.temperature * sigma * z;
        }
    }
    return x;
}

}  // namespace

std::pair<torch::Tensor, torch::Tensor> forward_noising(const torch::Tensor& x0,
                                                        const torch::Tensor& t,
                                                        const NoiseSchedule& schedule,
                                                        torch::Generator& gen) {
    TORCH_CHECK(t.numel() == x0.size(0), "forward_noising: one t per sample expected");
    TORCH_CHECK((t.ge(0.0).logical_and(t.le(1.0))).all().item<bool>(),
                "forward_noising: t must lie in [0,1]");
    auto shape_tail = std::vector<int64_t>(x0.dim(), 1);
    shape_tail[0] = -1;
    auto at = apply_schedule(schedule.a, t).reshape(shape_tail).to(x0.dtype());
    auto bt = apply_schedule(schedule.b, t).reshape(shape_tail).to(x0.dtype());
    auto eps = torch::randn(x0.sizes(), gen, x0.options().requires_grad(false));
    return {at * x0 + bt * eps, eps};
}

torch::Tensor cfg_combine(const torch::Tensor& cond, const torch::Tensor& uncond, double scale) {
    TORCH_CHECK(cond.sizes() == uncond.sizes(), "cfg_combine: shape mismatch");
    if (scale == 1.0) {
        return cond;
    }
    return uncond + scale * (cond - uncond);
}

DiffHeadImpl::DiffHeadImpl(int64_t latent_dim, int64_t cond_dim, const DiffHeadConfig& cfg)
    : channels(cfg.channels) {
    x_proj = register_module("x_proj", torch::nn::Linear(latent_dim, channels));
    t_proj = register_module("t_proj", torch::nn::Linear(channels, channels));
    cond_proj = register_module("cond_proj", torch::nn::Linear(cond_dim, channels));
    for (int64_t i = 0; i < cfg.layers; ++i) {
        norms.push_back(register_module("norm_" + std::to_string(i), RmsNorm(channels)));
        fc1s.push_back(register_module("fc1_" + std::to_string(i),
                                       torch::nn::Linear(channels, channels)));
        fc2s.push_back(register_module("fc2_" + std::to_string(i),
                                       torch::nn::Linear(channels, channels)));
    }
    out = register_module("out", torch::nn::Linear(channels, latent_dim));
    torch::NoGradGuard no_grad;
    out->weight.zero_();
    out->bias.zero_();
}

torch::Tensor DiffHeadImpl::forward(const torch::Tensor& x_t, const torch::Tensor& t,
                                    const torch::Tensor& cond) {
    auto temb = timestep_embedding(t.to(x_t.dtype()), channels);
    auto z = x_proj->forward(x_t) + t_proj->forward(temb) + cond_proj->forward(cond);
    for (size_t i = 0; i < fc1s.size(); ++i) {
        z = z + fc2s[i]->forward(torch::silu(fc1s[i]->forward(norms[i]->forward(z))));
    }
    return out->forward(z);
}

torch::Tensor diffhead_loss(DiffHead& head, const torch::Tensor& x0_tokens,
                            const torch::Tensor& cond, const NoiseSchedule& schedule,
                            torch::Generator& time_gen, torch::Generator& noise_gen) {
    auto t = torch::rand({x0_tokens.size(0)}, time_gen,
                         torch::TensorOptions().dtype(x0_tokens.dtype()));
    auto [x_t, eps] = forward_noising(x0_tokens, t, schedule, noise_gen);
    auto eps_hat = head->forward(x_t, t, cond);
    return torch::mse_loss(eps_hat, eps);
}

torch::Tensor diffhead_sample(DiffHead& head, const torch::Tensor& cond,
                              const SamplerSettings& settings, torch::Generator& gen) {
    settings.validate();
    const int64_t latent_dim = head->out->weight.size(0);
    auto grid = denoise_time_grid(settings.denoise_steps, settings.t_start);
    auto x = grid[0] * settings.temperature *
             torch::randn({cond.size(0), latent_dim}, gen, cond.options());
    auto eps_fn = [&](const torch::Tensor& xt, double t) {
        auto tv = torch::full({xt.size(0)}, t, xt.options());
        return head->forward(xt, tv, cond);
    };
    return denoise_iterate(eps_fn, x, settings, gen);
}

torch::Tensor diffhead_sample_cfg(DiffHead& head, const torch::Tensor& cond,
                                  const torch::Tensor& uncond_cond,
                                  const SamplerSettings& settings, torch::Generator& gen) {
    settings.validate();
    if (settings.cfg_scale == 1.0) {
        return diffhead_sample(head, cond, settings, gen);
    }
    const int64_t latent_dim = head->out->weight.size(0);
    auto grid = denoise_time_grid(settings.denoise_steps, settings.t_start);
    auto x = grid[0] * settings.temperature *
             torch::randn({cond.size(0), latent_dim}, gen, cond.options());
    auto eps_fn = [&](const torch::Tensor& xt, double t) {
        auto tv = torch::full({xt.size(0)}, t, xt.options());
        auto eps_c = head->forward(xt, tv, cond);
        auto eps_u = head->forward(xt, tv, uncond_cond);
        return cfg_combine(eps_c, eps_u, settings.cfg_scale);
    };
    return denoise_iterate(eps_fn, x, settings, gen);
}

DitBlockImpl::DitBlockImpl(int64_t width, int64_t heads) {
    norm1 = register_module("norm1", RmsNorm(width));
    norm2 = register_module("norm2", RmsNorm(width));
    attn = register_module("attn", Attention(width, heads));
    ffn = register_module("ffn", SwiGluFfn(width));
    modulation = register_module("modulation", torch::nn::Linear(width, 6 * width));
    torch::NoGradGuard no_grad;
    modulation->weight.zero_();
    modulation->bias.zero_();
}

torch::Tensor DitBlockImpl::forward(const torch::Tensor& x, const torch::Tensor& cond) {
    auto mods = modulation->forward(torch::silu(cond)).unsqueeze(1).chunk(6, -1);
    auto h = x + mods[2] * attn->forward(norm1->forward(x) * (1.0 + mods[1]) + mods[0]);
    return h + mods[5] * ffn->forward(norm2->forward(h) * (1.0 + mods[4]) + mods[3]);
}

FlowModelImpl::FlowModelImpl(const GenModelConfig& cfg) : config(cfg) {
    config.validate();
    TORCH_CHECK(config.family == GenFamily::Flow, "FlowModel: config family must be flow");
    input_proj = register_module("input_proj", torch::nn::Linear(cfg.latent_dim, cfg.width));
    pos_embed = register_parameter("pos_embed", 0.02 * torch::randn({1, cfg.n_tokens, cfg.width}));
    class_embed = register_module("class_embed",
                                  torch::nn::Embedding(cfg.num_classes + 1, cfg.width));
    time_fc1 = register_module("time_fc1", torch::nn::Linear(cfg.width, cfg.width));
    time_fc2 = register_module("time_fc2", torch::nn::Linear(cfg.width, cfg.width));
    for (int64_t i = 0; i < cfg.depth; ++i) {
        blocks.push_back(register_module("block_" + std::to_string(i),
                                         DitBlock(cfg.width, cfg.heads)));
    }
    final_norm = register_module("final_norm", RmsNorm(cfg.width));
    final_mod = register_module("final_mod", torch::nn::Linear(cfg.width, 2 * cfg.width));
    output_proj = register_module("output_proj", torch::nn::Linear(cfg.width, cfg.latent_dim));
    torch::NoGradGuard no_grad;
    final_mod->weight.zero_();
    final_mod->bias.zero_();
    output_proj->weight.zero_();
    output_proj->bias.zero_();
}

torch::Tensor FlowModelImpl::forward(const torch::Tensor& x_t, const torch::Tensor& t,
                                     const torch::Tensor& labels) {
    TORCH_CHECK(x_t.size(1) == config.n_tokens && x_t.size(2) == config.latent_dim,
                "FlowModel: input shape mismatch");
    auto temb = timestep_embedding(t.to(x_t.dtype()), config.width);
    auto cond = time_fc2->forward(torch::silu(time_fc1->forward(temb))) +
                class_embed->forward(labels);
    auto h = input_proj->forward(x_t) + pos_embed;
    for (auto& block : blocks) {
        h = block->forward(h, cond);
    }
    auto mods = final_mod->forward(torch::silu(cond)).unsqueeze(1).chunk(2, -1);
    h = final_norm->forward(h) * (1.0 + mods[1]) + mods[0];
    return output_proj->forward(h);
}

torch::Tensor denoising_loss(FlowModel& model, const torch::Tensor& x0,
                             const torch::Tensor& labels, const NoiseSchedule& schedule,
                             RngStreams& rng, ClassDropStats* drop_stats) {
    auto t = torch::rand({x0.size(0)}, rng.time, torch::TensorOptions().dtype(x0.dtype()));
    auto [x_t, eps] = forward_noising(x0, t, schedule, rng.noise);
    auto lab = drop_labels(labels, model->config.class_drop_prob, model->config.null_class(),
                           rng.drop, drop_stats);
    auto eps_hat = model->forward(x_t, t, lab);
    return torch::mse_loss(eps_hat, eps);
}

ArModelImpl::ArModelImpl(const GenModelConfig& cfg) : config(cfg) {
    config.validate();
    TORCH_CHECK(config.is_ar(), "ArModel: config family must be an AR family");
    const bool causal = config.family != GenFamily::MaskedAr;
    token_embed = register_module("token_embed", torch::nn::Linear(cfg.latent_dim, cfg.width));
    mask_token = register_parameter("mask_token", 0.02 * torch::randn({cfg.width}));
    pos_embed = register_parameter("pos_embed", 0.02 * torch::randn({1, cfg.n_tokens, cfg.width}));
    next_pos_embed = register_parameter("next_pos_embed",
                                        0.02 * torch::randn({1, cfg.n_tokens, cfg.width}));
    class_embed = register_module("class_embed",
                                  torch::nn::Embedding(cfg.num_classes + 1, cfg.width));
    for (int64_t i = 0; i < cfg.depth; ++i) {
        blocks.push_back(register_module("block_" + std::to_string(i),
                                         Block(cfg.width, cfg.heads, causal)));
    }
    norm = register_module("norm", RmsNorm(cfg.width));
    head = register_module("head", DiffHead(cfg.latent_dim, cfg.width, cfg.diffhead));
}

torch::Tensor ArModelImpl::masked_conditions(const torch::Tensor& x0, const torch::Tensor& mask,
                                             const torch::Tensor& labels) {
    TORCH_CHECK(config.family == GenFamily::MaskedAr, "masked_conditions: wrong family");
    const int64_t B = x0.size(0);
    auto tok = token_embed->forward(x0);
    auto fill = mask_token.reshape({1, 1, -1}).expand_as(tok);
    auto h_tokens = torch::where(mask.unsqueeze(-1), fill, tok) + pos_embed;
    auto cls = class_embed->forward(labels).unsqueeze(1);
    auto h = torch::cat({cls, h_tokens}, 1);
    for (auto& block : blocks) {
        h = block->forward(h);
    }
    return norm->forward(h.slice(1, 1));
}

torch::Tensor ArModelImpl::causal_conditions(const torch::Tensor& x0, const torch::Tensor& order,
                                             const torch::Tensor& labels) {
    TORCH_CHECK(config.family == GenFamily::RasterAr || config.family == GenFamily::RandomAr,
                "causal_conditions: wrong family");
    const int64_t B = x0.size(0), N = config.n_tokens;
    TORCH_CHECK(order.sizes() == torch::IntArrayRef({B, N}), "causal_conditions: bad order shape");

    // Input at step j >= 1 is the token generated at step j-1, in its position.
    auto ordered = gather_rows(token_embed->forward(x0) + pos_embed.expand({B, -1, -1}), order);
    auto cls = class_embed->forward(labels).unsqueeze(1);
    auto h = torch::cat({cls, ordered.slice(1, 0, N - 1)}, 1);
    for (auto& block : blocks) {
        h = block->forward(h);
    }
    // Condition for step j additionally names the position to be generated.
    auto target_pos = gather_rows(next_pos_embed.expand({B, -1, -1}), order);
    return norm->forward(h) + target_pos;
}

namespace {

torch::Tensor ar_conditions(ArModel& model, const torch::Tensor& x0, const torch::Tensor& labels,
                            const torch::Tensor& mask_or_order) {
    if (model->config.family == GenFamily::MaskedAr) {
        return model->masked_conditions(x0, mask_or_order, labels);
    }
    return model->causal_conditions(x0, mask_or_order, labels);
}

}  // namespace

torch::Tensor masked_ar_loss(ArModel& model, const torch::Tensor& x0,
                             const torch::Tensor& labels, const torch::Tensor& mask,
                             const NoiseSchedule& schedule, RngStreams& rng,
                             ClassDropStats* drop_stats) {
    auto lab = drop_labels(labels, model->config.class_drop_prob, model->config.null_class(),
                           rng.drop, drop_stats);
    auto cond = model->masked_conditions(x0, mask, lab);
    auto flat_mask = mask.reshape({-1});
    auto sel = flat_mask.nonzero().squeeze(-1);
    TORCH_CHECK(sel.numel() > 0, "masked_ar_loss: mask selects no positions");
    auto x0_sel = x0.reshape({-1, model->config.latent_dim}).index_select(0, sel);
    auto cond_sel = cond.reshape({-1, model->config.width}).index_select(0, sel);
    return diffhead_loss(model->head, x0_sel, cond_sel, schedule, rng.time, rng.noise);
}

torch::Tensor causal_ar_loss(ArModel& model, const torch::Tensor& x0,
                             const torch::Tensor& labels, const torch::Tensor& order,
                             const NoiseSchedule& schedule, RngStreams& rng,
                             ClassDropStats* drop_stats) {
    auto lab = drop_labels(labels, model->config.class_drop_prob, model->config.null_class(),
                           rng.drop, drop_stats);
    auto cond = model->causal_conditions(x0, order, lab);
    auto targets = gather_rows(x0, order);
    return diffhead_loss(model->head, targets.reshape({-1, model->config.latent_dim}),
                         cond.reshape({-1, model->config.width}), schedule, rng.time, rng.noise);
}

torch::Tensor ar_training_step(ArModel& model, const torch::Tensor& x0,
                               const torch::Tensor& labels, const NoiseSchedule& schedule,
                               RngStreams& rng, ClassDropStats* drop_stats) {
    const int64_t B = x0.size(0), N = model->config.n_tokens;
    switch (model->config.family) {
        case GenFamily::MaskedAr: {
            // MAR-style random subset: ratio in [0.7, 1.0], shared per batch.
            double u = torch::rand({1}, rng.mask, torch::kFloat64).item<double>();
            double ratio = 0.7 + 0.3 * u;
            int64_t n_masked = std::max<int64_t>(1, static_cast<int64_t>(std::floor(ratio * N)));
            auto mask = torch::zeros({B, N}, torch::kBool);
            for (int64_t b = 0; b < B; ++b) {
                auto perm = torch::randperm(N, rng.mask, torch::kInt64);
                mask[b].scatter_(0, perm.slice(0, 0, n_masked), true);
            }
            return masked_ar_loss(model, x0, labels, mask, schedule, rng, drop_stats);
        }
        case GenFamily::RasterAr: {
            auto order = torch::arange(N, torch::kInt64).unsqueeze(0).expand({B, N});
            return causal_ar_loss(model, x0, labels, order, schedule, rng, drop_stats);
        }
        case GenFamily::RandomAr: {
            auto order = torch::empty({B, N}, torch::kInt64);
            for (int64_t b = 0; b < B; ++b) {
                order[b] = torch::randperm(N, rng.mask, torch::kInt64);
            }
            return causal_ar_loss(model, x0, labels, order, schedule, rng, drop_stats);
        }
        default:
            TORCH_CHECK(false, "ar_training_step: not an AR family");
    }
}

torch::Tensor sample_flow(FlowModel& model, const SamplerSettings& settings,
                          const torch::Tensor& labels, const NoiseSchedule& schedule,
                          torch::Generator& gen) {
    (void)schedule;  // sampler is specialized to the linear interpolation schedule
    settings.validate();
    torch::NoGradGuard no_grad;
    const auto& cfg = model->config;
    const int64_t B = labels.size(0);
    auto grid = denoise_time_grid(settings.denoise_steps, settings.t_start);
    auto x = grid[0] * torch::randn({B, cfg.n_tokens, cfg.latent_dim}, gen, torch::kFloat32);
    auto null_labels = torch::full_like(labels, cfg.null_class());
    auto eps_fn = [&](const torch::Tensor& xt, double t) {
        auto tv = torch::full({B}, t, xt.options());
        auto eps_c = model->forward(xt, tv, labels);
        if (settings.cfg_scale == 1.0) {
            return eps_c;
        }
        auto eps_u = model->forward(xt, tv, null_labels);
        return cfg_combine(eps_c, eps_u, settings.cfg_scale);
    };
    return denoise_iterate(eps_fn, x, settings, gen);
}

namespace {

torch::Tensor sample_masked_ar(ArModel& model, const SamplerSettings& settings,
                               const torch::Tensor& labels, torch::Generator& gen) {
    const auto& cfg = model->config;
    const int64_t B = labels.size(0), N = cfg.n_tokens;
    const int64_t S = std::min<int64_t>(settings.ar_steps, N);
    auto x = torch::zeros({B, N, cfg.latent_dim}, torch::kFloat32);
    auto mask = torch::ones({B, N}, torch::kBool);
    auto null_labels = torch::full_like(labels, cfg.null_class());

    auto schedule_reveals = masked_ar_reveal_schedule(N, S);
    int64_t n_masked = N;
    for (int64_t i = 0; i < S; ++i) {
        const int64_t n_reveal = schedule_reveals[i];

        auto cond = model->masked_conditions(x, mask, labels);
        torch::Tensor uncond;
        if (settings.cfg_scale != 1.0) {
            uncond = model->masked_conditions(x, mask, null_labels);
        }

        // choose n_reveal still-masked positions per sample
        auto reveal_ids = torch::empty({B, n_reveal}, torch::kInt64);
        for (int64_t b = 0; b < B; ++b) {
            auto masked_ids = mask[b].nonzero().squeeze(-1);
            auto perm = torch::randperm(masked_ids.numel(), gen, torch::kInt64);
            reveal_ids[b] = masked_ids.index_select(0, perm.slice(0, 0, n_reveal));
        }

        auto cond_sel = gather_rows(cond, reveal_ids).reshape({-1, cfg.width});
        torch::Tensor tokens;
        if (settings.cfg_scale != 1.0) {
            auto uncond_sel = gather_rows(uncond, reveal_ids).reshape({-1, cfg.width});
            tokens = diffhead_sample_cfg(model->head, cond_sel, uncond_sel, settings, gen);
        } else {
            tokens = diffhead_sample(model->head, cond_sel, settings, gen);
        }
        auto tok = tokens.reshape({B, n_reveal, cfg.latent_dim});
        x.scatter_(1, reveal_ids.unsqueeze(-1).expand({B, n_reveal, cfg.latent_dim}), tok);
        mask.scatter_(1, reveal_ids, false);
        n_masked -= n_reveal;
    }
    TORCH_CHECK(n_masked == 0, "sample_masked_ar: schedule left masked tokens");
    return x;
}

torch::Tensor sample_causal_ar(ArModel& model, const SamplerSettings& settings,
                               const torch::Tensor& labels, torch::Generator& gen) {
    const auto& cfg = model->config;
    const int64_t B = labels.size(0), N = cfg.n_tokens;
    TORCH_CHECK(settings.ar_steps <= N,
                "sample_ar: ar_steps exceeds n_tokens for a one-token-per-step family");
    torch::Tensor order;
    if (cfg.family == GenFamily::RasterAr) {
        order = torch::arange(N, torch::kInt64).unsqueeze(0).expand({B, N}).contiguous();
    } else {
        order = torch::empty({B, N}, torch::kInt64);
        for (int64_t b = 0; b < B; ++b) {
            order[b] = torch::randperm(N, gen, torch::kInt64);
        }
    }
    auto x = torch::zeros({B, N, cfg.latent_dim}, torch::kFloat32);
    auto null_labels = torch::full_like(labels, cfg.null_class());
    for (int64_t i = 0; i < N; ++i) {
        auto cond = model->causal_conditions(x, order, labels).select(1, i);
        torch::Tensor tok;
        if (settings.cfg_scale != 1.0) {
            auto uncond = model->causal_conditions(x, order, null_labels).select(1, i);
            tok = diffhead_sample_cfg(model->head, cond, uncond, settings, gen);
        } else {
            tok = diffhead_sample(model->head, cond, settings, gen);
        }
        auto pos = order.select(1, i).unsqueeze(-1).unsqueeze(-1)
                       .expand({B, 1, cfg.latent_dim});
        x.scatter_(1, pos, tok.unsqueeze(1));
    }
    return x;
}

}  // namespace

torch::Tensor sample_ar(ArModel& model, const SamplerSettings& settings,
                        const torch::Tensor& labels, const NoiseSchedule& schedule,
                        torch::Generator& gen) {
    (void)schedule;
    settings.validate();
    torch::NoGradGuard no_grad;
    if (model->config.family == GenFamily::MaskedAr) {
        return sample_masked_ar(model, settings, labels, gen);
    }
    return sample_causal_ar(model, settings, labels, gen);
}

}  // namespace detok
