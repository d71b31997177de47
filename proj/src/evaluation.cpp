#include "detok/evaluation.hpp"

#include <cmath>
#include <iostream>
#include <limits>

#include "detok/rng.hpp"

namespace detok {

namespace {

// Symmetric PSD square root; eigenvalues below -tol are an error, small
// negatives from roundoff are clipped to zero.
torch::Tensor psd_sqrt(const torch::Tensor& m, double tol = 1e-6) {
    auto sym = 0.5 * (m + m.t());
    auto [eigvals, eigvecs] = torch::linalg_eigh(sym);
    TORCH_CHECK(eigvals.min().item<double>() > -tol,
                "psd_sqrt: matrix is not positive semidefinite (min eigenvalue ",
                eigvals.min().item<double>(), ")");
    auto roots = eigvals.clamp_min(0.0).sqrt();
    return eigvecs.matmul(torch::diag(roots)).matmul(eigvecs.t());
}

}  // namespace

FeatureStats compute_feature_stats(const torch::Tensor& features) {
    TORCH_CHECK(features.dim() == 2, "compute_feature_stats: expected [N, D]");
    const int64_t n = features.size(0);
    TORCH_CHECK(n >= 1, "compute_feature_stats: empty feature set");
    auto f = features.to(torch::kFloat64);
    FeatureStats stats;
    stats.mean = f.mean(0);
    if (n >= 2) {
        auto centered = f - stats.mean;
        stats.cov = centered.t().matmul(centered) / static_cast<double>(n - 1);
    } else {
        stats.cov = torch::zeros({f.size(1), f.size(1)}, torch::kFloat64);
    }
    return stats;
}

double frechet_distance(const FeatureStats& a, const FeatureStats& b) {
    TORCH_CHECK(a.mean.sizes() == b.mean.sizes() && a.cov.sizes() == b.cov.sizes(),
                "frechet_distance: dimension mismatch");
    auto mu_a = a.mean.to(torch::kFloat64);
    auto mu_b = b.mean.to(torch::kFloat64);
    auto cov_a = a.cov.to(torch::kFloat64);
    auto cov_b = b.cov.to(torch::kFloat64);

    const double mean_term = (mu_a - mu_b).square().sum().item<double>();
    auto sqrt_a = psd_sqrt(cov_a);
    auto inner = sqrt_a.matmul(cov_b).matmul(sqrt_a);
    auto cross = psd_sqrt(inner);
    const double trace_term = cov_a.trace().item<double>() + cov_b.trace().item<double>() -
                              2.0 * cross.trace().item<double>();
    return std::max(0.0, mean_term + trace_term);
}

FidProxyExtractor::FidProxyExtractor(int64_t num_classes, uint64_t seed)
    : id_("conv-proxy-seed-" + std::to_string(seed)),
      gen_(make_generator(derive_seed(seed, "fid_proxy"))) {
    torch::manual_seed(derive_seed(seed, "fid_proxy_init"));
    using namespace torch::nn;
    net_ = Sequential(
        Conv2d(Conv2dOptions(3, 32, 3).stride(2).padding(1)), SiLU(),
        Conv2d(Conv2dOptions(32, 64, 3).stride(2).padding(1)), SiLU(),
        Conv2d(Conv2dOptions(64, 128, 3).stride(2).padding(1)), SiLU(),
        Conv2d(Conv2dOptions(128, 128, 3).stride(2).padding(1)), SiLU(),
        AdaptiveAvgPool2d(AdaptiveAvgPool2dOptions({1, 1})), Flatten());
    classifier_ = Linear(128, num_classes);
}

torch::Tensor FidProxyExtractor::forward_features(const torch::Tensor& images) {
    TORCH_CHECK(images.dim() == 4 && images.size(1) == 3,
                "FidProxyExtractor: expected [B, 3, H, W]");
    return net_->forward(images);
}

torch::Tensor FidProxyExtractor::features(const torch::Tensor& images) {
    torch::NoGradGuard no_grad;
    net_->eval();
    return forward_features(images);
}

void FidProxyExtractor::train_classifier(const ImageFolderDataset& data, int64_t steps,
                                         int64_t batch_size) {
    TORCH_CHECK(data.num_classes() == classifier_->weight.size(0),
                "FidProxyExtractor: dataset class count mismatch");
    std::vector<torch::Tensor> params = net_->parameters();
    for (auto& p : classifier_->parameters()) {
        params.push_back(p);
    }
    torch::optim::AdamW opt(params, torch::optim::AdamWOptions(1e-3));
    net_->train();
    for (int64_t step = 0; step < steps; ++step) {
        auto idx = torch::randint(0, data.size(), {batch_size}, gen_, torch::kInt64);
        std::vector<int64_t> indices(idx.data_ptr<int64_t>(),
                                     idx.data_ptr<int64_t>() + batch_size);
        auto [images, labels] = data.load_batch(indices, gen_);
        auto logits = classifier_->forward(forward_features(images));
        auto loss = torch::cross_entropy_loss(logits, labels);
        TORCH_CHECK(std::isfinite(loss.item<double>()),
                    "FidProxyExtractor: non-finite classifier loss");
        opt.zero_grad();
        loss.backward();
        opt.step();
    }
    net_->eval();
}

Checkpoint FidProxyExtractor::to_checkpoint() const {
    Checkpoint ckpt;
    ckpt.meta["kind"] = "fid_proxy";
    ckpt.meta["version"] = 1;
    ckpt.meta["id"] = id_;
    store_module(ckpt, "net", *net_);
    store_module(ckpt, "classifier", *classifier_);
    return ckpt;
}

void FidProxyExtractor::from_checkpoint(const Checkpoint& ckpt) {
    TORCH_CHECK(ckpt.meta.value("kind", "") == "fid_proxy",
                "FidProxyExtractor: not a proxy-extractor checkpoint");
    id_ = ckpt.meta.value("id", id_);
    load_module(ckpt, "net", *net_);
    load_module(ckpt, "classifier", *classifier_);
}

double psnr(const torch::Tensor& recon, const torch::Tensor& target) {
    TORCH_CHECK(recon.sizes() == target.sizes(), "psnr: shape mismatch");
    const double mse =
        (recon.to(torch::kFloat64) - target.to(torch::kFloat64)).square().mean().item<double>();
    if (mse == 0.0) {
        return std::numeric_limits<double>::infinity();
    }
    return 10.0 * std::log10(4.0 / mse);
}

ReconMetrics reconstruction_eval(Tokenizer& tokenizer, const ImageFolderDataset& data,
                                 FidProxyExtractor& extractor, int64_t batch_size) {
    TORCH_CHECK(data.size() > 0, "reconstruction_eval: empty dataset");
    tokenizer->eval();
    torch::NoGradGuard no_grad;
    auto unused = make_generator(0);
    double sq_err = 0.0;
    int64_t n_pixels = 0;
    std::vector<torch::Tensor> real_feats, fake_feats;
    for (int64_t start = 0; start < data.size(); start += batch_size) {
        const int64_t end = std::min(data.size(), start + batch_size);
        std::vector<torch::Tensor> images;
        for (int64_t i = start; i < end; ++i) {
            images.push_back(data.item(i).first);
        }
        auto batch = torch::stack(images);
        auto latents = sample_posterior(tokenizer->encode(batch), unused,
                                        /*deterministic=*/true);
        auto recon = tokenizer->decode(latents);
        sq_err += (recon - batch).square().sum().item<double>();
        n_pixels += batch.numel();
        real_feats.push_back(extractor.features(batch));
        fake_feats.push_back(extractor.features(recon));
    }
    ReconMetrics metrics;
    metrics.sample_count = data.size();
    metrics.mse = sq_err / static_cast<double>(n_pixels);
    metrics.psnr = metrics.mse == 0.0 ? std::numeric_limits<double>::infinity()
                                      : 10.0 * std::log10(4.0 / metrics.mse);
    metrics.rfid_proxy = frechet_distance(compute_feature_stats(torch::cat(real_feats)),
                                          compute_feature_stats(torch::cat(fake_feats)));
    return metrics;
}

double corrupted_recon_mse(Tokenizer& tokenizer, const torch::Tensor& images, double tau,
                           const CorruptionConfig& config, torch::Generator& gen) {
    tokenizer->eval();
    torch::NoGradGuard no_grad;
    auto latents = sample_posterior(tokenizer->encode(images), gen, /*deterministic=*/true);
    auto tau_vec = torch::full({images.size(0)}, tau, torch::kFloat32);
    latents.tokens = interpolate_noise(latents.tokens, tau_vec, config, gen);
    auto recon = tokenizer->decode(latents);
    return (recon - images).square().mean().item<double>();
}

std::pair<double, double> masked_recon_mse(Tokenizer& tokenizer, const torch::Tensor& images,
                                           double ratio, torch::Generator& gen) {
    tokenizer->eval();
    torch::NoGradGuard no_grad;
    const int64_t B = images.size(0);
    const auto& cfg = tokenizer->config;
    auto plan = sample_mask(B, cfg.n_tokens(), ratio, gen);
    auto latents = sample_posterior(tokenizer->encode(images, plan), gen,
                                    /*deterministic=*/true);
    latents.mask_plan = plan;
    auto recon = tokenizer->decode(latents);

    // per-token squared error, split by visibility
    auto err = patchify((recon - images).square(), cfg.patch_size).mean(-1);  // [B, N]
    auto visible = torch::zeros({B, cfg.n_tokens()}, torch::kBool);
    visible.scatter_(1, plan.visible_indices, true);
    const double vis_mse = err.masked_select(visible).mean().item<double>();
    const double masked_mse = plan.n_visible() == cfg.n_tokens()
                                  ? 0.0
                                  : err.masked_select(~visible).mean().item<double>();
    return {vis_mse, masked_mse};
}

torch::Tensor denoising_grid(Tokenizer& tokenizer, const torch::Tensor& image,
                             const std::vector<double>& taus, const CorruptionConfig& config,
                             torch::Generator& gen) {
    TORCH_CHECK(image.dim() == 3, "denoising_grid: expected a single [3, H, W] image");
    tokenizer->eval();
    torch::NoGradGuard no_grad;
    auto batch = image.unsqueeze(0);
    std::vector<torch::Tensor> columns;
    for (double tau : taus) {
        auto latents = sample_posterior(tokenizer->encode(batch), gen, /*deterministic=*/true);
        if (tau > 0.0) {
            auto tau_vec = torch::full({1}, tau, torch::kFloat32);
            latents.tokens = interpolate_noise(latents.tokens, tau_vec, config, gen);
        }
        columns.push_back(tokenizer->decode(latents)[0]);
    }
    return torch::cat(columns, /*dim=*/2);
}

torch::Tensor demasking_grid(Tokenizer& tokenizer, const torch::Tensor& image,
                             const std::vector<double>& ratios, torch::Generator& gen) {
    TORCH_CHECK(image.dim() == 3, "demasking_grid: expected a single [3, H, W] image");
    tokenizer->eval();
    torch::NoGradGuard no_grad;
    auto batch = image.unsqueeze(0);
    std::vector<torch::Tensor> columns;
    for (double ratio : ratios) {
        std::optional<MaskPlan> plan;
        if (ratio > 0.0) {
            plan = sample_mask(1, tokenizer->config.n_tokens(), ratio, gen);
        }
        auto latents = sample_posterior(tokenizer->encode(batch, plan), gen,
                                        /*deterministic=*/true);
        latents.mask_plan = plan;
        columns.push_back(tokenizer->decode(latents)[0]);
    }
    return torch::cat(columns, /*dim=*/2);
}

CfgSweepResult cfg_sweep(const SampleImagesFn& sampler, const std::vector<double>& scales,
                         const SamplerSettings& base_settings, const FeatureStats& reference,
                         FidProxyExtractor& extractor, int64_t n_samples, int64_t n_classes,
                         uint64_t seed, int64_t batch_size) {
    TORCH_CHECK(!scales.empty(), "cfg_sweep: empty scale list");
    TORCH_CHECK(n_samples >= 2, "cfg_sweep: need at least two samples");
    CfgSweepResult result;
    double best = std::numeric_limits<double>::infinity();
    for (double scale : scales) {
        auto settings = base_settings;
        settings.cfg_scale = scale;
        // identical label sequence and noise per scale: differences are pure CFG
        auto gen = make_generator(derive_seed(seed, "cfg_sweep"));
        std::vector<torch::Tensor> feats;
        for (int64_t start = 0; start < n_samples; start += batch_size) {
            const int64_t count = std::min(batch_size, n_samples - start);
            auto labels = torch::randint(0, n_classes, {count}, gen, torch::kInt64);
            auto images = sampler(settings, labels, gen);
            feats.push_back(extractor.features(images));
        }
        const double score =
            frechet_distance(compute_feature_stats(torch::cat(feats)), reference);
        result.scores.emplace_back(scale, score);
        if (score < best) {
            best = score;
            result.best_scale = scale;
        }
        std::cout << "cfg_sweep: scale " << scale << " fid-proxy " << score << "\n";
    }
    return result;
}

nlohmann::json EvalReport::to_json() const {
    nlohmann::json j;
    j["psnr"] = std::isinf(psnr) ? 1e9 : psnr;
    j["recon_mse"] = recon_mse;
    j["rfid_proxy"] = rfid_proxy;
    j["fid_proxy_by_cfg"] = nlohmann::json::array();
    for (const auto& [scale, score] : fid_proxy_by_cfg) {
        j["fid_proxy_by_cfg"].push_back({{"cfg_scale", scale}, {"fid_proxy", score}});
    }
    j["best_cfg"] = best_cfg;
    j["sample_count"] = sample_count;
    j["seed"] = seed;
    j["config_hash"] = config_hash;
    j["is_proxy"] = is_proxy;
    return j;
}

}  // namespace detok
