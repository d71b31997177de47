#include "detok/training.hpp"

#include <cmath>
#include <filesystem>
#include <iostream>

namespace detok {

namespace {

void set_lr(torch::optim::Optimizer& opt, double lr) {
    for (auto& group : opt.param_groups()) {
        static_cast<torch::optim::AdamWOptions&>(group.options()).lr(lr);
    }
}

std::vector<std::pair<std::string, torch::Generator*>> stream_list(RngStreams& rng) {
    return {{"tau", &rng.tau},           {"noise", &rng.noise}, {"mask", &rng.mask},
            {"posterior", &rng.posterior}, {"data", &rng.data},   {"model", &rng.model},
            {"time", &rng.time},         {"drop", &rng.drop},   {"sample", &rng.sample}};
}

void store_rng(Checkpoint& ckpt, RngStreams& rng) {
    for (auto& [name, gen] : stream_list(rng)) {
        ckpt.tensors["rng." + name] = generator_state(*gen);
    }
}

void load_rng(const Checkpoint& ckpt, RngStreams& rng) {
    for (auto& [name, gen] : stream_list(rng)) {
        auto it = ckpt.tensors.find("rng." + name);
        TORCH_CHECK(it != ckpt.tensors.end(), "checkpoint: missing rng stream ", name);
        set_generator_state(*gen, it->second);
    }
}

std::vector<std::vector<int64_t>> epoch_batches(int64_t n, int64_t batch_size,
                                                torch::Generator& gen) {
    auto perm = torch::randperm(n, gen, torch::kInt64);
    std::vector<std::vector<int64_t>> batches;
    for (int64_t start = 0; start < n; start += batch_size) {
        const int64_t end = std::min(n, start + batch_size);
        std::vector<int64_t> ids(end - start);
        for (int64_t i = start; i < end; ++i) {
            ids[i - start] = perm[i].item<int64_t>();
        }
        batches.push_back(std::move(ids));
    }
    return batches;
}

}  // namespace

void TrainRecipe::validate() const {
    TORCH_CHECK(epochs >= 1, "TrainRecipe: epochs must be >= 1");
    TORCH_CHECK(batch_size >= 1, "TrainRecipe: batch_size must be >= 1");
    TORCH_CHECK(peak_lr > 0, "TrainRecipe: peak_lr must be positive");
    TORCH_CHECK(warmup_fraction >= 0 && warmup_fraction <= 1,
                "TrainRecipe: warmup_fraction must lie in [0,1]");
    TORCH_CHECK(ema_decay >= 0 && ema_decay <= 1, "TrainRecipe: ema_decay must lie in [0,1]");
    TORCH_CHECK(!grad_clip || *grad_clip > 0, "TrainRecipe: grad_clip must be positive");
}

double learning_rate(const TrainRecipe& recipe, int64_t step, int64_t total_steps) {
    TORCH_CHECK(total_steps >= 1 && step >= 0 && step <= total_steps,
                "learning_rate: step out of range");
    if (recipe.lr_policy == LrPolicy::Constant) {
        return recipe.peak_lr;
    }
    const double warmup = recipe.warmup_fraction * static_cast<double>(total_steps);
    if (static_cast<double>(step) < warmup) {
        return recipe.peak_lr * static_cast<double>(step) / warmup;
    }
    if (static_cast<double>(total_steps) <= warmup) {
        return recipe.peak_lr;
    }
    const double t = (static_cast<double>(step) - warmup) /
                     (static_cast<double>(total_steps) - warmup);
    return recipe.peak_lr * 0.5 * (1.0 + std::cos(M_PI * t));
}

torch::Tensor standardize(const torch::Tensor& tokens, const LatentStats& stats) {
    return (tokens - stats.mean.reshape({1, 1, -1})) / stats.std.reshape({1, 1, -1});
}

torch::Tensor unstandardize(const torch::Tensor& tokens, const LatentStats& stats) {
    return tokens * stats.std.reshape({1, 1, -1}) + stats.mean.reshape({1, 1, -1});
}

EmaShadow EmaShadow::from_module(const torch::nn::Module& module) {
    EmaShadow shadow;
    for (const auto& p : module.named_parameters(/*recurse=*/true)) {
        shadow.names.push_back(p.key());
        shadow.values.push_back(p.value().detach().clone());
    }
    return shadow;
}

void EmaShadow::update(const torch::nn::Module& module, double decay) {
    torch::NoGradGuard no_grad;
    auto params = module.named_parameters(/*recurse=*/true);
    TORCH_CHECK(params.size() == values.size(), "EmaShadow: parameter tree mismatch");
    for (size_t i = 0; i < values.size(); ++i) {
        TORCH_CHECK(params[i].key() == names[i], "EmaShadow: parameter tree mismatch at ",
                    params[i].key());
        values[i].mul_(decay).add_(params[i].value().detach(), 1.0 - decay);
    }
}

void EmaShadow::copy_to(torch::nn::Module& module) const {
    torch::NoGradGuard no_grad;
    auto params = module.named_parameters(/*recurse=*/true);
    TORCH_CHECK(params.size() == values.size(), "EmaShadow: parameter tree mismatch");
    for (size_t i = 0; i < values.size(); ++i) {
        TORCH_CHECK(params[i].key() == names[i], "EmaShadow: parameter tree mismatch at ",
                    params[i].key());
        params[i].value().copy_(values[i]);
    }
}

void ema_update(EmaShadow& shadow, const torch::nn::Module& module, double decay) {
    shadow.update(module, decay);
}

TokenizerTrainer::TokenizerTrainer(const TokenizerConfig& tok_config,
                                   const CorruptionConfig& corr_config,
                                   const LossWeights& weights, const TrainRecipe& recipe,
                                   uint64_t seed)
    : tok_config_(tok_config),
      corr_config_(corr_config),
      weights_(weights),
      recipe_(recipe),
      seed_(seed),
      rng_(seed) {
    tok_config_.validate();
    weights_.validate();
    recipe_.validate();
    torch::manual_seed(derive_seed(seed, "init"));
    tok_ = Tokenizer(tok_config_);
    disc_ = PatchDiscriminator();
    percep_ = std::make_unique<ConvPyramidExtractor>(derive_seed(seed, "percep"));
    auto opts = torch::optim::AdamWOptions(recipe_.peak_lr)
                    .betas({recipe_.beta1, recipe_.beta2})
                    .weight_decay(recipe_.weight_decay);
    opt_tok_ = std::make_unique<torch::optim::AdamW>(tok_->parameters(), opts);
    opt_disc_ = std::make_unique<torch::optim::AdamW>(disc_->parameters(), opts);
    ema_ = EmaShadow::from_module(*tok_);
}

LossBreakdown TokenizerTrainer::compute_losses(const torch::Tensor& images, double progress,
                                               bool corrupt, bool /*train_encoder*/) {
    const int64_t B = images.size(0);

    // Zeroed corruption knobs skip their code path entirely so the step is
    // bitwise identical to a plain autoencoder step under the same seed.
    std::optional<MaskPlan> plan;
    if (corrupt && corr_config_.max_mask_ratio > 0.0) {
        const double ratio = sample_mask_ratio(corr_config_, rng_.mask);
        plan = sample_mask(B, tok_config_.n_tokens(), ratio, rng_.mask);
    }
    auto posterior = tok_->encode(images, plan);
    auto latents = sample_posterior(posterior, rng_.posterior);
    latents.mask_plan = plan;
    if (corrupt && corr_config_.gamma > 0.0) {
        auto tau = sample_noise_level(B, rng_.tau);
        latents.tokens = interpolate_noise(latents.tokens, tau, corr_config_, rng_.noise);
    }
    auto recon = tok_->decode(latents);

    TotalLossInputs inputs;
    inputs.mse = detok::mse_loss(recon, images);
    inputs.kl = kl_loss(posterior);
    inputs.perceptual = weights_.lambda_percep > 0
                            ? perceptual_loss(recon, images, *percep_)
                            : torch::zeros({}, images.options());
    const bool gan_active =
        weights_.lambda_gan > 0 && progress >= weights_.gan_start_fraction;
    if (gan_active) {
        auto terms = gan_losses(disc_, recon, images);
        inputs.gan_generator = terms.generator;
        inputs.gan_discriminator = terms.discriminator;
    } else {
        inputs.gan_generator = torch::zeros({}, images.options());
        inputs.gan_discriminator = torch::zeros({}, images.options());
    }
    return total_loss(inputs, weights_, progress);
}

LossBreakdown TokenizerTrainer::train_step(const torch::Tensor& images, double progress) {
    tok_->train();
    disc_->train();
    auto breakdown = compute_losses(images, progress, /*corrupt=*/true, /*train_encoder=*/true);

    if (!std::isfinite(breakdown.total.item<double>())) {
        if (!diagnostic_dir_.empty()) {
            std::filesystem::create_directories(diagnostic_dir_);
            auto snap = to_checkpoint();
            snap.meta["diagnostic"] = true;
            save_checkpoint(diagnostic_dir_ + "/diagnostic.ckpt", snap);
        }
        TORCH_CHECK(false, "train_step: non-finite loss at step ", step_,
                    " (mse=", breakdown.mse.item<double>(),
                    ", kl=", breakdown.kl.item<double>(), ")");
    }

    opt_tok_->zero_grad();
    opt_disc_->zero_grad();
    breakdown.total.backward();
    if (recipe_.grad_clip) {
        torch::nn::utils::clip_grad_norm_(tok_->parameters(), *recipe_.grad_clip);
    }
    opt_tok_->step();

    if (breakdown.gan_discriminator.grad_fn()) {
        opt_disc_->zero_grad();
        breakdown.gan_discriminator.backward();
        opt_disc_->step();
    }
    ema_.update(*tok_, recipe_.ema_decay);
    ++step_;
    return breakdown;
}

void TokenizerTrainer::run(const ImageFolderDataset& data, const std::string& out_dir) {
    diagnostic_dir_ = out_dir;
    const int64_t steps_per_epoch =
        (data.size() + recipe_.batch_size - 1) / recipe_.batch_size;
    const int64_t total_steps = recipe_.epochs * steps_per_epoch;
    int64_t step = 0;
    for (int64_t epoch = 0; epoch < recipe_.epochs; ++epoch) {
        for (const auto& indices : epoch_batches(data.size(), recipe_.batch_size, rng_.data)) {
            set_lr(*opt_tok_, learning_rate(recipe_, step, total_steps));
            set_lr(*opt_disc_, learning_rate(recipe_, step, total_steps));
            auto [images, labels] = data.load_batch(indices, rng_.data);
            const double progress = static_cast<double>(step) / total_steps;
            auto breakdown = train_step(images, progress);
            if (recipe_.log_every_steps > 0 && step % recipe_.log_every_steps == 0) {
                std::cout << "tokenizer step " << step << "/" << total_steps
                          << " loss " << breakdown.total.item<double>()
                          << " mse " << breakdown.mse.item<double>() << "\n";
            }
            ++step;
        }
        if (!out_dir.empty() && (epoch + 1) % recipe_.checkpoint_every_epochs == 0) {
            std::filesystem::create_directories(out_dir);
            save_checkpoint(out_dir + "/tokenizer.ckpt", to_checkpoint());
        }
    }
}

void TokenizerTrainer::finetune_decoder(const ImageFolderDataset& data, int64_t epochs,
                                        const std::string& out_dir) {
    TORCH_CHECK(epochs >= 1, "finetune_decoder: epochs must be >= 1");
    diagnostic_dir_ = out_dir;
    for (auto& p : tok_->encoder->parameters()) {
        p.set_requires_grad(false);
    }
    auto opts = torch::optim::AdamWOptions(recipe_.peak_lr)
                    .betas({recipe_.beta1, recipe_.beta2})
                    .weight_decay(recipe_.weight_decay);
    torch::optim::AdamW opt_dec(tok_->decoder->parameters(), opts);

    const int64_t steps_per_epoch =
        (data.size() + recipe_.batch_size - 1) / recipe_.batch_size;
    const int64_t total_steps = epochs * steps_per_epoch;
    int64_t step = 0;
    for (int64_t epoch = 0; epoch < epochs; ++epoch) {
        for (const auto& indices : epoch_batches(data.size(), recipe_.batch_size, rng_.data)) {
            set_lr(opt_dec, learning_rate(recipe_, step, total_steps));
            set_lr(*opt_disc_, learning_rate(recipe_, step, total_steps));
            auto [images, labels] = data.load_batch(indices, rng_.data);
            tok_->train();
            const double progress = static_cast<double>(step) / total_steps;
            auto breakdown =
                compute_losses(images, progress, /*corrupt=*/false, /*train_encoder=*/false);
            TORCH_CHECK(std::isfinite(breakdown.total.item<double>()),
                        "finetune_decoder: non-finite loss at step ", step);
            opt_dec.zero_grad();
            opt_disc_->zero_grad();
            breakdown.total.backward();
            opt_dec.step();
            if (breakdown.gan_discriminator.grad_fn()) {
                opt_disc_->zero_grad();
                breakdown.gan_discriminator.backward();
                opt_disc_->step();
            }
            ema_.update(*tok_, recipe_.ema_decay);
            ++step;
        }
    }
    for (auto& p : tok_->encoder->parameters()) {
        p.set_requires_grad(true);
    }
    if (!out_dir.empty()) {
        std::filesystem::create_directories(out_dir);
        auto ckpt = to_checkpoint();
        ckpt.meta["fine_tuned"] = true;
        save_checkpoint(out_dir + "/tokenizer_finetuned.ckpt", ckpt);
    }
}

Checkpoint TokenizerTrainer::to_checkpoint() const {
    Checkpoint ckpt;
    ckpt.meta["kind"] = "tokenizer";
    ckpt.meta["version"] = 1;
    ckpt.meta["step"] = step_;
    ckpt.meta["seed"] = seed_;
    store_module(ckpt, "model", *tok_);
    store_module(ckpt, "disc", *disc_);
    for (size_t i = 0; i < ema_.values.size(); ++i) {
        ckpt.tensors["ema." + ema_.names[i]] = ema_.values[i].clone();
    }
    ckpt.tensors["opt.tok"] = serialize_optimizer(*opt_tok_);
    ckpt.tensors["opt.disc"] = serialize_optimizer(*opt_disc_);
    store_rng(ckpt, const_cast<RngStreams&>(rng_));
    return ckpt;
}

void TokenizerTrainer::from_checkpoint(const Checkpoint& ckpt) {
    TORCH_CHECK(ckpt.meta.value("kind", "") == "tokenizer",
                "from_checkpoint: not a tokenizer checkpoint");
    step_ = ckpt.meta.value("step", int64_t{0});
    load_module(ckpt, "model", *tok_);
    load_module(ckpt, "disc", *disc_);
    torch::NoGradGuard no_grad;
    for (size_t i = 0; i < ema_.values.size(); ++i) {
        auto it = ckpt.tensors.find("ema." + ema_.names[i]);
        TORCH_CHECK(it != ckpt.tensors.end(), "from_checkpoint: missing ema.", ema_.names[i]);
        ema_.values[i].copy_(it->second);
    }
    deserialize_optimizer(ckpt.tensors.at("opt.tok"), *opt_tok_);
    deserialize_optimizer(ckpt.tensors.at("opt.disc"), *opt_disc_);
    load_rng(ckpt, rng_);
}

Tokenizer TokenizerTrainer::ema_tokenizer() const {
    Tokenizer copy(tok_config_);
    ema_.copy_to(*copy);
    copy->eval();
    return copy;
}

LatentStats compute_latent_stats(Tokenizer& tokenizer, const ImageFolderDataset& data,
                                 int64_t batch_size) {
    TORCH_CHECK(data.size() > 0, "compute_latent_stats: empty dataset");
    tokenizer->eval();
    torch::NoGradGuard no_grad;
    const int64_t C = tokenizer->config.latent_dim;
    auto sum = torch::zeros({C}, torch::kFloat64);
    auto sumsq = torch::zeros({C}, torch::kFloat64);
    int64_t count = 0;
    for (int64_t start = 0; start < data.size(); start += batch_size) {
        const int64_t end = std::min(data.size(), start + batch_size);
        std::vector<torch::Tensor> images;
        for (int64_t i = start; i < end; ++i) {
            images.push_back(data.item(i).first);
        }
        auto means = tokenizer->encode(torch::stack(images)).mean.to(torch::kFloat64);
        sum += means.sum({0, 1});
        sumsq += means.square().sum({0, 1});
        count += means.size(0) * means.size(1);
    }
    auto mean = sum / count;
    auto var = (sumsq / count - mean.square()).clamp_min(0.0);
    auto std = var.sqrt();

    LatentStats stats;
    stats.source_dataset_id = data.spec().root + "/" + data.spec().split;
    for (int64_t c = 0; c < C; ++c) {
        if (std[c].item<double>() <= 1e-8) {
            stats.degenerate_channels.push_back(c);
            std::cerr << "compute_latent_stats: degenerate std in channel " << c << "\n";
        }
    }
    stats.mean = mean.to(torch::kFloat32);
    stats.std = std.clamp_min(1e-8).to(torch::kFloat32);
    return stats;
}

void cache_latents(Tokenizer& tokenizer, const ImageFolderDataset& data,
                   const LatentStats& stats, const std::string& tokenizer_hash,
                   const std::string& store_path, int64_t batch_size) {
    tokenizer->eval();
    torch::NoGradGuard no_grad;
    std::vector<torch::Tensor> mean, logvar, mean_flip, logvar_flip;
    auto labels = torch::empty({data.size()}, torch::kInt64);
    for (int64_t start = 0; start < data.size(); start += batch_size) {
        const int64_t end = std::min(data.size(), start + batch_size);
        std::vector<torch::Tensor> images;
        for (int64_t i = start; i < end; ++i) {
            auto [img, label] = data.item(i);
            images.push_back(img);
            labels[i] = label;
        }
        auto batch = torch::stack(images);
        auto post = tokenizer->encode(batch);
        mean.push_back(post.mean);
        logvar.push_back(post.log_variance);
        auto post_flip = tokenizer->encode(batch.flip(-1));
        mean_flip.push_back(post_flip.mean);
        logvar_flip.push_back(post_flip.log_variance);
    }
    Checkpoint ckpt;
    ckpt.meta["kind"] = "latent_cache";
    ckpt.meta["version"] = 1;
    ckpt.meta["tokenizer_hash"] = tokenizer_hash;
    ckpt.meta["count"] = data.size();
    ckpt.meta["source"] = stats.source_dataset_id;
    ckpt.tensors["mean"] = torch::cat(mean);
    ckpt.tensors["logvar"] = torch::cat(logvar);
    ckpt.tensors["mean_flip"] = torch::cat(mean_flip);
    ckpt.tensors["logvar_flip"] = torch::cat(logvar_flip);
    ckpt.tensors["labels"] = labels;
    ckpt.tensors["stats.mean"] = stats.mean;
    ckpt.tensors["stats.std"] = stats.std;
    save_checkpoint(store_path, ckpt);
}

LatentCache LatentCache::load(const std::string& path, const std::string& expected_hash) {
    auto ckpt = load_checkpoint(path);
    TORCH_CHECK(ckpt.meta.value("kind", "") == "latent_cache",
                "LatentCache: not a latent cache file: ", path);
    const std::string stored = ckpt.meta.value("tokenizer_hash", "");
    TORCH_CHECK(expected_hash.empty() || stored == expected_hash,
                "LatentCache: tokenizer hash mismatch: cache built for ", stored,
                ", requested ", expected_hash);
    LatentCache cache;
    cache.mean = ckpt.tensors.at("mean");
    cache.logvar = ckpt.tensors.at("logvar");
    cache.mean_flip = ckpt.tensors.at("mean_flip");
    cache.logvar_flip = ckpt.tensors.at("logvar_flip");
    cache.labels = ckpt.tensors.at("labels");
    cache.stats.mean = ckpt.tensors.at("stats.mean");
    cache.stats.std = ckpt.tensors.at("stats.std");
    cache.stats.source_dataset_id = ckpt.meta.value("source", "");
    cache.tokenizer_hash = stored;
    return cache;
}

std::pair<torch::Tensor, torch::Tensor> LatentCache::batch(const std::vector<int64_t>& indices,
                                                           torch::Generator& gen,
                                                           bool sample_posterior_noise,
                                                           bool augment_flip) const {
    const int64_t B = static_cast<int64_t>(indices.size());
    auto idx = torch::tensor(indices, torch::kInt64);
    auto m = mean.index_select(0, idx);
    auto lv = logvar.index_select(0, idx);
    if (augment_flip) {
        auto use_flip = torch::rand({B}, gen, torch::kFloat32).lt(0.5)
                            .reshape({B, 1, 1});
        m = torch::where(use_flip, mean_flip.index_select(0, idx), m);
        lv = torch::where(use_flip, logvar_flip.index_select(0, idx), lv);
    }
    auto z = m;
    if (sample_posterior_noise) {
        z = m + (0.5 * lv).exp() * torch::randn(m.sizes(), gen, m.options());
    }
    return {standardize(z, stats), labels.index_select(0, idx)};
}

GenTrainer::GenTrainer(const GenModelConfig& config, const TrainRecipe& recipe, uint64_t seed)
    : config_(config), recipe_(recipe), seed_(seed), rng_(seed) {
    config_.validate();
    recipe_.validate();
    torch::manual_seed(derive_seed(seed, "init"));
    // constant LR, no weight decay or gradient clipping for generative models
    auto opts = torch::optim::AdamWOptions(recipe_.peak_lr)
                    .betas({recipe_.beta1, recipe_.beta2})
                    .weight_decay(0.0);
    if (config_.family == GenFamily::Flow) {
        flow_ = FlowModel(config_);
        opt_ = std::make_unique<torch::optim::AdamW>(flow_->parameters(), opts);
        ema_ = EmaShadow::from_module(*flow_);
    } else {
        ar_ = ArModel(config_);
        opt_ = std::make_unique<torch::optim::AdamW>(ar_->parameters(), opts);
        ema_ = EmaShadow::from_module(*ar_);
    }
}

torch::nn::Module& GenTrainer::model() {
    if (config_.family == GenFamily::Flow) {
        return *flow_;
    }
    return *ar_;
}

const torch::nn::Module& GenTrainer::model() const {
    if (config_.family == GenFamily::Flow) {
        return *flow_;
    }
    return *ar_;
}

torch::Tensor GenTrainer::train_step(const torch::Tensor& x0, const torch::Tensor& labels) {
    model().train();
    torch::Tensor loss;
    if (config_.family == GenFamily::Flow) {
        loss = denoising_loss(flow_, x0, labels, NoiseSchedule::linear(), rng_, &drop_stats_);
    } else {
        loss = ar_training_step(ar_, x0, labels, NoiseSchedule::linear(), rng_, &drop_stats_);
    }
    TORCH_CHECK(std::isfinite(loss.item<double>()),
                "GenTrainer: non-finite loss at step ", step_);
    opt_->zero_grad();
    loss.backward();
    opt_->step();
    ema_.update(model(), recipe_.ema_decay);
    ++step_;
    return loss;
}

void GenTrainer::run(const LatentCache& cache, const std::string& out_dir) {
    const int64_t n = cache.labels.size(0);
    for (int64_t epoch = 0; epoch < recipe_.epochs; ++epoch) {
        for (const auto& indices : epoch_batches(n, recipe_.batch_size, rng_.data)) {
            auto [x0, labels] = cache.batch(indices, rng_.data,
                                            /*sample_posterior_noise=*/false,
                                            /*augment_flip=*/true);
            auto loss = train_step(x0, labels);
            if (recipe_.log_every_steps > 0 && (step_ - 1) % recipe_.log_every_steps == 0) {
                std::cout << to_string(config_.family) << " step " << step_ - 1 << " loss "
                          << loss.item<double>() << "\n";
            }
        }
        if (!out_dir.empty() && (epoch + 1) % recipe_.checkpoint_every_epochs == 0) {
            std::filesystem::create_directories(out_dir);
            save_checkpoint(out_dir + "/gen_" + to_string(config_.family) + ".ckpt",
                            to_checkpoint());
        }
    }
}

Checkpoint GenTrainer::to_checkpoint() const {
    Checkpoint ckpt;
    ckpt.meta["kind"] = "gen_model";
    ckpt.meta["version"] = 1;
    ckpt.meta["family"] = to_string(config_.family);
    ckpt.meta["step"] = step_;
    ckpt.meta["seed"] = seed_;
    store_module(ckpt, "model", model());
    for (size_t i = 0; i < ema_.values.size(); ++i) {
        ckpt.tensors["ema." + ema_.names[i]] = ema_.values[i].clone();
    }
    ckpt.tensors["opt"] = serialize_optimizer(*opt_);
    store_rng(ckpt, const_cast<RngStreams&>(rng_));
    return ckpt;
}

void GenTrainer::from_checkpoint(const Checkpoint& ckpt) {
    TORCH_CHECK(ckpt.meta.value("kind", "") == "gen_model",
                "from_checkpoint: not a gen-model checkpoint");
    TORCH_CHECK(ckpt.meta.value("family", "") == to_string(config_.family),
                "from_checkpoint: family mismatch");
    step_ = ckpt.meta.value("step", int64_t{0});
    load_module(ckpt, "model", model());
    torch::NoGradGuard no_grad;
    for (size_t i = 0; i < ema_.values.size(); ++i) {
        ema_.values[i].copy_(ckpt.tensors.at("ema." + ema_.names[i]));
    }
    deserialize_optimizer(ckpt.tensors.at("opt"), *opt_);
    load_rng(ckpt, rng_);
}

void GenTrainer::apply_ema_weights() {
    ema_.copy_to(model());
}

}  // namespace detok
