#include "testing.hpp"

#include <filesystem>

#include "detok/config.hpp"
#include "detok/training.hpp"

using namespace detok;
namespace fs = std::filesystem;

namespace {

TokenizerConfig tiny_tokenizer() {
    TokenizerConfig cfg;
    cfg.image_size = 16;
    cfg.patch_size = 8;
    cfg.latent_dim = 4;
    cfg.encoder = {32, 1, 2};
    cfg.decoder = {32, 1, 2};
    return cfg;
}

TrainRecipe tiny_recipe() {
    TrainRecipe recipe;
    recipe.epochs = 1;
    recipe.batch_size = 4;
    recipe.peak_lr = 1e-3;
    recipe.lr_policy = LrPolicy::Constant;
    recipe.ema_decay = 0.5;
    recipe.log_every_steps = 0;
    return recipe;
}

// Smooth low-frequency images: easier to reconstruct than raw noise.
torch::Tensor smooth_images(int64_t n, int64_t size, uint64_t seed) {
    auto gen = make_generator(seed);
    auto coarse = torch::rand({n, 3, 4, 4}, gen) * 2 - 1;
    return torch::nn::functional::interpolate(
        coarse, torch::nn::functional::InterpolateFuncOptions()
                    .size(std::vector<int64_t>{size, size})
                    .mode(torch::kBilinear)
                    .align_corners(false));
}

struct TempDir {
    fs::path path;
    TempDir() {
        path = fs::temp_directory_path() /
               ("detok_train_" + std::to_string(torch::randint(0, 1 << 30, {1}).item<int64_t>()));
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
    std::string file(const std::string& name) const { return (path / name).string(); }
};

}  // namespace

TEST_CASE("learning_rate: warmup-cosine closed forms") {
    TrainRecipe r;
    r.peak_lr = 4e-4;
    r.warmup_fraction = 0.25;
    r.lr_policy = LrPolicy::WarmupCosine;
    const int64_t total = 1000;

    CHECK(learning_rate(r, 0, total) == 0.0);
    CHECK(learning_rate(r, 125, total) == doctest::Approx(2e-4).epsilon(1e-12));
    CHECK(learning_rate(r, 250, total) == doctest::Approx(4e-4).epsilon(1e-12));
    // cosine midpoint (250 + 1000) / 2 = 625 sits at half the peak
    CHECK(learning_rate(r, 625, total) == doctest::Approx(2e-4).epsilon(1e-12));
    CHECK(learning_rate(r, total, total) == doctest::Approx(0.0).epsilon(1e-15));
    // continuity at the warmup junction
    CHECK(std::abs(learning_rate(r, 250, total) - learning_rate(r, 249, total)) <
          1e-2 * r.peak_lr);
    // monotone decay after warmup
    for (int64_t s = 251; s <= total; ++s) {
        CHECK(learning_rate(r, s, total) <= learning_rate(r, s - 1, total));
    }

    r.warmup_fraction = 0.0;  // pure cosine starts at the peak
    CHECK(learning_rate(r, 0, total) == doctest::Approx(4e-4).epsilon(1e-12));

    r.lr_policy = LrPolicy::Constant;
    CHECK(learning_rate(r, 0, total) == 4e-4);
    CHECK(learning_rate(r, total, total) == 4e-4);

    CHECK_THROWS(learning_rate(r, -1, total));
    CHECK_THROWS(learning_rate(r, total + 1, total));
}

TEST_CASE("standardize: exact inverse and unit moments") {
    auto gen = make_generator(11);
    LatentStats stats;
    stats.mean = torch::randn({6}, gen);
    stats.std = torch::rand({6}, gen) + 0.5;

    auto tokens = torch::randn({4, 9, 6}, gen) * 3 + 1;
    auto round_trip = unstandardize(standardize(tokens, stats), stats);
    CHECK(torch::allclose(round_trip, tokens, 1e-5, 1e-6));

    // standardizing with the data's own moments whitens it
    auto big = torch::randn({64, 16, 6}, gen) * 2.5 - 1.0;
    auto flat = big.reshape({-1, 6}).to(torch::kFloat64);
    LatentStats own;
    own.mean = flat.mean(0).to(torch::kFloat32);
    own.std = flat.std(0, /*unbiased=*/false).to(torch::kFloat32);
    auto white = standardize(big, own).reshape({-1, 6}).to(torch::kFloat64);
    CHECK(white.mean(0).abs().max().item<double>() < 1e-4);
    CHECK((white.std(0, false) - 1.0).abs().max().item<double>() < 1e-3);
}

TEST_CASE("EmaShadow: endpoint decays and geometric law") {
    torch::manual_seed(21);
    torch::nn::Linear module(5, 5);
    auto shadow = EmaShadow::from_module(*module);
    CHECK(torch::equal(shadow.values[0], module->weight));

    // shift the parameters away from the shadow
    {
        torch::NoGradGuard no_grad;
        module->weight.add_(1.0);
        module->bias.add_(-2.0);
    }
    auto frozen = shadow;
    frozen.update(*module, 1.0);  // decay 1: shadow never moves
    CHECK(torch::equal(frozen.values[0], shadow.values[0]));

    auto tracking = shadow;
    tracking.update(*module, 0.0);  // decay 0: shadow snaps to the parameters
    CHECK(torch::allclose(tracking.values[0], module->weight, 1e-7, 1e-7));

    // constant parameters: gap contracts by decay^k
    const double decay = 0.8;
    auto start_gap = (shadow.values[0] - module->weight).clone();
    auto geo = shadow;
    for (int k = 0; k < 7; ++k) {
        geo.update(*module, decay);
    }
    auto expected = module->weight + std::pow(decay, 7) * start_gap;
    CHECK(torch::allclose(geo.values[0], expected, 1e-6, 1e-7));

    // copy_to round trip restores the module bitwise
    torch::nn::Linear other(5, 5);
    shadow.copy_to(*other);
    CHECK(torch::equal(other->weight, shadow.values[0]));

    torch::nn::Linear mismatched(6, 5);
    CHECK_THROWS(shadow.update(*mismatched, 0.5));
}

TEST_CASE("TokenizerTrainer: zeroed corruption collapses onto the plain autoencoder") {
    const uint64_t seed = 5;
    CorruptionConfig off;
    off.gamma = 0.0;
    off.max_mask_ratio = 0.0;
    LossWeights weights;
    auto images = smooth_images(4, 16, 31);

    TokenizerTrainer trainer(tiny_tokenizer(), off, weights, tiny_recipe(), seed);
    auto stepped = trainer.train_step(images, /*progress=*/0.0);

    // hand-written baseline step over an identically seeded twin
    TokenizerTrainer twin(tiny_tokenizer(), off, weights, tiny_recipe(), seed);
    RngStreams rng(seed);
    ConvPyramidExtractor percep(derive_seed(seed, "percep"));
    twin.tokenizer()->train();
    auto posterior = twin.tokenizer()->encode(images);
    auto latents = sample_posterior(posterior, rng.posterior);
    auto recon = twin.tokenizer()->decode(latents);
    TotalLossInputs inputs;
    inputs.mse = detok::mse_loss(recon, images);
    inputs.kl = kl_loss(posterior);
    inputs.perceptual = perceptual_loss(recon, images, percep);
    inputs.gan_generator = torch::zeros({}, images.options());
    inputs.gan_discriminator = torch::zeros({}, images.options());
    auto manual = total_loss(inputs, weights, 0.0);

    CHECK(torch::equal(stepped.mse, manual.mse));
    CHECK(torch::equal(stepped.kl, manual.kl));
    CHECK(torch::equal(stepped.perceptual, manual.perceptual));
    CHECK(torch::equal(stepped.total, manual.total));
}

TEST_CASE("TokenizerTrainer: disabling one corruption leaves the other streams untouched") {
    const uint64_t seed = 6;
    auto images = smooth_images(4, 16, 33);
    LossWeights weights;

    CorruptionConfig noisy;
    noisy.gamma = 3.0;
    noisy.max_mask_ratio = 0.0;
    CorruptionConfig clean;
    clean.gamma = 0.0;
    clean.max_mask_ratio = 0.0;

    TokenizerTrainer a(tiny_tokenizer(), noisy, weights, tiny_recipe(), seed);
    TokenizerTrainer b(tiny_tokenizer(), clean, weights, tiny_recipe(), seed);
    auto la = a.train_step(images, 0.0);
    auto lb = b.train_step(images, 0.0);

    // identical init and posterior stream: the KL term matches bitwise, while
    // the reconstruction differs because only one trainer noised its latents
    CHECK(torch::equal(la.kl, lb.kl));
    CHECK(la.mse.item<double>() != lb.mse.item<double>());
}

TEST_CASE("TokenizerTrainer: checkpoint round trip resumes the exact trajectory") {
    const uint64_t seed = 7;
    CorruptionConfig corr;  // defaults: both corruptions on
    LossWeights weights;
    auto images = smooth_images(4, 16, 37);

    TokenizerTrainer a(tiny_tokenizer(), corr, weights, tiny_recipe(), seed);
    for (int i = 0; i < 3; ++i) {
        a.train_step(images, 0.1 * i);
    }
    auto snapshot = a.to_checkpoint();

    TempDir dir;
    save_checkpoint(dir.file("tok.ckpt"), snapshot);
    // same seed: the frozen perceptual extractor is derived from it, the rest
    // of the state comes from the checkpoint
    TokenizerTrainer b(tiny_tokenizer(), corr, weights, tiny_recipe(), seed);
    b.from_checkpoint(load_checkpoint(dir.file("tok.ckpt")));
    CHECK(b.step_count() == 3);

    auto la = a.train_step(images, 0.3);
    auto lb = b.train_step(images, 0.3);
    CHECK(torch::equal(la.total, lb.total));
    for (size_t i = 0; i < a.ema().values.size(); ++i) {
        CHECK(torch::equal(a.ema().values[i], b.ema().values[i]));
    }
}

TEST_CASE("TokenizerTrainer: overfits a small batch with corruption off") {
    CorruptionConfig off;
    off.gamma = 0.0;
    off.max_mask_ratio = 0.0;
    LossWeights weights;
    weights.lambda_percep = 0.0;  // pixel-only objective for the smoke test
    weights.lambda_gan = 0.0;
    auto recipe = tiny_recipe();
    recipe.peak_lr = 3e-3;

    auto images = smooth_images(4, 16, 41);
    TokenizerTrainer trainer(tiny_tokenizer(), off, weights, recipe, 8);
    const double initial = trainer.train_step(images, 0.0).mse.item<double>();
    double final_mse = initial;
    for (int i = 0; i < 300; ++i) {
        final_mse = trainer.train_step(images, 0.0).mse.item<double>();
    }
    CHECK(final_mse < 0.25 * initial);
    CHECK(final_mse < 0.05);
}

TEST_CASE("finetune_decoder: encoder stays bitwise frozen") {
    TempDir dir;
    make_synthetic_dataset(dir.file("data"), 2, 4, 1, 16, 3);
    DatasetSpec spec;
    spec.root = dir.file("data");
    spec.image_size = 16;
    ImageFolderDataset data(spec);

    CorruptionConfig corr;
    TokenizerTrainer trainer(tiny_tokenizer(), corr, LossWeights{}, tiny_recipe(), 9);
    std::vector<torch::Tensor> enc_before, dec_before;
    for (const auto& p : trainer.tokenizer()->encoder->parameters()) {
        enc_before.push_back(p.detach().clone());
    }
    for (const auto& p : trainer.tokenizer()->decoder->parameters()) {
        dec_before.push_back(p.detach().clone());
    }

    trainer.finetune_decoder(data, /*epochs=*/1, dir.file("out"));

    auto enc_after = trainer.tokenizer()->encoder->parameters();
    for (size_t i = 0; i < enc_before.size(); ++i) {
        CHECK(torch::equal(enc_after[i], enc_before[i]));
        CHECK(enc_after[i].requires_grad());  // restored for later training
    }
    auto dec_after = trainer.tokenizer()->decoder->parameters();
    bool decoder_moved = false;
    for (size_t i = 0; i < dec_before.size(); ++i) {
        decoder_moved = decoder_moved || !torch::equal(dec_after[i], dec_before[i]);
    }
    CHECK(decoder_moved);
    CHECK(fs::exists(dir.file("out/tokenizer_finetuned.ckpt")));
    CHECK(load_checkpoint(dir.file("out/tokenizer_finetuned.ckpt")).meta.value("fine_tuned",
                                                                               false));
}

TEST_CASE("compute_latent_stats: batch-size invariance and degenerate detection") {
    TempDir dir;
    make_synthetic_dataset(dir.file("data"), 2, 6, 1, 16, 13);
    DatasetSpec spec;
    spec.root = dir.file("data");
    spec.image_size = 16;
    ImageFolderDataset data(spec);

    CorruptionConfig corr;
    TokenizerTrainer trainer(tiny_tokenizer(), corr, LossWeights{}, tiny_recipe(), 10);
    auto tok = trainer.ema_tokenizer();
    auto s3 = compute_latent_stats(tok, data, 3);
    auto s64 = compute_latent_stats(tok, data, 64);
    CHECK(torch::allclose(s3.mean, s64.mean, 1e-6, 1e-7));
    CHECK(torch::allclose(s3.std, s64.std, 1e-6, 1e-7));
    CHECK(s64.degenerate_channels.empty());
    CHECK(s64.std.min().item<float>() >= 1e-8f);  // floored, never zero
}

TEST_CASE("LatentCache: cached moments match a direct encode") {
    TempDir dir;
    make_synthetic_dataset(dir.file("data"), 2, 3, 1, 16, 17);
    DatasetSpec spec;
    spec.root = dir.file("data");
    spec.image_size = 16;
    ImageFolderDataset data(spec);

    CorruptionConfig corr;
    TokenizerTrainer trainer(tiny_tokenizer(), corr, LossWeights{}, tiny_recipe(), 12);
    auto tok = trainer.ema_tokenizer();
    auto stats = compute_latent_stats(tok, data);
    cache_latents(tok, data, stats, "hash-abc", dir.file("latents.ckpt"));

    CHECK_THROWS(LatentCache::load(dir.file("latents.ckpt"), "hash-other"));
    auto cache = LatentCache::load(dir.file("latents.ckpt"), "hash-abc");
    CHECK(cache.mean.sizes() == torch::IntArrayRef({6, 4, 4}));

    // same batch composition as the caching pass, so the match is bitwise
    torch::NoGradGuard no_grad;
    std::vector<torch::Tensor> images;
    for (int64_t i = 0; i < data.size(); ++i) {
        images.push_back(data.item(i).first);
    }
    auto batch = torch::stack(images);
    auto post = tok->encode(batch);
    CHECK(torch::equal(cache.mean, post.mean));
    CHECK(torch::equal(cache.logvar, post.log_variance));
    auto post_flip = tok->encode(batch.flip(-1));
    CHECK(torch::equal(cache.mean_flip, post_flip.mean));
    CHECK(cache.labels[0].item<int64_t>() == data.item(0).second);

    // deterministic batch: standardized posterior means, bitwise
    auto gen = make_generator(0);
    auto [z, labels] = cache.batch({0, 2}, gen, /*sample_posterior_noise=*/false,
                                   /*augment_flip=*/false);
    CHECK(torch::equal(z, standardize(cache.mean.index_select(0, torch::tensor({0L, 2L})),
                                      cache.stats)));
    CHECK(torch::equal(labels, cache.labels.index_select(0, torch::tensor({0L, 2L}))));

    // posterior sampling adds noise around the mean
    auto gen2 = make_generator(1);
    auto [zn, labels_n] = cache.batch({0, 2}, gen2, /*sample_posterior_noise=*/true,
                                      /*augment_flip=*/false);
    CHECK(torch::equal(labels_n, labels));
    CHECK(!torch::equal(zn, z));
}

TEST_CASE("GenTrainer: checkpoint round trip and one-batch overfit") {
    GenModelConfig cfg;
    cfg.family = GenFamily::Flow;
    cfg.width = 32;
    cfg.depth = 1;
    cfg.heads = 2;
    cfg.diffhead = {2, 32};
    cfg.num_classes = 3;
    cfg.n_tokens = 4;
    cfg.latent_dim = 4;

    auto recipe = tiny_recipe();
    recipe.peak_lr = 2e-3;
    auto gen = make_generator(51);
    auto x0 = torch::randn({8, 4, 4}, gen);
    auto labels = torch::randint(0, 3, {8}, gen, torch::kInt64);

    GenTrainer a(cfg, recipe, 13);
    const double initial = a.train_step(x0, labels).item<double>();
    CHECK(initial == doctest::Approx(1.0).epsilon(0.1));  // zero-init predicts 0 for unit noise

    auto snapshot = a.to_checkpoint();
    GenTrainer b(cfg, recipe, 77);
    b.from_checkpoint(snapshot);
    CHECK(torch::equal(a.train_step(x0, labels), b.train_step(x0, labels)));

    double final_loss = initial;
    for (int i = 0; i < 300; ++i) {
        final_loss = a.train_step(x0, labels).item<double>();
    }
    CHECK(final_loss < 0.5 * initial);
    CHECK(a.drop_stats().total > 0);
}
