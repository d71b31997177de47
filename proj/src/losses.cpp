#include "detok/losses.hpp"

#include "detok/rng.hpp"

namespace detok {

void LossWeights::validate() const {
    TORCH_CHECK(lambda_kl >= 0 && lambda_percep >= 0 && lambda_gan >= 0,
                "LossWeights: all lambdas must be >= 0");
    TORCH_CHECK(gan_start_fraction >= 0 && gan_start_fraction <= 1,
                "LossWeights: gan_start_fraction must be in [0,1]");
}

torch::Tensor mse_loss(const torch::Tensor& recon, const torch::Tensor& target) {
    TORCH_CHECK(recon.sizes() == target.sizes(), "mse_loss: shape mismatch ", recon.sizes(),
                " vs ", target.sizes());
    return torch::mse_loss(recon, target);
}

torch::Tensor kl_loss(const PosteriorParams& params) {
    auto var = params.log_variance.exp();
    auto per_element = 0.5 * (params.mean.pow(2) + var - 1.0 - params.log_variance);
    // sum over tokens and channels, mean over batch
    return per_element.sum({1, 2}).mean();
}

ConvPyramidExtractor::ConvPyramidExtractor(uint64_t seed, int64_t base_channels) {
    auto gen = make_generator(derive_seed(seed, "conv_pyramid"));
    torch::NoGradGuard no_grad;
    int64_t in = 3;
    int64_t out = base_channels;
    for (int stage = 0; stage < 3; ++stage) {
        auto conv = torch::nn::Conv2d(
            torch::nn::Conv2dOptions(in, out, 3).stride(2).padding(1));
        double std = std::sqrt(2.0 / static_cast<double>(in * 9));
        conv->weight.copy_(std * torch::randn(conv->weight.sizes(), gen, torch::kFloat32));
        conv->bias.zero_();
        for (auto& p : conv->parameters()) {
            p.set_requires_grad(false);
        }
        convs_.push_back(conv);
        in = out;
        out *= 2;
    }
}

std::vector<torch::Tensor> ConvPyramidExtractor::features(const torch::Tensor& image) {
    std::vector<torch::Tensor> out;
    auto h = image;
    for (auto& conv : convs_) {
        h = torch::silu(conv->forward(h));
        out.push_back(h);
    }
    return out;
}

torch::Tensor perceptual_loss(const torch::Tensor& recon, const torch::Tensor& target,
                              FeatureExtractor& extractor) {
    TORCH_CHECK(recon.sizes() == target.sizes(), "perceptual_loss: shape mismatch");
    auto recon_feats = extractor.features(recon);
    std::vector<torch::Tensor> target_feats;
    {
        torch::NoGradGuard no_grad;
        target_feats = extractor.features(target);
    }
    TORCH_CHECK(!recon_feats.empty(), "perceptual_loss: extractor produced no stages");
    torch::Tensor acc;
    for (size_t i = 0; i < recon_feats.size(); ++i) {
        auto d = torch::mse_loss(recon_feats[i], target_feats[i].detach());
        acc = acc.defined() ? acc + d : d;
    }
    return acc / static_cast<double>(recon_feats.size());
}

PatchDiscriminatorImpl::PatchDiscriminatorImpl(int64_t base_channels) {
    using torch::nn::Conv2d;
    using torch::nn::Conv2dOptions;
    using torch::nn::LeakyReLU;
    using torch::nn::LeakyReLUOptions;
    net = torch::nn::Sequential(
        Conv2d(Conv2dOptions(3, base_channels, 4).stride(2).padding(1)),
        LeakyReLU(LeakyReLUOptions().negative_slope(0.2)),
        Conv2d(Conv2dOptions(base_channels, base_channels * 2, 4).stride(2).padding(1)),
        LeakyReLU(LeakyReLUOptions().negative_slope(0.2)),
        Conv2d(Conv2dOptions(base_channels * 2, base_channels * 4, 4).stride(2).padding(1)),
        LeakyReLU(LeakyReLUOptions().negative_slope(0.2)),
        Conv2d(Conv2dOptions(base_channels * 4, 1, 4).stride(1).padding(1)));
    register_module("net", net);
}

torch::Tensor PatchDiscriminatorImpl::forward(const torch::Tensor& image) {
    return net->forward(image);
}

GanLossTerms gan_losses(const std::function<torch::Tensor(const torch::Tensor&)>& critic,
                        const torch::Tensor& recon, const torch::Tensor& target) {
    auto d_fake_live = critic(recon);
    auto d_fake = critic(recon.detach());
    auto d_real = critic(target.detach());
    GanLossTerms terms;
    terms.generator = -d_fake_live.mean();
    terms.discriminator =
        torch::relu(1.0 - d_real).mean() + torch::relu(1.0 + d_fake).mean();
    return terms;
}

GanLossTerms gan_losses(PatchDiscriminator& discriminator, const torch::Tensor& recon,
                        const torch::Tensor& target) {
    return gan_losses([&](const torch::Tensor& x) { return discriminator->forward(x); }, recon,
                      target);
}

LossBreakdown total_loss(const TotalLossInputs& inputs, const LossWeights& weights,
                         double progress) {
    weights.validate();
    TORCH_CHECK(progress >= 0.0 && progress <= 1.0, "total_loss: progress must be in [0,1]");
    const bool gan_active = progress >= weights.gan_start_fraction && weights.lambda_gan > 0.0;

    LossBreakdown out;
    out.mse = inputs.mse;
    out.kl = inputs.kl;
    out.perceptual = inputs.perceptual;
    auto zero = torch::zeros_like(inputs.mse);
    out.gan_generator = gan_active && inputs.gan_generator.defined() ? inputs.gan_generator : zero;
    out.gan_discriminator =
        gan_active && inputs.gan_discriminator.defined() ? inputs.gan_discriminator : zero;
    out.total = out.mse + weights.lambda_kl * out.kl + weights.lambda_percep * out.perceptual +
                weights.lambda_gan * out.gan_generator;
    return out;
}

}  // namespace detok
