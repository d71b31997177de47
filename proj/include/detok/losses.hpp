#pragma once

#include <torch/torch.h>

#include <functional>
#include <memory>
#include <vector>

#include "detok/tokenizer.hpp"

namespace detok {

struct LossWeights {
    double lambda_kl = 1e-6;
    double lambda_percep = 1.0;
    double lambda_gan = 0.1;
    double gan_start_fraction = 0.5;  // fraction of training after which the GAN term activates

    void validate() const;
};

struct LossBreakdown {
    torch::Tensor mse;
    torch::Tensor kl;
    torch::Tensor perceptual;
    torch::Tensor gan_generator;
    torch::Tensor gan_discriminator;
    torch::Tensor total;  // mse + l_kl*kl + l_percep*perceptual + l_gan*gan_generator
};

torch::Tensor mse_loss(const torch::Tensor& recon, const torch::Tensor& target);

// 0.5 * sum(mean^2 + var - 1 - logvar) over tokens and channels, mean over batch.
torch::Tensor kl_loss(const PosteriorParams& params);

// Frozen multi-stage feature maps for the perceptual term.
class FeatureExtractor {
   public:
    virtual ~FeatureExtractor() = default;
    virtual std::vector<torch::Tensor> features(const torch::Tensor& image) = 0;
};

// Pass-through features: perceptual loss collapses to pixel MSE.
class IdentityExtractor : public FeatureExtractor {
   public:
    std::vector<torch::Tensor> features(const torch::Tensor& image) override { return {image}; }
};

// Deterministic fixed-seed convolutional pyramid; hermetic stand-in for
// pretrained VGG/ConvNeXt features.
class ConvPyramidExtractor : public FeatureExtractor {
   public:
    explicit ConvPyramidExtractor(uint64_t seed = 0, int64_t base_channels = 16);
    std::vector<torch::Tensor> features(const torch::Tensor& image) override;

   private:
    std::vector<torch::nn::Conv2d> convs_;
};

// 4-layer strided convolutional patch critic.
struct PatchDiscriminatorImpl : torch::nn::Module {
    explicit PatchDiscriminatorImpl(int64_t base_channels = 32);
    torch::Tensor forward(const torch::Tensor& image);  // patch logits [B, 1, h, w]

    torch::nn::Sequential net{nullptr};
};
TORCH_MODULE(PatchDiscriminator);

struct GanLossTerms {
    torch::Tensor generator;      // -mean(D(fake))
    torch::Tensor discriminator;  // mean(relu(1 - D(real)) + relu(1 + D(fake.detach())))
};
GanLossTerms gan_losses(PatchDiscriminator& discriminator, const torch::Tensor& recon,
                        const torch::Tensor& target);
GanLossTerms gan_losses(const std::function<torch::Tensor(const torch::Tensor&)>& critic,
                        const torch::Tensor& recon, const torch::Tensor& target);

torch::Tensor perceptual_loss(const torch::Tensor& recon, const torch::Tensor& target,
                              FeatureExtractor& extractor);

struct TotalLossInputs {
    torch::Tensor mse;
    torch::Tensor kl;
    torch::Tensor perceptual;
    torch::Tensor gan_generator;
    torch::Tensor gan_discriminator;
};

// Weighted sum of Eq.-style components; GAN terms are zeroed while
// progress < gan_start_fraction.
LossBreakdown total_loss(const TotalLossInputs& inputs, const LossWeights& weights,
                         double progress);

}  // namespace detok
