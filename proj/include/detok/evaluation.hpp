#pragma once

#include <torch/torch.h>

#include <functional>
#include <json.hpp>
#include <string>
#include <utility>
#include <vector>

#include "detok/checkpoint.hpp"
#include "detok/corruption.hpp"
#include "detok/data.hpp"
#include "detok/gen_models.hpp"
#include "detok/tokenizer.hpp"

namespace detok {

struct FeatureStats {
    torch::Tensor mean;  // [D] float64
    torch::Tensor cov;   // [D, D] float64
    std::string extractor_id;
    std::string dataset_id;
};

// Unbiased sample statistics of features [N, D].
FeatureStats compute_feature_stats(const torch::Tensor& features);

// |mu_a - mu_b|^2 + tr(S_a + S_b - 2 (S_a S_b)^{1/2}); matrix square roots by
// eigendecomposition, eigenvalues below -1e-6 rejected, small negatives clipped.
double frechet_distance(const FeatureStats& a, const FeatureStats& b);

// Small fixed-seed convolutional embedder, briefly trained as a classifier;
// stands in for the Inception feature space at desk scale.
class FidProxyExtractor {
   public:
    FidProxyExtractor(int64_t num_classes, uint64_t seed);

    void train_classifier(const ImageFolderDataset& data, int64_t steps, int64_t batch_size);
    torch::Tensor features(const torch::Tensor& images);  // [B, D]
    int64_t feature_dim() const { return 128; }
    std::string id() const { return id_; }

    Checkpoint to_checkpoint() const;
    void from_checkpoint(const Checkpoint& ckpt);

   private:
    torch::Tensor forward_features(const torch::Tensor& images);

    std::string id_;
    torch::nn::Sequential net_{nullptr};
    torch::nn::Linear classifier_{nullptr};
    torch::Generator gen_;
};

// 10 log10(peak^2 / mse) with peak = 2 for the [-1, 1] range; infinity at mse 0.
double psnr(const torch::Tensor& recon, const torch::Tensor& target);

struct ReconMetrics {
    double psnr = 0.0;
    double mse = 0.0;
    double rfid_proxy = 0.0;
    int64_t sample_count = 0;
};

// Deterministic posterior, corruption disabled, EMA weights expected.
ReconMetrics reconstruction_eval(Tokenizer& tokenizer, const ImageFolderDataset& data,
                                 FidProxyExtractor& extractor, int64_t batch_size = 32);

// encode -> interpolate at fixed tau -> decode, MSE against the originals.
double corrupted_recon_mse(Tokenizer& tokenizer, const torch::Tensor& images, double tau,
                           const CorruptionConfig& config, torch::Generator& gen);

// encode visible tokens only -> decode with mask tokens; returns
// (visible-region mse, masked-region mse).
std::pair<double, double> masked_recon_mse(Tokenizer& tokenizer, const torch::Tensor& images,
                                           double ratio, torch::Generator& gen);

// Horizontal strip of reconstructions, one column per corruption level.
torch::Tensor denoising_grid(Tokenizer& tokenizer, const torch::Tensor& image,
                             const std::vector<double>& taus, const CorruptionConfig& config,
                             torch::Generator& gen);
torch::Tensor demasking_grid(Tokenizer& tokenizer, const torch::Tensor& image,
                             const std::vector<double>& ratios, torch::Generator& gen);

// Generator under test: batch of labels -> decoded images in [-1, 1].
using SampleImagesFn =
    std::function<torch::Tensor(const SamplerSettings&, const torch::Tensor& labels,
                                torch::Generator& gen)>;

struct CfgSweepResult {
    std::vector<std::pair<double, double>> scores;  // (cfg scale, fid proxy)
    double best_scale = 0.0;
};

CfgSweepResult cfg_sweep(const SampleImagesFn& sampler, const std::vector<double>& scales,
                         const SamplerSettings& base_settings, const FeatureStats& reference,
                         FidProxyExtractor& extractor, int64_t n_samples, int64_t n_classes,
                         uint64_t seed, int64_t batch_size = 32);

struct EvalReport {
    double psnr = 0.0;
    double recon_mse = 0.0;
    double rfid_proxy = 0.0;
    std::vector<std::pair<double, double>> fid_proxy_by_cfg;
    double best_cfg = 0.0;
    int64_t sample_count = 0;
    uint64_t seed = 0;
    std::string config_hash;
    bool is_proxy = true;

    nlohmann::json to_json() const;
};

}  // namespace detok
