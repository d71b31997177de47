#pragma once

#include <torch/torch.h>

#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "detok/checkpoint.hpp"
#include "detok/corruption.hpp"
#include "detok/data.hpp"
#include "detok/gen_models.hpp"
#include "detok/losses.hpp"
#include "detok/rng.hpp"
#include "detok/tokenizer.hpp"

namespace detok {

enum class LrPolicy { WarmupCosine, Constant };

struct TrainRecipe {
    int64_t epochs = 1;
    int64_t batch_size = 128;
    double peak_lr = 2e-4;  // 4e-4 * batch/256 for the tokenizer, 2e-4 constant for gen
    LrPolicy lr_policy = LrPolicy::WarmupCosine;
    double warmup_fraction = 0.25;
    double beta1 = 0.9;
    double beta2 = 0.95;
    double weight_decay = 1e-4;
    double ema_decay = 0.9999;
    std::optional<double> grad_clip;
    int64_t checkpoint_every_epochs = 1;
    int64_t log_every_steps = 50;

    void validate() const;
};

// Warmup-cosine: linear 0 -> peak over warmup_fraction of the run, then cosine
// peak -> 0; continuous at the junction. Constant: peak everywhere.
double learning_rate(const TrainRecipe& recipe, int64_t step, int64_t total_steps);

struct LatentStats {
    torch::Tensor mean;  // [C]
    torch::Tensor std;   // [C], floored at 1e-8
    std::string source_dataset_id;
    std::vector<int64_t> degenerate_channels;  // std <= 1e-8 before flooring
};

torch::Tensor standardize(const torch::Tensor& tokens, const LatentStats& stats);
torch::Tensor unstandardize(const torch::Tensor& tokens, const LatentStats& stats);

// EMA copy of a module's parameters; never part of any autograd graph.
struct EmaShadow {
    std::vector<std::string> names;
    std::vector<torch::Tensor> values;

    static EmaShadow from_module(const torch::nn::Module& module);
    void update(const torch::nn::Module& module, double decay);
    void copy_to(torch::nn::Module& module) const;
};

// shadow <- decay * shadow + (1 - decay) * params, elementwise over the tree.
void ema_update(EmaShadow& shadow, const torch::nn::Module& module, double decay);

// Per-step tokenizer training: mask -> encode visible -> posterior sample ->
// noise interpolation -> decode -> weighted loss -> optimizer + EMA.
// Corruptions with zeroed knobs (gamma = 0, max_mask_ratio = 0) are skipped
// entirely so the step collapses bitwise onto the plain-autoencoder path.
class TokenizerTrainer {
   public:
    TokenizerTrainer(const TokenizerConfig& tok_config, const CorruptionConfig& corr_config,
                     const LossWeights& weights, const TrainRecipe& recipe, uint64_t seed);

    LossBreakdown train_step(const torch::Tensor& images, double progress);

    // Epoch loop over the dataset; checkpoints under out_dir when non-empty.
    void run(const ImageFolderDataset& data, const std::string& out_dir);

    // Decoder-only fine-tuning on clean latents: encoder frozen, corruption off.
    void finetune_decoder(const ImageFolderDataset& data, int64_t epochs,
                          const std::string& out_dir);

    Checkpoint to_checkpoint() const;
    void from_checkpoint(const Checkpoint& ckpt);

    Tokenizer& tokenizer() { return tok_; }
    const TokenizerConfig& tokenizer_config() const { return tok_config_; }
    const CorruptionConfig& corruption_config() const { return corr_config_; }
    RngStreams& rng() { return rng_; }
    EmaShadow& ema() { return ema_; }
    int64_t step_count() const { return step_; }

    // Tokenizer with EMA weights applied, for caching and evaluation.
    Tokenizer ema_tokenizer() const;

   private:
    LossBreakdown compute_losses(const torch::Tensor& images, double progress,
                                 bool corrupt, bool train_encoder);

    TokenizerConfig tok_config_;
    CorruptionConfig corr_config_;
    LossWeights weights_;
    TrainRecipe recipe_;
    uint64_t seed_;
    Tokenizer tok_{nullptr};
    PatchDiscriminator disc_{nullptr};
    std::unique_ptr<ConvPyramidExtractor> percep_;
    std::unique_ptr<torch::optim::AdamW> opt_tok_;
    std::unique_ptr<torch::optim::AdamW> opt_disc_;
    EmaShadow ema_;
    RngStreams rng_;
    int64_t step_ = 0;
    std::string diagnostic_dir_;
};

// Deterministic posterior means, one streaming pass, per-channel moments.
LatentStats compute_latent_stats(Tokenizer& tokenizer, const ImageFolderDataset& data,
                                 int64_t batch_size = 64);

// Posterior means and log-variances for every image plus horizontal-flip
// variants, stored in the checkpoint container keyed by the tokenizer hash.
void cache_latents(Tokenizer& tokenizer, const ImageFolderDataset& data,
                   const LatentStats& stats, const std::string& tokenizer_hash,
                   const std::string& store_path, int64_t batch_size = 64);

struct LatentCache {
    torch::Tensor mean, logvar;            // [N, n_tokens, C]
    torch::Tensor mean_flip, logvar_flip;  // flip variants, same shapes
    torch::Tensor labels;                  // [N]
    LatentStats stats;
    std::string tokenizer_hash;

    static LatentCache load(const std::string& path, const std::string& expected_hash);

    // Standardized sampled latents plus labels; flip variant with prob 0.5.
    std::pair<torch::Tensor, torch::Tensor> batch(const std::vector<int64_t>& indices,
                                                  torch::Generator& gen,
                                                  bool sample_posterior_noise,
                                                  bool augment_flip) const;
};

// Family-dispatching generative trainer: constant LR, no decay or clipping.
class GenTrainer {
   public:
    GenTrainer(const GenModelConfig& config, const TrainRecipe& recipe, uint64_t seed);

    torch::Tensor train_step(const torch::Tensor& x0, const torch::Tensor& labels);
    void run(const LatentCache& cache, const std::string& out_dir);

    Checkpoint to_checkpoint() const;
    void from_checkpoint(const Checkpoint& ckpt);

    const GenModelConfig& config() const { return config_; }
    FlowModel& flow() { return flow_; }
    ArModel& ar() { return ar_; }
    torch::nn::Module& model();
    const torch::nn::Module& model() const;
    void apply_ema_weights();
    RngStreams& rng() { return rng_; }
    ClassDropStats& drop_stats() { return drop_stats_; }
    int64_t step_count() const { return step_; }

   private:
    GenModelConfig config_;
    TrainRecipe recipe_;
    uint64_t seed_;
    FlowModel flow_{nullptr};
    ArModel ar_{nullptr};
    std::unique_ptr<torch::optim::AdamW> opt_;
    EmaShadow ema_;
    RngStreams rng_;
    ClassDropStats drop_stats_;
    int64_t step_ = 0;
};

}  // namespace detok
