#pragma once

#include <json.hpp>
#include <string>
#include <vector>

#include "detok/corruption.hpp"
#include "detok/data.hpp"
#include "detok/gen_models.hpp"
#include "detok/losses.hpp"
#include "detok/tokenizer.hpp"
#include "detok/training.hpp"

namespace detok {

struct EvalConfig {
    int64_t fid_samples = 512;
    int64_t classifier_steps = 300;
    int64_t batch_size = 32;
    std::vector<double> cfg_scales = {1.0, 1.5, 2.0, 3.0, 4.0};
    int64_t denoise_steps = 50;
    int64_t ar_steps = 16;
    double temperature = 1.0;
    double t_start = 0.999;
};

struct IoConfig {
    std::string out = "runs/out";
    std::string tokenizer_ckpt;
    std::string gen_ckpt;
    std::string cache;
    std::string extractor_ckpt;
};

struct RunConfig {
    DatasetSpec data;
    TokenizerConfig tokenizer;
    CorruptionConfig corruption;
    LossWeights losses;
    GenModelConfig gen_model;
    TrainRecipe recipe;
    EvalConfig eval;
    IoConfig io;
    uint64_t seed = 0;
    bool deterministic = false;

    nlohmann::json resolved;  // canonical merged snapshot

    // Hex digest of the canonical (key-sorted) serialization; stable under
    // key reordering in the source file.
    std::string hash() const;
    // Hash of the tokenizer-affecting blocks only, for latent-cache pairing.
    std::string tokenizer_hash() const;
};

// Paper-style generative recipe: constant 2e-4, Adam-default betas, no decay.
TrainRecipe default_gen_recipe();

// Merge order: struct defaults <- config file <- dot-path overrides.
// Unknown keys and type mismatches are rejected with the offending path.
RunConfig resolve_config(const std::string& config_path,
                         const std::vector<std::string>& overrides,
                         bool gen_recipe_defaults = false);

// "a.b.c=value" applied onto a json tree; value parsed as a JSON literal when
// possible, otherwise taken as a string.
void apply_override(nlohmann::json& tree, const std::string& assignment);

}  // namespace detok
