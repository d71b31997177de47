#pragma once

#include <torch/torch.h>

#include <json.hpp>
#include <map>
#include <string>

namespace detok {

// Versioned single-file container: JSON metadata plus named tensors,
// little-endian raw storage.
struct Checkpoint {
    nlohmann::json meta = nlohmann::json::object();
    std::map<std::string, torch::Tensor> tensors;
};

void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::string& path);

// Copy module parameters and buffers into / out of a checkpoint under
// "<prefix>.<name>" keys. Loading is strict: every key must exist with a
// matching shape and any extra key under the prefix is an error.
void store_module(Checkpoint& ckpt, const std::string& prefix, const torch::nn::Module& module);
void load_module(const Checkpoint& ckpt, const std::string& prefix, torch::nn::Module& module);

// Full optimizer state (steps, moments) as an opaque byte tensor.
torch::Tensor serialize_optimizer(const torch::optim::Optimizer& optimizer);
void deserialize_optimizer(const torch::Tensor& bytes, torch::optim::Optimizer& optimizer);

// RNG engine state as a byte tensor.
torch::Tensor generator_state(const torch::Generator& gen);
void set_generator_state(torch::Generator& gen, const torch::Tensor& state);

}  // namespace detok
