#pragma once

#include <torch/torch.h>

#include <cstdint>
#include <string>
#include <string_view>

namespace detok {

// 64-bit FNV-1a; stable across platforms, unlike std::hash.
inline uint64_t fnv1a(std::string_view s, uint64_t h = 14695981039346656037ull) {
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ull;
    }
    return h;
}

inline uint64_t derive_seed(uint64_t global_seed, std::string_view stream_name) {
    uint64_t h = fnv1a(stream_name);
    h ^= global_seed + 0x9e3779b97f4a7c15ull + (h << 6) + (h >> 2);
    return h;
}

inline torch::Generator make_generator(uint64_t seed) {
    auto gen = at::detail::createCPUGenerator();
    gen.set_current_seed(seed);
    return gen;
}

// Named independent RNG streams. Disabling one corruption must not shift the
// draws of the others, so tau, noise and mask selection each own a stream.
struct RngStreams {
    torch::Generator tau;
    torch::Generator noise;
    torch::Generator mask;
    torch::Generator posterior;
    torch::Generator data;
    torch::Generator model;
    torch::Generator time;
    torch::Generator drop;
    torch::Generator sample;

    explicit RngStreams(uint64_t global_seed)
        : tau(make_generator(derive_seed(global_seed, "tau"))),
          noise(make_generator(derive_seed(global_seed, "noise"))),
          mask(make_generator(derive_seed(global_seed, "mask"))),
          posterior(make_generator(derive_seed(global_seed, "posterior"))),
          data(make_generator(derive_seed(global_seed, "data"))),
          model(make_generator(derive_seed(global_seed, "model"))),
          time(make_generator(derive_seed(global_seed, "time"))),
          drop(make_generator(derive_seed(global_seed, "drop"))),
          sample(make_generator(derive_seed(global_seed, "sample"))) {}
};

}  // namespace detok
