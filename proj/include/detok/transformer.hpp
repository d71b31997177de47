#pragma once

#include <torch/torch.h>

#include <optional>
#include <utility>

namespace detok {

// SwiGLU expansion 8/3 * hidden, rounded up to a multiple of 32.
inline int64_t swiglu_hidden(int64_t hidden) {
    int64_t h = (8 * hidden + 2) / 3;
    return (h + 31) / 32 * 32;
}

struct RmsNormImpl : torch::nn::Module {
    explicit RmsNormImpl(int64_t dim, double eps = 1e-6);
    torch::Tensor forward(const torch::Tensor& x);

    torch::Tensor weight;
    double eps;
};
TORCH_MODULE(RmsNorm);

struct SwiGluFfnImpl : torch::nn::Module {
    explicit SwiGluFfnImpl(int64_t hidden);
    torch::Tensor forward(const torch::Tensor& x);

    torch::nn::Linear gate{nullptr}, up{nullptr}, down{nullptr};
};
TORCH_MODULE(SwiGluFfn);

// Axial 2-D rotary embedding: the first half of each head rotates with the
// row coordinate, the second half with the column coordinate.
struct RopeFreqs {
    torch::Tensor cos;  // [batch or 1, n_tokens, head_dim/2]
    torch::Tensor sin;
};

// pos_ids: int64 [batch, n_tokens] flattened grid indices (row * grid_w + col).
RopeFreqs rope_freqs_2d(const torch::Tensor& pos_ids, int64_t grid_w, int64_t head_dim,
                        torch::Dtype dtype, double base = 100.0);

// x: [batch, heads, n_tokens, head_dim]
torch::Tensor apply_rope(const torch::Tensor& x, const RopeFreqs& freqs);

struct AttentionImpl : torch::nn::Module {
    AttentionImpl(int64_t hidden, int64_t heads, bool causal = false);
    torch::Tensor forward(const torch::Tensor& x, const std::optional<RopeFreqs>& rope = {});

    torch::nn::Linear qkv{nullptr}, proj{nullptr};
    int64_t heads;
    bool causal;
};
TORCH_MODULE(Attention);

// Pre-norm transformer block: RMSNorm + attention, RMSNorm + SwiGLU FFN.
struct BlockImpl : torch::nn::Module {
    BlockImpl(int64_t hidden, int64_t heads, bool causal = false);
    torch::Tensor forward(const torch::Tensor& x, const std::optional<RopeFreqs>& rope = {});

    RmsNorm norm1{nullptr}, norm2{nullptr};
    Attention attn{nullptr};
    SwiGluFfn ffn{nullptr};
};
TORCH_MODULE(Block);

}  // namespace detok
