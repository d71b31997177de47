#include "detok/transformer.hpp"

namespace detok {

RmsNormImpl::RmsNormImpl(int64_t dim, double eps) : eps(eps) {
    weight = register_parameter("weight", torch::ones({dim}));
}

torch::Tensor RmsNormImpl::forward(const torch::Tensor& x) {
    auto scale = torch::rsqrt(x.pow(2).mean(-1, /*keepdim=*/true) + eps);
    return x * scale * weight;
}

SwiGluFfnImpl::SwiGluFfnImpl(int64_t hidden) {
    const int64_t inner = swiglu_hidden(hidden);
    gate = register_module("gate", torch::nn::Linear(torch::nn::LinearOptions(hidden, inner).bias(false)));
    up = register_module("up", torch::nn::Linear(torch::nn::LinearOptions(hidden, inner).bias(false)));
    down = register_module("down", torch::nn::Linear(torch::nn::LinearOptions(inner, hidden).bias(false)));
}

torch::Tensor SwiGluFfnImpl::forward(const torch::Tensor& x) {
    return down->forward(torch::silu(gate->forward(x)) * up->forward(x));
}

RopeFreqs rope_freqs_2d(const torch::Tensor& pos_ids, int64_t grid_w, int64_t head_dim,
                        torch::Dtype dtype, double base) {
    TORCH_CHECK(head_dim % 4 == 0, "rope_freqs_2d: head_dim must be divisible by 4");
    const int64_t quarter = head_dim / 4;

    auto opts = torch::TensorOptions().dtype(dtype);
    auto k = torch::arange(quarter, opts);
    auto inv_freq = torch::pow(base, -k / static_cast<double>(quarter));  // [quarter]

    auto rows = (pos_ids / grid_w).to(dtype);  // [B, N]
    auto cols = (pos_ids % grid_w).to(dtype);

    auto row_angles = rows.unsqueeze(-1) * inv_freq;  // [B, N, quarter]
    auto col_angles = cols.unsqueeze(-1) * inv_freq;
    auto angles = torch::cat({row_angles, col_angles}, -1);  // [B, N, head_dim/2]
    return {angles.cos(), angles.sin()};
}

torch::Tensor apply_rope(const torch::Tensor& x, const RopeFreqs& freqs) {
    // x: [B, H, N, D]; freqs: [B or 1, N, D/2], broadcast over heads.
    auto cos = freqs.cos.unsqueeze(1);
    auto sin = freqs.sin.unsqueeze(1);
    auto x1 = x.index({torch::indexing::Ellipsis, torch::indexing::Slice(0, torch::indexing::None, 2)});
    auto x2 = x.index({torch::indexing::Ellipsis, torch::indexing::Slice(1, torch::indexing::None, 2)});
    auto out = torch::stack({x1 * cos - x2 * sin, x1 * sin + x2 * cos}, -1);
    return out.flatten(-2);
}

AttentionImpl::AttentionImpl(int64_t hidden, int64_t heads, bool causal)
    : heads(heads), causal(causal) {
    TORCH_CHECK(hidden % heads == 0, "Attention: hidden must be divisible by heads");
    qkv = register_module("qkv", torch::nn::Linear(torch::nn::LinearOptions(hidden, 3 * hidden).bias(false)));
    proj = register_module("proj", torch::nn::Linear(torch::nn::LinearOptions(hidden, hidden).bias(false)));
}

torch::Tensor AttentionImpl::forward(const torch::Tensor& x, const std::optional<RopeFreqs>& rope) {
    const int64_t B = x.size(0), N = x.size(1), C = x.size(2);
    const int64_t head_dim = C / heads;
    auto qkv_out = qkv->forward(x).reshape({B, N, 3, heads, head_dim}).permute({2, 0, 3, 1, 4});
    auto q = qkv_out[0], k = qkv_out[1], v = qkv_out[2];  // [B, H, N, D]
    if (rope) {
        q = apply_rope(q, *rope);
        k = apply_rope(k, *rope);
    }
    auto out = at::scaled_dot_product_attention(q, k, v, {}, 0.0, causal);
    out = out.transpose(1, 2).reshape({B, N, C});
    return proj->forward(out);
}

BlockImpl::BlockImpl(int64_t hidden, int64_t heads, bool causal) {
    norm1 = register_module("norm1", RmsNorm(hidden));
    norm2 = register_module("norm2", RmsNorm(hidden));
    attn = register_module("attn", Attention(hidden, heads, causal));
    ffn = register_module("ffn", SwiGluFfn(hidden));
}

torch::Tensor BlockImpl::forward(const torch::Tensor& x, const std::optional<RopeFreqs>& rope) {
    auto h = x + attn->forward(norm1->forward(x), rope);
    return h + ffn->forward(norm2->forward(h));
}

}  // namespace detok
