#include "corrdet/layers.hpp"

#include <cmath>

namespace corrdet {

MultiHeadAttentionImpl::MultiHeadAttentionImpl(int64_t d_model, int64_t heads) : d_model_(d_model), heads_(heads) {
  TORCH_CHECK(d_model % heads == 0, "d_model must be divisible by heads");
  q_proj_ = register_module("q_proj", torch::nn::Linear(d_model, d_model));
  k_proj_ = register_module("k_proj", torch::nn::Linear(d_model, d_model));
  v_proj_ = register_module("v_proj", torch::nn::Linear(d_model, d_model));
  out_proj_ = register_module("out_proj", torch::nn::Linear(d_model, d_model));
  for (auto* lin : {&q_proj_, &k_proj_, &v_proj_, &out_proj_}) {
    torch::nn::init::xavier_uniform_((*lin)->weight);
    torch::nn::init::zeros_((*lin)->bias);
  }
}

torch::Tensor MultiHeadAttentionImpl::forward(const torch::Tensor& query, const torch::Tensor& key,
                                              const torch::Tensor& value) {
  const int64_t b = query.size(0);
  const int64_t lq = query.size(1);
  const int64_t lk = key.size(1);
  const int64_t hd = d_model_ / heads_;
  auto q = q_proj_(query).view({b, lq, heads_, hd}).transpose(1, 2);
  auto k = k_proj_(key).view({b, lk, heads_, hd}).transpose(1, 2);
  auto v = v_proj_(value).view({b, lk, heads_, hd}).transpose(1, 2);
  auto weights = torch::softmax(q.matmul(k.transpose(-2, -1)) / std::sqrt(static_cast<double>(hd)), -1);
  auto out = weights.matmul(v).transpose(1, 2).reshape({b, lq, d_model_});
  return out_proj_(out);
}

FeedForwardImpl::FeedForwardImpl(int64_t d_model, int64_t hidden) {
  fc1_ = register_module("fc1", torch::nn::Linear(d_model, hidden));
  fc2_ = register_module("fc2", torch::nn::Linear(hidden, d_model));
}

torch::Tensor FeedForwardImpl::forward(const torch::Tensor& x) { return fc2_(torch::relu(fc1_(x))); }

SelfAttentionBlockImpl::SelfAttentionBlockImpl(int64_t d_model, int64_t heads) {
  norm_ = register_module("norm", torch::nn::LayerNorm(torch::nn::LayerNormOptions({d_model})));
  attn_ = register_module("attn", MultiHeadAttention(d_model, heads));
}

torch::Tensor SelfAttentionBlockImpl::forward(const torch::Tensor& x, const torch::Tensor& pos) {
  auto h = norm_(x);
  auto qk = h + pos;
  return x + attn_(qk, qk, h);
}

EncoderLayerImpl::EncoderLayerImpl(int64_t d_model, int64_t heads, int64_t ffn_dim) {
  self_attn_ = register_module("self_attn", SelfAttentionBlock(d_model, heads));
  ffn_norm_ = register_module("ffn_norm", torch::nn::LayerNorm(torch::nn::LayerNormOptions({d_model})));
  ffn_ = register_module("ffn", FeedForward(d_model, ffn_dim));
}

torch::Tensor EncoderLayerImpl::forward(const torch::Tensor& x, const torch::Tensor& pos) {
  auto h = self_attn_(x, pos);
  return h + ffn_(ffn_norm_(h));
}

DecoderLayerImpl::DecoderLayerImpl(int64_t d_model, int64_t heads, int64_t ffn_dim) {
  self_norm_ = register_module("self_norm", torch::nn::LayerNorm(torch::nn::LayerNormOptions({d_model})));
  self_attn_ = register_module("self_attn", MultiHeadAttention(d_model, heads));
  cross_norm_ = register_module("cross_norm", torch::nn::LayerNorm(torch::nn::LayerNormOptions({d_model})));
  cross_attn_ = register_module("cross_attn", MultiHeadAttention(d_model, heads));
  ffn_norm_ = register_module("ffn_norm", torch::nn::LayerNorm(torch::nn::LayerNormOptions({d_model})));
  ffn_ = register_module("ffn", FeedForward(d_model, ffn_dim));
}

torch::Tensor DecoderLayerImpl::forward(const torch::Tensor& tgt, const torch::Tensor& query_pos,
                                        const torch::Tensor& memory, const torch::Tensor& memory_pos,
                                        const torch::Tensor& spatial_query) {
  auto h = self_norm_(tgt);
  auto qk = h + query_pos;
  auto x = tgt + self_attn_(qk, qk, h);
  x = x + cross_attn_(cross_norm_(x) + spatial_query, memory + memory_pos, memory);
  return x + ffn_(ffn_norm_(x));
}

torch::Tensor point_position_encoding(const torch::Tensor& points, int64_t d) {
  TORCH_CHECK(d % 4 == 0, "position encoding needs d divisible by 4");
  TORCH_CHECK(points.size(-1) == 2, "points must be (..., 2) as (x, y)");
  const int64_t n = d / 4;
  // Geometric frequencies from one to kMaxCycles cycles per unit length.
  constexpr double kMaxCycles = 8.0;
  auto k = torch::arange(n, points.options());
  auto freq = torch::pow(torch::full({}, kMaxCycles, points.options()), k / std::max<int64_t>(n - 1, 1)) * (2.0 * M_PI);
  auto encode = [&](const torch::Tensor& v) {
    auto angle = v.unsqueeze(-1) * freq;
    return torch::stack({angle.sin(), angle.cos()}, -1).flatten(-2);
  };
  return torch::cat({encode(points.select(-1, 1)), encode(points.select(-1, 0))}, -1);
}

torch::Tensor spatial_position_encoding(int64_t h, int64_t w, int64_t d, torch::Dtype dtype) {
  auto opts = torch::TensorOptions().dtype(torch::kDouble);
  auto ys = (torch::arange(h, opts) + 0.5) / static_cast<double>(h);
  auto xs = (torch::arange(w, opts) + 0.5) / static_cast<double>(w);
  auto grid = torch::stack(torch::meshgrid({ys, xs}, "ij"), -1).flip(-1);
  return point_position_encoding(grid.reshape({h * w, 2}), d).to(dtype);
}

}  // namespace corrdet
