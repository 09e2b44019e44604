#pragma once

#include <torch/torch.h>

namespace corrdet {

/// Plain scaled dot-product multi-head attention over (B, L, d) tensors.
class MultiHeadAttentionImpl : public torch::nn::Module {
 public:
  MultiHeadAttentionImpl(int64_t d_model, int64_t heads);

  torch::Tensor forward(const torch::Tensor& query, const torch::Tensor& key, const torch::Tensor& value);

 private:
  int64_t d_model_;
  int64_t heads_;
  torch::nn::Linear q_proj_{nullptr};
  torch::nn::Linear k_proj_{nullptr};
  torch::nn::Linear v_proj_{nullptr};
  torch::nn::Linear out_proj_{nullptr};
};
TORCH_MODULE(MultiHeadAttention);

class FeedForwardImpl : public torch::nn::Module {
 public:
  FeedForwardImpl(int64_t d_model, int64_t hidden);
  torch::Tensor forward(const torch::Tensor& x);

 private:
  torch::nn::Linear fc1_{nullptr};
  torch::nn::Linear fc2_{nullptr};
};
TORCH_MODULE(FeedForward);

/// Pre-norm self-attention sublayer: x + Attn(LN(x) + pos, LN(x) + pos, LN(x)).
class SelfAttentionBlockImpl : public torch::nn::Module {
 public:
  SelfAttentionBlockImpl(int64_t d_model, int64_t heads);
  torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& pos);

 private:
  torch::nn::LayerNorm norm_{nullptr};
  MultiHeadAttention attn_{nullptr};
};
TORCH_MODULE(SelfAttentionBlock);

/// Standard encoder layer: self-attention sublayer followed by a pre-norm FFN.
class EncoderLayerImpl : public torch::nn::Module {
 public:
  EncoderLayerImpl(int64_t d_model, int64_t heads, int64_t ffn_dim);
  torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& pos);

 private:
  SelfAttentionBlock self_attn_{nullptr};
  torch::nn::LayerNorm ffn_norm_{nullptr};
  FeedForward ffn_{nullptr};
};
TORCH_MODULE(EncoderLayer);

/// Decoder layer: query self-attention, cross-attention into memory, FFN (all pre-norm).
/// `spatial_query` is the positional part of the cross-attention query.
class DecoderLayerImpl : public torch::nn::Module {
 public:
  DecoderLayerImpl(int64_t d_model, int64_t heads, int64_t ffn_dim);
  torch::Tensor forward(const torch::Tensor& tgt, const torch::Tensor& query_pos, const torch::Tensor& memory,
                        const torch::Tensor& memory_pos, const torch::Tensor& spatial_query);

 private:
  torch::nn::LayerNorm self_norm_{nullptr};
  MultiHeadAttention self_attn_{nullptr};
  torch::nn::LayerNorm cross_norm_{nullptr};
  MultiHeadAttention cross_attn_{nullptr};
  torch::nn::LayerNorm ffn_norm_{nullptr};
  FeedForward ffn_{nullptr};
};
TORCH_MODULE(DecoderLayer);

/// Sine encoding of normalised (x, y) points (..., 2) -> (..., d); first half of the
/// channels encodes y, second half x. Differentiable.
torch::Tensor point_position_encoding(const torch::Tensor& points, int64_t d);

/// point_position_encoding of the cell centres of an h x w grid -> (h*w, d).
torch::Tensor spatial_position_encoding(int64_t h, int64_t w, int64_t d, torch::Dtype dtype = torch::kFloat);

}  // namespace corrdet
