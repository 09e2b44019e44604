#pragma once

#include <vector>

#include <torch/torch.h>

#include "corrdet/core.hpp"
#include "corrdet/layers.hpp"

namespace corrdet {

/// (C+1, d) task encodings: row 0 is the all-zero background encoding, row p >= 1
/// holds (sin(p / 10000^(2k/d)), cos(p / 10000^(2k/d))) in dims (2k, 2k+1).
/// Throws kOddDimension for odd d.
torch::Tensor make_task_encodings(int64_t num_classes, int64_t d, torch::Dtype dtype = torch::kFloat);

/// Row 0 is the learnable background prototype, rows 1..C follow `classes`.
struct ClassPrototypes {
  torch::Tensor matrix;
  std::vector<ClassId> classes;

  int64_t num_classes() const { return static_cast<int64_t>(classes.size()); }
};

struct CamOptions {
  int64_t d_model = 128;
  int64_t heads = 8;
  int64_t ffn_dim = 512;
  int64_t pool_grid = 7;
  bool apply_sigmoid = true;
  bool query_multiply = true;
  bool model_background = true;
  /// Throw kEmptyRegion instead of falling back to the nearest feature cell.
  bool strict_regions = false;
};

struct MatchResult {
  torch::Tensor coefficients;  // A: (B, HW, C+1), rows sum to one
  torch::Tensor filtered;      // Q_F: (B, HW, d)
  torch::Tensor encodings;     // Q_E: (B, HW, d); undefined until encoding_match
};

/// Per-cell weights that average a pool_grid x pool_grid bilinear (RoIAlign, aligned)
/// sampling of `box` over an h x w feature grid. Returns (h*w) doubles summing to 1.
std::vector<double> region_pool_weights(const Box& box, int64_t h, int64_t w, int64_t grid, bool strict);

/// Correlational aggregation of a query feature map with all support classes at
/// once: a weight-shared attention encoder, prototype pooling, feature matching,
/// encoding matching, and the output FFN.
class CamImpl : public torch::nn::Module {
 public:
  explicit CamImpl(const CamOptions& options);

  const CamOptions& options() const { return options_; }

  /// Shared-weight attention sublayer applied to query or support features (B, HW, d).
  torch::Tensor encode(const torch::Tensor& features, const torch::Tensor& pos);

  /// Pools one encoded support map (HW, d) over `box` -> (d).
  torch::Tensor pool_region(const torch::Tensor& encoded, int64_t h, int64_t w, const Box& box) const;

  /// Prepends the background prototype: (C, d) -> (C+1, d).
  torch::Tensor with_background(const torch::Tensor& class_prototypes) const;

  /// A = softmax((Q W)(S W)^T / sqrt(d)), Q_F = (A sigmoid(S)) * Q.
  /// query (B, HW, d), prototypes (B, C+1, d) or (C+1, d).
  MatchResult feature_match(const torch::Tensor& query, const torch::Tensor& prototypes);

  /// Q_E = A T.
  torch::Tensor encoding_match(const torch::Tensor& coefficients, const torch::Tensor& task_encodings) const;

  /// features (B, HW, d) un-encoded query map, prototypes (B, C+1, d) or (C+1, d) with
  /// background row first, task_encodings (C+1, d). Output (B, HW, d).
  torch::Tensor forward(const torch::Tensor& features, const torch::Tensor& pos, const torch::Tensor& prototypes,
                        const torch::Tensor& task_encodings);

  /// Forward that also returns the match (coefficients in canonical class order).
  torch::Tensor forward_with_match(const torch::Tensor& features, const torch::Tensor& pos,
                                   const torch::Tensor& prototypes, const torch::Tensor& task_encodings,
                                   MatchResult* match);

  torch::Tensor background_prototype() const { return background_; }

 private:
  CamOptions options_;
  SelfAttentionBlock shared_encoder_{nullptr};
  torch::nn::Linear projection_{nullptr};
  torch::Tensor background_;
  torch::nn::LayerNorm ffn_norm_{nullptr};
  FeedForward ffn_{nullptr};
};
TORCH_MODULE(Cam);

/// Orders classes 1..C by their task-encoding rows so reductions over classes run
/// in a fixed order. Returns indices into rows of `task_encodings`, background first.
std::vector<int64_t> canonical_class_order(const torch::Tensor& task_encodings);

/// Single-class aggregation used when correlational aggregation is disabled:
/// Linear([Q*s, Q-s, Q]) followed by a pre-norm FFN, one support class per pass.
class ClasswiseAggregatorImpl : public torch::nn::Module {
 public:
  ClasswiseAggregatorImpl(int64_t d_model, int64_t heads, int64_t ffn_dim, int64_t pool_grid);

  torch::Tensor encode(const torch::Tensor& features, const torch::Tensor& pos);
  torch::Tensor pool_region(const torch::Tensor& encoded, int64_t h, int64_t w, const Box& box) const;
  /// features (B, HW, d), prototype (B, d) or (d) -> (B, HW, d).
  torch::Tensor forward(const torch::Tensor& features, const torch::Tensor& pos, const torch::Tensor& prototype);

 private:
  int64_t pool_grid_;
  SelfAttentionBlock shared_encoder_{nullptr};
  torch::nn::Linear fuse_{nullptr};
  torch::nn::LayerNorm ffn_norm_{nullptr};
  FeedForward ffn_{nullptr};
};
TORCH_MODULE(ClasswiseAggregator);

}  // namespace corrdet
