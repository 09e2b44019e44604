#pragma once

#include <vector>

#include <torch/torch.h>

#include "corrdet/targetgen.hpp"

namespace corrdet {

struct LossWeights {
  double w_cls = 2.0;
  double w_l1 = 5.0;
  double w_giou = 2.0;
  double w_proto = 1.0;
  double focal_alpha = 0.25;
  double focal_gamma = 2.0;
  double proto_temperature = 0.05;

  /// Throws kInvalidConfig on negative/non-finite weights or alpha outside [0,1].
  void validate() const;
};

struct FocalLoss {
  torch::Tensor per_element;  // same shape as the logits
  torch::Tensor sum;          // scalar
};

/// -alpha_t (1 - p_t)^gamma log(p_t) with p = sigmoid(logit), computed from the
/// log-sigmoid form so saturated logits stay finite.
FocalLoss sigmoid_focal_loss(const torch::Tensor& logits, const torch::Tensor& targets, double alpha,
                             double gamma);

struct BoxLoss {
  torch::Tensor l1;    // sum |pred - target| over cx, cy, w, h (per box)
  torch::Tensor giou;  // 1 - giou (per box)
};

/// pred/target: (..., 4) cxcywh.
BoxLoss box_loss(const torch::Tensor& pred, const torch::Tensor& target);

/// One decoder layer's predictions for a batch of query images.
struct LayerPrediction {
  torch::Tensor logits;  // (B, N, C)
  torch::Tensor boxes;   // (B, N, 4) cxcywh in (0,1)
};

/// One entry per decoder layer; the last entry is the final prediction.
using PredictionSet = std::vector<LayerPrediction>;

/// sigma[i] is the prediction slot assigned to target slot i.
struct Assignment {
  std::vector<int> sigma;
  double total_cost = 0.0;
};

struct LossBreakdown {
  torch::Tensor total;  // weighted sum (detection terms only, unless proto added later)
  torch::Tensor cls;    // unweighted, summed over decoder layers
  torch::Tensor l1;
  torch::Tensor giou;
};

/// assignments[layer][image]. Terms are normalised by the number of non-empty
/// targets in the batch (at least 1) and summed across decoder layers.
LossBreakdown detection_loss(const PredictionSet& preds, const std::vector<DetectionTargets>& targets,
                             const std::vector<std::vector<Assignment>>& assignments, const LossWeights& weights);

/// Cosine-similarity cross-entropy classifying each prototype among all class
/// embeddings. prototypes (C, d), labels (C) int64 global ids, class_embeddings (M, d).
torch::Tensor prototype_class_loss(const torch::Tensor& prototypes, const torch::Tensor& labels,
                                   const torch::Tensor& class_embeddings, double temperature);

}  // namespace corrdet
