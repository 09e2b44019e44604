#pragma once

#include <torch/torch.h>

#include "corrdet/geometry.hpp"
#include "corrdet/losses.hpp"
#include "corrdet/targetgen.hpp"

namespace corrdet {

/// Focal-consistent classification cost for a single logit:
/// alpha (1-p)^gamma (-log p) - (1-alpha) p^gamma (-log(1-p)).
double focal_match_cost(double logit, double alpha, double gamma);

/// Square cost matrix; entry (i, j) pairs target slot i with prediction slot j.
/// Rows of empty targets are zero. logits (N, C), boxes (N, 4) for one image.
Matrix match_cost(const DetectionTargets& targets, const torch::Tensor& logits, const torch::Tensor& boxes,
                  const LossWeights& weights);

/// Minimum-cost perfect matching on a square matrix (shortest augmenting path,
/// O(N^3)). Throws kNonFiniteCost on NaN/inf entries.
Assignment hungarian_match(const Matrix& cost);

/// Matches every image of every decoder layer; result indexed [layer][image].
std::vector<std::vector<Assignment>> match_all_layers(const PredictionSet& preds,
                                                      const std::vector<DetectionTargets>& targets,
                                                      const LossWeights& weights);

}  // namespace corrdet
