#include "corrdet/losses.hpp"

#include <cmath>
#include <set>

#include "corrdet/geometry.hpp"

namespace corrdet {

void LossWeights::validate() const {
  for (double w : {w_cls, w_l1, w_giou, w_proto, focal_gamma}) {
    if (!std::isfinite(w) || w < 0.0) throw Error(Errc::kInvalidConfig, "loss weights must be finite and >= 0");
  }
  if (!(focal_alpha >= 0.0 && focal_alpha <= 1.0)) throw Error(Errc::kInvalidConfig, "focal_alpha outside [0,1]");
  if (!(proto_temperature > 0.0) || !std::isfinite(proto_temperature)) {
    throw Error(Errc::kInvalidConfig, "proto_temperature must be positive");
  }
}

FocalLoss sigmoid_focal_loss(const torch::Tensor& logits, const torch::Tensor& targets, double alpha,
                             double gamma) {
  TORCH_CHECK(logits.sizes() == targets.sizes(), "focal loss: logits and targets differ in shape");
  auto t = targets.to(logits.dtype());
  // log p and log(1 - p) without forming p near 0 or 1.
  auto log_p = torch::log_sigmoid(logits);
  auto log_not_p = torch::log_sigmoid(-logits);
  auto ce = -(t * log_p + (1.0 - t) * log_not_p);
  auto p = torch::sigmoid(logits);
  auto p_t = p * t + (1.0 - p) * (1.0 - t);
  auto modulator = gamma == 0.0 ? torch::ones_like(p_t) : (1.0 - p_t).pow(gamma);
  auto alpha_t = alpha * t + (1.0 - alpha) * (1.0 - t);
  auto per_element = alpha_t * modulator * ce;
  return {per_element, per_element.sum()};
}

BoxLoss box_loss(const torch::Tensor& pred, const torch::Tensor& target) {
  auto l1 = (pred - target).abs().sum(-1);
  auto g = tensor::giou(tensor::cxcywh_to_xyxy(pred), tensor::cxcywh_to_xyxy(target));
  return {l1, 1.0 - g};
}

namespace {

void check_permutation(const std::vector<int>& sigma, std::size_t n) {
  if (sigma.size() != n) throw Error(Errc::kAssignmentInvalid, "assignment length differs from slot count");
  std::vector<char> seen(n, 0);
  for (int s : sigma) {
    if (s < 0 || static_cast<std::size_t>(s) >= n || seen[static_cast<std::size_t>(s)]) {
      throw Error(Errc::kAssignmentInvalid, "assignment is not a permutation");
    }
    seen[static_cast<std::size_t>(s)] = 1;
  }
}

}  // namespace

LossBreakdown detection_loss(const PredictionSet& preds, const std::vector<DetectionTargets>& targets,
                             const std::vector<std::vector<Assignment>>& assignments, const LossWeights& weights) {
  TORCH_CHECK(!preds.empty(), "detection_loss: empty prediction set");
  if (assignments.size() != preds.size()) throw Error(Errc::kAssignmentInvalid, "one assignment set per layer");
  const auto opts = preds.front().logits.options();
  const int64_t batch = preds.front().logits.size(0);
  const int64_t slots = preds.front().logits.size(1);
  const int64_t classes = preds.front().logits.size(2);
  if (static_cast<int64_t>(targets.size()) != batch) throw Error(Errc::kShapeMismatch, "targets per image");

  std::size_t num_objects = 0;
  for (const auto& t : targets) num_objects += t.num_objects();
  const double norm = static_cast<double>(std::max<std::size_t>(num_objects, 1));

  auto cls_sum = torch::zeros({}, opts);
  auto l1_sum = torch::zeros({}, opts);
  auto giou_sum = torch::zeros({}, opts);
  for (std::size_t layer = 0; layer < preds.size(); ++layer) {
    const auto& lp = preds[layer];
    if (static_cast<int64_t>(assignments[layer].size()) != batch) {
      throw Error(Errc::kAssignmentInvalid, "one assignment per image");
    }
    auto cls_target = torch::zeros({batch, slots, classes}, opts);
    std::vector<int64_t> box_img;
    std::vector<int64_t> box_slot;
    std::vector<double> box_vals;
    for (int64_t b = 0; b < batch; ++b) {
      const auto& sigma = assignments[layer][static_cast<std::size_t>(b)].sigma;
      const auto& tg = targets[static_cast<std::size_t>(b)];
      if (static_cast<int64_t>(tg.slots()) != slots) throw Error(Errc::kShapeMismatch, "target slots differ from N");
      check_permutation(sigma, tg.slots());
      for (std::size_t i = 0; i < tg.slots(); ++i) {
        if (tg.empty_slot(i)) continue;
        const int64_t pred_slot = sigma[i];
        cls_target.index_put_({b, pred_slot, tg.labels[i] - 1}, 1.0);
        box_img.push_back(b);
        box_slot.push_back(pred_slot);
        const Box& bx = *tg.boxes[i];
        box_vals.insert(box_vals.end(), {bx.cx, bx.cy, bx.w, bx.h});
      }
    }
    cls_sum = cls_sum + sigmoid_focal_loss(lp.logits, cls_target, weights.focal_alpha, weights.focal_gamma).sum / norm;
    if (!box_img.empty()) {
      auto idx_b = torch::tensor(box_img, torch::kLong);
      auto idx_s = torch::tensor(box_slot, torch::kLong);
      auto matched = lp.boxes.index({idx_b, idx_s});
      auto tgt = torch::tensor(box_vals, torch::kDouble).view({-1, 4}).to(opts.dtype());
      auto bl = box_loss(matched, tgt);
      l1_sum = l1_sum + bl.l1.sum() / norm;
      giou_sum = giou_sum + bl.giou.sum() / norm;
    }
  }
  auto total = weights.w_cls * cls_sum + weights.w_l1 * l1_sum + weights.w_giou * giou_sum;
  return {total, cls_sum, l1_sum, giou_sum};
}

torch::Tensor prototype_class_loss(const torch::Tensor& prototypes, const torch::Tensor& labels,
                                   const torch::Tensor& class_embeddings, double temperature) {
  TORCH_CHECK(prototypes.dim() == 2 && class_embeddings.dim() == 2 &&
                  prototypes.size(1) == class_embeddings.size(1),
              "prototype_class_loss: dimension mismatch");
  auto p = torch::nn::functional::normalize(prototypes, torch::nn::functional::NormalizeFuncOptions().dim(1));
  auto e = torch::nn::functional::normalize(class_embeddings, torch::nn::functional::NormalizeFuncOptions().dim(1));
  auto scores = p.matmul(e.t()) / temperature;
  return torch::nn::functional::cross_entropy(scores, labels.to(torch::kLong));
}

}  // namespace corrdet
