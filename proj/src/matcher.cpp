#include "corrdet/matcher.hpp"

#include <cmath>
#include <limits>

namespace corrdet {

namespace {

double softplus(double x) { return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }

}  // namespace

double focal_match_cost(double logit, double alpha, double gamma) {
  const double p = 1.0 / (1.0 + std::exp(-logit));
  const double neg_log_p = softplus(-logit);
  const double neg_log_not_p = softplus(logit);
  const double pos = alpha * std::pow(1.0 - p, gamma) * neg_log_p;
  const double neg = (1.0 - alpha) * std::pow(p, gamma) * neg_log_not_p;
  return pos - neg;
}

Matrix match_cost(const DetectionTargets& targets, const torch::Tensor& logits, const torch::Tensor& boxes,
                  const LossWeights& weights) {
  const auto n = static_cast<int64_t>(targets.slots());
  if (logits.dim() != 2 || boxes.dim() != 2 || logits.size(0) != n || boxes.size(0) != n || boxes.size(1) != 4) {
    throw Error(Errc::kShapeMismatch, "match_cost expects N targets, (N,C) logits and (N,4) boxes");
  }
  Matrix cost(static_cast<std::size_t>(n), static_cast<std::size_t>(n));
  auto lg = logits.detach().to(torch::kDouble).contiguous();
  auto bx = boxes.detach().to(torch::kDouble).contiguous();
  auto lga = lg.accessor<double, 2>();
  auto bxa = bx.accessor<double, 2>();
  for (int64_t i = 0; i < n; ++i) {
    const auto si = static_cast<std::size_t>(i);
    if (targets.empty_slot(si)) continue;
    const int label = targets.labels[si];
    if (label > lg.size(1)) throw Error(Errc::kShapeMismatch, "target encoding exceeds logit width");
    const Box& t = *targets.boxes[si];
    const XYXYBox t_xyxy = cxcywh_to_xyxy(t);
    for (int64_t j = 0; j < n; ++j) {
      const double cls = focal_match_cost(lga[j][label - 1], weights.focal_alpha, weights.focal_gamma);
      const Box p{bxa[j][0], bxa[j][1], bxa[j][2], bxa[j][3]};
      const double l1 = std::abs(p.cx - t.cx) + std::abs(p.cy - t.cy) + std::abs(p.w - t.w) + std::abs(p.h - t.h);
      const double g = giou(t_xyxy, cxcywh_to_xyxy(p));
      cost(si, static_cast<std::size_t>(j)) = weights.w_cls * cls + weights.w_l1 * l1 + weights.w_giou * (1.0 - g);
    }
  }
  return cost;
}

Assignment hungarian_match(const Matrix& cost) {
  if (cost.rows != cost.cols) throw Error(Errc::kShapeMismatch, "cost matrix must be square");
  for (double v : cost.values) {
    if (!std::isfinite(v)) throw Error(Errc::kNonFiniteCost, "cost matrix has a non-finite entry");
  }
  const std::size_t n = cost.rows;
  Assignment result;
  if (n == 0) return result;

  // Potentials u (rows), v (columns); col_owner[j] is the row matched to column j.
  // Index 0 is a virtual column used as the augmentation root.
  constexpr double kInf = std::numeric_limits<double>::infinity();
  std::vector<double> u(n + 1, 0.0);
  std::vector<double> v(n + 1, 0.0);
  std::vector<std::size_t> col_owner(n + 1, 0);
  std::vector<std::size_t> way(n + 1, 0);
  for (std::size_t row = 1; row <= n; ++row) {
    col_owner[0] = row;
    std::size_t j0 = 0;
    std::vector<double> min_slack(n + 1, kInf);
    std::vector<char> used(n + 1, 0);
    do {
      used[j0] = 1;
      const std::size_t i0 = col_owner[j0];
      double delta = kInf;
      std::size_t j1 = 0;
      for (std::size_t j = 1; j <= n; ++j) {
        if (used[j]) continue;
        const double cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
        if (cur < min_slack[j]) {
          min_slack[j] = cur;
          way[j] = j0;
        }
        if (min_slack[j] < delta) {
          delta = min_slack[j];
          j1 = j;
        }
      }
      for (std::size_t j = 0; j <= n; ++j) {
        if (used[j]) {
          u[col_owner[j]] += delta;
          v[j] -= delta;
        } else {
          min_slack[j] -= delta;
        }
      }
      j0 = j1;
    } while (col_owner[j0] != 0);
    do {
      const std::size_t j1 = way[j0];
      col_owner[j0] = col_owner[j1];
      j0 = j1;
    } while (j0 != 0);
  }

  result.sigma.assign(n, -1);
  for (std::size_t j = 1; j <= n; ++j) result.sigma[col_owner[j] - 1] = static_cast<int>(j - 1);
  for (std::size_t i = 0; i < n; ++i) result.total_cost += cost(i, static_cast<std::size_t>(result.sigma[i]));
  return result;
}

std::vector<std::vector<Assignment>> match_all_layers(const PredictionSet& preds,
                                                      const std::vector<DetectionTargets>& targets,
                                                      const LossWeights& weights) {
  torch::NoGradGuard no_grad;
  std::vector<std::vector<Assignment>> out(preds.size());
  for (std::size_t layer = 0; layer < preds.size(); ++layer) {
    const auto& lp = preds[layer];
    for (std::size_t b = 0; b < targets.size(); ++b) {
      const auto bi = static_cast<int64_t>(b);
      out[layer].push_back(hungarian_match(match_cost(targets[b], lp.logits[bi], lp.boxes[bi], weights)));
    }
  }
  return out;
}

}  // namespace corrdet
