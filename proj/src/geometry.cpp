#include "corrdet/geometry.hpp"

#include <algorithm>

namespace corrdet {

XYXYBox cxcywh_to_xyxy(const Box& b) {
  return {b.cx - 0.5 * b.w, b.cy - 0.5 * b.h, b.cx + 0.5 * b.w, b.cy + 0.5 * b.h};
}

Box xyxy_to_cxcywh(const XYXYBox& b) {
  return {0.5 * (b.x0 + b.x1), 0.5 * (b.y0 + b.y1), b.x1 - b.x0, b.y1 - b.y0};
}

namespace {

struct Overlap {
  double inter;
  double uni;
  double hull;
};

Overlap overlap(const XYXYBox& a, const XYXYBox& b, OverlapPolicy policy) {
  const double area_a = std::max(a.area(), 0.0);
  const double area_b = std::max(b.area(), 0.0);
  if (policy == OverlapPolicy::kStrict && area_a <= 0.0 && area_b <= 0.0) {
    throw Error(Errc::kDegenerateBox, "both boxes have zero area");
  }
  const double iw = std::max(0.0, std::min(a.x1, b.x1) - std::max(a.x0, b.x0));
  const double ih = std::max(0.0, std::min(a.y1, b.y1) - std::max(a.y0, b.y0));
  const double inter = iw * ih;
  const double hw = std::max(a.x1, b.x1) - std::min(a.x0, b.x0);
  const double hh = std::max(a.y1, b.y1) - std::min(a.y0, b.y0);
  const double uni = area_a + area_b - inter;
  if (policy == OverlapPolicy::kStrict) return {inter, uni, hw * hh};
  return {inter, std::max(uni, kAreaEps), std::max(hw * hh, kAreaEps)};
}

}  // namespace

double iou(const XYXYBox& a, const XYXYBox& b, OverlapPolicy policy) {
  const Overlap o = overlap(a, b, policy);
  return o.inter / o.uni;
}

double giou(const XYXYBox& a, const XYXYBox& b, OverlapPolicy policy) {
  const Overlap o = overlap(a, b, policy);
  return o.inter / o.uni - (o.hull - o.uni) / o.hull;
}

Matrix pairwise_giou(std::span<const XYXYBox> a, std::span<const XYXYBox> b, OverlapPolicy policy) {
  Matrix out(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    for (std::size_t j = 0; j < b.size(); ++j) out(i, j) = giou(a[i], b[j], policy);
  }
  return out;
}

namespace tensor {

torch::Tensor cxcywh_to_xyxy(const torch::Tensor& boxes) {
  auto parts = boxes.unbind(-1);
  auto half_w = 0.5 * parts[2];
  auto half_h = 0.5 * parts[3];
  return torch::stack({parts[0] - half_w, parts[1] - half_h, parts[0] + half_w, parts[1] + half_h}, -1);
}

torch::Tensor xyxy_to_cxcywh(const torch::Tensor& boxes) {
  auto parts = boxes.unbind(-1);
  return torch::stack({0.5 * (parts[0] + parts[2]), 0.5 * (parts[1] + parts[3]), parts[2] - parts[0],
                       parts[3] - parts[1]},
                      -1);
}

namespace {

torch::Tensor giou_from_corners(const torch::Tensor& ax0, const torch::Tensor& ay0, const torch::Tensor& ax1,
                                const torch::Tensor& ay1, const torch::Tensor& bx0, const torch::Tensor& by0,
                                const torch::Tensor& bx1, const torch::Tensor& by1) {
  auto area_a = ((ax1 - ax0) * (ay1 - ay0)).clamp_min(0.0);
  auto area_b = ((bx1 - bx0) * (by1 - by0)).clamp_min(0.0);
  auto iw = (torch::minimum(ax1, bx1) - torch::maximum(ax0, bx0)).clamp_min(0.0);
  auto ih = (torch::minimum(ay1, by1) - torch::maximum(ay0, by0)).clamp_min(0.0);
  auto inter = iw * ih;
  auto uni = (area_a + area_b - inter).clamp_min(kAreaEps);
  auto hull = ((torch::maximum(ax1, bx1) - torch::minimum(ax0, bx0)) *
               (torch::maximum(ay1, by1) - torch::minimum(ay0, by0)))
                  .clamp_min(kAreaEps);
  return inter / uni - (hull - uni) / hull;
}

}  // namespace

torch::Tensor giou(const torch::Tensor& a, const torch::Tensor& b) {
  auto pa = a.unbind(-1);
  auto pb = b.unbind(-1);
  return giou_from_corners(pa[0], pa[1], pa[2], pa[3], pb[0], pb[1], pb[2], pb[3]);
}

torch::Tensor pairwise_giou(const torch::Tensor& a, const torch::Tensor& b) {
  TORCH_CHECK(a.dim() == 2 && b.dim() == 2 && a.size(1) == 4 && b.size(1) == 4, "pairwise_giou expects (n,4)");
  auto pa = a.unsqueeze(1).unbind(-1);
  auto pb = b.unsqueeze(0).unbind(-1);
  return giou_from_corners(pa[0], pa[1], pa[2], pa[3], pb[0], pb[1], pb[2], pb[3]);
}

}  // namespace tensor

}  // namespace corrdet
