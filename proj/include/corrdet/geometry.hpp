#pragma once

#include <span>
#include <vector>

#include <torch/torch.h>

#include "corrdet/core.hpp"

namespace corrdet {

struct XYXYBox {
  double x0 = 0.0;
  double y0 = 0.0;
  double x1 = 0.0;
  double y1 = 0.0;

  double area() const { return (x1 - x0) * (y1 - y0); }
  friend bool operator==(const XYXYBox&, const XYXYBox&) = default;
};

/// How zero-area boxes are treated by the overlap measures.
enum class OverlapPolicy {
  kLenient,  // areas clamped by kAreaEps, never throws
  kStrict,   // kDegenerateBox when both boxes have zero area
};

inline constexpr double kAreaEps = 1e-9;

XYXYBox cxcywh_to_xyxy(const Box& b);
Box xyxy_to_cxcywh(const XYXYBox& b);

double iou(const XYXYBox& a, const XYXYBox& b, OverlapPolicy policy = OverlapPolicy::kLenient);
double giou(const XYXYBox& a, const XYXYBox& b, OverlapPolicy policy = OverlapPolicy::kLenient);

/// Dense row-major matrix of doubles.
struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> values;

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c, double fill = 0.0) : rows(r), cols(c), values(r * c, fill) {}
  double& operator()(std::size_t r, std::size_t c) { return values[r * cols + c]; }
  double operator()(std::size_t r, std::size_t c) const { return values[r * cols + c]; }
};

Matrix pairwise_giou(std::span<const XYXYBox> a, std::span<const XYXYBox> b,
                     OverlapPolicy policy = OverlapPolicy::kLenient);

// Differentiable tensor versions. Boxes are (..., 4) tensors.
namespace tensor {

torch::Tensor cxcywh_to_xyxy(const torch::Tensor& boxes);
torch::Tensor xyxy_to_cxcywh(const torch::Tensor& boxes);
/// Elementwise GIoU between aligned (..., 4) xyxy tensors.
torch::Tensor giou(const torch::Tensor& a, const torch::Tensor& b);
/// (A, 4) x (B, 4) xyxy -> (A, B) GIoU.
torch::Tensor pairwise_giou(const torch::Tensor& a, const torch::Tensor& b);

}  // namespace tensor

}  // namespace corrdet
