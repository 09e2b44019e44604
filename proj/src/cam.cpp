#include "corrdet/cam.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace corrdet {

torch::Tensor make_task_encodings(int64_t num_classes, int64_t d, torch::Dtype dtype) {
  if (d % 2 != 0) throw Error(Errc::kOddDimension, "task encoding dimension " + std::to_string(d) + " is odd");
  TORCH_CHECK(num_classes >= 0, "num_classes must be non-negative");
  auto out = torch::zeros({num_classes + 1, d}, torch::kDouble);
  auto acc = out.accessor<double, 2>();
  for (int64_t p = 1; p <= num_classes; ++p) {
    for (int64_t k = 0; 2 * k < d; ++k) {
      const double angle =
          static_cast<double>(p) / std::pow(10000.0, 2.0 * static_cast<double>(k) / static_cast<double>(d));
      acc[p][2 * k] = std::sin(angle);
      acc[p][2 * k + 1] = std::cos(angle);
    }
  }
  return out.to(dtype);
}

std::vector<double> region_pool_weights(const Box& box, int64_t h, int64_t w, int64_t grid, bool strict) {
  std::vector<double> weights(static_cast<std::size_t>(h * w), 0.0);
  const double x0 = (box.cx - 0.5 * box.w) * static_cast<double>(w) - 0.5;
  const double y0 = (box.cy - 0.5 * box.h) * static_cast<double>(h) - 0.5;
  const double roi_w = box.w * static_cast<double>(w);
  const double roi_h = box.h * static_cast<double>(h);
  if (!(roi_w > 1e-6) || !(roi_h > 1e-6)) {
    if (strict) throw Error(Errc::kEmptyRegion, "support box covers no feature cell");
    const auto cx = std::clamp<int64_t>(static_cast<int64_t>(std::floor(box.cx * static_cast<double>(w))), 0, w - 1);
    const auto cy = std::clamp<int64_t>(static_cast<int64_t>(std::floor(box.cy * static_cast<double>(h))), 0, h - 1);
    weights[static_cast<std::size_t>(cy * w + cx)] = 1.0;
    return weights;
  }
  const double bin_w = roi_w / static_cast<double>(grid);
  const double bin_h = roi_h / static_cast<double>(grid);
  const double share = 1.0 / static_cast<double>(grid * grid);
  for (int64_t gy = 0; gy < grid; ++gy) {
    double y = y0 + (static_cast<double>(gy) + 0.5) * bin_h;
    if (y < -1.0 || y > static_cast<double>(h)) continue;
    y = std::max(y, 0.0);
    auto y_lo = static_cast<int64_t>(std::floor(y));
    int64_t y_hi = y_lo + 1;
    if (y_lo >= h - 1) {
      y_lo = y_hi = h - 1;
      y = static_cast<double>(y_lo);
    }
    const double ly = y - static_cast<double>(y_lo);
    for (int64_t gx = 0; gx < grid; ++gx) {
      double x = x0 + (static_cast<double>(gx) + 0.5) * bin_w;
      if (x < -1.0 || x > static_cast<double>(w)) continue;
      x = std::max(x, 0.0);
      auto x_lo = static_cast<int64_t>(std::floor(x));
      int64_t x_hi = x_lo + 1;
      if (x_lo >= w - 1) {
        x_lo = x_hi = w - 1;
        x = static_cast<double>(x_lo);
      }
      const double lx = x - static_cast<double>(x_lo);
      weights[static_cast<std::size_t>(y_lo * w + x_lo)] += share * (1.0 - ly) * (1.0 - lx);
      weights[static_cast<std::size_t>(y_lo * w + x_hi)] += share * (1.0 - ly) * lx;
      weights[static_cast<std::size_t>(y_hi * w + x_lo)] += share * ly * (1.0 - lx);
      weights[static_cast<std::size_t>(y_hi * w + x_hi)] += share * ly * lx;
    }
  }
  return weights;
}

namespace {

torch::Tensor pool_with_weights(const torch::Tensor& encoded, const std::vector<double>& weights) {
  auto wt = torch::tensor(weights, torch::kDouble).to(encoded.dtype());
  return wt.matmul(encoded);
}

}  // namespace

CamImpl::CamImpl(const CamOptions& options) : options_(options) {
  shared_encoder_ = register_module("shared_encoder", SelfAttentionBlock(options.d_model, options.heads));
  projection_ = register_module("projection",
                                torch::nn::Linear(torch::nn::LinearOptions(options.d_model, options.d_model).bias(false)));
  torch::nn::init::xavier_uniform_(projection_->weight);
  background_ = register_parameter("background_prototype", torch::randn({options.d_model}) * 0.1);
  ffn_norm_ = register_module("ffn_norm", torch::nn::LayerNorm(torch::nn::LayerNormOptions({options.d_model})));
  ffn_ = register_module("ffn", FeedForward(options.d_model, options.ffn_dim));
}

torch::Tensor CamImpl::encode(const torch::Tensor& features, const torch::Tensor& pos) {
  return shared_encoder_(features, pos);
}

torch::Tensor CamImpl::pool_region(const torch::Tensor& encoded, int64_t h, int64_t w, const Box& box) const {
  TORCH_CHECK(encoded.dim() == 2 && encoded.size(0) == h * w, "pool_region expects (h*w, d)");
  return pool_with_weights(encoded, region_pool_weights(box, h, w, options_.pool_grid, options_.strict_regions));
}

torch::Tensor CamImpl::with_background(const torch::Tensor& class_prototypes) const {
  return torch::cat({background_.to(class_prototypes.dtype()).unsqueeze(0), class_prototypes}, 0);
}

MatchResult CamImpl::feature_match(const torch::Tensor& query, const torch::Tensor& prototypes) {
  const double scale = 1.0 / std::sqrt(static_cast<double>(options_.d_model));
  auto qw = projection_(query);
  auto sw = projection_(prototypes);
  auto coefficients = torch::softmax(qw.matmul(sw.transpose(-2, -1)) * scale, -1);
  auto filters = options_.apply_sigmoid ? torch::sigmoid(prototypes) : prototypes;
  auto filtered = coefficients.matmul(filters);
  if (options_.query_multiply) filtered = filtered * query;
  return {coefficients, filtered, torch::Tensor()};
}

torch::Tensor CamImpl::encoding_match(const torch::Tensor& coefficients, const torch::Tensor& task_encodings) const {
  if (coefficients.size(-1) != task_encodings.size(0)) {
    throw Error(Errc::kShapeMismatch, "coefficient columns (" + std::to_string(coefficients.size(-1)) +
                                          ") differ from task encoding rows (" +
                                          std::to_string(task_encodings.size(0)) + ")");
  }
  return coefficients.matmul(task_encodings);
}

std::vector<int64_t> canonical_class_order(const torch::Tensor& task_encodings) {
  auto enc = task_encodings.detach().to(torch::kDouble).contiguous();
  const int64_t rows = enc.size(0);
  const int64_t d = enc.size(1);
  const double* data = enc.data_ptr<double>();
  std::vector<int64_t> order(static_cast<std::size_t>(rows));
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin() + 1, order.end(), [&](int64_t a, int64_t b) {
    return std::lexicographical_compare(data + a * d, data + (a + 1) * d, data + b * d, data + (b + 1) * d);
  });
  return order;
}

torch::Tensor CamImpl::forward(const torch::Tensor& features, const torch::Tensor& pos,
                               const torch::Tensor& prototypes, const torch::Tensor& task_encodings) {
  return forward_with_match(features, pos, prototypes, task_encodings, nullptr);
}

torch::Tensor CamImpl::forward_with_match(const torch::Tensor& features, const torch::Tensor& pos,
                                          const torch::Tensor& prototypes, const torch::Tensor& task_encodings,
                                          MatchResult* match) {
  if (prototypes.size(-2) != task_encodings.size(0)) {
    throw Error(Errc::kShapeMismatch, "prototype rows differ from task encoding rows");
  }
  auto order = canonical_class_order(task_encodings);
  if (!options_.model_background) order.erase(order.begin());
  if (order.empty()) throw Error(Errc::kShapeMismatch, "no classes to match against");
  auto index = torch::tensor(order, torch::kLong);
  auto protos = prototypes.index_select(-2, index);
  auto encodings = task_encodings.index_select(0, index).to(features.dtype());

  auto query = encode(features, pos);
  MatchResult m = feature_match(query, protos);
  m.encodings = encoding_match(m.coefficients, encodings);
  auto mixed = m.filtered + m.encodings;
  auto out = mixed + ffn_(ffn_norm_(mixed));
  if (match != nullptr) *match = std::move(m);
  return out;
}

ClasswiseAggregatorImpl::ClasswiseAggregatorImpl(int64_t d_model, int64_t heads, int64_t ffn_dim,
                                                 int64_t pool_grid)
    : pool_grid_(pool_grid) {
  shared_encoder_ = register_module("shared_encoder", SelfAttentionBlock(d_model, heads));
  fuse_ = register_module("fuse", torch::nn::Linear(3 * d_model, d_model));
  ffn_norm_ = register_module("ffn_norm", torch::nn::LayerNorm(torch::nn::LayerNormOptions({d_model})));
  ffn_ = register_module("ffn", FeedForward(d_model, ffn_dim));
}

torch::Tensor ClasswiseAggregatorImpl::encode(const torch::Tensor& features, const torch::Tensor& pos) {
  return shared_encoder_(features, pos);
}

torch::Tensor ClasswiseAggregatorImpl::pool_region(const torch::Tensor& encoded, int64_t h, int64_t w,
                                                   const Box& box) const {
  return pool_with_weights(encoded, region_pool_weights(box, h, w, pool_grid_, false));
}

torch::Tensor ClasswiseAggregatorImpl::forward(const torch::Tensor& features, const torch::Tensor& pos,
                                               const torch::Tensor& prototype) {
  auto query = encode(features, pos);
  auto s = prototype.dim() == 1 ? prototype.view({1, 1, -1}) : prototype.unsqueeze(1);
  auto fused = fuse_(torch::cat({query * s, query - s, query}, -1));
  return fused + ffn_(ffn_norm_(fused));
}

}  // namespace corrdet
