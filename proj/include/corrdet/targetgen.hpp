#pragma once

#include <optional>
#include <span>
#include <unordered_map>
#include <vector>

#include "corrdet/core.hpp"

namespace corrdet {

/// Encoding index 0 is reserved for background; support classes take 1..C.
inline constexpr int kBackgroundEncoding = 0;

/// Injective map from the sampled support classes onto encoding indices 1..C.
class ChiMap {
 public:
  ChiMap() = default;

  /// Position i (0-based) of `order` receives encoding i + 1.
  static ChiMap from_order(std::span<const ClassId> order);

  int size() const { return static_cast<int>(order_.size()); }
  const std::vector<ClassId>& classes() const { return order_; }
  bool contains(ClassId id) const { return index_.contains(id); }
  std::optional<int> encode(ClassId id) const;
  /// Inverse lookup; throws kUnknownEncodingIndex outside 1..C.
  ClassId decode(int encoding) const;

  friend bool operator==(const ChiMap& a, const ChiMap& b) { return a.order_ == b.order_; }

 private:
  std::vector<ClassId> order_;
  std::unordered_map<ClassId, int> index_;
};

/// Throws kDuplicateSupportClass when `support_classes` repeats a class.
ChiMap build_encoding_map(std::span<const ClassId> support_classes);

/// N target slots. label 0 means the empty slot and then box is nullopt.
struct DetectionTargets {
  std::vector<int> labels;
  std::vector<std::optional<Box>> boxes;

  std::size_t slots() const { return labels.size(); }
  std::size_t num_objects() const;
  bool empty_slot(std::size_t i) const { return labels[i] == kBackgroundEncoding; }
};

/// Keeps annotations whose class is a support class, relabelled by chi; everything
/// else (and the padding) becomes an empty slot. Kept objects fill the lowest slots in
/// annotation order. Throws kTooManyObjects when annotations.size() > num_slots.
DetectionTargets remap_targets(std::span<const Annotation> annotations,
                               std::span<const ClassId> support_classes, const ChiMap& chi,
                               std::size_t num_slots);

struct RawPrediction {
  int encoding = 0;
  double score = 0.0;
  Box box;
};

struct Detection {
  ClassId class_id{};
  double score = 0.0;
  Box box;
  friend bool operator==(const Detection&, const Detection&) = default;
};

std::vector<Detection> unmap_predictions(std::span<const RawPrediction> raw, const ChiMap& chi);

}  // namespace corrdet
