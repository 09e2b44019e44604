#include "corrdet/targetgen.hpp"

#include <algorithm>

namespace corrdet {

ChiMap ChiMap::from_order(std::span<const ClassId> order) {
  ChiMap chi;
  chi.order_.assign(order.begin(), order.end());
  for (std::size_t i = 0; i < order.size(); ++i) {
    auto [it, inserted] = chi.index_.emplace(order[i], static_cast<int>(i) + 1);
    if (!inserted) {
      throw Error(Errc::kDuplicateSupportClass,
                  "support_classes[" + std::to_string(i) + "] repeats class " + std::to_string(to_int(order[i])));
    }
  }
  return chi;
}

std::optional<int> ChiMap::encode(ClassId id) const {
  auto it = index_.find(id);
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

ClassId ChiMap::decode(int encoding) const {
  if (encoding < 1 || encoding > size()) {
    throw Error(Errc::kUnknownEncodingIndex,
                "encoding " + std::to_string(encoding) + " outside 1.." + std::to_string(size()));
  }
  return order_[static_cast<std::size_t>(encoding - 1)];
}

ChiMap build_encoding_map(std::span<const ClassId> support_classes) {
  return ChiMap::from_order(support_classes);
}

std::size_t DetectionTargets::num_objects() const {
  return static_cast<std::size_t>(
      std::count_if(labels.begin(), labels.end(), [](int l) { return l != kBackgroundEncoding; }));
}

DetectionTargets remap_targets(std::span<const Annotation> annotations,
                               std::span<const ClassId> support_classes, const ChiMap& chi,
                               std::size_t num_slots) {
  if (annotations.size() > num_slots) {
    throw Error(Errc::kTooManyObjects, std::to_string(annotations.size()) + " annotations exceed " +
                                           std::to_string(num_slots) + " slots");
  }
  if (!std::equal(support_classes.begin(), support_classes.end(), chi.classes().begin(),
                  chi.classes().end())) {
    throw Error(Errc::kShapeMismatch, "support_classes disagree with the encoding map");
  }
  DetectionTargets targets;
  targets.labels.assign(num_slots, kBackgroundEncoding);
  targets.boxes.assign(num_slots, std::nullopt);
  std::size_t slot = 0;
  for (const Annotation& ann : annotations) {
    if (auto enc = chi.encode(ann.class_id)) {
      targets.labels[slot] = *enc;
      targets.boxes[slot] = ann.box;
      ++slot;
    }
  }
  return targets;
}

std::vector<Detection> unmap_predictions(std::span<const RawPrediction> raw, const ChiMap& chi) {
  std::vector<Detection> out;
  out.reserve(raw.size());
  for (const RawPrediction& p : raw) out.push_back({chi.decode(p.encoding), p.score, p.box});
  return out;
}

}  // namespace corrdet
