#pragma once

#include <map>
#include <vector>

#include "corrdet/core.hpp"
#include "corrdet/targetgen.hpp"

namespace corrdet {

/// One meta-learning task: query images plus K supports for each of C classes.
struct Episode {
  std::vector<ImageRef> query_images;
  std::vector<ClassId> support_classes;
  std::map<ClassId, std::vector<SupportExample>> support_sets;
  ChiMap encoding_map;
  int shots = 1;

  int num_classes() const { return static_cast<int>(support_classes.size()); }
};

/// Returns silently when every Episode invariant holds, otherwise throws
/// kDuplicateSupportClass, kShotCountMismatch or kBoxOutOfBounds naming the field.
void validate_episode(const Episode& episode);

}  // namespace corrdet
