#include "corrdet/episode.hpp"

#include <set>

namespace corrdet {

void validate_episode(const Episode& episode) {
  std::set<ClassId> seen;
  for (std::size_t i = 0; i < episode.support_classes.size(); ++i) {
    if (!seen.insert(episode.support_classes[i]).second) {
      throw Error(Errc::kDuplicateSupportClass,
                  "support_classes[" + std::to_string(i) + "] = " +
                      std::to_string(to_int(episode.support_classes[i])));
    }
  }
  if (episode.encoding_map.classes() != episode.support_classes) {
    throw Error(Errc::kShapeMismatch, "encoding_map domain differs from support_classes");
  }
  for (ClassId c : episode.support_classes) {
    const std::string field = "support_sets[" + std::to_string(to_int(c)) + "]";
    auto it = episode.support_sets.find(c);
    const std::size_t have = it == episode.support_sets.end() ? 0 : it->second.size();
    if (have != static_cast<std::size_t>(episode.shots)) {
      throw Error(Errc::kShotCountMismatch, field + " has " + std::to_string(have) + " examples, expected " +
                                                std::to_string(episode.shots));
    }
    if (have == 0) continue;
    for (std::size_t k = 0; k < it->second.size(); ++k) {
      if (!it->second[k].instance_box.valid()) {
        throw Error(Errc::kBoxOutOfBounds, field + "[" + std::to_string(k) + "].instance_box");
      }
    }
  }
  if (episode.support_sets.size() != episode.support_classes.size()) {
    throw Error(Errc::kShotCountMismatch, "support_sets has classes outside support_classes");
  }
  for (std::size_t q = 0; q < episode.query_images.size(); ++q) {
    const auto& img = episode.query_images[q];
    for (std::size_t a = 0; a < img->annotations.size(); ++a) {
      if (!img->annotations[a].box.valid()) {
        throw Error(Errc::kBoxOutOfBounds,
                    "query_images[" + std::to_string(q) + "].annotations[" + std::to_string(a) + "].box");
      }
    }
  }
}

}  // namespace corrdet
