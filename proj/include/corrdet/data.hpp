#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "corrdet/core.hpp"
#include "corrdet/episode.hpp"
#include "corrdet/targetgen.hpp"

namespace corrdet {

// Class ids are shape * 2 + fill: circle, square, triangle, star, cross, ring crossed
// with outline (0) / filled (1).
enum class Shape { kCircle = 0, kSquare, kTriangle, kStar, kCross, kRing };
enum class Fill { kOutline = 0, kFilled };

inline constexpr int kNumShapeClasses = 12;

constexpr ClassId shape_class(Shape s, Fill f) { return ClassId{static_cast<int>(s) * 2 + static_cast<int>(f)}; }
std::string class_name(ClassId id);
/// Inverse of class_name; throws kInvalidConfig for unknown names.
ClassId class_from_name(const std::string& name);

struct ShapeWorldConfig {
  int image_size = 128;
  int min_objects = 1;
  int max_objects = 4;
  /// Object extent as a fraction of the image side.
  double min_scale = 0.15;
  double max_scale = 0.4;
  double color_jitter = 0.25;
  double noise_level = 0.04;
  std::uint64_t seed = 0;
  int base_scenes = 2000;
  /// Single-object scenes rendered per class; the K-shot sets are drawn from these.
  int fewshot_scenes_per_class = 20;
  int test_scenes = 300;
  std::vector<ClassId> novel_classes = {shape_class(Shape::kRing, Fill::kFilled),
                                        shape_class(Shape::kStar, Fill::kOutline),
                                        shape_class(Shape::kCross, Fill::kFilled)};

  ClassSplit class_split() const;
  /// Throws kInvalidConfig.
  void validate() const;
};

nlohmann::json to_json(const ShapeWorldConfig& config);
ShapeWorldConfig shape_world_from_json(const nlohmann::json& j);

enum class Split { kBase, kFewShot, kTest };
std::string_view split_name(Split split);

/// Per-scene random stream, a pure function of (seed, split, index).
std::mt19937_64 scene_rng(std::uint64_t seed, Split split, std::uint64_t index);

/// Renders between min_objects and max_objects non-overlapping shapes drawn from
/// `classes`, each annotated with the tight box of its rendered pixels. When `masks`
/// is given it receives one single-channel object mask per annotation.
LabeledImage generate_scene(std::mt19937_64& rng, const ShapeWorldConfig& config, const std::vector<ClassId>& classes,
                            int min_objects, int max_objects, std::vector<Image>* masks = nullptr);

class FewShotDataset {
 public:
  ShapeWorldConfig config;
  ClassSplit split;
  std::vector<ImageRef> base;      // base classes only
  std::vector<ImageRef> fewshot;   // one object per scene, every class
  std::vector<ImageRef> test;      // all classes, fully annotated

  /// Renders every scene in memory.
  static FewShotDataset generate(const ShapeWorldConfig& config);
  /// Reads images/, annotations.json and manifest.json. Throws kIoError.
  static FewShotDataset load(const std::filesystem::path& dir);
  /// Writes images/ (PNG), annotations.json and manifest.json. Throws kIoError.
  void save(const std::filesystem::path& dir) const;

  const std::vector<ImageRef>& pool(Split s) const;
  /// Looks an image up by id across all splits (nullptr when absent).
  ImageRef find(std::int64_t image_id) const;
};

/// COCO-style annotation document of a dataset (deterministic key order).
nlohmann::json annotations_json(const FewShotDataset& dataset);

/// PNG (or any OpenCV-readable) image as RGB. Throws kIoError.
Image read_image(const std::filesystem::path& path);
/// Writes an RGB image; the format follows the extension. Throws kIoError.
void write_image(const Image& image, const std::filesystem::path& path);
/// Copy of `image` with each detection's box and "class score" label drawn on it.
Image draw_boxes(const Image& image, std::span<const Detection> detections);

FewShotDataset build_dataset(const ShapeWorldConfig& config, const std::filesystem::path& out_dir);

/// K instances per class plus the fine-tuning query pool.
struct KShotSupportSet {
  int shots = 0;
  std::uint64_t seed = 0;
  bool balanced_base = true;
  std::map<ClassId, std::vector<SupportExample>> supports;
  std::vector<ImageRef> query_pool;

  nlohmann::json manifest() const;
};

/// Draws exactly K single-object scenes per class (base and novel) from the few-shot
/// pool. With balanced_base = false the base split is added to the query pool.
/// Throws kInsufficientShots when a class has fewer than K scenes.
KShotSupportSet build_finetune_set(const FewShotDataset& dataset, int shots, std::uint64_t seed,
                                   bool balanced_base = true);

enum class Stage { kBase, kFinetune };
std::string_view stage_name(Stage stage);
Stage stage_from_name(const std::string& name);

struct EpisodeOptions {
  int num_classes = 5;         // C
  int shots = 1;               // K
  int queries_per_episode = 1;
};

/// Samples episodes. Supports never come from a query image, so only classes with an
/// instance outside the queries are eligible. Support classes start with the eligible
/// classes present in the queries (random subset when more than C), then fill up from
/// the stage's scope; the final order, and so the encoding map, is shuffled.
class EpisodeSampler {
 public:
  /// Base stage: queries and supports from the base split.
  EpisodeSampler(const FewShotDataset& dataset, EpisodeOptions options);
  /// Fine-tuning stage: queries from the K-shot query pool, supports only from the K-shot set.
  EpisodeSampler(const FewShotDataset& dataset, const KShotSupportSet& kshot, EpisodeOptions options);

  /// Throws kInsufficientClasses / kInsufficientShots.
  Episode sample(std::mt19937_64& rng) const;

  Stage stage() const { return stage_; }
  const std::vector<ClassId>& scope() const { return scope_; }

 private:
  struct Instance {
    ImageRef image;
    Box box;
  };

  Stage stage_;
  EpisodeOptions options_;
  std::vector<ImageRef> queries_;
  std::vector<ClassId> scope_;
  std::map<ClassId, std::vector<Instance>> instances_;
};

}  // namespace corrdet
