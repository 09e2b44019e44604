#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "corrdet/data.hpp"
#include "corrdet/detector.hpp"
#include "corrdet/eval.hpp"

namespace corrdet {

/// Everything a command needs; written next to its outputs as config.resolved.
struct RunConfig {
  std::string dataset;  // dataset directory
  ShapeWorldConfig data;
  Stage stage = Stage::kBase;
  int num_classes = 5;  // C
  int shots = 2;        // K
  ModelConfig model;
  LossWeights loss;
  OptimizerConfig optim;
  int64_t base_steps = 15000;
  int64_t finetune_steps = 2000;
  /// Fine-tuning learning rate (constant).
  double finetune_lr = 1e-4;
  int episodes_per_step = 4;
  int queries_per_episode = 2;
  std::uint64_t seed = 0;
  std::vector<std::uint64_t> support_seeds = {0, 1, 2, 3, 4, 5, 6, 7, 8, 9};
  bool balanced_base = true;
  double iou_threshold = 0.5;
  /// Score floor for detections entering the AP computation.
  double eval_threshold = 0.01;
  /// Score threshold for predict output and confusion counts.
  double detect_threshold = 0.25;
  int log_every = 50;
  int checkpoint_every = 1000;
  std::string output_dir = "runs/default";

  /// Keeps model.num_support_classes equal to C, then checks invariants (kInvalidConfig).
  void validate();
};

nlohmann::json to_json(const RunConfig& config);
/// Overlays `j` on `defaults`; unknown keys throw kInvalidConfig.
RunConfig run_config_from_json(const nlohmann::json& j, const RunConfig& defaults = {});
nlohmann::json to_json(const ModelConfig& config);
nlohmann::json to_json(const LossWeights& weights);
nlohmann::json to_json(const OptimizerConfig& config);

/// Seeded fresh detector for the run's model section.
Detector make_detector(const RunConfig& config);

/// Losses per logged step.
using StepCallback = std::function<void(const StepReport&)>;

/// Runs `steps` updates on episodes from `sampler`, each step drawing
/// episodes_per_step episodes. Returns the last report.
StepReport train_episodes(Trainer& trainer, const EpisodeSampler& sampler, std::mt19937_64& rng, int64_t steps,
                          int episodes_per_step, const StepCallback& on_step = {});

/// Novel classes first, then base classes, each in id order.
std::vector<ClassId> evaluation_order(const ClassSplit& split);

/// Detections above `threshold` for every image against `classes` in groups of C.
std::vector<std::vector<Detection>> detect_pool(Detector& detector, const std::vector<ImageRef>& images,
                                                const PrototypeCache& cache, std::span<const ClassId> classes,
                                                double threshold);

std::vector<std::vector<Annotation>> ground_truth_of(const std::vector<ImageRef>& images);

/// Keeps detections with score > threshold.
std::vector<std::vector<Detection>> above(const std::vector<std::vector<Detection>>& detections, double threshold);

struct SeedEvaluation {
  APReport report;
  std::vector<std::vector<Detection>> detections;  // at eval_threshold
};

/// One support seed: K-shot set, prototypes computed once, detection over the test pool.
/// `classes` defaults to evaluation_order(split).
SeedEvaluation evaluate_seed(Detector& detector, const FewShotDataset& dataset, const RunConfig& config,
                             std::uint64_t support_seed, std::optional<std::vector<ClassId>> classes = std::nullopt);

/// Checkpoint manifest fields.
struct CheckpointInfo {
  Stage stage = Stage::kBase;
  int64_t step = 0;
  nlohmann::json config;
  ModelConfig model;
  std::optional<int> shots;
  std::optional<std::uint64_t> support_seed;
  nlohmann::json support_manifest;
};

nlohmann::json to_json(const CheckpointInfo& info);
CheckpointInfo checkpoint_info_from_json(const nlohmann::json& j);

/// Writes <path> (weights + manifest) and <path>.optim (optimizer state).
void save_training_state(Trainer& trainer, const CheckpointInfo& info, const std::filesystem::path& path);
/// Restores weights (and optimizer state when present); returns the manifest.
CheckpointInfo load_training_state(Trainer& trainer, const std::filesystem::path& path);
CheckpointInfo read_checkpoint_info(const std::filesystem::path& path);

/// Detector with the architecture recorded in a checkpoint, weights loaded.
Detector load_detector(const std::filesystem::path& path);

/// Independent copy of a detector (same config, copied parameters and buffers).
Detector clone_detector(Detector& detector);

/// Writes the support images and supports.json (class, image, box) into `dir`.
void save_support_set(const KShotSupportSet& kshot, const std::filesystem::path& dir);
/// Reads a directory written by save_support_set. Throws kIoError.
std::map<ClassId, std::vector<SupportExample>> load_support_set(const std::filesystem::path& dir);

/// Builds the K-shot set for `support_seed` and fine-tunes the whole network on
/// episodes drawn from it.
StepReport finetune(Trainer& trainer, const FewShotDataset& dataset, const RunConfig& config,
                    std::uint64_t support_seed, const StepCallback& on_step = {});

}  // namespace corrdet
