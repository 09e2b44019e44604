#pragma once

#include <map>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "corrdet/cam.hpp"
#include "corrdet/episode.hpp"
#include "corrdet/layers.hpp"
#include "corrdet/losses.hpp"
#include "corrdet/targetgen.hpp"

namespace corrdet {

struct ModelConfig {
  int64_t d_model = 128;
  int64_t heads = 8;
  int64_t ffn_dim = 512;
  int64_t encoder_layers = 3;
  int64_t decoder_layers = 3;
  int64_t num_queries = 20;
  /// Support classes aggregated at once (C); also the class-head width.
  int64_t num_support_classes = 5;
  /// 1-based encoder layer replaced by the aggregation module.
  int64_t cam_placement = 1;
  bool cam_enabled = true;
  bool apply_sigmoid = true;
  bool query_multiply = true;
  bool model_background = true;
  int64_t pool_grid = 7;
  int64_t backbone_width = 32;
  /// Size of the global label space (rows of the prototype classifier).
  int64_t num_dataset_classes = 12;

  /// Throws kInvalidConfig when an invariant fails.
  void validate() const;
};

inline constexpr int64_t kFeatureStride = 16;

/// Encoded feature map of a batch: tokens (B, h*w, d) on an h x w grid.
struct FeatureMap {
  torch::Tensor tokens;
  int64_t h = 0;
  int64_t w = 0;
};

/// (B, 3, H, W) float tensor in [0, 1]; all images must share a size.
torch::Tensor images_to_tensor(std::span<const Image* const> images);

/// Prototype vectors (d) computed once per class.
using PrototypeCache = std::map<ClassId, torch::Tensor>;

class DetectorImpl : public torch::nn::Module {
 public:
  explicit DetectorImpl(const ModelConfig& config);

  const ModelConfig& config() const { return config_; }

  /// Weight-shared convolutional extractor, stride 16. Images smaller than one
  /// stride throw kImageTooSmall; other sizes are zero-padded up to a multiple.
  FeatureMap extract_features(const torch::Tensor& images);

  /// Support path up to the aggregation layer: extractor, preceding encoder layers,
  /// and the aggregator's shared attention encoder.
  FeatureMap encode_supports(const torch::Tensor& images);

  /// Mean over shots of the region-pooled support encodings -> (d).
  torch::Tensor class_prototype(std::span<const SupportExample> supports);

  /// (C, d) prototypes for several classes with all their supports in one batch.
  torch::Tensor class_prototypes(const std::vector<std::vector<SupportExample>>& supports_per_class);

  /// Prepends the learned background prototype: (C, d) -> (C+1, d).
  torch::Tensor with_background(const torch::Tensor& class_prototypes);

  /// query_images (B, 3, H, W); prototypes (C+1, d) shared or (B, C+1, d) per image;
  /// task_encodings (C+1, d). One LayerPrediction per decoder layer, logits (B, N, C).
  PredictionSet forward(const torch::Tensor& query_images, const torch::Tensor& prototypes,
                        const torch::Tensor& task_encodings);

  /// Prototype classifier weights (num_dataset_classes, d).
  torch::Tensor class_embeddings() const { return class_embeddings_; }

  Cam cam() const { return cam_; }

 private:
  torch::Tensor positions(int64_t h, int64_t w, torch::Dtype dtype);
  torch::Tensor run_encoder(const torch::Tensor& tokens, const torch::Tensor& pos, const torch::Tensor& prototypes,
                            const torch::Tensor& task_encodings);

  ModelConfig config_;
  torch::nn::Sequential backbone_{nullptr};
  torch::nn::ModuleList encoder_{nullptr};
  Cam cam_{nullptr};
  ClasswiseAggregator classwise_{nullptr};
  torch::nn::LayerNorm encoder_norm_{nullptr};
  torch::nn::ModuleList decoder_{nullptr};
  torch::nn::LayerNorm decoder_norm_{nullptr};
  torch::Tensor query_embed_;
  torch::nn::Linear reference_points_{nullptr};
  torch::nn::Sequential spatial_query_{nullptr};
  torch::nn::Linear class_head_{nullptr};
  torch::nn::Sequential box_head_{nullptr};
  torch::Tensor class_embeddings_;
};
TORCH_MODULE(Detector);

/// Builds (C+1, d) prototypes for `chi`'s classes from the cache.
/// Throws kMissingClassSupport when a class has no cached prototype.
torch::Tensor assemble_prototypes(Detector& detector, const PrototypeCache& cache, const ChiMap& chi);

/// Computes each class prototype once from its supports. Throws kMissingClassSupport
/// for a class with no support example.
PrototypeCache precompute_prototypes(Detector& detector,
                                     const std::map<ClassId, std::vector<SupportExample>>& supports);

/// Thresholded, unmapped detections for one image against the classes of `chi`
/// (at most C). No suppression: every (slot, encoding) pair above threshold is kept.
std::vector<Detection> detect(Detector& detector, const Image& image, const PrototypeCache& cache,
                              const ChiMap& chi, double threshold = 0.25);

/// Runs `detect` over consecutive groups of at most C classes and concatenates.
std::vector<Detection> detect_all_classes(Detector& detector, const Image& image, const PrototypeCache& cache,
                                          std::span<const ClassId> classes, double threshold);

struct OptimizerConfig {
  double lr = 1e-4;
  double weight_decay = 1e-4;
  double grad_clip = 0.1;
  /// Step after which the learning rate is multiplied by 0.1 (<= 0 disables).
  int64_t lr_drop_step = 0;
};

struct StepReport {
  int64_t step = 0;
  double total = 0.0;
  double cls = 0.0;
  double l1 = 0.0;
  double giou = 0.0;
  double proto = 0.0;
  double grad_norm = 0.0;
};

/// Owns a detector and its AdamW state; single writer of the parameters.
class Trainer {
 public:
  Trainer(Detector detector, const OptimizerConfig& optim, const LossWeights& weights);

  /// Loss of a batch of episodes (all with the same C) without updating anything.
  LossBreakdown compute_loss(const std::vector<Episode>& episodes, torch::Tensor* proto_loss = nullptr);

  /// One clipped AdamW update. Throws kNonFiniteLoss when the loss is NaN/inf.
  StepReport train_step(const std::vector<Episode>& episodes);

  Detector& detector() { return detector_; }
  int64_t step() const { return step_; }
  void set_step(int64_t step) { step_ = step; }
  torch::optim::AdamW& optimizer() { return *optimizer_; }

 private:
  Detector detector_;
  OptimizerConfig optim_config_;
  LossWeights weights_;
  std::unique_ptr<torch::optim::AdamW> optimizer_;
  int64_t step_ = 0;
};

/// Detector parameters and buffers keyed by hierarchical name, plus a JSON manifest,
/// in one torch archive.
void save_checkpoint(Detector& detector, const std::string& manifest_json, const std::string& path);
/// Restores parameters into `detector` (which must have a matching layout) and
/// returns the manifest JSON text.
std::string load_checkpoint(Detector& detector, const std::string& path);
/// Reads only the manifest JSON text.
std::string read_checkpoint_manifest(const std::string& path);

}  // namespace corrdet
