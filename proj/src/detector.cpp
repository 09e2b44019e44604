#include "corrdet/detector.hpp"

#include <algorithm>
#include <cmath>

#include "corrdet/geometry.hpp"
#include "corrdet/matcher.hpp"

namespace corrdet {

void ModelConfig::validate() const {
  auto fail = [](const std::string& msg) { throw Error(Errc::kInvalidConfig, msg); };
  if (d_model <= 0 || d_model % 4 != 0) fail("d_model must be a positive multiple of 4");
  if (heads <= 0 || d_model % heads != 0) fail("heads must divide d_model");
  if (encoder_layers < 1 || decoder_layers < 1) fail("need at least one encoder and one decoder layer");
  if (cam_placement < 1 || cam_placement > encoder_layers) fail("cam_placement must lie in 1..encoder_layers");
  if (num_queries < 1) fail("num_queries must be positive");
  if (num_support_classes < 1) fail("C must be >= 1");
  if (!cam_enabled && num_support_classes != 1) fail("class-wise aggregation supports only C = 1");
  if (backbone_width % 8 != 0 || d_model % 8 != 0) fail("channel widths must be multiples of 8");
  if (pool_grid < 1) fail("pool_grid must be positive");
  if (num_dataset_classes < 1) fail("num_dataset_classes must be positive");
}

torch::Tensor images_to_tensor(std::span<const Image* const> images) {
  TORCH_CHECK(!images.empty(), "images_to_tensor: empty batch");
  const int h = images.front()->height;
  const int w = images.front()->width;
  const int c = images.front()->channels;
  auto out = torch::empty({static_cast<int64_t>(images.size()), h, w, c}, torch::kUInt8);
  auto* dst = out.data_ptr<std::uint8_t>();
  const std::size_t per_image = static_cast<std::size_t>(h) * w * c;
  for (std::size_t i = 0; i < images.size(); ++i) {
    const Image& img = *images[i];
    if (img.height != h || img.width != w || img.channels != c) {
      throw Error(Errc::kShapeMismatch, "batched images must share one size");
    }
    std::copy(img.data.begin(), img.data.end(), dst + i * per_image);
  }
  return out.permute({0, 3, 1, 2}).to(torch::kFloat).div_(255.0).contiguous();
}

namespace {

torch::nn::Sequential make_backbone(int64_t width, int64_t d_model) {
  torch::nn::Sequential seq;
  const int64_t channels[] = {3, width, 2 * width, 4 * width, d_model};
  // Per stage: strided 3x3 conv, then a 3x3 conv at the new resolution.
  for (int i = 0; i < 4; ++i) {
    seq->push_back(torch::nn::Conv2d(
        torch::nn::Conv2dOptions(channels[i], channels[i + 1], 3).stride(2).padding(1).bias(false)));
    seq->push_back(torch::nn::GroupNorm(torch::nn::GroupNormOptions(8, channels[i + 1])));
    seq->push_back(torch::nn::ReLU());
    seq->push_back(
        torch::nn::Conv2d(torch::nn::Conv2dOptions(channels[i + 1], channels[i + 1], 3).padding(1).bias(false)));
    seq->push_back(torch::nn::GroupNorm(torch::nn::GroupNormOptions(8, channels[i + 1])));
    if (i < 3) seq->push_back(torch::nn::ReLU());
  }
  return seq;
}

}  // namespace

DetectorImpl::DetectorImpl(const ModelConfig& config) : config_(config) {
  config_.validate();
  const int64_t d = config.d_model;
  backbone_ = register_module("backbone", make_backbone(config.backbone_width, d));
  encoder_ = register_module("encoder", torch::nn::ModuleList());
  for (int64_t i = 0; i + 1 < config.encoder_layers; ++i) encoder_->push_back(EncoderLayer(d, config.heads, config.ffn_dim));
  if (config.cam_enabled) {
    CamOptions opts;
    opts.d_model = d;
    opts.heads = config.heads;
    opts.ffn_dim = config.ffn_dim;
    opts.pool_grid = config.pool_grid;
    opts.apply_sigmoid = config.apply_sigmoid;
    opts.query_multiply = config.query_multiply;
    opts.model_background = config.model_background;
    cam_ = register_module("cam", Cam(opts));
  } else {
    classwise_ = register_module("classwise", ClasswiseAggregator(d, config.heads, config.ffn_dim, config.pool_grid));
  }
  encoder_norm_ = register_module("encoder_norm", torch::nn::LayerNorm(torch::nn::LayerNormOptions({d})));
  decoder_ = register_module("decoder", torch::nn::ModuleList());
  for (int64_t i = 0; i < config.decoder_layers; ++i) decoder_->push_back(DecoderLayer(d, config.heads, config.ffn_dim));
  decoder_norm_ = register_module("decoder_norm", torch::nn::LayerNorm(torch::nn::LayerNormOptions({d})));
  query_embed_ = register_parameter("query_embed", torch::randn({config.num_queries, d}));
  reference_points_ = register_module("reference_points", torch::nn::Linear(d, 2));
  spatial_query_ = register_module("spatial_query", torch::nn::Sequential(torch::nn::Linear(d, d), torch::nn::ReLU(),
                                                                        torch::nn::Linear(d, d)));
  class_head_ = register_module("class_head", torch::nn::Linear(d, config.num_support_classes));
  // Focal-loss prior: every slot starts as confident background.
  torch::nn::init::constant_(class_head_->bias, -std::log((1.0 - 0.01) / 0.01));
  box_head_ = register_module("box_head", torch::nn::Sequential(torch::nn::Linear(d, d), torch::nn::ReLU(),
                                                                torch::nn::Linear(d, d), torch::nn::ReLU(),
                                                                torch::nn::Linear(d, 4)));
  {
    auto last = box_head_->ptr<torch::nn::LinearImpl>(4);
    torch::nn::init::zeros_(last->weight);
    torch::nn::init::zeros_(last->bias);
  }
  class_embeddings_ = register_parameter("class_embeddings", torch::randn({config.num_dataset_classes, d}));
}

FeatureMap DetectorImpl::extract_features(const torch::Tensor& images) {
  TORCH_CHECK(images.dim() == 4, "extract_features expects (B, C, H, W)");
  const int64_t h = images.size(2);
  const int64_t w = images.size(3);
  if (h < kFeatureStride || w < kFeatureStride) {
    throw Error(Errc::kImageTooSmall, std::to_string(h) + "x" + std::to_string(w) + " is below one feature stride");
  }
  const int64_t pad_h = (kFeatureStride - h % kFeatureStride) % kFeatureStride;
  const int64_t pad_w = (kFeatureStride - w % kFeatureStride) % kFeatureStride;
  auto input = images;
  if (pad_h != 0 || pad_w != 0) {
    input = torch::nn::functional::pad(images, torch::nn::functional::PadFuncOptions({0, pad_w, 0, pad_h}));
  }
  auto fmap = backbone_->forward(input);
  const int64_t fh = fmap.size(2);
  const int64_t fw = fmap.size(3);
  return {fmap.flatten(2).transpose(1, 2), fh, fw};
}

torch::Tensor DetectorImpl::positions(int64_t h, int64_t w, torch::Dtype dtype) {
  return spatial_position_encoding(h, w, config_.d_model, dtype).unsqueeze(0);
}

FeatureMap DetectorImpl::encode_supports(const torch::Tensor& images) {
  FeatureMap fm = extract_features(images.to(query_embed_.dtype()));
  auto pos = positions(fm.h, fm.w, fm.tokens.scalar_type());
  auto x = fm.tokens;
  for (int64_t l = 1; l < config_.cam_placement; ++l) {
    x = encoder_[static_cast<std::size_t>(l - 1)]->as<EncoderLayer>()->forward(x, pos);
  }
  x = config_.cam_enabled ? cam_->encode(x, pos) : classwise_->encode(x, pos);
  return {x, fm.h, fm.w};
}

torch::Tensor DetectorImpl::class_prototypes(const std::vector<std::vector<SupportExample>>& supports_per_class) {
  std::vector<const Image*> images;
  std::vector<Box> boxes;
  for (std::size_t c = 0; c < supports_per_class.size(); ++c) {
    if (supports_per_class[c].empty()) {
      throw Error(Errc::kMissingClassSupport, "class slot " + std::to_string(c) + " has no support example");
    }
    for (const auto& s : supports_per_class[c]) {
      images.push_back(&s.image->image);
      boxes.push_back(s.instance_box);
    }
  }
  if (images.empty()) return torch::zeros({0, config_.d_model}, query_embed_.options());
  FeatureMap fm = encode_supports(images_to_tensor(images));
  std::vector<torch::Tensor> protos;
  std::size_t idx = 0;
  for (const auto& shots : supports_per_class) {
    std::vector<torch::Tensor> pooled;
    for (std::size_t k = 0; k < shots.size(); ++k, ++idx) {
      auto tokens = fm.tokens[static_cast<int64_t>(idx)];
      pooled.push_back(config_.cam_enabled ? cam_->pool_region(tokens, fm.h, fm.w, boxes[idx])
                                           : classwise_->pool_region(tokens, fm.h, fm.w, boxes[idx]));
    }
    protos.push_back(torch::stack(pooled).mean(0));
  }
  return torch::stack(protos);
}

torch::Tensor DetectorImpl::class_prototype(std::span<const SupportExample> supports) {
  return class_prototypes({std::vector<SupportExample>(supports.begin(), supports.end())})[0];
}

torch::Tensor DetectorImpl::with_background(const torch::Tensor& class_prototypes) {
  if (config_.cam_enabled) return cam_->with_background(class_prototypes);
  // Class-wise aggregation has no background prototype; keep the row layout.
  return torch::cat({torch::zeros({1, class_prototypes.size(1)}, class_prototypes.options()), class_prototypes}, 0);
}

torch::Tensor DetectorImpl::run_encoder(const torch::Tensor& tokens, const torch::Tensor& pos,
                                        const torch::Tensor& prototypes, const torch::Tensor& task_encodings) {
  auto x = tokens;
  std::size_t standard = 0;
  for (int64_t l = 1; l <= config_.encoder_layers; ++l) {
    if (l == config_.cam_placement) {
      if (config_.cam_enabled) {
        x = cam_->forward(x, pos, prototypes, task_encodings);
      } else {
        x = classwise_->forward(x, pos, prototypes.select(-2, 1));
      }
    } else {
      x = encoder_[standard++]->as<EncoderLayer>()->forward(x, pos);
    }
  }
  return encoder_norm_(x);
}

PredictionSet DetectorImpl::forward(const torch::Tensor& query_images, const torch::Tensor& prototypes,
                                    const torch::Tensor& task_encodings) {
  const int64_t num_classes = task_encodings.size(0) - 1;
  if (num_classes < 1 || num_classes > config_.num_support_classes) {
    throw Error(Errc::kShapeMismatch, "episode has " + std::to_string(num_classes) + " classes, model supports 1.." +
                                          std::to_string(config_.num_support_classes));
  }
  const auto dtype = query_embed_.scalar_type();
  FeatureMap fm = extract_features(query_images.to(dtype));
  auto pos = positions(fm.h, fm.w, dtype);
  auto memory = run_encoder(fm.tokens, pos, prototypes.to(dtype), task_encodings.to(dtype));

  const int64_t batch = memory.size(0);
  auto query_pos = query_embed_.unsqueeze(0).expand({batch, -1, -1});
  // Learned per-query reference point, in logit space. Its sine encoding steers
  // cross-attention towards the reference location.
  auto reference = reference_points_(query_pos);
  auto spatial = spatial_query_->forward(point_position_encoding(torch::sigmoid(reference), config_.d_model));
  // Boxes start centred on the reference point with side kInitialExtent.
  constexpr double kInitialExtent = 0.2;
  auto offset = torch::cat({reference, torch::full_like(reference, std::log(kInitialExtent / (1.0 - kInitialExtent)))}, -1);
  auto tgt = torch::zeros_like(query_pos);
  PredictionSet out;
  for (const auto& layer : *decoder_) {
    tgt = layer->as<DecoderLayer>()->forward(tgt, query_pos, memory, pos, spatial);
    auto h = decoder_norm_(tgt);
    auto logits = class_head_(h).narrow(-1, 0, num_classes);
    auto delta = box_head_->forward(h);
    out.push_back({logits, torch::sigmoid(delta + offset)});
  }
  return out;
}

torch::Tensor assemble_prototypes(Detector& detector, const PrototypeCache& cache, const ChiMap& chi) {
  std::vector<torch::Tensor> rows;
  for (ClassId c : chi.classes()) {
    auto it = cache.find(c);
    if (it == cache.end()) {
      throw Error(Errc::kMissingClassSupport, "no prototype for class " + std::to_string(to_int(c)));
    }
    rows.push_back(it->second);
  }
  return detector->with_background(torch::stack(rows));
}

PrototypeCache precompute_prototypes(Detector& detector,
                                     const std::map<ClassId, std::vector<SupportExample>>& supports) {
  torch::NoGradGuard no_grad;
  PrototypeCache cache;
  for (const auto& [cls, examples] : supports) {
    if (examples.empty()) {
      throw Error(Errc::kMissingClassSupport, "class " + std::to_string(to_int(cls)) + " has no support example");
    }
    cache.emplace(cls, detector->class_prototype(examples));
  }
  return cache;
}

std::vector<Detection> detect(Detector& detector, const Image& image, const PrototypeCache& cache, const ChiMap& chi,
                              double threshold) {
  torch::NoGradGuard no_grad;
  auto prototypes = assemble_prototypes(detector, cache, chi);
  auto encodings = make_task_encodings(chi.size(), detector->config().d_model);
  const Image* batch[] = {&image};
  PredictionSet preds = detector->forward(images_to_tensor(batch), prototypes, encodings);
  auto scores = torch::sigmoid(preds.back().logits[0]).to(torch::kDouble).contiguous();
  auto boxes = preds.back().boxes[0].to(torch::kDouble).contiguous();
  auto sa = scores.accessor<double, 2>();
  auto ba = boxes.accessor<double, 2>();
  std::vector<RawPrediction> raw;
  for (int64_t slot = 0; slot < scores.size(0); ++slot) {
    for (int64_t enc = 0; enc < scores.size(1); ++enc) {
      if (!(sa[slot][enc] > threshold)) continue;
      XYXYBox xy = cxcywh_to_xyxy({ba[slot][0], ba[slot][1], ba[slot][2], ba[slot][3]});
      xy = {std::clamp(xy.x0, 0.0, 1.0), std::clamp(xy.y0, 0.0, 1.0), std::clamp(xy.x1, 0.0, 1.0),
            std::clamp(xy.y1, 0.0, 1.0)};
      raw.push_back({static_cast<int>(enc) + 1, sa[slot][enc], xyxy_to_cxcywh(xy)});
    }
  }
  return unmap_predictions(raw, chi);
}

std::vector<Detection> detect_all_classes(Detector& detector, const Image& image, const PrototypeCache& cache,
                                          std::span<const ClassId> classes, double threshold) {
  std::vector<Detection> out;
  const auto group = static_cast<std::size_t>(detector->config().num_support_classes);
  for (std::size_t start = 0; start < classes.size(); start += group) {
    const std::size_t len = std::min(group, classes.size() - start);
    ChiMap chi = build_encoding_map(classes.subspan(start, len));
    auto dets = detect(detector, image, cache, chi, threshold);
    out.insert(out.end(), dets.begin(), dets.end());
  }
  return out;
}

Trainer::Trainer(Detector detector, const OptimizerConfig& optim, const LossWeights& weights)
    : detector_(std::move(detector)), optim_config_(optim), weights_(weights) {
  weights_.validate();
  optimizer_ = std::make_unique<torch::optim::AdamW>(
      detector_->parameters(), torch::optim::AdamWOptions(optim.lr).weight_decay(optim.weight_decay));
}

LossBreakdown Trainer::compute_loss(const std::vector<Episode>& episodes, torch::Tensor* proto_loss) {
  TORCH_CHECK(!episodes.empty(), "compute_loss: no episodes");
  const int num_classes = episodes.front().num_classes();
  const auto& cfg = detector_->config();
  std::vector<const Image*> images;
  std::vector<torch::Tensor> per_query;
  std::vector<DetectionTargets> targets;
  std::vector<torch::Tensor> all_protos;
  std::vector<int64_t> labels;
  for (const Episode& ep : episodes) {
    if (ep.num_classes() != num_classes) throw Error(Errc::kShapeMismatch, "episodes in a batch must share C");
    std::vector<std::vector<SupportExample>> supports;
    for (ClassId c : ep.support_classes) {
      supports.push_back(ep.support_sets.at(c));
      labels.push_back(to_int(c));
    }
    auto protos = detector_->class_prototypes(supports);
    all_protos.push_back(protos);
    auto with_bg = detector_->with_background(protos);
    for (const auto& q : ep.query_images) {
      images.push_back(&q->image);
      per_query.push_back(with_bg);
      targets.push_back(
          remap_targets(q->annotations, ep.support_classes, ep.encoding_map, static_cast<std::size_t>(cfg.num_queries)));
    }
  }
  auto encodings = make_task_encodings(num_classes, cfg.d_model);
  PredictionSet preds = detector_->forward(images_to_tensor(images), torch::stack(per_query), encodings);
  auto assignments = match_all_layers(preds, targets, weights_);
  LossBreakdown loss = detection_loss(preds, targets, assignments, weights_);
  auto proto = prototype_class_loss(torch::cat(all_protos), torch::tensor(labels, torch::kLong),
                                    detector_->class_embeddings(), weights_.proto_temperature);
  loss.total = loss.total + weights_.w_proto * proto;
  if (proto_loss != nullptr) *proto_loss = proto;
  return loss;
}

StepReport Trainer::train_step(const std::vector<Episode>& episodes) {
  detector_->train();
  optimizer_->zero_grad();
  torch::Tensor proto;
  StepReport report;
  report.step = step_ + 1;
  LossBreakdown loss;
  try {
    loss = compute_loss(episodes, &proto);
  } catch (const Error& e) {
    // Non-finite predictions surface first in the matching cost.
    if (e.code() != Errc::kNonFiniteCost) throw;
    throw Error(Errc::kNonFiniteLoss, "step " + std::to_string(report.step) + ": " + e.what());
  }
  report.total = loss.total.item<double>();
  report.cls = loss.cls.item<double>();
  report.l1 = loss.l1.item<double>();
  report.giou = loss.giou.item<double>();
  report.proto = proto.item<double>();
  if (!std::isfinite(report.total)) {
    throw Error(Errc::kNonFiniteLoss, "step " + std::to_string(report.step) + ": total=" + std::to_string(report.total) +
                                          " cls=" + std::to_string(report.cls) + " l1=" + std::to_string(report.l1) +
                                          " giou=" + std::to_string(report.giou) +
                                          " proto=" + std::to_string(report.proto));
  }
  loss.total.backward();
  report.grad_norm = torch::nn::utils::clip_grad_norm_(detector_->parameters(), optim_config_.grad_clip);
  const double lr = (optim_config_.lr_drop_step > 0 && step_ >= optim_config_.lr_drop_step) ? optim_config_.lr * 0.1
                                                                                              : optim_config_.lr;
  for (auto& group : optimizer_->param_groups()) static_cast<torch::optim::AdamWOptions&>(group.options()).lr(lr);
  optimizer_->step();
  ++step_;
  return report;
}

namespace {

constexpr const char* kManifestKey = "manifest";

std::string archive_key(const std::string& name) {
  std::string key = name;
  std::replace(key.begin(), key.end(), '.', '/');
  return "tensors/" + key;
}

}  // namespace

void save_checkpoint(Detector& detector, const std::string& manifest_json, const std::string& path) {
  torch::serialize::OutputArchive archive;
  for (const auto& item : detector->named_parameters()) archive.write(archive_key(item.key()), item.value().detach());
  for (const auto& item : detector->named_buffers()) archive.write(archive_key(item.key()), item.value(), true);
  archive.write(kManifestKey, c10::IValue(manifest_json));
  try {
    archive.save_to(path);
  } catch (const c10::Error& e) {
    throw Error(Errc::kIoError, "cannot write checkpoint " + path + ": " + e.what_without_backtrace());
  }
}

namespace {

torch::serialize::InputArchive open_archive(const std::string& path) {
  torch::serialize::InputArchive archive;
  try {
    archive.load_from(path);
  } catch (const c10::Error& e) {
    throw Error(Errc::kIoError, "cannot read checkpoint " + path + ": " + e.what_without_backtrace());
  }
  return archive;
}

std::string manifest_of(torch::serialize::InputArchive& archive) {
  c10::IValue value;
  if (!archive.try_read(kManifestKey, value) || !value.isString()) {
    throw Error(Errc::kIoError, "checkpoint has no manifest");
  }
  return value.toStringRef();
}

}  // namespace

std::string load_checkpoint(Detector& detector, const std::string& path) {
  auto archive = open_archive(path);
  torch::NoGradGuard no_grad;
  auto restore = [&](const std::string& name, torch::Tensor& target, bool is_buffer) {
    torch::Tensor loaded;
    if (!archive.try_read(archive_key(name), loaded, is_buffer)) {
      throw Error(Errc::kIoError, "checkpoint lacks tensor " + name);
    }
    if (loaded.sizes() != target.sizes()) throw Error(Errc::kShapeMismatch, "checkpoint tensor " + name + " has another shape");
    target.copy_(loaded);
  };
  for (auto& item : detector->named_parameters()) restore(item.key(), item.value(), false);
  for (auto& item : detector->named_buffers()) restore(item.key(), item.value(), true);
  return manifest_of(archive);
}

std::string read_checkpoint_manifest(const std::string& path) {
  auto archive = open_archive(path);
  return manifest_of(archive);
}

}  // namespace corrdet
