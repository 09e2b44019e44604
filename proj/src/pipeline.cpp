#include "corrdet/pipeline.hpp"

#include <algorithm>
#include <fstream>
#include <set>

namespace corrdet {

using nlohmann::json;

void RunConfig::validate() {
  auto fail = [](const std::string& msg) { throw Error(Errc::kInvalidConfig, msg); };
  if (num_classes < 1) fail("C must be >= 1");
  if (shots < 1) fail("K must be >= 1");
  model.num_support_classes = num_classes;
  model.num_dataset_classes = kNumShapeClasses;
  model.validate();
  loss.validate();
  data.validate();
  if (base_steps < 0 || finetune_steps < 0) fail("step counts must be >= 0");
  if (episodes_per_step < 1 || queries_per_episode < 1) fail("episodes_per_step and queries_per_episode must be >= 1");
  if (!(optim.lr > 0.0) || !(finetune_lr > 0.0)) fail("learning rates must be positive");
  if (support_seeds.empty()) fail("support_seeds must not be empty");
  if (!(iou_threshold > 0.0 && iou_threshold <= 1.0)) fail("iou_threshold must lie in (0, 1]");
  if (log_every < 1 || checkpoint_every < 1) fail("log_every and checkpoint_every must be >= 1");
}

json to_json(const ModelConfig& c) {
  return json{{"d_model", c.d_model},
              {"heads", c.heads},
              {"ffn_dim", c.ffn_dim},
              {"encoder_layers", c.encoder_layers},
              {"decoder_layers", c.decoder_layers},
              {"num_queries", c.num_queries},
              {"cam_placement", c.cam_placement},
              {"cam_enabled", c.cam_enabled},
              {"apply_sigmoid", c.apply_sigmoid},
              {"query_multiply", c.query_multiply},
              {"model_background", c.model_background},
              {"pool_grid", c.pool_grid},
              {"backbone_width", c.backbone_width}};
}

json to_json(const LossWeights& w) {
  return json{{"w_cls", w.w_cls},
              {"w_l1", w.w_l1},
              {"w_giou", w.w_giou},
              {"w_proto", w.w_proto},
              {"focal_alpha", w.focal_alpha},
              {"focal_gamma", w.focal_gamma},
              {"proto_temperature", w.proto_temperature}};
}

json to_json(const OptimizerConfig& o) {
  return json{{"lr", o.lr}, {"weight_decay", o.weight_decay}, {"grad_clip", o.grad_clip}, {"lr_drop_step", o.lr_drop_step}};
}

json to_json(const RunConfig& c) {
  return json{{"dataset", c.dataset},
              {"data", to_json(c.data)},
              {"stage", std::string(stage_name(c.stage))},
              {"C", c.num_classes},
              {"K", c.shots},
              {"model", to_json(c.model)},
              {"loss", to_json(c.loss)},
              {"optim", to_json(c.optim)},
              {"base_steps", c.base_steps},
              {"finetune_steps", c.finetune_steps},
              {"finetune_lr", c.finetune_lr},
              {"episodes_per_step", c.episodes_per_step},
              {"queries_per_episode", c.queries_per_episode},
              {"seed", c.seed},
              {"support_seeds", c.support_seeds},
              {"balanced_base", c.balanced_base},
              {"iou_threshold", c.iou_threshold},
              {"eval_threshold", c.eval_threshold},
              {"detect_threshold", c.detect_threshold},
              {"log_every", c.log_every},
              {"checkpoint_every", c.checkpoint_every},
              {"output_dir", c.output_dir}};
}

namespace {

void check_known_keys(const json& given, const json& known, const std::string& prefix) {
  if (!given.is_object()) return;
  for (const auto& [key, value] : given.items()) {
    if (!known.contains(key)) throw Error(Errc::kInvalidConfig, "unknown config key '" + prefix + key + "'");
    if (value.is_object() && known.at(key).is_object()) check_known_keys(value, known.at(key), prefix + key + ".");
  }
}

template <typename T>
void read(const json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

void read_model(const json& m, ModelConfig& c) {
  read(m, "d_model", c.d_model);
  read(m, "heads", c.heads);
  read(m, "ffn_dim", c.ffn_dim);
  read(m, "encoder_layers", c.encoder_layers);
  read(m, "decoder_layers", c.decoder_layers);
  read(m, "num_queries", c.num_queries);
  read(m, "cam_placement", c.cam_placement);
  read(m, "cam_enabled", c.cam_enabled);
  read(m, "apply_sigmoid", c.apply_sigmoid);
  read(m, "query_multiply", c.query_multiply);
  read(m, "model_background", c.model_background);
  read(m, "pool_grid", c.pool_grid);
  read(m, "backbone_width", c.backbone_width);
  read(m, "num_support_classes", c.num_support_classes);
  read(m, "num_dataset_classes", c.num_dataset_classes);
}

ModelConfig model_config_from_json(const json& j) {
  ModelConfig c;
  read_model(j, c);
  c.validate();
  return c;
}

}  // namespace

RunConfig run_config_from_json(const json& j, const RunConfig& defaults) {
  const json known = to_json(defaults);
  if (!j.is_object()) throw Error(Errc::kInvalidConfig, "config must be a JSON object");
  check_known_keys(j, known, "");
  json merged = known;
  merged.merge_patch(j);
  RunConfig c = defaults;
  try {
    read(merged, "dataset", c.dataset);
    c.data = shape_world_from_json(merged.at("data"));
    c.stage = stage_from_name(merged.at("stage").get<std::string>());
    read(merged, "C", c.num_classes);
    read(merged, "K", c.shots);
    read_model(merged.at("model"), c.model);
    const json& l = merged.at("loss");
    read(l, "w_cls", c.loss.w_cls);
    read(l, "w_l1", c.loss.w_l1);
    read(l, "w_giou", c.loss.w_giou);
    read(l, "w_proto", c.loss.w_proto);
    read(l, "focal_alpha", c.loss.focal_alpha);
    read(l, "focal_gamma", c.loss.focal_gamma);
    read(l, "proto_temperature", c.loss.proto_temperature);
    const json& o = merged.at("optim");
    read(o, "lr", c.optim.lr);
    read(o, "weight_decay", c.optim.weight_decay);
    read(o, "grad_clip", c.optim.grad_clip);
    read(o, "lr_drop_step", c.optim.lr_drop_step);
    read(merged, "base_steps", c.base_steps);
    read(merged, "finetune_steps", c.finetune_steps);
    read(merged, "finetune_lr", c.finetune_lr);
    read(merged, "episodes_per_step", c.episodes_per_step);
    read(merged, "queries_per_episode", c.queries_per_episode);
    read(merged, "seed", c.seed);
    read(merged, "support_seeds", c.support_seeds);
    read(merged, "balanced_base", c.balanced_base);
    read(merged, "iou_threshold", c.iou_threshold);
    read(merged, "eval_threshold", c.eval_threshold);
    read(merged, "detect_threshold", c.detect_threshold);
    read(merged, "log_every", c.log_every);
    read(merged, "checkpoint_every", c.checkpoint_every);
    read(merged, "output_dir", c.output_dir);
  } catch (const json::exception& e) {
    throw Error(Errc::kInvalidConfig, std::string("bad config value: ") + e.what());
  }
  c.validate();
  return c;
}

Detector make_detector(const RunConfig& config) {
  RunConfig c = config;
  c.validate();
  torch::manual_seed(c.seed);
  return Detector(c.model);
}

StepReport train_episodes(Trainer& trainer, const EpisodeSampler& sampler, std::mt19937_64& rng, int64_t steps,
                          int episodes_per_step, const StepCallback& on_step) {
  StepReport last;
  for (int64_t i = 0; i < steps; ++i) {
    std::vector<Episode> batch;
    for (int e = 0; e < episodes_per_step; ++e) batch.push_back(sampler.sample(rng));
    last = trainer.train_step(batch);
    if (on_step) on_step(last);
  }
  return last;
}

std::vector<ClassId> evaluation_order(const ClassSplit& split) {
  std::vector<ClassId> order(split.novel().begin(), split.novel().end());
  order.insert(order.end(), split.base().begin(), split.base().end());
  return order;
}

std::vector<std::vector<Detection>> detect_pool(Detector& detector, const std::vector<ImageRef>& images,
                                                const PrototypeCache& cache, std::span<const ClassId> classes,
                                                double threshold) {
  torch::NoGradGuard no_grad;
  detector->eval();
  std::vector<std::vector<Detection>> out;
  out.reserve(images.size());
  for (const auto& img : images) out.push_back(detect_all_classes(detector, img->image, cache, classes, threshold));
  return out;
}

std::vector<std::vector<Annotation>> ground_truth_of(const std::vector<ImageRef>& images) {
  std::vector<std::vector<Annotation>> out;
  out.reserve(images.size());
  for (const auto& img : images) out.push_back(img->annotations);
  return out;
}

std::vector<std::vector<Detection>> above(const std::vector<std::vector<Detection>>& detections, double threshold) {
  std::vector<std::vector<Detection>> out(detections.size());
  for (std::size_t i = 0; i < detections.size(); ++i) {
    std::copy_if(detections[i].begin(), detections[i].end(), std::back_inserter(out[i]),
                 [&](const Detection& d) { return d.score > threshold; });
  }
  return out;
}

SeedEvaluation evaluate_seed(Detector& detector, const FewShotDataset& dataset, const RunConfig& config,
                             std::uint64_t support_seed, std::optional<std::vector<ClassId>> classes) {
  KShotSupportSet kshot = build_finetune_set(dataset, config.shots, support_seed, config.balanced_base);
  detector->eval();
  PrototypeCache cache = precompute_prototypes(detector, kshot.supports);
  const std::vector<ClassId> order = classes ? *classes : evaluation_order(dataset.split);
  SeedEvaluation out;
  out.detections = detect_pool(detector, dataset.test, cache, order, config.eval_threshold);
  out.report = evaluate_map(out.detections, ground_truth_of(dataset.test), dataset.split, config.iou_threshold,
                            support_seed);
  return out;
}

json to_json(const CheckpointInfo& info) {
  json model = to_json(info.model);
  model["num_support_classes"] = info.model.num_support_classes;
  model["num_dataset_classes"] = info.model.num_dataset_classes;
  json j{{"stage", std::string(stage_name(info.stage))}, {"step", info.step}, {"config", info.config}, {"model", model}};
  if (info.shots) j["K"] = *info.shots;
  if (info.support_seed) j["support_seed"] = *info.support_seed;
  if (!info.support_manifest.is_null()) j["support_manifest"] = info.support_manifest;
  return j;
}

CheckpointInfo checkpoint_info_from_json(const json& j) {
  CheckpointInfo info;
  try {
    info.stage = stage_from_name(j.at("stage").get<std::string>());
    info.step = j.at("step").get<int64_t>();
    info.config = j.at("config");
    info.model = model_config_from_json(j.at("model"));
    if (j.contains("K")) info.shots = j.at("K").get<int>();
    if (j.contains("support_seed")) info.support_seed = j.at("support_seed").get<std::uint64_t>();
    if (j.contains("support_manifest")) info.support_manifest = j.at("support_manifest");
  } catch (const json::exception& e) {
    throw Error(Errc::kIoError, std::string("malformed checkpoint manifest: ") + e.what());
  }
  return info;
}

namespace {

std::filesystem::path optimizer_path(const std::filesystem::path& path) { return path.string() + ".optim"; }

}  // namespace

void save_training_state(Trainer& trainer, const CheckpointInfo& info, const std::filesystem::path& path) {
  save_checkpoint(trainer.detector(), to_json(info).dump(), path.string());
  try {
    torch::save(trainer.optimizer(), optimizer_path(path).string());
  } catch (const c10::Error& e) {
    throw Error(Errc::kIoError, "cannot write optimizer state: " + std::string(e.what_without_backtrace()));
  }
}

CheckpointInfo load_training_state(Trainer& trainer, const std::filesystem::path& path) {
  CheckpointInfo info = checkpoint_info_from_json(json::parse(load_checkpoint(trainer.detector(), path.string())));
  if (std::filesystem::exists(optimizer_path(path))) {
    try {
      torch::load(trainer.optimizer(), optimizer_path(path).string());
    } catch (const c10::Error& e) {
      throw Error(Errc::kIoError, "cannot read optimizer state: " + std::string(e.what_without_backtrace()));
    }
  }
  trainer.set_step(info.step);
  return info;
}

CheckpointInfo read_checkpoint_info(const std::filesystem::path& path) {
  return checkpoint_info_from_json(json::parse(read_checkpoint_manifest(path.string())));
}

Detector load_detector(const std::filesystem::path& path) {
  Detector detector(read_checkpoint_info(path).model);
  load_checkpoint(detector, path.string());
  return detector;
}

Detector clone_detector(Detector& detector) {
  Detector copy(detector->config());
  torch::NoGradGuard no_grad;
  auto src = detector->named_parameters();
  for (auto& item : copy->named_parameters()) item.value().copy_(src[item.key()]);
  auto src_buffers = detector->named_buffers();
  for (auto& item : copy->named_buffers()) item.value().copy_(src_buffers[item.key()]);
  copy->to(detector->parameters().front().scalar_type());
  return copy;
}

void save_support_set(const KShotSupportSet& kshot, const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir / "images", ec);
  if (ec) throw Error(Errc::kIoError, "cannot create " + dir.string() + ": " + ec.message());
  json entries = json::array();
  std::set<std::int64_t> written;
  for (const auto& [cls, examples] : kshot.supports) {
    for (const auto& e : examples) {
      const std::string file = "images/support_" + std::to_string(e.image->image_id) + ".png";
      if (written.insert(e.image->image_id).second) write_image(e.image->image, dir / file);
      const Box& b = e.instance_box;
      entries.push_back({{"class", class_name(cls)}, {"image", file}, {"bbox_cxcywh", {b.cx, b.cy, b.w, b.h}}});
    }
  }
  json doc{{"K", kshot.shots}, {"seed", kshot.seed}, {"supports", entries}};
  std::ofstream out(dir / "supports.json");
  out << doc.dump(1);
  if (!out) throw Error(Errc::kIoError, "cannot write " + (dir / "supports.json").string());
}

std::map<ClassId, std::vector<SupportExample>> load_support_set(const std::filesystem::path& dir) {
  std::ifstream in(dir / "supports.json");
  if (!in) throw Error(Errc::kIoError, "cannot open " + (dir / "supports.json").string());
  std::map<ClassId, std::vector<SupportExample>> out;
  std::map<std::string, ImageRef> images;
  try {
    const json doc = json::parse(in);
    std::int64_t next_id = 0;
    for (const auto& e : doc.at("supports")) {
      const std::string file = e.at("image").get<std::string>();
      auto& ref = images[file];
      if (!ref) {
        LabeledImage img;
        img.image_id = next_id++;
        img.image = read_image(dir / file);
        ref = std::make_shared<const LabeledImage>(std::move(img));
      }
      const auto& b = e.at("bbox_cxcywh");
      const Box box{b[0].get<double>(), b[1].get<double>(), b[2].get<double>(), b[3].get<double>()};
      if (!box.valid()) throw Error(Errc::kBoxOutOfBounds, "support box outside the image in " + file);
      out[class_from_name(e.at("class").get<std::string>())].push_back({ref, box});
    }
  } catch (const json::exception& e) {
    throw Error(Errc::kIoError, "malformed supports.json: " + std::string(e.what()));
  }
  if (out.empty()) throw Error(Errc::kMissingClassSupport, "support set is empty");
  return out;
}

StepReport finetune(Trainer& trainer, const FewShotDataset& dataset, const RunConfig& config,
                    std::uint64_t support_seed, const StepCallback& on_step) {
  KShotSupportSet kshot = build_finetune_set(dataset, config.shots, support_seed, config.balanced_base);
  EpisodeSampler sampler(dataset, kshot, EpisodeOptions{config.num_classes, config.shots, config.queries_per_episode});
  std::mt19937_64 rng(config.seed ^ (support_seed * 0x9E3779B97F4A7C15ULL));
  return train_episodes(trainer, sampler, rng, config.finetune_steps, config.episodes_per_step, on_step);
}

}  // namespace corrdet
