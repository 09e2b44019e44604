#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <limits>
#include <sstream>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "corrdet/data.hpp"
#include "corrdet/detector.hpp"
#include "corrdet/eval.hpp"
#include "corrdet/geometry.hpp"
#include "corrdet/pipeline.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace corrdet;

namespace {

// ---- configuration -------------------------------------------------------

struct CommonOptions {
  std::string config_file;
  std::vector<std::string> overrides;  // dotted.key=value
  std::string output_dir;
  std::string dataset;
  std::int64_t seed = -1;
};

json parse_value(const std::string& text) {
  try {
    return json::parse(text);
  } catch (const json::exception&) {
    return text;  // bare strings need no quotes
  }
}

json read_json_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(Errc::kIoError, "cannot open config " + path.string());
  try {
    return json::parse(in, nullptr, true, true);
  } catch (const json::exception& e) {
    throw Error(Errc::kInvalidConfig, path.string() + ": " + e.what());
  }
}

// Defaults < config file < --set overrides < dedicated flags.
RunConfig resolve_config(const CommonOptions& opts) {
  json patch = json::object();
  if (!opts.config_file.empty()) patch = read_json_file(opts.config_file);
  for (const auto& kv : opts.overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw Error(Errc::kInvalidConfig, "--set expects key=value, got '" + kv + "'");
    json* node = &patch;
    std::stringstream path(kv.substr(0, eq));
    std::string part;
    std::vector<std::string> parts;
    while (std::getline(path, part, '.')) parts.push_back(part);
    for (std::size_t i = 0; i + 1 < parts.size(); ++i) node = &(*node)[parts[i]];
    (*node)[parts.back()] = parse_value(kv.substr(eq + 1));
  }
  if (!opts.output_dir.empty()) patch["output_dir"] = opts.output_dir;
  if (!opts.dataset.empty()) patch["dataset"] = opts.dataset;
  if (opts.seed >= 0) patch["seed"] = opts.seed;
  return run_config_from_json(patch);
}

fs::path run_directory(const RunConfig& config) {
  fs::path dir = config.output_dir;
  if (const char* root = std::getenv("CORRDET_OUTPUT_ROOT"); root != nullptr && *root != '\0' && dir.is_relative()) {
    dir = fs::path(root) / dir;
  }
  return dir;
}

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw Error(Errc::kIoError, "cannot create " + dir.string() + ": " + ec.message());
}

void write_file(const fs::path& path, const std::string& text) {
  std::ofstream out(path);
  out << text;
  if (!out) throw Error(Errc::kIoError, "cannot write " + path.string());
}

struct RunDir {
  fs::path root;
  json manifest;

  RunDir(const RunConfig& config, const std::string& command, int argc, char** argv) : root(run_directory(config)) {
    for (const char* sub : {"checkpoints", "logs", "reports"}) ensure_dir(root / sub);
    write_file(root / "config.resolved", to_json(config).dump(2) + "\n");
    json args = json::array();
    for (int i = 0; i < argc; ++i) args.push_back(argv[i]);
    manifest = {{"command", command}, {"argv", args}, {"config", to_json(config)}, {"outputs", json::object()}};
  }

  void finish() const { write_file(root / "manifest.json", manifest.dump(2) + "\n"); }
};

FewShotDataset open_dataset(const RunConfig& config) {
  if (config.dataset.empty()) throw Error(Errc::kInvalidConfig, "no dataset directory given (--dataset)");
  if (!fs::exists(fs::path(config.dataset) / "manifest.json")) {
    throw Error(Errc::kIoError, "dataset " + config.dataset + " not found (run generate-data first)");
  }
  return FewShotDataset::load(config.dataset);
}

// ---- loss logging --------------------------------------------------------

class LossLog {
 public:
  LossLog(const fs::path& path, bool append) : out_(path, append ? std::ios::app : std::ios::trunc) {
    if (!out_) throw Error(Errc::kIoError, "cannot open " + path.string());
    if (!append || fs::file_size(path) == 0) out_ << "step,loss_total,loss_cls,loss_l1,loss_giou,loss_proto\n";
  }

  void write(const StepReport& r) {
    out_ << r.step << ',' << r.total << ',' << r.cls << ',' << r.l1 << ',' << r.giou << ',' << r.proto << '\n';
    out_.flush();
  }

 private:
  std::ofstream out_;
};

void print_step(const StepReport& r) {
  std::cout << "step " << r.step << "  loss " << r.total << "  cls " << r.cls << "  l1 " << r.l1 << "  giou " << r.giou
            << "  proto " << r.proto << std::endl;
}

std::string checkpoint_name(std::int64_t step) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "step_%07lld.pt", static_cast<long long>(step));
  return buf;
}

// ---- commands ------------------------------------------------------------

int cmd_generate_data(const CommonOptions& opts, const std::string& out) {
  RunConfig config = resolve_config(opts);
  const fs::path dir = out.empty() ? fs::path(config.dataset) : fs::path(out);
  if (dir.empty()) throw Error(Errc::kInvalidConfig, "no output directory (--out or --dataset)");
  FewShotDataset ds = build_dataset(config.data, dir);
  std::cout << "wrote " << ds.base.size() << " base, " << ds.fewshot.size() << " few-shot and " << ds.test.size()
            << " test scenes to " << dir.string() << std::endl;
  return 0;
}

int cmd_train_base(const CommonOptions& opts, const std::string& resume, int argc, char** argv) {
  RunConfig config = resolve_config(opts);
  config.stage = Stage::kBase;
  FewShotDataset ds = open_dataset(config);
  RunDir run(config, "train-base", argc, argv);

  Detector detector = make_detector(config);
  Trainer trainer(detector, config.optim, config.loss);
  if (!resume.empty()) {
    CheckpointInfo info = load_training_state(trainer, resume);
    if (info.stage != Stage::kBase) throw Error(Errc::kStageMismatch, "resume checkpoint is not a base checkpoint");
    run.manifest["resumed_from"] = {{"checkpoint", resume}, {"step", info.step}};
    std::cout << "resuming at step " << info.step << std::endl;
  }
  EpisodeSampler sampler(ds, EpisodeOptions{config.num_classes, config.shots, config.queries_per_episode});
  // The stream depends on the start step so a resumed run does not replay earlier episodes.
  std::mt19937_64 rng(config.seed * 1000003ULL + static_cast<std::uint64_t>(trainer.step()));
  LossLog log(run.root / "logs" / "train_base.csv", !resume.empty());

  auto info_at = [&](std::int64_t step) {
    CheckpointInfo info;
    info.stage = Stage::kBase;
    info.step = step;
    info.config = to_json(config);
    info.model = detector->config();
    return info;
  };
  double window = 0.0;
  int in_window = 0;
  double best = std::numeric_limits<double>::infinity();
  train_episodes(trainer, sampler, rng, config.base_steps - trainer.step(), config.episodes_per_step,
                 [&](const StepReport& r) {
                   log.write(r);
                   window += r.total;
                   ++in_window;
                   if (r.step % config.log_every == 0) {
                     print_step(r);
                     const double mean = window / in_window;
                     if (mean < best) {
                       best = mean;
                       save_training_state(trainer, info_at(r.step), run.root / "checkpoints" / "best.pt");
                     }
                     window = 0.0;
                     in_window = 0;
                   }
                   if (r.step % config.checkpoint_every == 0) {
                     save_training_state(trainer, info_at(r.step), run.root / "checkpoints" / checkpoint_name(r.step));
                   }
                 });
  save_training_state(trainer, info_at(trainer.step()), run.root / "checkpoints" / "final.pt");
  if (!fs::exists(run.root / "checkpoints" / "best.pt")) {
    fs::copy_file(run.root / "checkpoints" / "final.pt", run.root / "checkpoints" / "best.pt",
                  fs::copy_options::overwrite_existing);
  }
  run.manifest["outputs"] = {{"final", "checkpoints/final.pt"}, {"best", "checkpoints/best.pt"},
                             {"loss_log", "logs/train_base.csv"}, {"steps", trainer.step()}};
  run.finish();
  std::cout << "final checkpoint: " << (run.root / "checkpoints" / "final.pt").string() << std::endl;
  return 0;
}

Detector detector_for_stage(const std::string& checkpoint, Stage required, const RunConfig& config) {
  CheckpointInfo info = read_checkpoint_info(checkpoint);
  if (info.stage != required) {
    throw Error(Errc::kStageMismatch, checkpoint + " is a '" + std::string(stage_name(info.stage)) +
                                          "' checkpoint, expected '" + std::string(stage_name(required)) + "'");
  }
  if (config.num_classes > info.model.num_support_classes) {
    throw Error(Errc::kInvalidConfig, "C=" + std::to_string(config.num_classes) + " exceeds the checkpoint's C=" +
                                          std::to_string(info.model.num_support_classes));
  }
  return load_detector(checkpoint);
}

int cmd_finetune(const CommonOptions& opts, const std::string& checkpoint, int shots, std::int64_t support_seed,
                 int argc, char** argv) {
  RunConfig config = resolve_config(opts);
  config.stage = Stage::kFinetune;
  if (shots > 0) config.shots = shots;
  const std::uint64_t seed = support_seed >= 0 ? static_cast<std::uint64_t>(support_seed) : config.support_seeds.front();
  FewShotDataset ds = open_dataset(config);
  Detector detector = detector_for_stage(checkpoint, Stage::kBase, config);
  RunDir run(config, "finetune", argc, argv);

  OptimizerConfig optim = config.optim;
  optim.lr = config.finetune_lr;
  optim.lr_drop_step = 0;
  Trainer trainer(detector, optim, config.loss);
  KShotSupportSet kshot = build_finetune_set(ds, config.shots, seed, config.balanced_base);
  save_support_set(kshot, run.root / "supports");
  LossLog log(run.root / "logs" / "finetune.csv", false);
  finetune(trainer, ds, config, seed, [&](const StepReport& r) {
    log.write(r);
    if (r.step % config.log_every == 0) print_step(r);
  });

  CheckpointInfo info;
  info.stage = Stage::kFinetune;
  info.step = trainer.step();
  info.config = to_json(config);
  info.model = detector->config();
  info.shots = config.shots;
  info.support_seed = seed;
  info.support_manifest = kshot.manifest();
  save_training_state(trainer, info, run.root / "checkpoints" / "final.pt");
  run.manifest["base_checkpoint"] = checkpoint;
  run.manifest["K"] = config.shots;
  run.manifest["support_seed"] = seed;
  run.manifest["support_manifest"] = kshot.manifest();
  run.manifest["outputs"] = {{"final", "checkpoints/final.pt"}, {"supports", "supports/supports.json"},
                             {"loss_log", "logs/finetune.csv"}};
  run.finish();
  std::cout << "fine-tuned checkpoint: " << (run.root / "checkpoints" / "final.pt").string() << std::endl;
  return 0;
}

std::vector<std::pair<ClassId, ClassId>> parse_pairs(const std::vector<std::string>& specs) {
  std::vector<std::pair<ClassId, ClassId>> out;
  for (const auto& s : specs) {
    const auto colon = s.find(':');
    if (colon == std::string::npos) throw Error(Errc::kInvalidConfig, "pair must be 'classA:classB', got " + s);
    out.emplace_back(class_from_name(s.substr(0, colon)), class_from_name(s.substr(colon + 1)));
  }
  return out;
}

int cmd_evaluate(const CommonOptions& opts, const std::string& checkpoint, std::vector<std::uint64_t> seeds,
                 int shots, const std::vector<std::string>& pair_specs, int argc, char** argv) {
  RunConfig config = resolve_config(opts);
  CheckpointInfo info = read_checkpoint_info(checkpoint);
  if (shots > 0) {
    config.shots = shots;
  } else if (info.shots) {
    config.shots = *info.shots;
  }
  if (seeds.empty()) seeds = info.support_seed ? std::vector<std::uint64_t>{*info.support_seed} : config.support_seeds;
  config.num_classes = static_cast<int>(info.model.num_support_classes);
  FewShotDataset ds = open_dataset(config);
  Detector detector = load_detector(checkpoint);
  RunDir run(config, "evaluate", argc, argv);
  const auto pairs = parse_pairs(pair_specs);

  std::vector<APReport> reports;
  std::vector<PairConfusion> confusion_total;
  json outputs = json::array();
  for (std::uint64_t seed : seeds) {
    SeedEvaluation ev = evaluate_seed(detector, ds, config, seed);
    const std::string ap_file = "reports/ap_seed" + std::to_string(seed) + ".csv";
    write_ap_csv(ev.report, run.root / ap_file);
    auto confusion = confusion_pairs(above(ev.detections, config.detect_threshold), ground_truth_of(ds.test), pairs,
                                     config.iou_threshold);
    const std::string conf_file = "reports/confusion_seed" + std::to_string(seed) + ".csv";
    write_confusion_csv(confusion, run.root / conf_file);
    if (confusion_total.empty()) {
      confusion_total = confusion;
    } else {
      for (std::size_t i = 0; i < confusion.size(); ++i) confusion_total[i] += confusion[i];
    }
    std::cout << "support seed " << seed << "\n" << format_ap_table(ev.report) << std::endl;
    outputs.push_back({{"seed", seed}, {"ap", ap_file}, {"confusion", conf_file}});
    reports.push_back(ev.report);
  }
  write_confusion_csv(confusion_total, run.root / "reports" / "confusion_total.csv");
  if (reports.size() >= 2) {
    MultiRunReport multi = multi_run_report(reports);
    write_multi_run_csv(multi, run.root / "reports" / "ap_multi.csv");
    std::cout << format_multi_run_table(multi) << std::endl;
  }
  run.manifest["checkpoint"] = checkpoint;
  run.manifest["K"] = config.shots;
  run.manifest["support_seeds"] = seeds;
  run.manifest["outputs"] = {{"per_seed", outputs}, {"confusion_total", "reports/confusion_total.csv"}};
  if (reports.size() >= 2) run.manifest["outputs"]["multi_run"] = "reports/ap_multi.csv";
  run.finish();
  return 0;
}

int cmd_predict(const CommonOptions& opts, const std::string& checkpoint, const std::string& image_path,
                const std::string& support_dir, double threshold, const std::string& out_prefix) {
  RunConfig config = resolve_config(opts);
  if (threshold < 0.0) threshold = config.detect_threshold;
  Detector detector = load_detector(checkpoint);
  detector->eval();
  auto supports = load_support_set(support_dir);
  PrototypeCache cache = precompute_prototypes(detector, supports);
  std::vector<ClassId> classes;
  for (const auto& [cls, examples] : supports) classes.push_back(cls);
  Image image = read_image(image_path);
  auto dets = detect_all_classes(detector, image, cache, classes, threshold);

  const fs::path prefix = out_prefix.empty() ? fs::path(image_path).replace_extension("") : fs::path(out_prefix);
  if (prefix.has_parent_path()) ensure_dir(prefix.parent_path());
  const fs::path csv = prefix.string() + "_detections.csv";
  std::ofstream out(csv);
  out << "class_id,class_name,score,x0,y0,x1,y1\n";
  for (const Detection& d : dets) {
    const XYXYBox b = cxcywh_to_xyxy(d.box);
    out << to_int(d.class_id) << ',' << class_name(d.class_id) << ',' << d.score << ',' << b.x0 * image.width << ','
        << b.y0 * image.height << ',' << b.x1 * image.width << ',' << b.y1 * image.height << '\n';
  }
  if (!out) throw Error(Errc::kIoError, "cannot write " + csv.string());
  const fs::path overlay = prefix.string() + "_overlay.png";
  write_image(draw_boxes(image, dets), overlay);
  std::cout << dets.size() << " detections -> " << csv.string() << ", " << overlay.string() << std::endl;
  return 0;
}

struct CamFlags {
  bool sigmoid;
  bool multiply;
  bool background;
};

CamFlags parse_cam_flags(const std::string& value) {
  CamFlags f{false, false, false};
  if (value == "none") return f;
  std::stringstream ss(value);
  std::string part;
  while (std::getline(ss, part, '+')) {
    if (part == "sigmoid") {
      f.sigmoid = true;
    } else if (part == "multiply") {
      f.multiply = true;
    } else if (part == "background") {
      f.background = true;
    } else {
      throw Error(Errc::kInvalidConfig, "unknown cam flag '" + part + "' (sigmoid, multiply, background, none)");
    }
  }
  return f;
}

RunConfig apply_axis(RunConfig config, const std::string& axis, const std::string& value) {
  try {
    if (axis == "C") {
      config.num_classes = std::stoi(value);
    } else if (axis == "cam_placement") {
      config.model.cam_placement = std::stoi(value);
    } else if (axis == "cam_flags") {
      const CamFlags f = parse_cam_flags(value);
      config.model.apply_sigmoid = f.sigmoid;
      config.model.query_multiply = f.multiply;
      config.model.model_background = f.background;
    } else {
      throw Error(Errc::kInvalidConfig, "unknown sweep axis '" + axis + "' (C, cam_flags, cam_placement)");
    }
  } catch (const std::logic_error&) {
    throw Error(Errc::kInvalidConfig, "bad value '" + value + "' for axis " + axis);
  }
  config.validate();
  return config;
}

std::vector<std::string> default_axis_values(const std::string& axis, const RunConfig& config) {
  if (axis == "C") return {"1", "2", "5", "8"};
  if (axis == "cam_flags") return {"none", "background", "sigmoid+multiply", "sigmoid+multiply+background"};
  std::vector<std::string> out;
  for (int64_t l = 1; l <= config.model.encoder_layers; ++l) out.push_back(std::to_string(l));
  return out;
}

int cmd_sweep(const CommonOptions& opts, const std::string& axis, std::vector<std::string> values,
              const std::string& checkpoint, const std::vector<std::string>& pair_specs, int argc, char** argv) {
  RunConfig config = resolve_config(opts);
  FewShotDataset ds = open_dataset(config);
  if (values.empty()) values = default_axis_values(axis, config);
  RunDir run(config, "sweep", argc, argv);
  const auto pairs = parse_pairs(pair_specs);
  const fs::path table = run.root / "reports" / ("sweep_" + axis + ".csv");
  std::ofstream out(table);
  out << "axis,value,seeds,novel_mean,novel_std,base_mean,base_std,overall_mean,overall_std,confusion_cross\n";
  json rows = json::array();
  for (const auto& value : values) {
    RunConfig vc = apply_axis(config, axis, value);
    Detector base{nullptr};
    if (!checkpoint.empty()) {
      CheckpointInfo info = read_checkpoint_info(checkpoint);
      if (info.stage != Stage::kBase) throw Error(Errc::kStageMismatch, "sweep needs a base checkpoint");
      ModelConfig mc = info.model;
      mc.apply_sigmoid = vc.model.apply_sigmoid;
      mc.query_multiply = vc.model.query_multiply;
      mc.model_background = vc.model.model_background;
      mc.cam_placement = vc.model.cam_placement;
      if (vc.num_classes > mc.num_support_classes) {
        throw Error(Errc::kInvalidConfig, "C=" + value + " exceeds the checkpoint's C");
      }
      base = Detector(mc);
      load_checkpoint(base, checkpoint);
    } else {
      std::cout << "[" << axis << "=" << value << "] base training, " << vc.base_steps << " steps" << std::endl;
      base = make_detector(vc);
      Trainer trainer(base, vc.optim, vc.loss);
      EpisodeSampler sampler(ds, EpisodeOptions{vc.num_classes, vc.shots, vc.queries_per_episode});
      std::mt19937_64 rng(vc.seed * 1000003ULL);
      LossLog log(run.root / "logs" / ("base_" + axis + "_" + value + ".csv"), false);
      train_episodes(trainer, sampler, rng, vc.base_steps, vc.episodes_per_step, [&](const StepReport& r) {
        log.write(r);
        if (r.step % vc.log_every == 0) print_step(r);
      });
    }
    std::vector<APReport> reports;
    int cross = 0;
    for (std::uint64_t seed : vc.support_seeds) {
      Detector det = clone_detector(base);
      OptimizerConfig optim = vc.optim;
      optim.lr = vc.finetune_lr;
      optim.lr_drop_step = 0;
      Trainer trainer(det, optim, vc.loss);
      finetune(trainer, ds, vc, seed);
      SeedEvaluation ev = evaluate_seed(det, ds, vc, seed);
      for (const auto& c :
           confusion_pairs(above(ev.detections, vc.detect_threshold), ground_truth_of(ds.test), pairs, vc.iou_threshold)) {
        cross += c.cross();
      }
      std::cout << "[" << axis << "=" << value << "] seed " << seed << " novel mAP " << ev.report.novel_map << std::endl;
      reports.push_back(ev.report);
    }
    RunStat novel;
    RunStat base_stat;
    RunStat overall;
    if (reports.size() >= 2) {
      MultiRunReport m = multi_run_report(reports);
      novel = m.novel;
      base_stat = m.base;
      overall = m.overall;
    } else {
      novel = {reports[0].novel_map, 0.0, 1};
      base_stat = {reports[0].base_map, 0.0, 1};
      overall = {reports[0].overall_map, 0.0, 1};
    }
    std::string seed_list;
    for (std::uint64_t s : vc.support_seeds) seed_list += (seed_list.empty() ? "" : " ") + std::to_string(s);
    out << axis << ',' << value << ',' << seed_list << ',' << novel.mean << ',' << novel.stddev << ',' << base_stat.mean
        << ',' << base_stat.stddev << ',' << overall.mean << ',' << overall.stddev << ',' << cross << '\n';
    out.flush();
    rows.push_back({{"value", value}, {"novel_mean", novel.mean}, {"novel_std", novel.stddev}});
  }
  if (!out) throw Error(Errc::kIoError, "cannot write " + table.string());
  run.manifest["axis"] = axis;
  run.manifest["values"] = values;
  run.manifest["support_seeds"] = config.support_seeds;
  run.manifest["outputs"] = {{"table", "reports/sweep_" + axis + ".csv"}};
  run.finish();
  std::cout << "sweep table: " << table.string() << std::endl;
  return 0;
}

void add_common(CLI::App* cmd, CommonOptions& opts) {
  cmd->add_option("--config", opts.config_file, "JSON config file");
  cmd->add_option("--set", opts.overrides, "Override a config key: dotted.key=value (repeatable)");
  cmd->add_option("--output", opts.output_dir, "Run directory (relative paths honour CORRDET_OUTPUT_ROOT)");
  cmd->add_option("--dataset", opts.dataset, "Dataset directory");
  cmd->add_option("--seed", opts.seed, "Run seed");
}

}  // namespace

int main(int argc, char** argv) {
  torch::set_num_threads(1);
  CLI::App app{"Few-shot detection with correlational aggregation"};
  app.require_subcommand(1);
  CommonOptions opts;

  auto* gen = app.add_subcommand("generate-data", "Render the synthetic dataset");
  add_common(gen, opts);
  std::string gen_out;
  gen->add_option("--out", gen_out, "Output directory (defaults to --dataset)");

  auto* base = app.add_subcommand("train-base", "Episodic training on base classes");
  add_common(base, opts);
  std::string resume;
  base->add_option("--resume", resume, "Continue from a base checkpoint");

  auto* ft = app.add_subcommand("finetune", "Fine-tune a base checkpoint on a K-shot set");
  add_common(ft, opts);
  std::string ft_ckpt;
  int ft_shots = 0;
  std::int64_t ft_seed = -1;
  ft->add_option("--checkpoint", ft_ckpt, "Base checkpoint")->required();
  ft->add_option("--shots,-K", ft_shots, "Shots per class");
  ft->add_option("--support-seed", ft_seed, "Seed of the K-shot set");

  auto* ev = app.add_subcommand("evaluate", "mAP@0.5 over one or more support seeds");
  add_common(ev, opts);
  std::string ev_ckpt;
  std::vector<std::uint64_t> ev_seeds;
  int ev_shots = 0;
  std::vector<std::string> ev_pairs = {"ring-filled:circle-filled"};
  ev->add_option("--checkpoint", ev_ckpt, "Checkpoint to evaluate")->required();
  ev->add_option("--seeds", ev_seeds, "Support seeds")->delimiter(',');
  ev->add_option("--shots,-K", ev_shots, "Shots per class");
  ev->add_option("--pair", ev_pairs, "Class pair for confusion counts, a:b (repeatable)");

  auto* pr = app.add_subcommand("predict", "Detect the support classes in one image");
  add_common(pr, opts);
  std::string pr_ckpt;
  std::string pr_image;
  std::string pr_supports;
  std::string pr_out;
  double pr_threshold = -1.0;
  pr->add_option("--checkpoint", pr_ckpt, "Checkpoint")->required();
  pr->add_option("--image", pr_image, "Query image")->required();
  pr->add_option("--supports", pr_supports, "Support directory (supports.json + images)")->required();
  pr->add_option("--threshold", pr_threshold, "Score threshold (default: detect_threshold)");
  pr->add_option("--out", pr_out, "Output prefix for <prefix>_detections.csv and <prefix>_overlay.png");

  auto* sw = app.add_subcommand("sweep", "Fine-tune and evaluate along one ablation axis");
  add_common(sw, opts);
  std::string sw_axis;
  std::vector<std::string> sw_values;
  std::string sw_ckpt;
  std::vector<std::string> sw_pairs = {"ring-filled:circle-filled"};
  sw->add_option("--axis", sw_axis, "C, cam_flags or cam_placement")->required();
  sw->add_option("--values", sw_values, "Axis values (comma separated)")->delimiter(',');
  sw->add_option("--checkpoint", sw_ckpt, "Base checkpoint shared by all values (otherwise each value is base-trained)");
  sw->add_option("--pair", sw_pairs, "Class pair for confusion counts, a:b (repeatable)");

  CLI11_PARSE(app, argc, argv);
  try {
    if (*gen) return cmd_generate_data(opts, gen_out);
    if (*base) return cmd_train_base(opts, resume, argc, argv);
    if (*ft) return cmd_finetune(opts, ft_ckpt, ft_shots, ft_seed, argc, argv);
    if (*ev) return cmd_evaluate(opts, ev_ckpt, ev_seeds, ev_shots, ev_pairs, argc, argv);
    if (*pr) return cmd_predict(opts, pr_ckpt, pr_image, pr_supports, pr_threshold, pr_out);
    if (*sw) return cmd_sweep(opts, sw_axis, sw_values, sw_ckpt, sw_pairs, argc, argv);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << std::endl;
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << std::endl;
    return 3;
  }
  return 1;
}
