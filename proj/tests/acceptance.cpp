// One PASS/FAIL line per acceptance criterion. `--only a,b` restricts the run.
#include <algorithm>
#include <chrono>
#include <cmath>
#include <functional>
#include <iomanip>
#include <iostream>
#include <numeric>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "corrdet/cam.hpp"
#include "corrdet/data.hpp"
#include "corrdet/detector.hpp"
#include "corrdet/eval.hpp"
#include "corrdet/geometry.hpp"
#include "corrdet/losses.hpp"
#include "corrdet/matcher.hpp"
#include "corrdet/pipeline.hpp"
#include "corrdet/targetgen.hpp"

using namespace corrdet;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(double v, int precision = 4) {
  std::ostringstream s;
  s << std::setprecision(precision) << v;
  return s.str();
}

void log(const std::string& msg) { std::cerr << "  .. " << msg << std::endl; }

Box random_box(std::mt19937_64& rng, double min_size = 0.05) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const double w = min_size + (1.0 - min_size) * u(rng);
  const double h = min_size + (1.0 - min_size) * u(rng);
  return {0.5 * w + (1.0 - w) * u(rng), 0.5 * h + (1.0 - h) * u(rng), w, h};
}

// ---- matcher --------------------------------------------------------------

Outcome matcher_optimality() {
  const auto t0 = Clock::now();
  std::mt19937_64 rng(2024);
  std::uniform_real_distribution<double> real(0.0, 10.0);
  std::uniform_int_distribution<int> small(0, 4);
  int mismatches = 0;
  for (int trial = 0; trial < 500; ++trial) {
    const std::size_t n = 2 + static_cast<std::size_t>(trial % 6);
    Matrix cost(n, n);
    // Every third matrix has small integers so that ties are common.
    for (double& v : cost.values) v = trial % 3 == 0 ? small(rng) : real(rng);
    const Assignment a = hungarian_match(cost);
    std::vector<int> perm(n);
    std::iota(perm.begin(), perm.end(), 0);
    double best = std::numeric_limits<double>::infinity();
    do {
      double total = 0.0;
      for (std::size_t i = 0; i < n; ++i) total += cost(i, static_cast<std::size_t>(perm[i]));
      best = std::min(best, total);
    } while (std::next_permutation(perm.begin(), perm.end()));
    std::vector<int> sorted = a.sigma;
    std::sort(sorted.begin(), sorted.end());
    bool is_perm = sorted.size() == n;
    for (std::size_t i = 0; is_perm && i < n; ++i) is_perm = sorted[i] == static_cast<int>(i);
    double total = 0.0;
    for (std::size_t i = 0; is_perm && i < n; ++i) total += cost(i, static_cast<std::size_t>(a.sigma[i]));
    if (!is_perm || total != best) ++mismatches;
  }
  const double secs = seconds_since(t0);
  return {mismatches == 0 && secs < 10.0,
          "500 matrices N=2..7, mismatches vs exhaustive minimum = " + std::to_string(mismatches) +
              " (tolerance 0), runtime " + fmt(secs, 3) + " s (< 10 s)"};
}

// ---- gradients -------------------------------------------------------------

double relative_error(const torch::Tensor& analytic, const torch::Tensor& numeric) {
  const double diff = (analytic - numeric).norm().item<double>();
  const double scale = std::max({analytic.norm().item<double>(), numeric.norm().item<double>(), 1e-300});
  return diff / scale;
}

torch::Tensor central_differences(const std::function<torch::Tensor()>& f, const torch::Tensor& input,
                                  double step = 1e-6) {
  torch::NoGradGuard no_grad;
  auto flat = input.view({-1});
  auto grad = torch::zeros_like(flat);
  for (int64_t i = 0; i < flat.numel(); ++i) {
    const double orig = flat[i].item<double>();
    flat[i] = orig + step;
    const double plus = f().item<double>();
    flat[i] = orig - step;
    const double minus = f().item<double>();
    flat[i] = orig;
    grad[i] = (plus - minus) / (2.0 * step);
  }
  return grad.view(input.sizes());
}

double worst_gradient_error(const std::function<torch::Tensor()>& f, const std::vector<torch::Tensor>& inputs) {
  for (const auto& t : inputs) {
    if (t.grad().defined()) t.mutable_grad().zero_();
  }
  f().backward();
  double worst = 0.0;
  for (const auto& t : inputs) {
    // An input the output does not depend on has an undefined (zero) gradient.
    const auto analytic = t.grad().defined() ? t.grad().clone() : torch::zeros_like(t);
    worst = std::max(worst, relative_error(analytic, central_differences(f, t)));
  }
  return worst;
}

DetectionTargets random_targets(std::mt19937_64& rng, int slots, int classes) {
  DetectionTargets t;
  std::uniform_int_distribution<int> count(0, slots);
  std::uniform_int_distribution<int> label(1, classes);
  const int objects = count(rng);
  for (int i = 0; i < slots; ++i) {
    if (i < objects) {
      t.labels.push_back(label(rng));
      t.boxes.emplace_back(random_box(rng, 0.1));
    } else {
      t.labels.push_back(kBackgroundEncoding);
      t.boxes.emplace_back(std::nullopt);
    }
  }
  return t;
}

Outcome gradient_correctness() {
  const auto t0 = Clock::now();
  const auto f64 = torch::TensorOptions().dtype(torch::kDouble);
  std::map<std::string, double> worst;
  for (int seed = 0; seed < 20; ++seed) {
    torch::manual_seed(static_cast<uint64_t>(seed));
    std::mt19937_64 rng(static_cast<uint64_t>(seed) + 99);
    std::uniform_int_distribution<int> dim(1, 4);
    const LossWeights weights;

    {  // focal loss
      auto logits = (torch::randn({dim(rng), dim(rng)}, f64) * 2.0).requires_grad_();
      auto targets = torch::randint(0, 2, logits.sizes(), f64);
      auto readout = torch::rand(logits.sizes(), f64);
      auto f = [&] {
        return (sigmoid_focal_loss(logits, targets, weights.focal_alpha, weights.focal_gamma).per_element * readout)
            .sum();
      };
      worst["sigmoid_focal_loss"] = std::max(worst["sigmoid_focal_loss"], worst_gradient_error(f, {logits}));
    }
    {  // box loss, L1 and GIoU terms
      const int64_t n = dim(rng);
      auto raw = torch::randn({n, 4}, f64).requires_grad_();
      std::vector<double> tv;
      for (int64_t i = 0; i < n; ++i) {
        const Box b = random_box(rng, 0.1);
        tv.insert(tv.end(), {b.cx, b.cy, b.w, b.h});
      }
      auto target = torch::tensor(tv, f64).view({n, 4});
      auto r1 = torch::rand({n}, f64);
      auto r2 = torch::rand({n}, f64);
      auto f = [&] {
        BoxLoss b = box_loss(torch::sigmoid(raw), target);
        return (b.l1 * r1 + b.giou * r2).sum();
      };
      worst["box_loss"] = std::max(worst["box_loss"], worst_gradient_error(f, {raw}));
    }
    {  // prototype classification loss
      const int64_t c = dim(rng);
      const int64_t m = c + dim(rng);
      const int64_t d = 2 + dim(rng);
      auto protos = torch::randn({c, d}, f64).requires_grad_();
      auto emb = torch::randn({m, d}, f64).requires_grad_();
      auto labels = torch::randperm(m, torch::kLong).narrow(0, 0, c);
      auto f = [&] { return prototype_class_loss(protos, labels, emb, 0.5); };
      worst["prototype_class_loss"] = std::max(worst["prototype_class_loss"], worst_gradient_error(f, {protos, emb}));
    }
    {  // correlational aggregation forward
      CamOptions o;
      o.d_model = 8;
      o.heads = 2;
      o.ffn_dim = 16;
      o.pool_grid = 3;
      Cam cam(o);
      cam->to(torch::kDouble);
      const int64_t c = dim(rng);
      const int64_t h = 1 + dim(rng) / 2;
      const int64_t w = 1 + dim(rng) / 2;
      auto q = torch::randn({1, h * w, 8}, f64).requires_grad_();
      auto s = torch::randn({c + 1, 8}, f64).requires_grad_();
      auto pos = spatial_position_encoding(h, w, 8, torch::kDouble).unsqueeze(0);
      auto enc = make_task_encodings(c, 8, torch::kDouble);
      auto readout = torch::randn({1, h * w, 8}, f64);
      auto f = [&] { return (cam->forward(q, pos, s, enc) * readout).sum(); };
      std::vector<torch::Tensor> inputs = {q, s};
      for (const auto& p : cam->named_parameters()) {
        if (p.key() == "projection.weight" || p.key() == "ffn.fc1.weight") inputs.push_back(p.value());
      }
      worst["cam_forward"] = std::max(worst["cam_forward"], worst_gradient_error(f, inputs));
    }
    {  // detection loss under a fixed matching
      const int b = 1 + seed % 2;
      const int n = 1 + dim(rng);
      const int c = dim(rng);
      const int layers = 1 + seed % 2;
      std::vector<torch::Tensor> logits;
      std::vector<torch::Tensor> raw;
      for (int l = 0; l < layers; ++l) {
        logits.push_back(torch::randn({b, n, c}, f64).requires_grad_());
        raw.push_back(torch::randn({b, n, 4}, f64).requires_grad_());
      }
      std::vector<DetectionTargets> targets;
      for (int i = 0; i < b; ++i) targets.push_back(random_targets(rng, n, c));
      auto preds = [&] {
        PredictionSet p;
        for (int l = 0; l < layers; ++l) p.push_back({logits[l], torch::sigmoid(raw[l])});
        return p;
      };
      std::vector<std::vector<Assignment>> assignments;
      {
        torch::NoGradGuard ng;
        assignments = match_all_layers(preds(), targets, weights);
      }
      auto f = [&] { return detection_loss(preds(), targets, assignments, weights).total; };
      std::vector<torch::Tensor> inputs = logits;
      inputs.insert(inputs.end(), raw.begin(), raw.end());
      worst["detection_loss"] = std::max(worst["detection_loss"], worst_gradient_error(f, inputs));
    }
  }
  const double secs = seconds_since(t0);
  bool ok = secs < 60.0;
  std::string detail = "20 seeds, float64, max rel. error:";
  for (const auto& [name, err] : worst) {
    ok = ok && err < 1e-4;
    detail += " " + name + "=" + fmt(err, 3);
  }
  return {ok, detail + " (< 1e-4), runtime " + fmt(secs, 3) + " s (< 60 s)"};
}

// ---- aggregation algebra ------------------------------------------------------

// Every (slot, encoding) pair of the last decoder layer as a detection; logit column j
// belongs to encoding j + 1 whichever row order the pairs were given in.
std::vector<Detection> final_detections(const PredictionSet& preds, const ChiMap& chi) {
  auto scores = torch::sigmoid(preds.back().logits[0]).to(torch::kDouble).contiguous();
  auto boxes = preds.back().boxes[0].to(torch::kDouble).contiguous();
  std::vector<RawPrediction> raw;
  for (int64_t slot = 0; slot < scores.size(0); ++slot) {
    for (int64_t enc = 0; enc < scores.size(1); ++enc) {
      raw.push_back({static_cast<int>(enc) + 1, scores[slot][enc].item<double>(),
                     {boxes[slot][0].item<double>(), boxes[slot][1].item<double>(), boxes[slot][2].item<double>(),
                      boxes[slot][3].item<double>()}});
    }
  }
  return unmap_predictions(raw, chi);
}

Outcome cam_algebra() {
  torch::NoGradGuard ng;
  CamOptions o;
  o.d_model = 32;
  o.heads = 4;
  o.ffn_dim = 64;
  o.pool_grid = 3;
  torch::manual_seed(11);
  Cam cam(o);
  cam->eval();
  std::mt19937_64 rng(11);
  std::uniform_int_distribution<int64_t> classes(1, 8);

  // (a) row-stochastic coefficients
  double row_err = 0.0;
  for (int i = 0; i < 100; ++i) {
    const int64_t c = classes(rng);
    auto q = torch::randn({2, 16, 32}) * (1.0 + i % 5);
    auto pos = spatial_position_encoding(4, 4, 32).unsqueeze(0);
    auto s = cam->with_background(torch::randn({c, 32}) * (1.0 + i % 3));
    MatchResult m;
    cam->forward_with_match(q, pos, s, make_task_encodings(c, 32), &m);
    row_err = std::max(row_err, (m.coefficients.sum(-1) - 1.0).abs().max().item<double>());
  }

  // (b) joint permutation of prototypes and encodings
  bool cam_bitwise = true;
  for (int trial = 0; trial < 30; ++trial) {
    const int64_t c = classes(rng);
    auto q = torch::randn({1, 16, 32});
    auto pos = spatial_position_encoding(4, 4, 32).unsqueeze(0);
    auto s = cam->with_background(torch::randn({c, 32}));
    auto t = make_task_encodings(c, 32);
    std::vector<int64_t> order(static_cast<std::size_t>(c));
    std::iota(order.begin(), order.end(), 1);
    std::shuffle(order.begin(), order.end(), rng);
    order.insert(order.begin(), 0);
    auto perm = torch::tensor(order, torch::kLong);
    cam_bitwise = cam_bitwise && torch::equal(cam->forward(q, pos, s, t),
                                              cam->forward(q, pos, s.index_select(0, perm), t.index_select(0, perm)));
  }
  ShapeWorldConfig sc;
  sc.image_size = 64;
  sc.base_scenes = 10;
  sc.fewshot_scenes_per_class = 2;
  sc.test_scenes = 10;
  const FewShotDataset ds = FewShotDataset::generate(sc);
  ModelConfig mc;
  mc.d_model = 32;
  mc.heads = 4;
  mc.ffn_dim = 64;
  mc.encoder_layers = 2;
  mc.decoder_layers = 2;
  mc.num_queries = 8;
  mc.backbone_width = 8;
  mc.num_support_classes = 5;
  torch::manual_seed(12);
  Detector det(mc);
  det->eval();
  const KShotSupportSet kshot = build_finetune_set(ds, 2, 0);
  const PrototypeCache cache = precompute_prototypes(det, kshot.supports);
  bool det_bitwise = true;
  const std::vector<ClassId> order = {ClassId{11}, ClassId{1}, ClassId{6}, ClassId{0}, ClassId{9}};
  const ChiMap chi = build_encoding_map(order);
  const auto protos = assemble_prototypes(det, cache, chi);
  const auto encodings = make_task_encodings(chi.size(), mc.d_model);
  for (const auto& img : ds.test) {
    const Image* batch[] = {&img->image};
    const auto pixels = images_to_tensor(batch);
    const auto reference = final_detections(det->forward(pixels, protos, encodings), chi);
    for (int p = 0; p < 3; ++p) {
      std::vector<int64_t> rows = {1, 2, 3, 4, 5};
      std::shuffle(rows.begin(), rows.end(), rng);
      rows.insert(rows.begin(), 0);
      const auto perm = torch::tensor(rows, torch::kLong);
      const auto permuted = det->forward(pixels, protos.index_select(0, perm), encodings.index_select(0, perm));
      det_bitwise = det_bitwise && final_detections(permuted, chi) == reference;
    }
  }

  // (c) zero query features give uniform coefficients
  double uniform_err = 0.0;
  for (int64_t c = 0; c <= 8; ++c) {
    for (auto dtype : {torch::kFloat, torch::kDouble}) {
      Cam local(o);
      local->to(dtype);
      auto s = torch::randn({c + 1, 32}, torch::TensorOptions().dtype(dtype)) * 3.0;
      MatchResult m = local->feature_match(torch::zeros({1, 16, 32}, torch::TensorOptions().dtype(dtype)), s);
      uniform_err = std::max(uniform_err, (m.coefficients - 1.0 / static_cast<double>(c + 1)).abs().max().item<double>());
    }
  }
  const bool ok = row_err < 1e-6 && cam_bitwise && det_bitwise && uniform_err < 1e-6;
  return {ok, "(a) max |row sum - 1| over 100 inputs = " + fmt(row_err, 3) + " (< 1e-6); (b) aggregation output " +
                  (cam_bitwise ? "bitwise equal" : "DIFFERS") + " on 30 permutations, detections " +
                  (det_bitwise ? "bitwise equal" : "DIFFER") + " on 10 images x 3 permutations; (c) max |A - 1/(C+1)| = " +
                  fmt(uniform_err, 3) + " (< 1e-6)"};
}

// ---- target generation --------------------------------------------------------

Outcome target_generation() {
  ShapeWorldConfig sc;
  sc.image_size = 64;
  sc.base_scenes = 300;
  sc.fewshot_scenes_per_class = 2;
  sc.test_scenes = 2;
  const FewShotDataset ds = FewShotDataset::generate(sc);
  std::mt19937_64 rng(77);
  int round_trip_failures = 0;
  int leak_failures = 0;
  int empty_failures = 0;
  int empty_checked = 0;
  const std::size_t slots = 10;
  for (int trial = 0; trial < 1000; ++trial) {
    const int c = 1 + trial % 5;
    EpisodeSampler sampler(ds, EpisodeOptions{c, 1, 2});
    const Episode ep = sampler.sample(rng);
    for (const auto& query : ep.query_images) {
      const auto& anns = query->annotations;
      const DetectionTargets t = remap_targets(anns, ep.support_classes, ep.encoding_map, slots);
      std::vector<Annotation> kept;
      for (const auto& a : anns) {
        if (ep.encoding_map.contains(a.class_id)) kept.push_back(a);
      }
      std::vector<RawPrediction> raw;
      std::size_t non_empty = 0;
      for (std::size_t s = 0; s < t.slots(); ++s) {
        if (t.empty_slot(s) != !t.boxes[s].has_value()) ++leak_failures;
        if (!t.empty_slot(s)) {
          ++non_empty;
          raw.push_back({t.labels[s], 1.0, *t.boxes[s]});
        }
      }
      if (non_empty != kept.size()) ++leak_failures;
      const auto back = unmap_predictions(raw, ep.encoding_map);
      bool same = back.size() == kept.size();
      for (std::size_t i = 0; same && i < kept.size(); ++i) {
        same = back[i].class_id == kept[i].class_id && back[i].box == kept[i].box;
      }
      if (!same) ++round_trip_failures;

      // Against classes absent from the image every slot must be empty and carry no box loss.
      std::vector<ClassId> absent;
      for (int k = 0; k < kNumShapeClasses && static_cast<int>(absent.size()) < c; ++k) {
        const ClassId id{k};
        if (std::none_of(anns.begin(), anns.end(), [&](const Annotation& a) { return a.class_id == id; })) {
          absent.push_back(id);
        }
      }
      const ChiMap chi = build_encoding_map(absent);
      const DetectionTargets empty = remap_targets(anns, absent, chi, slots);
      if (empty.num_objects() != 0) ++leak_failures;
      ++empty_checked;
      auto logits = torch::randn({1, static_cast<int64_t>(slots), c}, torch::kDouble);
      auto boxes = torch::rand({1, static_cast<int64_t>(slots), 4}, torch::kDouble).requires_grad_();
      PredictionSet preds = {{logits, boxes}};
      const auto assignments = match_all_layers(preds, {empty}, LossWeights{});
      const LossBreakdown loss = detection_loss(preds, {empty}, assignments, LossWeights{});
      const auto box_terms = loss.l1 + loss.giou;
      if (box_terms.requires_grad()) box_terms.backward();
      const bool zero_grad = !boxes.grad().defined() || boxes.grad().abs().max().item<double>() == 0.0;
      if (loss.l1.item<double>() != 0.0 || loss.giou.item<double>() != 0.0 || !zero_grad) ++empty_failures;
    }
  }
  const bool ok = round_trip_failures == 0 && leak_failures == 0 && empty_failures == 0;
  return {ok, "1000 episodes: round-trip failures = " + std::to_string(round_trip_failures) +
                  ", out-of-support leaks = " + std::to_string(leak_failures) + ", non-zero box loss in " +
                  std::to_string(empty_failures) + " of " + std::to_string(empty_checked) + " all-empty targets"};
}

// ---- task encodings -------------------------------------------------------------

Outcome sinusoidal_encodings() {
  double row0 = 0.0;
  for (int64_t c : {1, 3, 8, 30}) {
    for (int64_t d : {4, 16, 128}) {
      row0 = std::max(row0, make_task_encodings(c, d, torch::kDouble)[0].abs().max().item<double>());
    }
  }
  auto t = make_task_encodings(1, 4, torch::kDouble);
  const double expected[4] = {0.841471, 0.540302, 0.0099998, 0.99995};
  double err = 0.0;
  for (int k = 0; k < 4; ++k) err = std::max(err, std::abs(t[1][k].item<double>() - expected[k]));
  return {row0 == 0.0 && err < 1e-5, "row 0 max |value| = " + fmt(row0) + " (exactly 0); d=4 position 1 max error = " +
                                         fmt(err, 3) + " (< 1e-5)"};
}

// ---- cached prototypes --------------------------------------------------------------

Outcome efficient_inference() {
  torch::NoGradGuard ng;
  ShapeWorldConfig sc;
  sc.image_size = 64;
  sc.base_scenes = 10;
  sc.fewshot_scenes_per_class = 4;
  sc.test_scenes = 50;
  const FewShotDataset ds = FewShotDataset::generate(sc);
  ModelConfig mc;
  mc.d_model = 32;
  mc.heads = 4;
  mc.ffn_dim = 64;
  mc.encoder_layers = 2;
  mc.decoder_layers = 2;
  mc.num_queries = 8;
  mc.backbone_width = 8;
  mc.num_support_classes = 5;
  torch::manual_seed(5);
  Detector det(mc);
  det->eval();
  const KShotSupportSet kshot = build_finetune_set(ds, 2, 3);
  const PrototypeCache cache = precompute_prototypes(det, kshot.supports);
  const std::vector<ClassId> order = evaluation_order(ds.split);
  int equal = 0;
  std::size_t compared = 0;
  for (const auto& img : ds.test) {
    const auto cached = detect_all_classes(det, img->image, cache, order, 0.0);
    const auto fresh = detect_all_classes(det, img->image, precompute_prototypes(det, kshot.supports), order, 0.0);
    compared += cached.size();
    if (cached == fresh) ++equal;
  }
  return {equal == 50, std::to_string(equal) + "/50 images bitwise equal (" + std::to_string(compared) +
                           " detections compared over all 12 classes)"};
}

// ---- overfitting one episode ------------------------------------------------------------

Outcome overfit_sanity() {
  const auto t0 = Clock::now();
  ShapeWorldConfig sc;
  sc.image_size = 64;
  sc.base_scenes = 50;
  sc.fewshot_scenes_per_class = 3;
  sc.test_scenes = 5;
  const FewShotDataset ds = FewShotDataset::generate(sc);
  ModelConfig mc;
  mc.d_model = 64;
  mc.heads = 4;
  mc.ffn_dim = 128;
  mc.encoder_layers = 2;
  mc.decoder_layers = 2;
  mc.num_queries = 10;
  mc.backbone_width = 16;
  mc.num_support_classes = 5;
  torch::manual_seed(0);
  Detector det(mc);
  Trainer trainer(det, OptimizerConfig{.lr = 1e-3, .lr_drop_step = 1000}, LossWeights{});
  EpisodeSampler sampler(ds, EpisodeOptions{5, 2, 2});
  std::mt19937_64 rng(0);
  const Episode ep = sampler.sample(rng);
  StepReport last;
  int64_t first_below = -1;
  for (int i = 1; i <= 2000; ++i) {
    last = trainer.train_step({ep});
    if (first_below < 0 && last.total < 0.05) first_below = i;
  }
  const double secs = seconds_since(t0);
  return {last.total < 0.05 && secs < 600.0,
          "total loss after 2000 steps = " + fmt(last.total) + " (< 0.05; first below at step " +
              std::to_string(first_below) + "), runtime " + fmt(secs, 3) + " s (< 600 s)"};
}

// ---- desk-scale experiment ----------------------------------------------------------------

struct ExperimentSetup {
  static constexpr int kShots = 2;
  static constexpr int64_t kBaseSteps = 12000;
  static constexpr int64_t kFinetuneSteps = 300;
  static constexpr double kBaseLr = 5e-4;
  static constexpr double kFinetuneLr = 5e-5;
  static inline const std::vector<std::uint64_t> kSeeds = {0, 1, 2, 3, 4};
  // Novel classes plus the two circle classes, one full group at C=5.
  static inline const std::vector<ClassId> kClasses = {ClassId{6}, ClassId{9}, ClassId{11}, ClassId{0}, ClassId{1}};
  static inline const std::pair<ClassId, ClassId> kPair = {ClassId{11}, ClassId{1}};
};

struct VariantResult {
  std::string name;
  std::vector<double> novel_map;
  std::vector<int> cross;
  int empty_scenes = 0;
  int silent_empty_scenes = 0;
  double minutes = 0.0;
};

FewShotDataset experiment_dataset() {
  ShapeWorldConfig sc;
  sc.image_size = 64;
  sc.min_scale = 0.25;
  sc.max_scale = 0.5;
  return FewShotDataset::generate(sc);
}

VariantResult run_variant(const FewShotDataset& ds, const std::string& name, int c, bool cam) {
  const auto t0 = Clock::now();
  RunConfig cfg;
  cfg.num_classes = c;
  cfg.shots = ExperimentSetup::kShots;
  cfg.model.d_model = 64;
  cfg.model.heads = 4;
  cfg.model.ffn_dim = 128;
  cfg.model.encoder_layers = 2;
  cfg.model.decoder_layers = 2;
  cfg.model.num_queries = 10;
  cfg.model.backbone_width = 16;
  cfg.model.cam_enabled = cam;
  cfg.optim.lr = ExperimentSetup::kBaseLr;
  cfg.optim.lr_drop_step = ExperimentSetup::kBaseSteps * 2 / 3;
  cfg.base_steps = ExperimentSetup::kBaseSteps;
  cfg.finetune_steps = ExperimentSetup::kFinetuneSteps;
  cfg.finetune_lr = ExperimentSetup::kFinetuneLr;
  cfg.episodes_per_step = 1;
  cfg.queries_per_episode = 8;
  cfg.validate();

  Detector base = make_detector(cfg);
  {
    Trainer trainer(base, cfg.optim, cfg.loss);
    EpisodeSampler sampler(ds, EpisodeOptions{c, cfg.shots, cfg.queries_per_episode});
    std::mt19937_64 rng(cfg.seed);
    double window = 0.0;
    train_episodes(trainer, sampler, rng, cfg.base_steps, cfg.episodes_per_step, [&](const StepReport& r) {
      window += r.total;
      if (r.step % 2000 == 0) {
        log(name + ": base step " + std::to_string(r.step) + ", mean loss " + fmt(window / 2000.0) + ", " +
            fmt(seconds_since(t0) / 60.0, 3) + " min");
        window = 0.0;
      }
    });
  }
  VariantResult out;
  out.name = name;
  RunConfig ft = cfg;
  ft.queries_per_episode = 4;
  for (std::uint64_t seed : ExperimentSetup::kSeeds) {
    Detector det = clone_detector(base);
    det->train();
    Trainer trainer(det, OptimizerConfig{.lr = cfg.finetune_lr, .weight_decay = cfg.optim.weight_decay,
                                         .grad_clip = cfg.optim.grad_clip},
                    cfg.loss);
    finetune(trainer, ds, ft, seed);
    const SeedEvaluation ev = evaluate_seed(det, ds, ft, seed, ExperimentSetup::kClasses);
    const auto confusion = confusion_pairs(above(ev.detections, ft.detect_threshold), ground_truth_of(ds.test),
                                           std::span(&ExperimentSetup::kPair, 1), ft.iou_threshold);
    // Scenes holding none of the evaluated classes should produce no detection above threshold.
    for (std::size_t i = 0; i < ds.test.size(); ++i) {
      const auto& anns = ds.test[i]->annotations;
      const bool empty = std::none_of(anns.begin(), anns.end(), [](const Annotation& a) {
        return std::find(ExperimentSetup::kClasses.begin(), ExperimentSetup::kClasses.end(), a.class_id) !=
               ExperimentSetup::kClasses.end();
      });
      if (!empty) continue;
      ++out.empty_scenes;
      const auto& dets = ev.detections[i];
      if (std::none_of(dets.begin(), dets.end(), [&](const Detection& d) { return d.score > ft.detect_threshold; })) {
        ++out.silent_empty_scenes;
      }
    }
    out.novel_map.push_back(ev.report.novel_map);
    out.cross.push_back(confusion[0].cross());
    log(name + ": seed " + std::to_string(seed) + " novel mAP " + fmt(ev.report.novel_map) + ", ring/circle cross " +
        std::to_string(confusion[0].cross()));
  }
  out.minutes = seconds_since(t0) / 60.0;
  return out;
}

double mean(const std::vector<double>& v) { return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size()); }

std::string list(const std::vector<double>& v) {
  std::string s = "[";
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? " " : "") + fmt(v[i], 3);
  return s + "]";
}

Outcome compare(const VariantResult& better, const VariantResult& worse) {
  int consistent = 0;
  std::vector<double> gaps;
  for (std::size_t i = 0; i < better.novel_map.size(); ++i) {
    gaps.push_back(better.novel_map[i] - worse.novel_map[i]);
    if (gaps.back() > 0.0) ++consistent;
  }
  const double gap = mean(gaps);
  return {gap > 0.0 && consistent >= 4, better.name + " " + fmt(mean(better.novel_map)) + " vs " + worse.name + " " +
                                            fmt(mean(worse.novel_map)) + ", gap " + fmt(gap, 3) + " (> 0), per-seed gaps " +
                                            list(gaps) + ", positive in " + std::to_string(consistent) + "/5 (>= 4)"};
}

struct ExperimentOutcomes {
  Outcome directional;
  Outcome confusion;
  Outcome empty_scenes;
};

ExperimentOutcomes desk_experiment() {
  const auto t0 = Clock::now();
  const FewShotDataset ds = experiment_dataset();
  const VariantResult c5 = run_variant(ds, "C=5", 5, true);
  const VariantResult c1 = run_variant(ds, "C=1", 1, true);
  const VariantResult off = run_variant(ds, "C=1 aggregation off", 1, false);
  const double minutes = seconds_since(t0) / 60.0;

  const Outcome by_c = compare(c5, c1);
  const Outcome by_cam = compare(c1, off);
  ExperimentOutcomes out;
  out.directional = {by_c.pass && by_cam.pass, "novel mAP@0.5 over 5 support seeds, K=2: " + by_c.detail + "; " +
                                                   by_cam.detail + "; runtime " + fmt(minutes, 3) + " min"};
  const int cross5 = std::accumulate(c5.cross.begin(), c5.cross.end(), 0);
  const int cross1 = std::accumulate(c1.cross.begin(), c1.cross.end(), 0);
  out.confusion = {cross5 <= cross1, "ring-filled/circle-filled cross-class confusions summed over 5 seeds, K=2: C=5 " +
                                         std::to_string(cross5) + " vs C=1 " + std::to_string(cross1) +
                                         " (C=5 <= C=1; C=1 aggregation off " +
                                         std::to_string(std::accumulate(off.cross.begin(), off.cross.end(), 0)) + ")"};
  const double silent = c5.empty_scenes > 0 ? static_cast<double>(c5.silent_empty_scenes) / c5.empty_scenes : 0.0;
  out.empty_scenes = {silent >= 0.9, "C=5 model: " + std::to_string(c5.silent_empty_scenes) + "/" +
                                         std::to_string(c5.empty_scenes) +
                                         " held-out scenes without any support-class object have no detection above "
                                         "0.25 (" + fmt(100.0 * silent, 3) + "%, >= 90%)"};
  return out;
}

// ---- metric oracle -------------------------------------------------------------------

struct Fraction {
  long long num = 0;
  long long den = 1;

  Fraction operator+(const Fraction& o) const {
    Fraction r{num * o.den + o.num * den, den * o.den};
    const long long g = std::gcd(r.num, r.den);
    return {r.num / g, r.den / g};
  }
  double value() const { return static_cast<double>(num) / static_cast<double>(den); }
};

// Area under the all-points-interpolated curve, in exact arithmetic: each hit adds
// (1/G) times the best precision at its rank or any later rank.
Fraction exact_ap(const std::vector<bool>& hits, int num_gt) {
  Fraction total;
  int tp = 0;
  std::vector<Fraction> precision;
  for (std::size_t k = 0; k < hits.size(); ++k) {
    tp += hits[k] ? 1 : 0;
    precision.push_back({tp, static_cast<long long>(k + 1)});
  }
  for (std::size_t k = 0; k < hits.size(); ++k) {
    if (!hits[k]) continue;
    Fraction best = precision[k];
    for (std::size_t j = k; j < hits.size(); ++j) {
      if (precision[j].num * best.den > best.num * precision[j].den) best = precision[j];
    }
    total = total + Fraction{best.num, best.den * num_gt};
  }
  return total;
}

Outcome metric_oracle() {
  const ClassId cls{0};
  const ClassId other{1};
  const ClassSplit split({cls, other, ClassId{2}}, {ClassId{6}, ClassId{9}});
  // Three well-separated GT locations and a miss location far from all of them.
  const std::vector<Box> spots = {{0.2, 0.2, 0.2, 0.2}, {0.75, 0.25, 0.2, 0.2}, {0.25, 0.75, 0.2, 0.2}};
  const Box miss{0.8, 0.8, 0.1, 0.1};
  int cases = 0;
  int disagreements = 0;
  double worst = 0.0;
  for (int g = 1; g <= 3; ++g) {
    for (int n = 0; n <= 3; ++n) {
      int patterns = 1;
      for (int i = 0; i < n; ++i) patterns *= g + 1;
      for (int p = 0; p < patterns; ++p) {
        // Detection i (score descending) aims at spot code % (g + 1); code g means a miss.
        std::vector<Detection> dets;
        std::vector<bool> hits;
        std::vector<bool> claimed(static_cast<std::size_t>(g), false);
        int code = p;
        for (int i = 0; i < n; ++i) {
          const int aim = code % (g + 1);
          code /= g + 1;
          const double score = 0.9 - 0.2 * i;
          if (aim == g) {
            dets.push_back({cls, score, miss});
            hits.push_back(false);
          } else {
            dets.push_back({cls, score, spots[static_cast<std::size_t>(aim)]});
            hits.push_back(!claimed[static_cast<std::size_t>(aim)]);
            claimed[static_cast<std::size_t>(aim)] = true;
          }
          // A confident detection of another class on the same spot must not matter.
          dets.push_back({other, 0.95, spots[0]});
        }
        std::vector<Annotation> gt;
        for (int j = 0; j < g; ++j) gt.push_back({cls, spots[static_cast<std::size_t>(j)]});
        const std::vector<std::vector<Detection>> d = {dets};
        const std::vector<std::vector<Annotation>> truth = {gt};
        const double got = evaluate_map(d, truth, split).per_class.at(cls);
        const double want = exact_ap(hits, g).value();
        worst = std::max(worst, std::abs(got - want));
        if (std::abs(got - want) > 1e-12) ++disagreements;
        ++cases;
      }
    }
  }
  // The worked example: two GT, detections hit, miss, hit.
  const std::vector<std::vector<Detection>> d = {
      {{cls, 0.9, spots[0]}, {cls, 0.8, miss}, {cls, 0.7, spots[1]}}};
  const std::vector<std::vector<Annotation>> truth = {{{cls, spots[0]}, {cls, spots[1]}}};
  const double example = evaluate_map(d, truth, split).per_class.at(cls);
  const bool ok = disagreements == 0 && std::abs(example - 0.8333) < 1e-4;
  return {ok, std::to_string(cases) + " enumerated cases (<= 3 GT, <= 3 detections), disagreements with exact oracle = " +
                  std::to_string(disagreements) + " (max |diff| " + fmt(worst, 3) +
                  ", double rounding only); hit/miss/hit example AP = " + fmt(example, 6) + " (0.8333 +- 1e-4)"};
}

}  // namespace

int main(int argc, char** argv) {
  torch::set_num_threads(1);
  std::set<std::string> only;
  for (int i = 1; i + 1 < argc; ++i) {
    if (std::string(argv[i]) == "--only") {
      std::stringstream ss(argv[i + 1]);
      std::string name;
      while (std::getline(ss, name, ',')) only.insert(name);
    }
  }
  auto wanted = [&](const std::string& name) { return only.empty() || only.contains(name); };

  int failures = 0;
  auto report = [&](const std::string& name, const Outcome& o) {
    std::cout << (o.pass ? "PASS " : "FAIL ") << name << ": " << o.detail << std::endl;
    if (!o.pass) ++failures;
  };
  auto run = [&](const std::string& name, const std::function<Outcome()>& f) {
    if (!wanted(name)) return;
    try {
      report(name, f());
    } catch (const std::exception& e) {
      report(name, {false, std::string("exception: ") + e.what()});
    }
  };

  run("matcher_optimality", matcher_optimality);
  run("gradient_correctness", gradient_correctness);
  run("cam_algebra", cam_algebra);
  run("target_generation", target_generation);
  run("sinusoidal_encodings", sinusoidal_encodings);
  run("efficient_inference", efficient_inference);
  run("overfit_sanity", overfit_sanity);
  const std::vector<std::string> experiment = {"directional_claim", "confusion_reduction", "empty_scene_silence"};
  if (std::any_of(experiment.begin(), experiment.end(), wanted)) {
    try {
      const ExperimentOutcomes e = desk_experiment();
      if (wanted("directional_claim")) report("directional_claim", e.directional);
      if (wanted("confusion_reduction")) report("confusion_reduction", e.confusion);
      // Supplementary: not one of the headline criteria, reported alongside them.
      if (wanted("empty_scene_silence")) report("empty_scene_silence", e.empty_scenes);
    } catch (const std::exception& e) {
      const Outcome failed{false, std::string("exception: ") + e.what()};
      for (const auto& name : experiment) {
        if (wanted(name)) report(name, failed);
      }
    }
  }
  run("metric_oracle", metric_oracle);
  return failures == 0 ? 0 : 1;
}
