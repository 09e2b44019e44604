#include "corrdet/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <set>

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "corrdet/geometry.hpp"

namespace corrdet {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr const char* kShapeNames[] = {"circle", "square", "triangle", "star", "cross", "ring"};
constexpr const char* kFillNames[] = {"outline", "filled"};

}  // namespace

std::string class_name(ClassId id) {
  const int v = to_int(id);
  if (v < 0 || v >= kNumShapeClasses) return "class" + std::to_string(v);
  return std::string(kShapeNames[v / 2]) + "-" + kFillNames[v % 2];
}

ClassId class_from_name(const std::string& name) {
  for (int v = 0; v < kNumShapeClasses; ++v) {
    if (class_name(ClassId{v}) == name) return ClassId{v};
  }
  throw Error(Errc::kInvalidConfig, "unknown class name '" + name + "'");
}

ClassSplit ShapeWorldConfig::class_split() const {
  std::set<ClassId> novel(novel_classes.begin(), novel_classes.end());
  std::set<ClassId> base;
  for (int v = 0; v < kNumShapeClasses; ++v) {
    if (!novel.contains(ClassId{v})) base.insert(ClassId{v});
  }
  return ClassSplit(std::move(base), std::move(novel));
}

void ShapeWorldConfig::validate() const {
  auto fail = [](const std::string& m) { throw Error(Errc::kInvalidConfig, m); };
  if (image_size < 64) fail("image_size must be at least 64");
  if (min_objects < 1 || max_objects < min_objects) fail("objects per scene must satisfy 1 <= min <= max");
  if (!(min_scale > 0.0 && max_scale >= min_scale && max_scale <= 0.9)) fail("scale range must lie in (0, 0.9]");
  if (std::set<ClassId>(novel_classes.begin(), novel_classes.end()).size() != novel_classes.size()) {
    fail("novel classes repeat");
  }
  if (novel_classes.size() < 2) fail("at least two novel classes are required");
  for (ClassId c : novel_classes) {
    if (to_int(c) < 0 || to_int(c) >= kNumShapeClasses) fail("novel class id out of range");
  }
  if (base_scenes < 1 || test_scenes < 0 || fewshot_scenes_per_class < 1) fail("scene counts must be positive");
}

json to_json(const ShapeWorldConfig& c) {
  json novel = json::array();
  for (ClassId id : c.novel_classes) novel.push_back(class_name(id));
  return json{{"image_size", c.image_size},
              {"min_objects", c.min_objects},
              {"max_objects", c.max_objects},
              {"min_scale", c.min_scale},
              {"max_scale", c.max_scale},
              {"color_jitter", c.color_jitter},
              {"noise_level", c.noise_level},
              {"seed", c.seed},
              {"base_scenes", c.base_scenes},
              {"fewshot_scenes_per_class", c.fewshot_scenes_per_class},
              {"test_scenes", c.test_scenes},
              {"novel_classes", novel}};
}

ShapeWorldConfig shape_world_from_json(const json& j) {
  ShapeWorldConfig c;
  c.image_size = j.value("image_size", c.image_size);
  c.min_objects = j.value("min_objects", c.min_objects);
  c.max_objects = j.value("max_objects", c.max_objects);
  c.min_scale = j.value("min_scale", c.min_scale);
  c.max_scale = j.value("max_scale", c.max_scale);
  c.color_jitter = j.value("color_jitter", c.color_jitter);
  c.noise_level = j.value("noise_level", c.noise_level);
  c.seed = j.value("seed", c.seed);
  c.base_scenes = j.value("base_scenes", c.base_scenes);
  c.fewshot_scenes_per_class = j.value("fewshot_scenes_per_class", c.fewshot_scenes_per_class);
  c.test_scenes = j.value("test_scenes", c.test_scenes);
  if (j.contains("novel_classes")) {
    c.novel_classes.clear();
    for (const auto& n : j.at("novel_classes")) c.novel_classes.push_back(class_from_name(n.get<std::string>()));
  }
  c.validate();
  return c;
}

std::string_view split_name(Split split) {
  switch (split) {
    case Split::kBase: return "base";
    case Split::kFewShot: return "fewshot";
    case Split::kTest: return "test";
  }
  return "unknown";
}

std::mt19937_64 scene_rng(std::uint64_t seed, Split split, std::uint64_t index) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(split), static_cast<std::uint32_t>(index),
                    static_cast<std::uint32_t>(index >> 32)};
  return std::mt19937_64(seq);
}

namespace {

std::vector<cv::Point> polygon(double cx, double cy, const std::vector<std::pair<double, double>>& polar, double angle) {
  std::vector<cv::Point> pts;
  for (const auto& [r, a] : polar) {
    pts.emplace_back(static_cast<int>(std::lround(cx + r * std::cos(a + angle))),
                     static_cast<int>(std::lround(cy + r * std::sin(a + angle))));
  }
  return pts;
}

void draw_polygon(cv::Mat& mask, const std::vector<cv::Point>& pts, bool filled, int thickness) {
  if (filled) {
    cv::fillPoly(mask, std::vector<std::vector<cv::Point>>{pts}, cv::Scalar(255), cv::LINE_8);
  } else {
    cv::polylines(mask, std::vector<std::vector<cv::Point>>{pts}, true, cv::Scalar(255), thickness, cv::LINE_8);
  }
}

/// Draws one shape of extent 2r centred at (cx, cy) into a single-channel mask.
void draw_shape(cv::Mat& mask, ClassId id, double cx, double cy, double r, double angle) {
  const auto shape = static_cast<Shape>(to_int(id) / 2);
  const bool filled = static_cast<Fill>(to_int(id) % 2) == Fill::kFilled;
  const int thickness = std::max(2, static_cast<int>(std::lround(r / 6.0)));
  const cv::Point center(static_cast<int>(std::lround(cx)), static_cast<int>(std::lround(cy)));
  std::vector<std::pair<double, double>> polar;
  switch (shape) {
    case Shape::kCircle: {
      if (filled) {
        cv::circle(mask, center, static_cast<int>(std::lround(r)), cv::Scalar(255), cv::FILLED, cv::LINE_8);
      } else {
        cv::circle(mask, center, static_cast<int>(std::lround(r - thickness / 2.0)), cv::Scalar(255), thickness,
                   cv::LINE_8);
      }
      return;
    }
    case Shape::kRing: {
      if (filled) {
        // Thick annulus between 0.5 r and r.
        const int band = std::max(2, static_cast<int>(std::lround(0.5 * r)));
        cv::circle(mask, center, static_cast<int>(std::lround(r - band / 2.0)), cv::Scalar(255), band, cv::LINE_8);
      } else {
        cv::circle(mask, center, static_cast<int>(std::lround(r - thickness / 2.0)), cv::Scalar(255), thickness,
                   cv::LINE_8);
        cv::circle(mask, center, static_cast<int>(std::lround(0.55 * r)), cv::Scalar(255), thickness, cv::LINE_8);
      }
      return;
    }
    case Shape::kSquare:
      for (int k = 0; k < 4; ++k) polar.emplace_back(r, M_PI / 4.0 + k * M_PI / 2.0);
      break;
    case Shape::kTriangle:
      for (int k = 0; k < 3; ++k) polar.emplace_back(r, -M_PI / 2.0 + k * 2.0 * M_PI / 3.0);
      break;
    case Shape::kStar:
      for (int k = 0; k < 10; ++k) polar.emplace_back(k % 2 == 0 ? r : 0.45 * r, -M_PI / 2.0 + k * M_PI / 5.0);
      break;
    case Shape::kCross: {
      const double a = 0.3 * r;
      const std::pair<double, double> corners[] = {{a, r},  {-a, r},  {-a, a}, {-r, a}, {-r, -a}, {-a, -a},
                                                   {-a, -r}, {a, -r}, {a, -a}, {r, -a}, {r, a},   {a, a}};
      for (const auto& [x, y] : corners) polar.emplace_back(std::hypot(x, y), std::atan2(y, x));
      break;
    }
  }
  draw_polygon(mask, polygon(cx, cy, polar, angle), filled, thickness);
}

struct PixelRect {
  int x0, y0, x1, y1;  // inclusive-exclusive
  bool overlaps(const PixelRect& o, int margin) const {
    return x0 - margin < o.x1 && o.x0 - margin < x1 && y0 - margin < o.y1 && o.y0 - margin < y1;
  }
};

}  // namespace

LabeledImage generate_scene(std::mt19937_64& rng, const ShapeWorldConfig& config, const std::vector<ClassId>& classes,
                            int min_objects, int max_objects, std::vector<Image>* masks) {
  TORCH_CHECK(!classes.empty(), "generate_scene: no classes");
  const int size = config.image_size;
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::uniform_int_distribution<int> count_dist(min_objects, max_objects);
  std::uniform_int_distribution<std::size_t> class_dist(0, classes.size() - 1);

  cv::Mat canvas(size, size, CV_8UC3);
  const double bg = 20.0 + 40.0 * unit(rng);
  canvas.setTo(cv::Scalar(bg, bg, bg));

  LabeledImage out;
  const int wanted = count_dist(rng);
  std::vector<PixelRect> placed;
  for (int attempt = 0; static_cast<int>(placed.size()) < wanted && attempt < 200; ++attempt) {
    const ClassId id = classes[class_dist(rng)];
    const double extent = size * (config.min_scale + (config.max_scale - config.min_scale) * unit(rng));
    const double r = 0.5 * extent;
    const double cx = r + 1.0 + (size - extent - 2.0) * unit(rng);
    const double cy = r + 1.0 + (size - extent - 2.0) * unit(rng);
    const double angle = 2.0 * M_PI * unit(rng);
    cv::Scalar color;
    for (int c = 0; c < 3; ++c) {
      color[c] = 255.0 * std::clamp(0.6 + (2.0 * unit(rng) - 1.0) * (0.4 + config.color_jitter), 0.25, 1.0);
    }
    cv::Mat mask = cv::Mat::zeros(size, size, CV_8UC1);
    draw_shape(mask, id, cx, cy, r, angle);
    const cv::Rect rect = cv::boundingRect(mask);
    if (rect.area() == 0) continue;
    const PixelRect pr{rect.x, rect.y, rect.x + rect.width, rect.y + rect.height};
    if (std::any_of(placed.begin(), placed.end(), [&](const PixelRect& o) { return pr.overlaps(o, 2); })) continue;
    placed.push_back(pr);
    canvas.setTo(color, mask);
    const double s = static_cast<double>(size);
    out.annotations.push_back({id, xyxy_to_cxcywh({pr.x0 / s, pr.y0 / s, pr.x1 / s, pr.y1 / s})});
    if (masks != nullptr) {
      Image m(size, size, 1);
      std::copy(mask.datastart, mask.dataend, m.data.begin());
      masks->push_back(std::move(m));
    }
  }

  if (config.noise_level > 0.0) {
    std::normal_distribution<double> noise(0.0, config.noise_level * 255.0);
    for (auto it = canvas.begin<cv::Vec3b>(); it != canvas.end<cv::Vec3b>(); ++it) {
      for (int c = 0; c < 3; ++c) (*it)[c] = cv::saturate_cast<std::uint8_t>((*it)[c] + noise(rng));
    }
  }
  out.image = Image(size, size, 3);
  std::copy(canvas.datastart, canvas.dataend, out.image.data.begin());
  return out;
}

FewShotDataset FewShotDataset::generate(const ShapeWorldConfig& config) {
  config.validate();
  FewShotDataset ds;
  ds.config = config;
  ds.split = config.class_split();
  const std::vector<ClassId> base(ds.split.base().begin(), ds.split.base().end());
  const std::vector<ClassId> all = ds.split.all();
  std::int64_t next_id = 0;
  for (int i = 0; i < config.base_scenes; ++i) {
    auto rng = scene_rng(config.seed, Split::kBase, static_cast<std::uint64_t>(i));
    LabeledImage img = generate_scene(rng, config, base, config.min_objects, config.max_objects);
    img.image_id = next_id++;
    ds.base.push_back(std::make_shared<const LabeledImage>(std::move(img)));
  }
  int index = 0;
  for (ClassId c : all) {
    for (int k = 0; k < config.fewshot_scenes_per_class; ++k, ++index) {
      auto rng = scene_rng(config.seed, Split::kFewShot, static_cast<std::uint64_t>(index));
      LabeledImage img = generate_scene(rng, config, {c}, 1, 1);
      img.image_id = next_id++;
      ds.fewshot.push_back(std::make_shared<const LabeledImage>(std::move(img)));
    }
  }
  for (int i = 0; i < config.test_scenes; ++i) {
    auto rng = scene_rng(config.seed, Split::kTest, static_cast<std::uint64_t>(i));
    LabeledImage img = generate_scene(rng, config, all, config.min_objects, config.max_objects);
    img.image_id = next_id++;
    ds.test.push_back(std::make_shared<const LabeledImage>(std::move(img)));
  }
  return ds;
}

const std::vector<ImageRef>& FewShotDataset::pool(Split s) const {
  switch (s) {
    case Split::kBase: return base;
    case Split::kFewShot: return fewshot;
    case Split::kTest: return test;
  }
  return base;
}

ImageRef FewShotDataset::find(std::int64_t image_id) const {
  for (const auto* p : {&base, &fewshot, &test}) {
    for (const auto& img : *p) {
      if (img->image_id == image_id) return img;
    }
  }
  return nullptr;
}

namespace {

std::string file_name_of(Split s, std::int64_t id) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%s_%06lld.png", std::string(split_name(s)).c_str(), static_cast<long long>(id));
  return buf;
}

json manifest_json(const FewShotDataset& ds) {
  json base = json::array();
  json novel = json::array();
  for (ClassId c : ds.split.base()) base.push_back(class_name(c));
  for (ClassId c : ds.split.novel()) novel.push_back(class_name(c));
  return json{{"format_version", 1},
              {"seed", ds.config.seed},
              {"config", to_json(ds.config)},
              {"class_split", {{"base", base}, {"novel", novel}}},
              {"counts", {{"base", ds.base.size()}, {"fewshot", ds.fewshot.size()}, {"test", ds.test.size()}}}};
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(Errc::kIoError, "cannot open " + path.string() + " for writing");
  out << text;
  if (!out) throw Error(Errc::kIoError, "failed writing " + path.string());
}

json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(Errc::kIoError, "cannot open " + path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw Error(Errc::kIoError, path.string() + ": " + e.what());
  }
}

}  // namespace

json annotations_json(const FewShotDataset& ds) {
  json categories = json::array();
  for (ClassId c : ds.split.all()) {
    categories.push_back(
        {{"id", to_int(c)}, {"name", class_name(c)}, {"split", ds.split.is_novel(c) ? "novel" : "base"}});
  }
  json images = json::array();
  json annotations = json::array();
  std::int64_t ann_id = 0;
  for (Split s : {Split::kBase, Split::kFewShot, Split::kTest}) {
    for (const auto& img : ds.pool(s)) {
      images.push_back({{"id", img->image_id},
                        {"file_name", file_name_of(s, img->image_id)},
                        {"width", img->image.width},
                        {"height", img->image.height},
                        {"split", split_name(s)}});
      for (const Annotation& a : img->annotations) {
        const XYXYBox xy = cxcywh_to_xyxy(a.box);
        const double w = img->image.width;
        const double h = img->image.height;
        annotations.push_back({{"id", ann_id++},
                               {"image_id", img->image_id},
                               {"category_id", to_int(a.class_id)},
                               {"bbox", {xy.x0 * w, xy.y0 * h, a.box.w * w, a.box.h * h}},
                               {"bbox_cxcywh", {a.box.cx, a.box.cy, a.box.w, a.box.h}},
                               {"area", a.box.w * w * a.box.h * h},
                               {"iscrowd", 0}});
      }
    }
  }
  return json{{"info", {{"description", "synthetic shapes few-shot detection"}, {"seed", ds.config.seed}}},
              {"categories", categories},
              {"images", images},
              {"annotations", annotations}};
}

Image read_image(const fs::path& path) {
  cv::Mat bgr = cv::imread(path.string(), cv::IMREAD_COLOR);
  if (bgr.empty()) throw Error(Errc::kIoError, "cannot read " + path.string());
  cv::Mat rgb;
  cv::cvtColor(bgr, rgb, cv::COLOR_BGR2RGB);
  Image out(rgb.rows, rgb.cols, 3);
  std::copy(rgb.datastart, rgb.dataend, out.data.begin());
  return out;
}

void write_image(const Image& image, const fs::path& path) {
  if (image.channels != 3) throw Error(Errc::kShapeMismatch, "write_image expects an RGB image");
  cv::Mat rgb(image.height, image.width, CV_8UC3, const_cast<std::uint8_t*>(image.data.data()));
  cv::Mat bgr;
  cv::cvtColor(rgb, bgr, cv::COLOR_RGB2BGR);
  bool ok = false;
  try {
    ok = cv::imwrite(path.string(), bgr);
  } catch (const cv::Exception&) {
    ok = false;
  }
  if (!ok) throw Error(Errc::kIoError, "cannot write " + path.string());
}

Image draw_boxes(const Image& image, std::span<const Detection> detections) {
  Image out = image;
  cv::Mat rgb(out.height, out.width, CV_8UC3, out.data.data());
  for (const Detection& d : detections) {
    const XYXYBox b = cxcywh_to_xyxy(d.box);
    const int hue = (to_int(d.class_id) * 47) % 180;
    cv::Mat hsv(1, 1, CV_8UC3, cv::Scalar(hue, 220, 255));
    cv::Mat color;
    cv::cvtColor(hsv, color, cv::COLOR_HSV2RGB);
    const auto c = color.at<cv::Vec3b>(0, 0);
    const cv::Scalar scalar(c[0], c[1], c[2]);
    const cv::Point p0(static_cast<int>(std::lround(b.x0 * out.width)), static_cast<int>(std::lround(b.y0 * out.height)));
    const cv::Point p1(static_cast<int>(std::lround(b.x1 * out.width)) - 1,
                       static_cast<int>(std::lround(b.y1 * out.height)) - 1);
    cv::rectangle(rgb, p0, p1, scalar, 1);
    char label[64];
    std::snprintf(label, sizeof(label), "%s %.2f", class_name(d.class_id).c_str(), d.score);
    cv::putText(rgb, label, cv::Point(p0.x, std::max(p0.y - 2, 8)), cv::FONT_HERSHEY_PLAIN, 0.7, scalar, 1);
  }
  return out;
}

void FewShotDataset::save(const fs::path& dir) const {
  std::error_code ec;
  fs::create_directories(dir / "images", ec);
  if (ec) throw Error(Errc::kIoError, "cannot create " + (dir / "images").string() + ": " + ec.message());
  for (Split s : {Split::kBase, Split::kFewShot, Split::kTest}) {
    for (const auto& img : pool(s)) {
      write_image(img->image, dir / "images" / file_name_of(s, img->image_id));
    }
  }
  write_text(dir / "annotations.json", annotations_json(*this).dump(1));
  write_text(dir / "manifest.json", manifest_json(*this).dump(2));
}

FewShotDataset FewShotDataset::load(const fs::path& dir) {
  const json manifest = read_json(dir / "manifest.json");
  const json doc = read_json(dir / "annotations.json");
  FewShotDataset ds;
  ds.config = shape_world_from_json(manifest.at("config"));
  ds.split = ds.config.class_split();

  std::map<std::int64_t, std::vector<Annotation>> by_image;
  for (const auto& a : doc.at("annotations")) {
    const auto& b = a.at("bbox_cxcywh");
    by_image[a.at("image_id").get<std::int64_t>()].push_back(
        {ClassId{a.at("category_id").get<int>()},
         Box{b[0].get<double>(), b[1].get<double>(), b[2].get<double>(), b[3].get<double>()}});
  }
  for (const auto& entry : doc.at("images")) {
    LabeledImage img;
    img.image_id = entry.at("id").get<std::int64_t>();
    img.image = read_image(dir / "images" / entry.at("file_name").get<std::string>());
    if (auto it = by_image.find(img.image_id); it != by_image.end()) img.annotations = it->second;
    auto ref = std::make_shared<const LabeledImage>(std::move(img));
    const std::string split = entry.at("split").get<std::string>();
    if (split == "base") {
      ds.base.push_back(ref);
    } else if (split == "fewshot") {
      ds.fewshot.push_back(ref);
    } else if (split == "test") {
      ds.test.push_back(ref);
    } else {
      throw Error(Errc::kIoError, "unknown split tag '" + split + "'");
    }
  }
  return ds;
}

FewShotDataset build_dataset(const ShapeWorldConfig& config, const fs::path& out_dir) {
  FewShotDataset ds = FewShotDataset::generate(config);
  ds.save(out_dir);
  return ds;
}

json KShotSupportSet::manifest() const {
  json classes = json::object();
  for (const auto& [cls, examples] : supports) {
    json ids = json::array();
    for (const auto& e : examples) ids.push_back(e.image->image_id);
    classes[class_name(cls)] = ids;
  }
  return json{{"shots", shots}, {"seed", seed}, {"balanced_base", balanced_base}, {"supports", classes}};
}

KShotSupportSet build_finetune_set(const FewShotDataset& dataset, int shots, std::uint64_t seed, bool balanced_base) {
  if (shots < 1) throw Error(Errc::kInsufficientShots, "K must be at least 1");
  std::map<ClassId, std::vector<ImageRef>> by_class;
  for (const auto& img : dataset.fewshot) {
    if (img->annotations.size() == 1) by_class[img->annotations.front().class_id].push_back(img);
  }
  KShotSupportSet set;
  set.shots = shots;
  set.seed = seed;
  set.balanced_base = balanced_base;
  std::mt19937_64 rng(seed);
  for (ClassId c : dataset.split.all()) {
    auto& pool = by_class[c];
    if (static_cast<int>(pool.size()) < shots) {
      throw Error(Errc::kInsufficientShots, class_name(c) + " has " + std::to_string(pool.size()) +
                                                " few-shot scenes, K = " + std::to_string(shots));
    }
    std::vector<std::size_t> idx(pool.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::shuffle(idx.begin(), idx.end(), rng);
    auto& out = set.supports[c];
    for (int k = 0; k < shots; ++k) {
      const ImageRef& img = pool[idx[static_cast<std::size_t>(k)]];
      out.push_back({img, img->annotations.front().box});
      set.query_pool.push_back(img);
    }
  }
  if (!balanced_base) set.query_pool.insert(set.query_pool.end(), dataset.base.begin(), dataset.base.end());
  return set;
}

std::string_view stage_name(Stage stage) { return stage == Stage::kBase ? "base" : "finetune"; }

Stage stage_from_name(const std::string& name) {
  if (name == "base") return Stage::kBase;
  if (name == "finetune") return Stage::kFinetune;
  throw Error(Errc::kInvalidConfig, "unknown stage '" + name + "'");
}

EpisodeSampler::EpisodeSampler(const FewShotDataset& dataset, EpisodeOptions options)
    : stage_(Stage::kBase), options_(options), queries_(dataset.base) {
  scope_.assign(dataset.split.base().begin(), dataset.split.base().end());
  for (const auto& img : dataset.base) {
    for (const Annotation& a : img->annotations) instances_[a.class_id].push_back({img, a.box});
  }
}

EpisodeSampler::EpisodeSampler(const FewShotDataset& dataset, const KShotSupportSet& kshot, EpisodeOptions options)
    : stage_(Stage::kFinetune), options_(options), queries_(kshot.query_pool) {
  scope_ = dataset.split.all();
  for (const auto& [cls, examples] : kshot.supports) {
    for (const auto& e : examples) instances_[cls].push_back({e.image, e.instance_box});
  }
}

Episode EpisodeSampler::sample(std::mt19937_64& rng) const {
  const int c_count = options_.num_classes;
  const int k_count = options_.shots;
  if (static_cast<int>(scope_.size()) < c_count) {
    throw Error(Errc::kInsufficientClasses, std::to_string(scope_.size()) + " classes in scope, C = " +
                                                std::to_string(c_count));
  }
  if (queries_.empty()) throw Error(Errc::kInsufficientShots, "empty query pool");
  Episode ep;
  ep.shots = k_count;
  std::set<std::int64_t> query_ids;
  std::uniform_int_distribution<std::size_t> pick(0, queries_.size() - 1);
  const int wanted_queries = std::min<int>(options_.queries_per_episode, static_cast<int>(queries_.size()));
  while (static_cast<int>(ep.query_images.size()) < wanted_queries) {
    const ImageRef& q = queries_[pick(rng)];
    if (query_ids.insert(q->image_id).second) ep.query_images.push_back(q);
  }

  // Supports may only come from images outside the query set; a class with no such
  // instance cannot be a support class of this episode.
  std::map<ClassId, std::vector<const Instance*>> candidates;
  for (ClassId c : scope_) {
    auto it = instances_.find(c);
    if (it == instances_.end()) continue;
    for (const Instance& inst : it->second) {
      if (!query_ids.contains(inst.image->image_id)) candidates[c].push_back(&inst);
    }
  }
  auto eligible = [&](ClassId c) {
    auto it = candidates.find(c);
    if (it == candidates.end() || it->second.empty()) return false;
    return stage_ == Stage::kFinetune || static_cast<int>(it->second.size()) >= k_count;
  };

  std::vector<ClassId> present;
  for (const auto& q : ep.query_images) {
    for (const Annotation& a : q->annotations) {
      if (eligible(a.class_id) && std::find(present.begin(), present.end(), a.class_id) == present.end()) {
        present.push_back(a.class_id);
      }
    }
  }
  std::shuffle(present.begin(), present.end(), rng);
  if (static_cast<int>(present.size()) > c_count) present.resize(static_cast<std::size_t>(c_count));
  std::vector<ClassId> rest;
  for (ClassId c : scope_) {
    if (eligible(c) && std::find(present.begin(), present.end(), c) == present.end()) rest.push_back(c);
  }
  std::shuffle(rest.begin(), rest.end(), rng);
  std::vector<ClassId> chosen = present;
  for (ClassId c : rest) {
    if (static_cast<int>(chosen.size()) == c_count) break;
    chosen.push_back(c);
  }
  if (static_cast<int>(chosen.size()) < c_count) {
    throw Error(Errc::kInsufficientShots, "only " + std::to_string(chosen.size()) +
                                              " classes have K = " + std::to_string(k_count) +
                                              " support instances outside the query images, C = " +
                                              std::to_string(c_count));
  }
  std::shuffle(chosen.begin(), chosen.end(), rng);

  for (ClassId c : chosen) {
    auto& pool = candidates[c];
    auto& out = ep.support_sets[c];
    if (static_cast<int>(pool.size()) >= k_count) {
      std::shuffle(pool.begin(), pool.end(), rng);
      for (int k = 0; k < k_count; ++k) out.push_back({pool[static_cast<std::size_t>(k)]->image,
                                                       pool[static_cast<std::size_t>(k)]->box});
    } else {
      // Fine-tuning only: the K-shot set minus the query holds fewer than K instances,
      // so the remaining ones are repeated.
      std::uniform_int_distribution<std::size_t> any(0, pool.size() - 1);
      for (const Instance* inst : pool) out.push_back({inst->image, inst->box});
      while (static_cast<int>(out.size()) < k_count) {
        const Instance* inst = pool[any(rng)];
        out.push_back({inst->image, inst->box});
      }
    }
  }
  ep.support_classes = chosen;
  ep.encoding_map = build_encoding_map(chosen);
  return ep;
}

}  // namespace corrdet
