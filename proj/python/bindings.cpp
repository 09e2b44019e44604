#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <nlohmann/json.hpp>

#include "corrdet/cam.hpp"
#include "corrdet/data.hpp"
#include "corrdet/detector.hpp"
#include "corrdet/eval.hpp"
#include "corrdet/geometry.hpp"
#include "corrdet/matcher.hpp"
#include "corrdet/pipeline.hpp"

namespace py = pybind11;
using namespace corrdet;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;
using Pixels = py::array_t<std::uint8_t, py::array::c_style | py::array::forcecast>;

Box to_box(const std::vector<double>& v) {
  if (v.size() != 4) throw Error(Errc::kShapeMismatch, "a box has 4 values (cx, cy, w, h)");
  return {v[0], v[1], v[2], v[3]};
}

std::vector<double> from_box(const Box& b) { return {b.cx, b.cy, b.w, b.h}; }

Pixels to_array(const Image& img) {
  Pixels out({img.height, img.width, img.channels});
  std::copy(img.data.begin(), img.data.end(), out.mutable_data());
  return out;
}

Image from_array(const Pixels& a) {
  if (a.ndim() != 3 || a.shape(2) != 3) throw Error(Errc::kShapeMismatch, "image must be (H, W, 3) uint8");
  Image img(static_cast<int>(a.shape(0)), static_cast<int>(a.shape(1)), 3);
  std::copy(a.data(), a.data() + a.size(), img.data.begin());
  return img;
}

py::list annotations_to_py(const std::vector<Annotation>& anns) {
  py::list out;
  for (const auto& a : anns) out.append(py::make_tuple(class_name(a.class_id), from_box(a.box)));
  return out;
}

std::vector<std::vector<Detection>> detections_from_py(const py::list& per_image) {
  std::vector<std::vector<Detection>> out;
  for (const auto& img : per_image) {
    std::vector<Detection> dets;
    for (const auto& d : img.cast<py::list>()) {
      auto t = d.cast<py::tuple>();
      dets.push_back({class_from_name(t[0].cast<std::string>()), t[1].cast<double>(), to_box(t[2].cast<std::vector<double>>())});
    }
    out.push_back(std::move(dets));
  }
  return out;
}

std::vector<std::vector<Annotation>> truth_from_py(const py::list& per_image) {
  std::vector<std::vector<Annotation>> out;
  for (const auto& img : per_image) {
    std::vector<Annotation> anns;
    for (const auto& a : img.cast<py::list>()) {
      auto t = a.cast<py::tuple>();
      anns.push_back({class_from_name(t[0].cast<std::string>()), to_box(t[1].cast<std::vector<double>>())});
    }
    out.push_back(std::move(anns));
  }
  return out;
}

/// Detector plus support prototypes, ready to run on raw images.
class Predictor {
 public:
  Predictor(const std::string& checkpoint, const std::string& support_dir) : detector_(load_detector(checkpoint)) {
    torch::set_num_threads(1);
    detector_->eval();
    const auto supports = load_support_set(support_dir);
    cache_ = precompute_prototypes(detector_, supports);
    for (const auto& [cls, examples] : supports) classes_.push_back(cls);
  }

  py::list predict(const Pixels& image, double threshold) {
    std::vector<Detection> dets;
    {
      py::gil_scoped_release release;
      dets = detect_all_classes(detector_, from_array(image), cache_, classes_, threshold);
    }
    py::list out;
    for (const auto& d : dets) out.append(py::make_tuple(class_name(d.class_id), d.score, from_box(d.box)));
    return out;
  }

  std::vector<std::string> classes() const {
    std::vector<std::string> out;
    for (ClassId c : classes_) out.push_back(class_name(c));
    return out;
  }

 private:
  Detector detector_;
  PrototypeCache cache_;
  std::vector<ClassId> classes_;
};

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Few-shot detection with correlational aggregation (native core)";

  static py::exception<Error> error(m, "CorrdetError", PyExc_RuntimeError);
  py::register_exception_translator([](std::exception_ptr p) {
    try {
      if (p) std::rethrow_exception(p);
    } catch (const Error& e) {
      py::set_error(error, e.what());
    }
  });

  m.def("class_names", [] {
    std::vector<std::string> out;
    for (int i = 0; i < kNumShapeClasses; ++i) out.push_back(class_name(ClassId{i}));
    return out;
  });
  m.def("class_id", [](const std::string& name) { return to_int(class_from_name(name)); }, py::arg("name"));

  m.def(
      "hungarian_match",
      [](const Array& cost) {
        if (cost.ndim() != 2) throw Error(Errc::kShapeMismatch, "cost must be a 2-D array");
        Matrix mat(static_cast<std::size_t>(cost.shape(0)), static_cast<std::size_t>(cost.shape(1)));
        std::copy(cost.data(), cost.data() + cost.size(), mat.values.begin());
        const Assignment a = hungarian_match(mat);
        return py::make_tuple(a.sigma, a.total_cost);
      },
      py::arg("cost"), "Minimum-cost perfect matching; returns (sigma, total) with sigma[row] = column.");

  m.def(
      "iou", [](const std::vector<double>& a, const std::vector<double>& b) {
        return iou(cxcywh_to_xyxy(to_box(a)), cxcywh_to_xyxy(to_box(b)));
      },
      py::arg("a"), py::arg("b"), "IoU of two (cx, cy, w, h) boxes.");
  m.def(
      "giou", [](const std::vector<double>& a, const std::vector<double>& b) {
        return giou(cxcywh_to_xyxy(to_box(a)), cxcywh_to_xyxy(to_box(b)));
      },
      py::arg("a"), py::arg("b"), "Generalized IoU of two (cx, cy, w, h) boxes.");

  m.def(
      "task_encodings",
      [](int64_t num_classes, int64_t d) {
        auto t = make_task_encodings(num_classes, d, torch::kDouble).contiguous();
        Array out({t.size(0), t.size(1)});
        std::copy(t.data_ptr<double>(), t.data_ptr<double>() + t.numel(), out.mutable_data());
        return out;
      },
      py::arg("num_classes"), py::arg("d"), "(C+1, d) task encodings; row 0 is the background row.");

  m.def("average_precision", &average_precision, py::arg("hits"), py::arg("num_gt"),
        "All-points interpolated AP of a ranked hit/miss list.");
  m.def(
      "evaluate_map",
      [](const py::list& detections, const py::list& ground_truth, double iou_threshold) {
        const auto dets = detections_from_py(detections);
        const auto truth = truth_from_py(ground_truth);
        const APReport r = evaluate_map(dets, truth, ShapeWorldConfig{}.class_split(), iou_threshold);
        py::dict per_class;
        for (const auto& [cls, ap] : r.per_class) per_class[py::str(class_name(cls))] = ap;
        py::dict out;
        out["per_class"] = per_class;
        out["novel"] = r.novel_map;
        out["base"] = r.base_map;
        out["overall"] = r.overall_map;
        return out;
      },
      py::arg("detections"), py::arg("ground_truth"), py::arg("iou_threshold") = 0.5,
      "detections: per image [(class, score, box)]; ground_truth: per image [(class, box)]. Default split.");

  m.def(
      "generate_scene",
      [](const std::string& config_json, std::uint64_t index) {
        ShapeWorldConfig cfg = shape_world_from_json(nlohmann::json::parse(config_json.empty() ? "{}" : config_json));
        cfg.validate();
        auto rng = scene_rng(cfg.seed, Split::kTest, index);
        const LabeledImage img = generate_scene(rng, cfg, cfg.class_split().all(), cfg.min_objects, cfg.max_objects);
        return py::make_tuple(to_array(img.image), annotations_to_py(img.annotations));
      },
      py::arg("config_json") = "", py::arg("index") = 0,
      "Renders one test-style scene; returns (HxWx3 uint8 array, [(class, box)]).");

  m.def(
      "resolve_config",
      [](const std::string& config_json) {
        return to_json(run_config_from_json(nlohmann::json::parse(config_json.empty() ? "{}" : config_json))).dump();
      },
      py::arg("config_json") = "", "Validates a run configuration and returns it with defaults filled in (JSON).");

  m.def("read_image", [](const std::string& path) { return to_array(read_image(path)); }, py::arg("path"));
  m.def("write_image", [](const Pixels& image, const std::string& path) { write_image(from_array(image), path); },
        py::arg("image"), py::arg("path"));

  py::class_<Predictor>(m, "Predictor")
      .def(py::init<const std::string&, const std::string&>(), py::arg("checkpoint"), py::arg("supports"))
      .def("predict", &Predictor::predict, py::arg("image"), py::arg("threshold") = 0.25,
           "Detections [(class, score, box)] on an (H, W, 3) uint8 image.")
      .def_property_readonly("classes", &Predictor::classes);
}
