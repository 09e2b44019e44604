#include "corrdet/core.hpp"

#include <algorithm>
#include <iterator>

#include "corrdet/geometry.hpp"

namespace corrdet {

std::string_view errc_name(Errc code) {
  switch (code) {
    case Errc::kDuplicateSupportClass: return "DuplicateSupportClass";
    case Errc::kShotCountMismatch: return "ShotCountMismatch";
    case Errc::kBoxOutOfBounds: return "BoxOutOfBounds";
    case Errc::kDegenerateBox: return "DegenerateBox";
    case Errc::kAssignmentInvalid: return "AssignmentInvalid";
    case Errc::kShapeMismatch: return "ShapeMismatch";
    case Errc::kNonFiniteCost: return "NonFiniteCost";
    case Errc::kTooManyObjects: return "TooManyObjects";
    case Errc::kUnknownEncodingIndex: return "UnknownEncodingIndex";
    case Errc::kOddDimension: return "OddDimension";
    case Errc::kEmptyRegion: return "EmptyRegion";
    case Errc::kImageTooSmall: return "ImageTooSmall";
    case Errc::kMissingClassSupport: return "MissingClassSupport";
    case Errc::kNonFiniteLoss: return "NonFiniteLoss";
    case Errc::kInsufficientClasses: return "InsufficientClasses";
    case Errc::kInsufficientShots: return "InsufficientShots";
    case Errc::kIoError: return "IoError";
    case Errc::kStageMismatch: return "StageMismatch";
    case Errc::kInvalidSplit: return "InvalidSplit";
    case Errc::kInvalidConfig: return "InvalidConfig";
  }
  return "Unknown";
}

Error::Error(Errc code, const std::string& message)
    : std::runtime_error(std::string(errc_name(code)) + ": " + message), code_(code) {}

bool Box::valid(double tol) const {
  if (!(cx >= -tol && cx <= 1.0 + tol && cy >= -tol && cy <= 1.0 + tol)) return false;
  if (!(w > 0.0 && w <= 1.0 + tol && h > 0.0 && h <= 1.0 + tol)) return false;
  const XYXYBox c = cxcywh_to_xyxy(*this);
  return c.x0 >= -tol && c.y0 >= -tol && c.x1 <= 1.0 + tol && c.y1 <= 1.0 + tol;
}

Image::Image(int h, int w, int c)
    : height(h), width(w), channels(c), data(static_cast<std::size_t>(h) * w * c, 0) {}

void validate_labeled_image(const LabeledImage& image, int min_size) {
  if (image.image.height < min_size || image.image.width < min_size) {
    throw Error(Errc::kImageTooSmall, "image " + std::to_string(image.image_id) + " is " +
                                          std::to_string(image.image.height) + "x" +
                                          std::to_string(image.image.width));
  }
  for (std::size_t i = 0; i < image.annotations.size(); ++i) {
    if (!image.annotations[i].box.valid()) {
      throw Error(Errc::kBoxOutOfBounds,
                  "annotations[" + std::to_string(i) + "] of image " + std::to_string(image.image_id));
    }
  }
}

ClassSplit::ClassSplit(std::set<ClassId> base, std::set<ClassId> novel)
    : base_(std::move(base)), novel_(std::move(novel)) {
  std::vector<ClassId> both;
  std::set_intersection(base_.begin(), base_.end(), novel_.begin(), novel_.end(),
                        std::back_inserter(both));
  if (!both.empty()) {
    throw Error(Errc::kInvalidSplit,
                "class " + std::to_string(to_int(both.front())) + " is both base and novel");
  }
}

std::vector<ClassId> ClassSplit::all() const {
  std::set<ClassId> merged = base_;
  merged.insert(novel_.begin(), novel_.end());
  return {merged.begin(), merged.end()};
}

}  // namespace corrdet
