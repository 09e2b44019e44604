#pragma once

#include <compare>
#include <cstdint>
#include <functional>
#include <memory>
#include <set>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace corrdet {

/// Error categories raised across the library. Each maps to one failure mode
/// named in the module contracts; the message carries the offending field.
enum class Errc {
  kDuplicateSupportClass,
  kShotCountMismatch,
  kBoxOutOfBounds,
  kDegenerateBox,
  kAssignmentInvalid,
  kShapeMismatch,
  kNonFiniteCost,
  kTooManyObjects,
  kUnknownEncodingIndex,
  kOddDimension,
  kEmptyRegion,
  kImageTooSmall,
  kMissingClassSupport,
  kNonFiniteLoss,
  kInsufficientClasses,
  kInsufficientShots,
  kIoError,
  kStageMismatch,
  kInvalidSplit,
  kInvalidConfig,
};

std::string_view errc_name(Errc code);

class Error : public std::runtime_error {
 public:
  Error(Errc code, const std::string& message);
  Errc code() const noexcept { return code_; }

 private:
  Errc code_;
};

/// Global class label (base and novel classes share one id space).
enum class ClassId : std::int32_t {};

constexpr std::int32_t to_int(ClassId id) { return static_cast<std::int32_t>(id); }

/// Normalized center/size box; all coordinates relative to the image extent.
struct Box {
  double cx = 0.0;
  double cy = 0.0;
  double w = 0.0;
  double h = 0.0;

  /// True when 0 <= cx,cy <= 1, 0 < w,h <= 1 and the corners stay inside the image.
  bool valid(double tol = 1e-9) const;
  friend bool operator==(const Box&, const Box&) = default;
};

struct Annotation {
  ClassId class_id{};
  Box box;
  friend bool operator==(const Annotation&, const Annotation&) = default;
};

/// 8-bit HWC raster. Values are read back as reals in [0, 1].
struct Image {
  int height = 0;
  int width = 0;
  int channels = 3;
  std::vector<std::uint8_t> data;

  Image() = default;
  Image(int h, int w, int c);

  float at(int y, int x, int c) const {
    return static_cast<float>(data[(static_cast<std::size_t>(y) * width + x) * channels + c]) / 255.0F;
  }
  friend bool operator==(const Image&, const Image&) = default;
};

struct LabeledImage {
  std::int64_t image_id = -1;
  Image image;
  std::vector<Annotation> annotations;
  friend bool operator==(const LabeledImage&, const LabeledImage&) = default;
};

using ImageRef = std::shared_ptr<const LabeledImage>;

/// Validates minimum size and annotation boxes; throws kImageTooSmall / kBoxOutOfBounds.
void validate_labeled_image(const LabeledImage& image, int min_size = 64);

struct SupportExample {
  ImageRef image;
  Box instance_box;
};

class ClassSplit {
 public:
  ClassSplit() = default;
  /// Throws kInvalidSplit when the two sets intersect.
  ClassSplit(std::set<ClassId> base, std::set<ClassId> novel);

  const std::set<ClassId>& base() const { return base_; }
  const std::set<ClassId>& novel() const { return novel_; }
  bool is_base(ClassId id) const { return base_.contains(id); }
  bool is_novel(ClassId id) const { return novel_.contains(id); }
  std::vector<ClassId> all() const;

  friend bool operator==(const ClassSplit&, const ClassSplit&) = default;

 private:
  std::set<ClassId> base_;
  std::set<ClassId> novel_;
};

}  // namespace corrdet

template <>
struct std::hash<corrdet::ClassId> {
  std::size_t operator()(corrdet::ClassId id) const noexcept {
    return std::hash<std::int32_t>{}(corrdet::to_int(id));
  }
};
