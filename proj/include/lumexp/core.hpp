#pragma once

#include <array>
#include <optional>
#include <string>
#include <vector>

#include "lumexp/tensor.hpp"

namespace lumexp {

// Label spaces for the two manipulated factors.
struct AttributeSpec {
  int64_t num_expressions = 6;
  int64_t num_lightings = 20;
  std::vector<std::string> expression_names;  // optional
  std::vector<std::string> lighting_names;    // optional

  int64_t num_channels() const { return num_expressions + num_lightings; }
  void validate() const;
};

// Image in [-1, 1], stored CHW with 3 channels. Loaders map 8-bit values by
// v / 127.5 - 1 so a tanh output head and file pixels share one scale.
struct ImageTensor {
  Tensor chw;  // [3, H, W]

  ImageTensor() = default;
  explicit ImageTensor(Tensor t);
  static ImageTensor zeros(int64_t height, int64_t width);

  int64_t height() const { return chw.dim(1); }
  int64_t width() const { return chw.dim(2); }
  double& at(int64_t c, int64_t y, int64_t x) {
    return chw.data[static_cast<size_t>((c * height() + y) * width() + x)];
  }
  double at(int64_t c, int64_t y, int64_t x) const {
    return chw.data[static_cast<size_t>((c * height() + y) * width() + x)];
  }
  void validate() const;  // range and divisibility invariants
};

// Spatially tiled one-hot planes for (expression, lighting).
struct ConditionMaps {
  Tensor expression_maps;  // [E, H, W]
  Tensor lighting_maps;    // [L, H, W]
};

ConditionMaps encode_conditions(int64_t expression_id, int64_t lighting_id,
                                const AttributeSpec& spec, int64_t height, int64_t width);

// Binary face-region mask.
struct FaceMask {
  Tensor mask;  // [H, W], entries 0 or 1

  int64_t height() const { return mask.dim(0); }
  int64_t width() const { return mask.dim(1); }
  int64_t count() const;
};

using LandmarkPoint = std::array<double, 2>;  // (x, y) pixel coordinates

// Rasterized convex hull of the landmarks: pixel (x, y) is kept iff its
// center lies inside or on the hull. Throws GeometryError for fewer than 3
// points or a collinear set.
FaceMask mask_from_landmarks(const std::vector<LandmarkPoint>& points, int64_t height,
                             int64_t width);

// Fallback when no landmarks are available: ellipse with axes 0.42*W and
// 0.48*H centered at (0.5*W, 0.52*H).
FaceMask default_ellipse_mask(int64_t height, int64_t width);

// Masked-out pixels become -1 (black); masked-in pixels are untouched.
ImageTensor apply_mask(const ImageTensor& image, const FaceMask& mask);

ImageTensor mirror(const ImageTensor& image);

// (mean, population standard deviation) of ratings in [0, 10].
std::pair<double, double> aggregate_ratings(const std::vector<double>& raw);

struct RatingRecord {
  std::string image;
  std::vector<double> raw_ratings;  // may be empty when mu/sigma were precomputed
  double mu = 0.0;
  double sigma = 0.0;
};

struct ManifestRecord {
  std::string image;  // resolved path
  int64_t expression = 0;
  int64_t lighting = 0;
  std::optional<int64_t> subject;
  std::optional<std::vector<LandmarkPoint>> landmarks;
};

struct DatasetManifest {
  std::vector<ManifestRecord> records;

  size_t size() const { return records.size(); }
  bool empty() const { return records.empty(); }
};

// JSON-lines manifest: one object per line with fields `image`, `expression`,
// `lighting`, optional `subject`, optional `landmarks` ([[x, y], ...]).
// Image paths are resolved relative to the manifest location; with
// require_paths they must exist.
DatasetManifest load_manifest(const std::string& path, const AttributeSpec& spec,
                              bool require_paths = true);
void save_manifest(const DatasetManifest& manifest, const std::string& path);

// JSON-lines ratings: `image` plus either `ratings` (array) or precomputed
// `mu`/`sigma`. When both are present they must agree.
std::vector<RatingRecord> load_ratings(const std::string& path);
void save_ratings(const std::vector<RatingRecord>& records, const std::string& path);

}  // namespace lumexp
