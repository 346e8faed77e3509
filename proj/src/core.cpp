#include "lumexp/core.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>

#include "json.hpp"
#include "lumexp/errors.hpp"

namespace lumexp {

using nlohmann::json;
namespace fs = std::filesystem;

void AttributeSpec::validate() const {
  if (num_expressions < 2 || num_lightings < 2)
    throw ValidationError("attribute spec needs at least 2 classes per factor, got " +
                          std::to_string(num_expressions) + " expressions and " +
                          std::to_string(num_lightings) + " lightings");
}

ImageTensor::ImageTensor(Tensor t) : chw(std::move(t)) {
  if (chw.rank() != 3 || chw.dim(0) != 3)
    throw DimensionError("image must be [3, H, W], got " + shape_str(chw.shape));
}

ImageTensor ImageTensor::zeros(int64_t height, int64_t width) {
  return ImageTensor(Tensor::zeros({3, height, width}));
}

void ImageTensor::validate() const {
  if (height() % 4 != 0 || width() % 4 != 0)
    throw DimensionError("image sides must be multiples of 4, got " +
                         std::to_string(height()) + "x" + std::to_string(width()));
  for (double v : chw.data)
    if (v < -1.0 || v > 1.0 || !std::isfinite(v))
      throw ValidationError("image values must lie in [-1, 1]");
}

ConditionMaps encode_conditions(int64_t expression_id, int64_t lighting_id,
                                const AttributeSpec& spec, int64_t height, int64_t width) {
  spec.validate();
  if (expression_id < 0 || expression_id >= spec.num_expressions)
    throw BoundsError("expression id " + std::to_string(expression_id) + " out of range [0, " +
                      std::to_string(spec.num_expressions) + ")");
  if (lighting_id < 0 || lighting_id >= spec.num_lightings)
    throw BoundsError("lighting id " + std::to_string(lighting_id) + " out of range [0, " +
                      std::to_string(spec.num_lightings) + ")");
  ConditionMaps maps;
  maps.expression_maps = Tensor::zeros({spec.num_expressions, height, width});
  maps.lighting_maps = Tensor::zeros({spec.num_lightings, height, width});
  const int64_t plane = height * width;
  std::fill_n(maps.expression_maps.ptr() + expression_id * plane, plane, 1.0);
  std::fill_n(maps.lighting_maps.ptr() + lighting_id * plane, plane, 1.0);
  return maps;
}

int64_t FaceMask::count() const {
  int64_t n = 0;
  for (double v : mask.data) n += v != 0.0;
  return n;
}

namespace {

double cross(const LandmarkPoint& o, const LandmarkPoint& a, const LandmarkPoint& b) {
  return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0]);
}

// Monotone chain; returns CCW hull without the closing point.
std::vector<LandmarkPoint> convex_hull(std::vector<LandmarkPoint> pts) {
  std::sort(pts.begin(), pts.end());
  pts.erase(std::unique(pts.begin(), pts.end()), pts.end());
  const size_t n = pts.size();
  if (n < 3) return {};
  std::vector<LandmarkPoint> hull(2 * n);
  size_t k = 0;
  for (size_t i = 0; i < n; ++i) {
    while (k >= 2 && cross(hull[k - 2], hull[k - 1], pts[i]) <= 0) --k;
    hull[k++] = pts[i];
  }
  for (size_t i = n - 1, lower = k + 1; i-- > 0;) {
    while (k >= lower && cross(hull[k - 2], hull[k - 1], pts[i]) <= 0) --k;
    hull[k++] = pts[i];
  }
  hull.resize(k - 1);
  return hull;
}

}  // namespace

FaceMask mask_from_landmarks(const std::vector<LandmarkPoint>& points, int64_t height,
                             int64_t width) {
  if (points.size() < 3)
    throw GeometryError("need at least 3 landmarks, got " + std::to_string(points.size()));
  auto hull = convex_hull(points);
  if (hull.size() < 3) throw GeometryError("landmarks are collinear or coincident");

  FaceMask out;
  out.mask = Tensor::zeros({height, width});
  const double eps = 1e-9;
  for (int64_t y = 0; y < height; ++y)
    for (int64_t x = 0; x < width; ++x) {
      const LandmarkPoint p{static_cast<double>(x), static_cast<double>(y)};
      bool inside = true;
      for (size_t i = 0; i < hull.size() && inside; ++i) {
        const auto& a = hull[i];
        const auto& b = hull[(i + 1) % hull.size()];
        if (cross(a, b, p) < -eps) inside = false;  // hull is CCW
      }
      if (inside) out.mask.data[static_cast<size_t>(y * width + x)] = 1.0;
    }
  return out;
}

FaceMask default_ellipse_mask(int64_t height, int64_t width) {
  FaceMask out;
  out.mask = Tensor::zeros({height, width});
  const double cx = 0.5 * static_cast<double>(width);
  const double cy = 0.52 * static_cast<double>(height);
  const double rx = 0.42 * static_cast<double>(width);
  const double ry = 0.48 * static_cast<double>(height);
  for (int64_t y = 0; y < height; ++y)
    for (int64_t x = 0; x < width; ++x) {
      const double dx = (static_cast<double>(x) - cx) / rx;
      const double dy = (static_cast<double>(y) - cy) / ry;
      if (dx * dx + dy * dy <= 1.0) out.mask.data[static_cast<size_t>(y * width + x)] = 1.0;
    }
  return out;
}

ImageTensor apply_mask(const ImageTensor& image, const FaceMask& mask) {
  if (mask.height() != image.height() || mask.width() != image.width())
    throw DimensionError("mask " + shape_str(mask.mask.shape) + " does not match image " +
                         shape_str(image.chw.shape));
  ImageTensor out = image;
  const int64_t plane = image.height() * image.width();
  for (int64_t c = 0; c < 3; ++c)
    for (int64_t i = 0; i < plane; ++i)
      if (mask.mask.data[static_cast<size_t>(i)] == 0.0)
        out.chw.data[static_cast<size_t>(c * plane + i)] = -1.0;
  return out;
}

ImageTensor mirror(const ImageTensor& image) {
  ImageTensor out = image;
  const int64_t h = image.height(), w = image.width();
  for (int64_t c = 0; c < 3; ++c)
    for (int64_t y = 0; y < h; ++y)
      for (int64_t x = 0; x < w; ++x) out.at(c, y, x) = image.at(c, y, w - 1 - x);
  return out;
}

std::pair<double, double> aggregate_ratings(const std::vector<double>& raw) {
  if (raw.empty()) throw ValidationError("cannot aggregate an empty rating list");
  double sum = 0.0;
  for (double r : raw) {
    if (!(r >= 0.0 && r <= 10.0))
      throw ValidationError("rating " + std::to_string(r) + " outside [0, 10]");
    sum += r;
  }
  const double mu = sum / static_cast<double>(raw.size());
  double var = 0.0;
  for (double r : raw) var += (r - mu) * (r - mu);
  var /= static_cast<double>(raw.size());  // raters are the whole population
  return {mu, std::sqrt(var)};
}

// ---------------------------------------------------------------------------
// JSON-lines files
// ---------------------------------------------------------------------------

namespace {

json parse_line(const std::string& line, const std::string& path, size_t lineno) {
  try {
    return json::parse(line);
  } catch (const json::exception& e) {
    throw ParseError(path + ":" + std::to_string(lineno) + ": " + e.what());
  }
}

bool blank(const std::string& s) {
  return std::all_of(s.begin(), s.end(), [](unsigned char c) { return std::isspace(c); });
}

}  // namespace

DatasetManifest load_manifest(const std::string& path, const AttributeSpec& spec,
                              bool require_paths) {
  spec.validate();
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open manifest " + path);
  const fs::path base = fs::path(path).parent_path();

  DatasetManifest manifest;
  std::string line;
  size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (blank(line)) continue;
    json j = parse_line(line, path, lineno);
    ManifestRecord rec;
    try {
      rec.image = j.at("image").get<std::string>();
      rec.expression = j.at("expression").get<int64_t>();
      rec.lighting = j.at("lighting").get<int64_t>();
      if (j.contains("subject")) rec.subject = j["subject"].get<int64_t>();
      if (j.contains("landmarks")) {
        std::vector<LandmarkPoint> pts;
        for (const auto& p : j["landmarks"])
          pts.push_back({p.at(0).get<double>(), p.at(1).get<double>()});
        rec.landmarks = std::move(pts);
      }
    } catch (const json::exception& e) {
      throw ParseError(path + ":" + std::to_string(lineno) + ": " + e.what());
    }
    const std::string where = path + ":" + std::to_string(lineno) + " (" + rec.image + ")";
    if (rec.expression < 0 || rec.expression >= spec.num_expressions)
      throw ValidationError(where + ": expression id " + std::to_string(rec.expression) +
                            " out of range [0, " + std::to_string(spec.num_expressions) + ")");
    if (rec.lighting < 0 || rec.lighting >= spec.num_lightings)
      throw ValidationError(where + ": lighting id " + std::to_string(rec.lighting) +
                            " out of range [0, " + std::to_string(spec.num_lightings) + ")");
    fs::path img(rec.image);
    if (img.is_relative()) img = base / img;
    if (require_paths && !fs::exists(img))
      throw ValidationError(where + ": image file not found");
    rec.image = img.string();
    manifest.records.push_back(std::move(rec));
  }
  return manifest;
}

void save_manifest(const DatasetManifest& manifest, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw ValidationError("cannot write manifest " + path);
  for (const auto& rec : manifest.records) {
    json j;
    j["image"] = rec.image;
    j["expression"] = rec.expression;
    j["lighting"] = rec.lighting;
    if (rec.subject) j["subject"] = *rec.subject;
    if (rec.landmarks) {
      json pts = json::array();
      for (const auto& p : *rec.landmarks) pts.push_back({p[0], p[1]});
      j["landmarks"] = std::move(pts);
    }
    out << j.dump() << "\n";
  }
}

std::vector<RatingRecord> load_ratings(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open ratings file " + path);
  const fs::path base = fs::path(path).parent_path();

  std::vector<RatingRecord> records;
  std::string line;
  size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (blank(line)) continue;
    json j = parse_line(line, path, lineno);
    RatingRecord rec;
    try {
      rec.image = j.at("image").get<std::string>();
      if (j.contains("ratings")) rec.raw_ratings = j["ratings"].get<std::vector<double>>();
      if (j.contains("mu")) rec.mu = j["mu"].get<double>();
      if (j.contains("sigma")) rec.sigma = j["sigma"].get<double>();
    } catch (const json::exception& e) {
      throw ParseError(path + ":" + std::to_string(lineno) + ": " + e.what());
    }
    const std::string where = path + ":" + std::to_string(lineno) + " (" + rec.image + ")";
    if (!rec.raw_ratings.empty()) {
      auto [mu, sigma] = aggregate_ratings(rec.raw_ratings);
      if (j.contains("mu") && std::fabs(mu - rec.mu) > 1e-9)
        throw ValidationError(where + ": stored mu disagrees with ratings");
      if (j.contains("sigma") && std::fabs(sigma - rec.sigma) > 1e-9)
        throw ValidationError(where + ": stored sigma disagrees with ratings");
      rec.mu = mu;
      rec.sigma = sigma;
    } else if (!j.contains("mu") || !j.contains("sigma")) {
      throw ValidationError(where + ": needs either `ratings` or both `mu` and `sigma`");
    }
    if (rec.mu < 0.0 || rec.mu > 10.0)
      throw ValidationError(where + ": mu " + std::to_string(rec.mu) + " outside [0, 10]");
    if (rec.sigma < 0.0) throw ValidationError(where + ": negative sigma");
    fs::path img(rec.image);
    if (img.is_relative()) img = base / img;
    rec.image = img.string();
    records.push_back(std::move(rec));
  }
  return records;
}

void save_ratings(const std::vector<RatingRecord>& records, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw ValidationError("cannot write ratings file " + path);
  for (const auto& rec : records) {
    json j;
    j["image"] = rec.image;
    if (!rec.raw_ratings.empty()) j["ratings"] = rec.raw_ratings;
    j["mu"] = rec.mu;
    j["sigma"] = rec.sigma;
    out << j.dump() << "\n";
  }
}

}  // namespace lumexp
