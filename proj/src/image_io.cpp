#include "lumexp/image_io.hpp"

#include <algorithm>
#include <cmath>
#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>

#include "lumexp/errors.hpp"

namespace lumexp {

ImageTensor load_image(const std::string& path) {
  cv::Mat bgr = cv::imread(path, cv::IMREAD_COLOR);
  if (bgr.empty()) throw ValidationError("cannot read image " + path);
  ImageTensor out = ImageTensor::zeros(bgr.rows, bgr.cols);
  for (int y = 0; y < bgr.rows; ++y) {
    const cv::Vec3b* row = bgr.ptr<cv::Vec3b>(y);
    for (int x = 0; x < bgr.cols; ++x) {
      out.at(0, y, x) = row[x][2] / 127.5 - 1.0;  // R
      out.at(1, y, x) = row[x][1] / 127.5 - 1.0;  // G
      out.at(2, y, x) = row[x][0] / 127.5 - 1.0;  // B
    }
  }
  return out;
}

void save_image(const ImageTensor& image, const std::string& path) {
  const int h = static_cast<int>(image.height());
  const int w = static_cast<int>(image.width());
  cv::Mat bgr(h, w, CV_8UC3);
  auto to_byte = [](double v) {
    double scaled = (std::clamp(v, -1.0, 1.0) + 1.0) * 127.5;
    return static_cast<unsigned char>(std::lround(scaled));
  };
  for (int y = 0; y < h; ++y) {
    cv::Vec3b* row = bgr.ptr<cv::Vec3b>(y);
    for (int x = 0; x < w; ++x) {
      row[x][2] = to_byte(image.at(0, y, x));
      row[x][1] = to_byte(image.at(1, y, x));
      row[x][0] = to_byte(image.at(2, y, x));
    }
  }
  if (!cv::imwrite(path, bgr)) throw ValidationError("cannot write image " + path);
}

ImageTensor resize_image(const ImageTensor& image, int64_t height, int64_t width) {
  const int64_t ih = image.height(), iw = image.width();
  if (ih == height && iw == width) return image;
  ImageTensor out = ImageTensor::zeros(height, width);
  for (int64_t y = 0; y < height; ++y) {
    const double sy = (static_cast<double>(y) + 0.5) * static_cast<double>(ih) /
                          static_cast<double>(height) - 0.5;
    const int64_t y0 = std::clamp<int64_t>(static_cast<int64_t>(std::floor(sy)), 0, ih - 1);
    const int64_t y1 = std::min(y0 + 1, ih - 1);
    const double ty = std::clamp(sy - static_cast<double>(y0), 0.0, 1.0);
    for (int64_t x = 0; x < width; ++x) {
      const double sx = (static_cast<double>(x) + 0.5) * static_cast<double>(iw) /
                            static_cast<double>(width) - 0.5;
      const int64_t x0 = std::clamp<int64_t>(static_cast<int64_t>(std::floor(sx)), 0, iw - 1);
      const int64_t x1 = std::min(x0 + 1, iw - 1);
      const double tx = std::clamp(sx - static_cast<double>(x0), 0.0, 1.0);
      for (int64_t c = 0; c < 3; ++c) {
        const double top = (1.0 - tx) * image.at(c, y0, x0) + tx * image.at(c, y0, x1);
        const double bot = (1.0 - tx) * image.at(c, y1, x0) + tx * image.at(c, y1, x1);
        out.at(c, y, x) = (1.0 - ty) * top + ty * bot;
      }
    }
  }
  return out;
}

}  // namespace lumexp
