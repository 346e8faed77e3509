#pragma once

#include <string>

#include "lumexp/core.hpp"

namespace lumexp {

// 8-bit RGB PNG/JPEG in and out; values map through v / 127.5 - 1.
ImageTensor load_image(const std::string& path);
void save_image(const ImageTensor& image, const std::string& path);

// Plain bilinear resize, used when a CLI input does not match the model size.
ImageTensor resize_image(const ImageTensor& image, int64_t height, int64_t width);

}  // namespace lumexp
