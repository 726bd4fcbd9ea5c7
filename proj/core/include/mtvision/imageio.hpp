#pragma once

#include <string>

#include "mtvision/types.hpp"

namespace mtv {

// Decodes PNG, JPEG, or binary PPM (P6), sniffed by magic bytes.
Image read_image(const std::string& path);

void write_png(const std::string& path, const Image& img);
void write_ppm(const std::string& path, const Image& img);

}  // namespace mtv
