// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "attrprompt/data.hpp"

#include <filesystem>

namespace attrprompt {

/// Reads any format OpenCV decodes into RGB in [0,1].
Image load_image(const std::filesystem::path& path);

/// Writes an RGB [0,1] image; values are clamped and quantized to 8 bits.
/// Format follows the extension (png, ppm, jpg, ...).
void save_image(const std::filesystem::path& path, const Image& raw);

Image resize_bilinear(const Image& img, int height, int width);

}  // namespace attrprompt
