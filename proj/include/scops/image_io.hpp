#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <vector>

#include "scops/core.hpp"

namespace scops {

/// 8-bit raster as decoded from disk. `channels` is 1 (gray / palette index)
/// or 3 (RGB); alpha is dropped.
struct Raster {
    int height = 0;
    int width = 0;
    int channels = 0;
    std::vector<std::uint8_t> pixels;  // interleaved, row-major
    std::vector<std::array<std::uint8_t, 3>> palette;  // non-empty for indexed files
};

/// Decodes a PNG. Palette files keep their indices when `keep_indices` is true,
/// otherwise they are expanded to RGB.
Raster read_png(const std::filesystem::path& path, bool keep_indices = false);

void write_png_gray(const std::filesystem::path& path, int height, int width, const std::vector<std::uint8_t>& pixels);
void write_png_rgb(const std::filesystem::path& path, int height, int width, const std::vector<std::uint8_t>& pixels);
void write_png_indexed(const std::filesystem::path& path, int height, int width, const std::vector<std::uint8_t>& indices,
                       const std::vector<std::array<std::uint8_t, 3>>& palette);

/// RGB (or gray, replicated) PNG to an image with values /255.
ImageTensor load_image(const std::filesystem::path& path);
void save_image(const std::filesystem::path& path, const ImageTensor& image);

} // namespace scops
