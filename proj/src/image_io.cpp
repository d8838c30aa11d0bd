#include "scops/image_io.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <memory>

#include <png.h>

namespace scops {

namespace {

struct FileCloser {
    void operator()(std::FILE* f) const { std::fclose(f); }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

FilePtr open_file(const std::filesystem::path& path, const char* mode) {
    FilePtr f(std::fopen(path.c_str(), mode));
    if (!f) throw IoError(std::string("cannot open ") + path.string());
    return f;
}

void write_png(const std::filesystem::path& path, int height, int width, int color_type, int channels,
               const std::vector<std::uint8_t>& pixels, const std::vector<std::array<std::uint8_t, 3>>* palette) {
    if (pixels.size() != static_cast<std::size_t>(height) * width * channels) {
        throw DimensionError("pixel buffer size does not match image dimensions");
    }
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    FilePtr f = open_file(path, "wb");
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info) {
        png_destroy_write_struct(&png, &info);
        throw IoError("libpng initialisation failed");
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw IoError("failed writing " + path.string());
    }
    png_init_io(png, f.get());
    png_set_IHDR(png, info, width, height, 8, color_type, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
                 PNG_FILTER_TYPE_DEFAULT);
    std::vector<png_color> colors;
    if (palette) {
        for (const auto& c : *palette) colors.push_back({c[0], c[1], c[2]});
        png_set_PLTE(png, info, colors.data(), static_cast<int>(colors.size()));
    }
    // Fixed metadata only, so identical inputs produce identical bytes.
    png_write_info(png, info);
    for (int y = 0; y < height; ++y) {
        png_write_row(png, const_cast<png_bytep>(pixels.data() + static_cast<std::size_t>(y) * width * channels));
    }
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
}

std::uint8_t to_byte(double v) { return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)); }

} // namespace

Raster read_png(const std::filesystem::path& path, bool keep_indices) {
    FilePtr f = open_file(path, "rb");
    png_byte header[8];
    if (std::fread(header, 1, 8, f.get()) != 8 || png_sig_cmp(header, 0, 8) != 0) {
        throw IoError(path.string() + " is not a PNG file");
    }
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw IoError("libpng initialisation failed");
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw IoError("failed decoding " + path.string());
    }
    png_init_io(png, f.get());
    png_set_sig_bytes(png, 8);
    png_read_info(png, info);

    Raster out;
    out.width = static_cast<int>(png_get_image_width(png, info));
    out.height = static_cast<int>(png_get_image_height(png, info));
    const int color_type = png_get_color_type(png, info);
    const int depth = png_get_bit_depth(png, info);

    if (color_type == PNG_COLOR_TYPE_PALETTE && keep_indices) {
        png_colorp colors = nullptr;
        int count = 0;
        png_get_PLTE(png, info, &colors, &count);
        for (int i = 0; i < count; ++i) out.palette.push_back({colors[i].red, colors[i].green, colors[i].blue});
        if (depth < 8) png_set_packing(png);
    } else {
        if (color_type == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
        if (color_type == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
        if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
        if (depth == 16) png_set_strip_16(png);
        png_set_strip_alpha(png);
    }
    png_read_update_info(png, info);
    out.channels = png_get_channels(png, info);
    const std::size_t stride = png_get_rowbytes(png, info);
    out.pixels.resize(stride * out.height);
    std::vector<png_bytep> rows(out.height);
    for (int y = 0; y < out.height; ++y) rows[y] = out.pixels.data() + stride * y;
    png_read_image(png, rows.data());
    png_read_end(png, nullptr);
    png_destroy_read_struct(&png, &info, nullptr);
    return out;
}

void write_png_gray(const std::filesystem::path& path, int height, int width, const std::vector<std::uint8_t>& pixels) {
    write_png(path, height, width, PNG_COLOR_TYPE_GRAY, 1, pixels, nullptr);
}

void write_png_rgb(const std::filesystem::path& path, int height, int width, const std::vector<std::uint8_t>& pixels) {
    write_png(path, height, width, PNG_COLOR_TYPE_RGB, 3, pixels, nullptr);
}

void write_png_indexed(const std::filesystem::path& path, int height, int width, const std::vector<std::uint8_t>& indices,
                       const std::vector<std::array<std::uint8_t, 3>>& palette) {
    if (palette.empty() || palette.size() > 256) throw DimensionError("palette must have 1..256 entries");
    write_png(path, height, width, PNG_COLOR_TYPE_PALETTE, 1, indices, &palette);
}

ImageTensor load_image(const std::filesystem::path& path) {
    const Raster r = read_png(path);
    Tensor t(3, r.height, r.width);
    for (int y = 0; y < r.height; ++y) {
        for (int x = 0; x < r.width; ++x) {
            const std::size_t base = (static_cast<std::size_t>(y) * r.width + x) * r.channels;
            for (int c = 0; c < 3; ++c) {
                const int src = r.channels >= 3 ? c : 0;
                t(c, y, x) = r.pixels[base + src] / 255.0;
            }
        }
    }
    return ImageTensor(std::move(t));
}

void save_image(const std::filesystem::path& path, const ImageTensor& image) {
    const int h = image.height(), w = image.width();
    std::vector<std::uint8_t> px(static_cast<std::size_t>(h) * w * 3);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            for (int c = 0; c < 3; ++c) px[(static_cast<std::size_t>(y) * w + x) * 3 + c] = to_byte(image.pixels(c, y, x));
    write_png_rgb(path, h, w, px);
}

} // namespace scops
