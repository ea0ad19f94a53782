#pragma once

#include <cstddef>
#include <filesystem>
#include <vector>

namespace libra::imgtok {

/// RGB image, channel-interleaved rows, values in [0, 1].
struct ToyImage {
    std::size_t height = 0;
    std::size_t width = 0;
    std::vector<double> pixels;  // (height * width * 3)

    ToyImage() = default;
    ToyImage(std::size_t h, std::size_t w) : height(h), width(w), pixels(h * w * 3, 0.0) {}

    double& at(std::size_t y, std::size_t x, std::size_t c) { return pixels[(y * width + x) * 3 + c]; }
    double at(std::size_t y, std::size_t x, std::size_t c) const { return pixels[(y * width + x) * 3 + c]; }

    bool operator==(const ToyImage&) const = default;
};

/// Binary PPM (P6, maxval 255). Values are quantized with round(v * 255).
void write_ppm(const std::filesystem::path& path, const ToyImage& image);
ToyImage read_ppm(const std::filesystem::path& path);

/// Patch-major flattening: row p = patch (py * grid_w + px), columns (dy, dx, c).
std::vector<double> patchify(const ToyImage& image, std::size_t patch);
ToyImage unpatchify(const std::vector<double>& patches, std::size_t height, std::size_t width, std::size_t patch);

/// Per-pixel, per-channel mean squared error.
double mse(const ToyImage& a, const ToyImage& b);

}  // namespace libra::imgtok
