#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "libra/imgtok/image.hpp"
#include "libra/rng.hpp"

namespace libra::seqio {

using libra::Rng;

struct ColorDef {
    const char* name;
    std::array<double, 3> rgb;
};
enum class Shape : std::uint8_t { square, circle, triangle };

inline constexpr std::array<ColorDef, 6> kColors{{{"red", {0.9, 0.1, 0.1}},
                                                   {"green", {0.1, 0.8, 0.2}},
                                                   {"blue", {0.1, 0.2, 0.9}},
                                                   {"yellow", {0.95, 0.9, 0.1}},
                                                   {"purple", {0.6, 0.1, 0.7}},
                                                   {"white", {0.95, 0.95, 0.95}}}};
inline constexpr std::array<const char*, 3> kShapeNames{"square", "circle", "triangle"};

/// Scene parameters; the caption and pixels are functions of these alone.
struct Scene {
    Shape shape = Shape::square;
    std::size_t fg = 0;  // index into kColors
    std::size_t bg = 1;
    std::size_t size = 8;  // bounding box side in pixels
    std::size_t x = 0;     // top-left of bounding box
    std::size_t y = 0;
};

struct SyntheticSample {
    Scene scene;
    imgtok::ToyImage image;
    std::string caption;
};

struct SftSample {
    Scene scene;
    imgtok::ToyImage image;
    std::string instruction;
    std::string answer;
};

imgtok::ToyImage render_scene(const Scene& scene, std::size_t height = 16, std::size_t width = 16);
std::string caption_for(const Scene& scene);
/// Whether the shape covers pixel (y, x) of the rendered scene.
bool covers(const Scene& scene, std::size_t y, std::size_t x);

Scene sample_scene(Rng& rng, std::size_t height = 16, std::size_t width = 16);

/// Uniformly sampled scenes; identical for a fixed seed.
std::vector<SyntheticSample> synth_dataset(std::uint64_t seed, std::size_t n, std::size_t height = 16,
                                           std::size_t width = 16);
/// Question/answer pairs about the same kind of scenes.
std::vector<SftSample> synth_sft_dataset(std::uint64_t seed, std::size_t n, std::size_t height = 16,
                                         std::size_t width = 16);
/// Single-color images, one per color in turn.
std::vector<imgtok::ToyImage> solid_images(std::uint64_t seed, std::size_t n, std::size_t height = 16,
                                           std::size_t width = 16);

/// Directory layout: images/NNNNN.ppm plus data.jsonl with one record per sample.
void write_corpus(const std::filesystem::path& dir, const std::vector<SyntheticSample>& samples);
void write_sft_corpus(const std::filesystem::path& dir, const std::vector<SftSample>& samples);
std::vector<SyntheticSample> read_corpus(const std::filesystem::path& dir);
std::vector<SftSample> read_sft_corpus(const std::filesystem::path& dir);

}  // namespace libra::seqio
