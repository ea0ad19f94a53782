#include "libra/imgtok/image.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <string>

#include "libra/error.hpp"

namespace libra::imgtok {

void write_ppm(const std::filesystem::path& path, const ToyImage& image) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw InputError("cannot write image '" + path.string() + "'");
    out << "P6\n" << image.width << ' ' << image.height << "\n255\n";
    std::string bytes(image.pixels.size(), '\0');
    for (std::size_t i = 0; i < bytes.size(); ++i) {
        const double v = std::clamp(image.pixels[i], 0.0, 1.0);
        bytes[i] = static_cast<char>(static_cast<unsigned char>(std::lround(v * 255.0)));
    }
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

namespace {

std::string next_token(std::istream& in) {
    std::string tok;
    int c;
    while ((c = in.get()) != EOF) {
        if (c == '#') {
            while ((c = in.get()) != EOF && c != '\n') {
            }
            continue;
        }
        if (std::isspace(c)) {
            if (!tok.empty()) return tok;
            continue;
        }
        tok.push_back(static_cast<char>(c));
    }
    return tok;
}

}  // namespace

ToyImage read_ppm(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw InputError("cannot read image '" + path.string() + "'");
    if (next_token(in) != "P6") throw InputError("'" + path.string() + "' is not a binary PPM (P6)");
    std::size_t w = 0, h = 0, maxval = 0;
    try {
        w = std::stoul(next_token(in));
        h = std::stoul(next_token(in));
        maxval = std::stoul(next_token(in));
    } catch (const std::exception&) {
        throw InputError("'" + path.string() + "' has a malformed PPM header");
    }
    if (maxval != 255) throw InputError("'" + path.string() + "' must be 8-bit (maxval 255)");
    ToyImage img(h, w);
    std::string bytes(img.pixels.size(), '\0');
    in.read(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (static_cast<std::size_t>(in.gcount()) != bytes.size())
        throw InputError("'" + path.string() + "' is truncated");
    for (std::size_t i = 0; i < bytes.size(); ++i) img.pixels[i] = static_cast<unsigned char>(bytes[i]) / 255.0;
    return img;
}

std::vector<double> patchify(const ToyImage& image, std::size_t patch) {
    if (patch == 0 || image.height % patch != 0 || image.width % patch != 0)
        throw InputError("image " + std::to_string(image.height) + "x" + std::to_string(image.width) +
                         " is not divisible by patch size " + std::to_string(patch));
    const std::size_t gh = image.height / patch, gw = image.width / patch;
    const std::size_t row = patch * patch * 3;
    std::vector<double> out(gh * gw * row);
    for (std::size_t py = 0; py < gh; ++py)
        for (std::size_t px = 0; px < gw; ++px) {
            double* dst = out.data() + (py * gw + px) * row;
            for (std::size_t dy = 0; dy < patch; ++dy)
                for (std::size_t dx = 0; dx < patch; ++dx)
                    for (std::size_t c = 0; c < 3; ++c)
                        *dst++ = image.at(py * patch + dy, px * patch + dx, c);
        }
    return out;
}

ToyImage unpatchify(const std::vector<double>& patches, std::size_t height, std::size_t width, std::size_t patch) {
    const std::size_t gh = height / patch, gw = width / patch, row = patch * patch * 3;
    if (patches.size() != gh * gw * row)
        throw ContractViolation("unpatchify: " + std::to_string(patches.size()) + " values for a " +
                                std::to_string(height) + "x" + std::to_string(width) + " image");
    ToyImage img(height, width);
    for (std::size_t py = 0; py < gh; ++py)
        for (std::size_t px = 0; px < gw; ++px) {
            const double* src = patches.data() + (py * gw + px) * row;
            for (std::size_t dy = 0; dy < patch; ++dy)
                for (std::size_t dx = 0; dx < patch; ++dx)
                    for (std::size_t c = 0; c < 3; ++c) img.at(py * patch + dy, px * patch + dx, c) = *src++;
        }
    return img;
}

double mse(const ToyImage& a, const ToyImage& b) {
    if (a.height != b.height || a.width != b.width) throw ContractViolation("mse: image sizes differ");
    double s = 0.0;
    for (std::size_t i = 0; i < a.pixels.size(); ++i) {
        const double d = a.pixels[i] - b.pixels[i];
        s += d * d;
    }
    return a.pixels.empty() ? 0.0 : s / static_cast<double>(a.pixels.size());
}

}  // namespace libra::imgtok
