#include "libra/seqio/synth.hpp"

#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>

#include <json.hpp>

#include "libra/error.hpp"

namespace libra::seqio {

using imgtok::ToyImage;
using nlohmann::json;

bool covers(const Scene& s, std::size_t y, std::size_t x) {
    if (y < s.y || x < s.x || y >= s.y + s.size || x >= s.x + s.size) return false;
    const double half = static_cast<double>(s.size) / 2.0;
    const double dx = static_cast<double>(x - s.x) + 0.5 - half;
    const double dy = static_cast<double>(y - s.y) + 0.5 - half;
    switch (s.shape) {
        case Shape::square:
            return true;
        case Shape::circle:
            return dx * dx + dy * dy <= half * half;
        case Shape::triangle: {
            const double row = static_cast<double>(y - s.y) + 1.0;
            return std::abs(dx) <= half * row / static_cast<double>(s.size);
        }
    }
    return false;
}

ToyImage render_scene(const Scene& s, std::size_t height, std::size_t width) {
    ToyImage img(height, width);
    for (std::size_t y = 0; y < height; ++y)
        for (std::size_t x = 0; x < width; ++x) {
            const auto& rgb = kColors[covers(s, y, x) ? s.fg : s.bg].rgb;
            for (std::size_t c = 0; c < 3; ++c) img.at(y, x, c) = rgb[c];
        }
    return img;
}

std::string caption_for(const Scene& s) {
    return std::string("a ") + kColors[s.fg].name + " " + kShapeNames[static_cast<std::size_t>(s.shape)] + " on " +
           kColors[s.bg].name + " background";
}

Scene sample_scene(Rng& rng, std::size_t height, std::size_t width) {
    Scene s;
    s.shape = static_cast<Shape>(rng.index(kShapeNames.size()));
    s.fg = rng.index(kColors.size());
    s.bg = rng.index(kColors.size() - 1);
    if (s.bg >= s.fg) ++s.bg;
    s.size = 6 + rng.index(5);
    s.size = std::min({s.size, height, width});
    s.y = rng.index(height - s.size + 1);
    s.x = rng.index(width - s.size + 1);
    return s;
}

std::vector<SyntheticSample> synth_dataset(std::uint64_t seed, std::size_t n, std::size_t height, std::size_t width) {
    Rng rng(seed, "synth.pretrain");
    std::vector<SyntheticSample> out;
    out.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        const auto s = sample_scene(rng, height, width);
        out.push_back({s, render_scene(s, height, width), caption_for(s)});
    }
    return out;
}

std::vector<SftSample> synth_sft_dataset(std::uint64_t seed, std::size_t n, std::size_t height, std::size_t width) {
    Rng rng(seed, "synth.sft");
    std::vector<SftSample> out;
    out.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        const auto s = sample_scene(rng, height, width);
        SftSample q{s, render_scene(s, height, width), {}, {}};
        switch (rng.index(4)) {
            case 0:
                q.instruction = "What color is the shape?";
                q.answer = kColors[s.fg].name;
                break;
            case 1:
                q.instruction = "What shape is in the image?";
                q.answer = kShapeNames[static_cast<std::size_t>(s.shape)];
                break;
            case 2:
                q.instruction = "What color is the background?";
                q.answer = kColors[s.bg].name;
                break;
            default:
                q.instruction = "Describe the image.";
                q.answer = caption_for(s);
                break;
        }
        out.push_back(std::move(q));
    }
    return out;
}

std::vector<ToyImage> solid_images(std::uint64_t seed, std::size_t n, std::size_t height, std::size_t width) {
    Rng rng(seed, "synth.solid");
    std::vector<ToyImage> out;
    out.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        const auto& rgb = kColors[rng.index(kColors.size())].rgb;
        ToyImage img(height, width);
        for (std::size_t p = 0; p < height * width; ++p)
            for (std::size_t c = 0; c < 3; ++c) img.pixels[p * 3 + c] = rgb[c];
        out.push_back(std::move(img));
    }
    return out;
}

namespace {

json scene_json(const Scene& s) {
    return {{"shape", kShapeNames[static_cast<std::size_t>(s.shape)]},
            {"fg", kColors[s.fg].name},
            {"bg", kColors[s.bg].name},
            {"size", s.size},
            {"x", s.x},
            {"y", s.y}};
}

std::size_t color_index(const std::string& name) {
    for (std::size_t i = 0; i < kColors.size(); ++i)
        if (name == kColors[i].name) return i;
    throw InputError("unknown color '" + name + "'");
}

Scene scene_from(const json& j) {
    Scene s;
    const auto shape = j.at("shape").get<std::string>();
    bool found = false;
    for (std::size_t i = 0; i < kShapeNames.size(); ++i)
        if (shape == kShapeNames[i]) {
            s.shape = static_cast<Shape>(i);
            found = true;
        }
    if (!found) throw InputError("unknown shape '" + shape + "'");
    s.fg = color_index(j.at("fg").get<std::string>());
    s.bg = color_index(j.at("bg").get<std::string>());
    s.size = j.at("size").get<std::size_t>();
    s.x = j.at("x").get<std::size_t>();
    s.y = j.at("y").get<std::size_t>();
    return s;
}

std::string image_name(std::size_t i) {
    std::ostringstream os;
    os << "images/" << std::setw(5) << std::setfill('0') << i << ".ppm";
    return os.str();
}

template <class Sample, class Fill>
void write_records(const std::filesystem::path& dir, const std::vector<Sample>& samples, Fill fill) {
    std::filesystem::create_directories(dir / "images");
    std::ofstream out(dir / "data.jsonl");
    if (!out) throw InputError("cannot write corpus in '" + dir.string() + "'");
    for (std::size_t i = 0; i < samples.size(); ++i) {
        const auto rel = image_name(i);
        imgtok::write_ppm(dir / rel, samples[i].image);
        json rec{{"image", rel}, {"scene", scene_json(samples[i].scene)}};
        fill(rec, samples[i]);
        out << rec.dump() << '\n';
    }
}

template <class Sample, class Read>
std::vector<Sample> read_records(const std::filesystem::path& dir, Read read) {
    std::ifstream in(dir / "data.jsonl");
    if (!in) throw InputError("cannot read corpus index '" + (dir / "data.jsonl").string() + "'");
    std::vector<Sample> out;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        try {
            const auto rec = json::parse(line);
            Sample s;
            s.image = imgtok::read_ppm(dir / rec.at("image").get<std::string>());
            if (rec.contains("scene")) s.scene = scene_from(rec.at("scene"));
            read(rec, s);
            out.push_back(std::move(s));
        } catch (const json::exception& e) {
            throw InputError("corpus line " + std::to_string(lineno) + ": " + e.what());
        }
    }
    if (out.empty()) throw InputError("corpus '" + dir.string() + "' is empty");
    return out;
}

}  // namespace

void write_corpus(const std::filesystem::path& dir, const std::vector<SyntheticSample>& samples) {
    write_records(dir, samples, [](json& rec, const SyntheticSample& s) { rec["caption"] = s.caption; });
}

void write_sft_corpus(const std::filesystem::path& dir, const std::vector<SftSample>& samples) {
    write_records(dir, samples, [](json& rec, const SftSample& s) {
        rec["instruction"] = s.instruction;
        rec["answer"] = s.answer;
    });
}

std::vector<SyntheticSample> read_corpus(const std::filesystem::path& dir) {
    return read_records<SyntheticSample>(
        dir, [](const json& rec, SyntheticSample& s) { s.caption = rec.at("caption").get<std::string>(); });
}

std::vector<SftSample> read_sft_corpus(const std::filesystem::path& dir) {
    return read_records<SftSample>(dir, [](const json& rec, SftSample& s) {
        s.instruction = rec.at("instruction").get<std::string>();
        s.answer = rec.at("answer").get<std::string>();
    });
}

}  // namespace libra::seqio
