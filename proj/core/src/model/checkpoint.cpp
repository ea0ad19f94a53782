#include "libra/model/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include <json.hpp>

#include "libra/error.hpp"

namespace libra::model {

static_assert(std::endian::native == std::endian::little, "checkpoint payload is written in native order");

namespace {

constexpr char kMagic[8] = {'L', 'I', 'B', 'R', 'A', 'T', 'O', 'Y'};

template <class T>
void put(std::ostream& out, T v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof v);
}

template <class T>
T get(std::istream& in, const std::filesystem::path& path) {
    T v{};
    if (!in.read(reinterpret_cast<char*>(&v), sizeof v)) throw InputError("checkpoint '" + path.string() + "' is truncated");
    return v;
}

struct Header {
    std::string json;
    std::uint64_t payload_start;
};

Header read_header(std::istream& in, const std::filesystem::path& path) {
    char magic[8];
    if (!in.read(magic, 8) || std::memcmp(magic, kMagic, 8) != 0)
        throw InputError("'" + path.string() + "' is not a checkpoint (bad magic)");
    const auto version = get<std::uint32_t>(in, path);
    if (version != kCheckpointVersion)
        throw InputError("checkpoint '" + path.string() + "' has version " + std::to_string(version) + ", expected " +
                         std::to_string(kCheckpointVersion));
    const auto len = get<std::uint64_t>(in, path);
    if (len > (std::uint64_t{1} << 32)) throw InputError("checkpoint '" + path.string() + "' has a corrupt header length");
    std::string json(len, '\0');
    if (!in.read(json.data(), static_cast<std::streamsize>(len)))
        throw InputError("checkpoint '" + path.string() + "' is truncated in its header");
    return {std::move(json), 8 + 4 + 8 + len};
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
    nlohmann::json header;
    header["config"] = ckpt.config;
    auto arrays = nlohmann::json::array();
    std::uint64_t offset = 0;
    for (const auto& [name, t] : ckpt.arrays.items()) {
        const std::uint64_t nbytes = t.size() * sizeof(double);
        arrays.push_back({{"name", name}, {"dtype", "f64"}, {"shape", t.shape()}, {"offset", offset}, {"nbytes", nbytes}});
        offset += nbytes;
    }
    header["arrays"] = arrays;
    const std::string text = header.dump();

    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    const auto tmp = path.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary);
        if (!out) throw InputError("cannot write checkpoint '" + path.string() + "'");
        out.write(kMagic, 8);
        put<std::uint32_t>(out, kCheckpointVersion);
        put<std::uint64_t>(out, text.size());
        out.write(text.data(), static_cast<std::streamsize>(text.size()));
        for (const auto& [name, t] : ckpt.arrays.items())
            out.write(reinterpret_cast<const char*>(t.data().data()), static_cast<std::streamsize>(t.size() * sizeof(double)));
        if (!out) throw InputError("failed writing checkpoint '" + path.string() + "'");
    }
    std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw InputError("cannot read checkpoint '" + path.string() + "'");
    const auto header = read_header(in, path);
    Checkpoint ckpt;
    std::string payload((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    try {
        const auto j = nlohmann::json::parse(header.json);
        ckpt.config = j.at("config").get<ConfigMap>();
        for (const auto& a : j.at("arrays")) {
            const auto name = a.at("name").get<std::string>();
            if (a.at("dtype").get<std::string>() != "f64")
                throw InputError("checkpoint array '" + name + "' has unsupported dtype");
            const auto shape = a.at("shape").get<num::Shape>();
            const auto offset = a.at("offset").get<std::uint64_t>();
            const auto nbytes = a.at("nbytes").get<std::uint64_t>();
            if (nbytes != num::numel(shape) * sizeof(double) || offset + nbytes > payload.size())
                throw InputError("checkpoint array '" + name + "' has an inconsistent extent");
            std::vector<double> data(num::numel(shape));
            std::memcpy(data.data(), payload.data() + offset, nbytes);
            if (ckpt.arrays.contains(name)) throw InputError("checkpoint lists array '" + name + "' twice");
            ckpt.arrays.add(name, shape, std::move(data));
        }
    } catch (const nlohmann::json::exception& e) {
        throw InputError("checkpoint '" + path.string() + "' has a corrupt header: " + e.what());
    }
    return ckpt;
}

std::string checkpoint_header(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw InputError("cannot read checkpoint '" + path.string() + "'");
    return read_header(in, path).json;
}

}  // namespace libra::model
