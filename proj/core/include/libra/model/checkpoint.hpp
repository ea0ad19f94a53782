#pragma once

#include <filesystem>
#include <map>
#include <string>

#include "libra/num/param_store.hpp"

namespace libra::model {

using ConfigMap = std::map<std::string, std::string>;

/// File layout: "LIBRATOY" magic, u32 version, u64 header length, JSON header
/// {"config": {...}, "arrays": [{name, dtype, shape, offset, nbytes}, ...]},
/// then the raw little-endian f64 payload.
struct Checkpoint {
    ConfigMap config;
    num::ParamStore arrays;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
/// Throws InputError for unreadable or corrupt files.
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Raw header JSON of a checkpoint, for inspection.
std::string checkpoint_header(const std::filesystem::path& path);

}  // namespace libra::model
