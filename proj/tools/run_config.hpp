#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include "libra/model/model.hpp"

namespace libra::cli {

/// Flat key/value settings for one run: built-in defaults, then the config
/// file, then command-line overrides.
class RunConfig {
public:
    RunConfig();

    /// JSON object of scalars; unknown keys raise ConfigError.
    void merge_file(const std::filesystem::path& path);
    void set(const std::string& key, const std::string& value);

    std::size_t size(const std::string& key) const;
    double real(const std::string& key) const;
    bool flag(const std::string& key) const;
    const std::string& str(const std::string& key) const;

    model::ModelConfig model_config() const;
    const model::ConfigMap& values() const { return values_; }

    /// Writes out/effective_config.json with every key plus `command`.
    void write_snapshot(const std::filesystem::path& out, const std::string& command) const;

private:
    model::ConfigMap values_;
};

}  // namespace libra::cli
