#include "run_config.hpp"

#include <charconv>
#include <fstream>

#include <json.hpp>

#include "libra/error.hpp"

namespace libra::cli {

namespace {

const model::ConfigMap& run_defaults() {
    static const model::ConfigMap d{
        {"seed", "0"},
        // data
        {"n_pretrain", "2000"},
        {"n_heldout", "200"},
        {"n_sft", "2000"},
        {"n_solid", "50"},
        // tokenizer training
        {"tok_steps", "2000"},
        {"tok_batch", "16"},
        {"tok_lr", "0.003"},
        {"tok_warmup", "100"},
        {"tok_entropy_weight", "0.05"},
        // language backbone
        {"backbone_steps", "1000"},
        {"backbone_lr", "0.001"},
        {"backbone_warmup", "50"},
        {"backbone_batch", "16"},
        // vision pretraining
        {"pretrain_steps", "2000"},
        {"pretrain_lr", "0.0003"},
        {"pretrain_warmup", "100"},
        {"pretrain_batch", "16"},
        {"contiguous_dropout", "0.3"},
        // instruction tuning
        {"sft_steps", "500"},
        {"sft_lr", "0.0001"},
        {"sft_warmup", "25"},
        {"sft_batch", "16"},
        {"checkpoint_every", "500"},
        // inference and probing
        {"max_new", "64"},
        {"probe_samples", "20"},
    };
    return d;
}

std::string scalar_string(const nlohmann::json& v, const std::string& key) {
    if (v.is_string()) return v.get<std::string>();
    if (v.is_boolean()) return v.get<bool>() ? "true" : "false";
    if (v.is_number_integer() || v.is_number_unsigned()) return v.dump();
    if (v.is_number_float()) {
        char buf[64];
        std::snprintf(buf, sizeof buf, "%.17g", v.get<double>());
        return buf;
    }
    throw ConfigError("config key '" + key + "' must be a scalar");
}

}  // namespace

RunConfig::RunConfig() : values_(run_defaults()) {
    for (const auto& [k, v] : model::ModelConfig{}.to_map()) values_[k] = v;
}

void RunConfig::merge_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot read config '" + path.string() + "'");
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("config '" + path.string() + "' is not valid JSON: " + e.what());
    }
    if (!j.is_object()) throw ConfigError("config '" + path.string() + "' must be a JSON object");
    for (const auto& [k, v] : j.items()) set(k, scalar_string(v, k));
}

void RunConfig::set(const std::string& key, const std::string& value) {
    if (!values_.count(key)) throw ConfigError("unknown config key '" + key + "'");
    values_[key] = value;
}

const std::string& RunConfig::str(const std::string& key) const {
    auto it = values_.find(key);
    if (it == values_.end()) throw ContractViolation("config key '" + key + "' has no default");
    return it->second;
}

std::size_t RunConfig::size(const std::string& key) const {
    const auto& s = str(key);
    std::size_t v = 0;
    const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc{} || ptr != s.data() + s.size())
        throw ConfigError("config key '" + key + "' expects a non-negative integer, got '" + s + "'");
    return v;
}

double RunConfig::real(const std::string& key) const {
    const auto& s = str(key);
    try {
        std::size_t used = 0;
        const double v = std::stod(s, &used);
        if (used == s.size()) return v;
    } catch (const std::exception&) {
    }
    throw ConfigError("config key '" + key + "' expects a number, got '" + s + "'");
}

bool RunConfig::flag(const std::string& key) const {
    const auto& s = str(key);
    if (s == "true" || s == "1") return true;
    if (s == "false" || s == "0") return false;
    throw ConfigError("config key '" + key + "' expects true/false, got '" + s + "'");
}

model::ModelConfig RunConfig::model_config() const {
    auto c = model::ModelConfig::from_map(values_);
    c.validate();
    return c;
}

void RunConfig::write_snapshot(const std::filesystem::path& out, const std::string& command) const {
    nlohmann::json j;
    j["command"] = command;
    for (const auto& [k, v] : values_) j["config"][k] = v;
    std::filesystem::create_directories(out);
    std::ofstream(out / "effective_config.json") << j.dump(2) << '\n';
}

}  // namespace libra::cli
