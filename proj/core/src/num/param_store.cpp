#include "libra/num/param_store.hpp"

#include <cstring>

#include "libra/error.hpp"

namespace libra::num {

void ParamStore::add(const std::string& name, Shape shape, std::vector<double> data) {
    if (params_.count(name)) throw ContractViolation("duplicate parameter '" + name + "'");
    params_.emplace(name, Tensor::parameter(std::move(shape), std::move(data)));
}

void ParamStore::set(const std::string& name, std::vector<double> data) {
    auto it = params_.find(name);
    if (it == params_.end()) throw ContractViolation("unknown parameter '" + name + "'");
    it->second = Tensor::parameter(it->second.shape(), std::move(data));
}

void ParamStore::put(const std::string& name, Tensor t) {
    auto it = params_.find(name);
    if (it == params_.end()) throw ContractViolation("unknown parameter '" + name + "'");
    if (it->second.shape() != t.shape()) throw ContractViolation("shape mismatch for parameter '" + name + "'");
    it->second = std::move(t);
}

const Tensor& ParamStore::get(const std::string& name) const {
    auto it = params_.find(name);
    if (it == params_.end()) throw ContractViolation("unknown parameter '" + name + "'");
    return it->second;
}

std::vector<std::string> ParamStore::names() const {
    std::vector<std::string> out;
    out.reserve(params_.size());
    for (const auto& [name, _] : params_) out.push_back(name);
    return out;
}

std::size_t ParamStore::scalar_count() const {
    std::size_t n = 0;
    for (const auto& [_, t] : params_) n += t.size();
    return n;
}

std::uint64_t ParamStore::checksum(const std::function<bool(const std::string&)>& select) const {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    auto feed = [&h](const void* p, std::size_t n) {
        const auto* b = static_cast<const unsigned char*>(p);
        for (std::size_t i = 0; i < n; ++i) {
            h ^= b[i];
            h *= 0x100000001b3ULL;
        }
    };
    for (const auto& [name, t] : params_) {
        if (!select(name)) continue;
        feed(name.data(), name.size());
        feed(t.data().data(), t.size() * sizeof(double));
    }
    return h;
}

}  // namespace libra::num
