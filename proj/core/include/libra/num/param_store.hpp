#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "libra/num/tensor.hpp"

namespace libra::num {

/// Named, ordered set of parameter leaves. Updating a parameter swaps in a new
/// leaf; existing handles keep the old values.
class ParamStore {
public:
    void add(const std::string& name, Shape shape, std::vector<double> data);
    void set(const std::string& name, std::vector<double> data);
    /// Installs `t` itself (same shape required); lets a caller differentiate
    /// through the store with its own leaves.
    void put(const std::string& name, Tensor t);
    const Tensor& get(const std::string& name) const;
    bool contains(const std::string& name) const { return params_.count(name) != 0; }

    std::vector<std::string> names() const;
    std::size_t size() const { return params_.size(); }
    std::size_t scalar_count() const;
    const std::map<std::string, Tensor>& items() const { return params_; }

    /// FNV-1a over the raw bytes of every parameter whose name passes `select`.
    std::uint64_t checksum(const std::function<bool(const std::string&)>& select) const;

private:
    std::map<std::string, Tensor> params_;
};

}  // namespace libra::num
