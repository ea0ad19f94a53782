#pragma once

#include <span>
#include <unordered_map>
#include <vector>

#include "libra/num/tensor.hpp"

namespace libra::num {

/// Gradients of a scalar loss with respect to the leaves that required them.
class Gradients {
public:
    /// Gradient for `leaf`, or an empty span when the loss does not depend on it.
    std::span<const double> of(const Tensor& leaf) const;
    bool contains(const Tensor& leaf) const { return grads_.count(&leaf.node()) != 0; }
    /// Gradient for `leaf`, zero-filled when absent.
    std::vector<double> dense(const Tensor& leaf) const;
    std::size_t leaf_count() const { return grads_.size(); }

private:
    friend Gradients backward(const Tensor& loss);
    std::unordered_map<const Node*, std::vector<double>> grads_;
};

/// Reverse-mode sweep from a scalar loss. Each reachable node is visited once,
/// in reverse topological order.
Gradients backward(const Tensor& loss);

}  // namespace libra::num
