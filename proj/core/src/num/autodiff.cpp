#include "libra/num/autodiff.hpp"

#include <utility>

#include "libra/error.hpp"

namespace libra::num {

std::span<const double> Gradients::of(const Tensor& leaf) const {
    auto it = grads_.find(&leaf.node());
    if (it == grads_.end()) return {};
    return it->second;
}

std::vector<double> Gradients::dense(const Tensor& leaf) const {
    auto g = of(leaf);
    if (g.empty()) return std::vector<double>(leaf.size(), 0.0);
    return {g.begin(), g.end()};
}

Gradients backward(const Tensor& loss) {
    if (loss.size() != 1) throw ContractViolation("backward() needs a scalar loss, got shape " + to_string(loss.shape()));
    Gradients out;
    if (!loss.requires_grad()) return out;

    // Iterative post-order DFS gives a topological order (inputs before users).
    std::vector<const Node*> order;
    std::unordered_map<const Node*, std::size_t> index;
    std::vector<std::pair<const Node*, std::size_t>> stack;
    stack.emplace_back(&loss.node(), 0);
    index.emplace(&loss.node(), SIZE_MAX);
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->inputs.size()) {
            const Node* child = node->inputs[next++].get();
            if (child->requires_grad && index.emplace(child, SIZE_MAX).second) stack.emplace_back(child, 0);
            continue;
        }
        index[node] = order.size();
        order.push_back(node);
        stack.pop_back();
    }

    std::vector<std::vector<double>> grads(order.size());
    grads.back().assign(1, 1.0);
    std::vector<std::span<double>> grad_in;
    for (std::size_t i = order.size(); i-- > 0;) {
        const Node* node = order[i];
        auto& g = grads[i];
        if (g.empty()) g.assign(node->value.size(), 0.0);
        if (node->inputs.empty()) {
            out.grads_.emplace(node, std::move(g));
            continue;
        }
        grad_in.clear();
        for (const auto& in : node->inputs) {
            if (!in->requires_grad) {
                grad_in.emplace_back();
                continue;
            }
            auto& gi = grads[index.at(in.get())];
            if (gi.empty()) gi.assign(in->value.size(), 0.0);
            grad_in.emplace_back(gi);
        }
        node->backward(*node, g, grad_in);
        std::vector<double>().swap(g);
    }
    return out;
}

}  // namespace libra::num
