#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace libra::num {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string to_string(const Shape& shape);

struct Node;

/// Accumulates input gradients given the gradient of a node's output.
/// `grad_in[i]` is empty when input i does not require a gradient.
using BackwardFn = std::function<void(const Node& self, std::span<const double> grad_out,
                                      std::span<const std::span<double>> grad_in)>;

/// One recorded value in the computation graph. Immutable once built.
struct Node {
    Shape shape;
    std::vector<double> value;
    bool requires_grad = false;
    std::vector<std::shared_ptr<const Node>> inputs;
    BackwardFn backward;
    const char* op = "leaf";
};

/// Dense row-major array of doubles with optional gradient tracking.
///
/// A Tensor is a cheap handle; copies share the underlying node. Values are
/// never mutated after construction, so handles can be shared across threads.
class Tensor {
public:
    Tensor();

    static Tensor constant(Shape shape, std::vector<double> data);
    static Tensor parameter(Shape shape, std::vector<double> data);
    static Tensor zeros(Shape shape);
    static Tensor scalar(double v);
    static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> data) {
        return constant({rows, cols}, std::move(data));
    }

    const Shape& shape() const { return node_->shape; }
    std::size_t rank() const { return node_->shape.size(); }
    std::size_t size() const { return node_->value.size(); }
    /// Leading dimension for rank-2 tensors, 1 otherwise.
    std::size_t rows() const;
    /// Trailing dimension; 1 for scalars.
    std::size_t cols() const;

    std::span<const double> data() const { return node_->value; }
    double operator[](std::size_t i) const { return node_->value[i]; }
    double at(std::size_t r, std::size_t c) const { return node_->value[r * cols() + c]; }
    double item() const;

    bool requires_grad() const { return node_->requires_grad; }
    /// Same values, cut from the graph.
    Tensor detach() const;

    const Node& node() const { return *node_; }
    const std::shared_ptr<const Node>& node_ptr() const { return node_; }

private:
    explicit Tensor(std::shared_ptr<const Node> node) : node_(std::move(node)) {}
    friend Tensor make_result(const char*, Shape, std::vector<double>, const std::vector<Tensor>&, BackwardFn,
                              bool);

    std::shared_ptr<const Node> node_;
};

/// Wraps an op output. Links the inputs into the graph only when recording is
/// enabled and some input requires a gradient. Throws NumericError on NaN/Inf
/// (a -inf is tolerated when `allow_neg_inf`, used by masking).
Tensor make_result(const char* op, Shape shape, std::vector<double> value, const std::vector<Tensor>& inputs,
                   BackwardFn backward, bool allow_neg_inf = false);

/// Disables graph recording on the current thread while alive.
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

bool grad_enabled();

}  // namespace libra::num
