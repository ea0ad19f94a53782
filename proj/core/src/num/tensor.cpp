#include "libra/num/tensor.hpp"

#include <cmath>
#include <sstream>

#include "libra/error.hpp"

namespace libra::num {

namespace {
thread_local bool t_grad_enabled = true;
}

std::size_t numel(const Shape& shape) {
    std::size_t n = 1;
    for (auto d : shape) n *= d;
    return n;
}

std::string to_string(const Shape& shape) {
    std::ostringstream os;
    os << '(';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ", ";
        os << shape[i];
    }
    if (shape.size() == 1) os << ',';
    os << ')';
    return os.str();
}

Tensor::Tensor() : Tensor(std::make_shared<const Node>(Node{Shape{0}, {}, false, {}, {}, "empty"})) {}

Tensor Tensor::constant(Shape shape, std::vector<double> data) {
    if (numel(shape) != data.size())
        throw ContractViolation("tensor data length " + std::to_string(data.size()) + " does not match shape " +
                                to_string(shape));
    return Tensor(std::make_shared<const Node>(Node{std::move(shape), std::move(data), false, {}, {}, "leaf"}));
}

Tensor Tensor::parameter(Shape shape, std::vector<double> data) {
    if (numel(shape) != data.size())
        throw ContractViolation("tensor data length " + std::to_string(data.size()) + " does not match shape " +
                                to_string(shape));
    return Tensor(std::make_shared<const Node>(Node{std::move(shape), std::move(data), true, {}, {}, "leaf"}));
}

Tensor Tensor::zeros(Shape shape) {
    const auto n = numel(shape);
    return constant(std::move(shape), std::vector<double>(n, 0.0));
}

Tensor Tensor::scalar(double v) { return constant({}, {v}); }

std::size_t Tensor::rows() const { return rank() == 2 ? node_->shape[0] : 1; }

std::size_t Tensor::cols() const { return rank() == 0 ? 1 : node_->shape.back(); }

double Tensor::item() const {
    if (size() != 1) throw ContractViolation("item() on tensor of shape " + to_string(shape()));
    return node_->value[0];
}

Tensor Tensor::detach() const {
    if (!requires_grad() && node_->inputs.empty()) return *this;
    return constant(node_->shape, node_->value);
}

Tensor make_result(const char* op, Shape shape, std::vector<double> value, const std::vector<Tensor>& inputs,
                   BackwardFn backward, bool allow_neg_inf) {
    for (double v : value) {
        if (std::isnan(v) || (std::isinf(v) && !(allow_neg_inf && v < 0))) {
            throw NumericError(std::string("non-finite value produced by ") + op + " with output shape " +
                               to_string(shape));
        }
    }
    bool needs = false;
    if (t_grad_enabled) {
        for (const auto& t : inputs) needs = needs || t.requires_grad();
    }
    Node node{std::move(shape), std::move(value), needs, {}, {}, op};
    if (needs) {
        node.inputs.reserve(inputs.size());
        for (const auto& t : inputs) node.inputs.push_back(t.node_ptr());
        node.backward = std::move(backward);
    }
    return Tensor(std::make_shared<const Node>(std::move(node)));
}

NoGradGuard::NoGradGuard() : previous_(t_grad_enabled) { t_grad_enabled = false; }

NoGradGuard::~NoGradGuard() { t_grad_enabled = previous_; }

bool grad_enabled() { return t_grad_enabled; }

}  // namespace libra::num
