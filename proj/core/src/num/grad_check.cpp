#include "libra/num/grad_check.hpp"

#include <algorithm>
#include <cmath>

#include "libra/error.hpp"
#include "libra/num/autodiff.hpp"

namespace libra::num {

namespace {

double evaluate(const ScalarFn& f, const std::vector<Tensor>& params) {
    NoGradGuard guard;
    const double v = f(params).item();
    if (!std::isfinite(v)) throw NumericError("finite_diff_check: function returned a non-finite value");
    return v;
}

}  // namespace

double finite_diff_check(const ScalarFn& f, const std::vector<Tensor>& params, double eps) {
    return finite_diff_check(f, f, params, eps);
}

double finite_diff_check(const ScalarFn& analytic_fn, const ScalarFn& f, const std::vector<Tensor>& params,
                         double eps) {
    if (!(eps > 0.0)) throw ContractViolation("finite_diff_check: eps must be positive");
    std::vector<Tensor> leaves;
    leaves.reserve(params.size());
    for (const auto& p : params) leaves.push_back(Tensor::parameter(p.shape(), {p.data().begin(), p.data().end()}));

    const Tensor loss = analytic_fn(leaves);
    if (!std::isfinite(loss.item())) throw NumericError("finite_diff_check: function returned a non-finite value");
    const Gradients grads = backward(loss);

    double worst = 0.0;
    std::vector<Tensor> probe = leaves;
    for (std::size_t t = 0; t < leaves.size(); ++t) {
        const auto analytic = grads.dense(leaves[t]);
        std::vector<double> buf(leaves[t].data().begin(), leaves[t].data().end());
        for (std::size_t i = 0; i < buf.size(); ++i) {
            const double orig = buf[i];
            buf[i] = orig + eps;
            probe[t] = Tensor::constant(leaves[t].shape(), buf);
            const double fp = evaluate(f, probe);
            buf[i] = orig - eps;
            probe[t] = Tensor::constant(leaves[t].shape(), buf);
            const double fm = evaluate(f, probe);
            buf[i] = orig;
            const double numeric = (fp - fm) / (2.0 * eps);
            worst = std::max(worst, std::abs(analytic[i] - numeric) / std::max(1.0, std::abs(analytic[i])));
        }
        probe[t] = leaves[t];
    }
    return worst;
}

}  // namespace libra::num
