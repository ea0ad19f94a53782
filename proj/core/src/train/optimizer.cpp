#include "libra/train/optimizer.hpp"

#include <cmath>

#include "libra/error.hpp"

namespace libra::train {

void OptimizerConfig::validate() const {
    if (total_steps == 0) throw ConfigError("optimizer: total_steps must be positive");
    if (warmup_steps >= total_steps)
        throw ConfigError("optimizer: warmup_steps (" + std::to_string(warmup_steps) + ") must be below total_steps (" +
                          std::to_string(total_steps) + ")");
    if (!(lr > 0.0)) throw ConfigError("optimizer: lr must be positive");
}

double lr_at(const OptimizerConfig& cfg, std::size_t step) {
    if (step < cfg.warmup_steps) return cfg.lr * static_cast<double>(step) / static_cast<double>(cfg.warmup_steps);
    if (step >= cfg.total_steps) return 0.0;
    const double progress =
        static_cast<double>(step - cfg.warmup_steps) / static_cast<double>(cfg.total_steps - cfg.warmup_steps);
    return cfg.lr * 0.5 * (1.0 + std::cos(3.14159265358979323846 * progress));
}

double global_norm(const GradMap& grads) {
    double ss = 0.0;
    for (const auto& [_, g] : grads)
        for (double v : g) ss += v * v;
    return std::sqrt(ss);
}

AdamW::AdamW(OptimizerConfig cfg) : cfg_(cfg) { cfg_.validate(); }

double AdamW::step(num::ParamStore& params, GradMap& grads, std::size_t step, const FrozenRows& frozen) {
    const double norm = global_norm(grads);
    if (!std::isfinite(norm)) throw NumericError("non-finite gradient norm at step " + std::to_string(step));
    if (cfg_.grad_clip > 0.0 && norm > cfg_.grad_clip) {
        const double s = cfg_.grad_clip / norm;
        for (auto& [_, g] : grads)
            for (double& v : g) v *= s;
    }
    ++updates_;
    const double lr = lr_at(cfg_, step);
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(updates_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(updates_));
    for (auto& [name, g] : grads) {
        const auto& current = params.get(name);
        if (g.size() != current.size()) throw ContractViolation("gradient size mismatch for '" + name + "'");
        auto& st = state_[name];
        if (st.m.empty()) {
            st.m.assign(g.size(), 0.0);
            st.v.assign(g.size(), 0.0);
        }
        const bool decay = current.rank() == 2 && current.shape()[0] > 1 && current.shape()[1] > 1;
        const std::set<std::size_t>* rows = nullptr;
        if (auto it = frozen.find(name); it != frozen.end()) rows = &it->second;
        const std::size_t width = current.cols();
        std::vector<double> value(current.data().begin(), current.data().end());
        for (std::size_t i = 0; i < value.size(); ++i) {
            if (rows && rows->count(i / width)) continue;
            st.m[i] = cfg_.beta1 * st.m[i] + (1.0 - cfg_.beta1) * g[i];
            st.v[i] = cfg_.beta2 * st.v[i] + (1.0 - cfg_.beta2) * g[i] * g[i];
            const double mhat = st.m[i] / bc1;
            const double vhat = st.v[i] / bc2;
            double upd = mhat / (std::sqrt(vhat) + cfg_.eps);
            if (decay) upd += cfg_.weight_decay * value[i];
            value[i] -= lr * upd;
        }
        params.set(name, std::move(value));
    }
    return norm;
}

}  // namespace libra::train
