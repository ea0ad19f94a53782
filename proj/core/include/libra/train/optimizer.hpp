#pragma once

#include <cstddef>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "libra/num/param_store.hpp"

namespace libra::train {

/// AdamW with global-norm clipping and a warmup + cosine learning-rate schedule.
/// Defaults follow the reference recipe; `lr`, `warmup_steps` and
/// `total_steps` are the per-stage knobs.
struct OptimizerConfig {
    double lr = 3e-4;
    double beta1 = 0.9;
    double beta2 = 0.99;
    double eps = 1e-8;
    double weight_decay = 0.01;
    double grad_clip = 1.0;
    std::size_t warmup_steps = 100;
    std::size_t total_steps = 2000;

    void validate() const;
};

/// Linear ramp to `lr` at step == warmup, cosine decay to 0 at step == total.
double lr_at(const OptimizerConfig& cfg, std::size_t step);

using GradMap = std::map<std::string, std::vector<double>>;

/// Rows of a parameter that must never move (e.g. a frozen embedding row).
using FrozenRows = std::map<std::string, std::set<std::size_t>>;

class AdamW {
public:
    explicit AdamW(OptimizerConfig cfg);

    /// Clips `grads` in place to the configured global norm, then updates
    /// every parameter named in `grads`. Returns the pre-clip global norm.
    double step(num::ParamStore& params, GradMap& grads, std::size_t step, const FrozenRows& frozen = {});

    const OptimizerConfig& config() const { return cfg_; }

private:
    struct Moments {
        std::vector<double> m, v;
    };
    OptimizerConfig cfg_;
    std::map<std::string, Moments> state_;
    std::size_t updates_ = 0;
};

double global_norm(const GradMap& grads);

}  // namespace libra::train
