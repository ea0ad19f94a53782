#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "libra/model/model.hpp"

namespace libra::verify {

struct SuiteResult {
    std::string name;
    bool passed = false;
    std::size_t checks = 0;
    double worst = 0.0;  // suite-specific error measure (0 for exact suites that pass)
    std::string detail;
};

/// Finite differences (64-bit, relative error) for routed_qkv, the bridge,
/// routed attention, the routed FFN, both stage losses and the LFQ
/// straight-through path; `seeds` draws per target.
SuiteResult gradient_suite(std::uint64_t seed, std::size_t seeds = 20, double tol = 1e-5);
/// routed_attention vs the per-pair loop reference, L <= 8.
SuiteResult block_oracle_suite(std::uint64_t seed, std::size_t configs = 60, double tol = 1e-10);
/// Zero bridge vs simple expert, tied experts vs vanilla layer; bit equality.
SuiteResult ablation_suite(std::uint64_t seed, std::size_t trials = 20);
/// Text-only logits vs the standalone backbone under random vision-side
/// parameters, and the backbone checksum across `steps` pretrain steps.
SuiteResult frozen_lm_suite(std::uint64_t seed, std::size_t trials = 10, std::size_t steps = 100);
/// Perturbing position j leaves every output row before j bit-identical.
SuiteResult causality_suite(std::uint64_t seed, std::size_t sequences = 20);
/// Text-value bridge factors have no effect for image-first sequences.
SuiteResult inertness_suite(std::uint64_t seed, std::size_t trials = 10);
/// Unsupervised label perturbations leave losses bit-unchanged; SFT leaves
/// vision-head gradients at exactly zero.
SuiteResult masking_suite(std::uint64_t seed, std::size_t trials = 5);

std::vector<SuiteResult> run_all_suites(std::uint64_t seed);

/// Small model for the suites: D=8, two heads, two layers, tiny tokenizer.
model::LibraModel tiny_model(std::uint64_t seed);
/// Overwrites every "vis.*" tensor with N(0, scale^2) noise.
void randomize_vision(model::LibraModel& m, std::uint64_t seed, double scale = 0.3);

}  // namespace libra::verify
