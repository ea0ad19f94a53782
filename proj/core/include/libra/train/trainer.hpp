#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "libra/model/model.hpp"
#include "libra/train/optimizer.hpp"

namespace libra::train {

struct StepMetrics {
    std::string stage;
    std::size_t step = 0;
    double loss = 0.0;
    double text_ce = 0.0;
    double vision_ce1 = 0.0;
    double vision_ce2 = 0.0;
    double grad_norm = 0.0;
    double lr = 0.0;
};

struct TrainConfig {
    OptimizerConfig opt;
    std::size_t batch = 16;
    std::uint64_t seed = 0;
    /// Empty: no files are written.
    std::filesystem::path out_dir;
    std::size_t checkpoint_every = 0;  // 0 disables periodic checkpoints
    /// Probability of zeroing a sample's contiguous signal during pretraining.
    double contiguous_dropout = 0.3;
    std::size_t threads = 1;
};

using StepCallback = std::function<void(const StepMetrics&)>;

/// Runs `opt.total_steps` updates of trainable_params(stage). Metrics go to
/// out_dir/metrics.jsonl (appended) and a summary row to out_dir/summary.csv.
/// A non-finite loss or gradient writes out_dir/diagnostic.json and throws.
std::vector<StepMetrics> train_stage(model::LibraModel& m, model::Stage stage,
                                     const std::vector<seqio::MultimodalSequence>& data, const TrainConfig& cfg,
                                     const StepCallback& on_step = {});

/// Pretrains the language backbone ("lm.*") on text token streams.
std::vector<StepMetrics> train_backbone(model::LibraModel& m, const std::vector<std::vector<int>>& data,
                                        const TrainConfig& cfg, const StepCallback& on_step = {});

/// Worker count from LIBRA_TOY_THREADS, at least 1.
std::size_t threads_from_env();

}  // namespace libra::train
