#pragma once

#include <span>
#include <vector>

#include "libra/model/model.hpp"

namespace libra::train {

/// Batch loss with its per-source means (for logging).
/// For batch losses the CE fields are means; for single-sequence losses they are sums.
struct LossParts {
    num::Tensor total;  // Σ CE over supervised targets / denominator
    double text_ce = 0.0;
    double vision_ce1 = 0.0;
    double vision_ce2 = 0.0;
    std::size_t text_targets = 0;
    std::size_t vision_targets = 0;
};

/// Per-sequence contribution: Σ CE over the sequence's supervised targets,
/// divided by `denominator`. Patch targets use head1 + head2 when
/// `vision_heads` is set and are skipped otherwise; other targets use the
/// language head.
LossParts sequence_loss(const model::LibraModel& m, const seqio::MultimodalSequence& seq, double denominator,
                        bool vision_heads);

/// Same as sequence_loss on a precomputed forward pass; `labels[l]` is the
/// text target scored at position l (read only where supervised).
LossParts masked_loss(const model::ForwardResult& f, const seqio::MultimodalSequence& seq,
                      std::span<const int> labels, double denominator, bool vision_heads);
std::vector<int> next_token_labels(const seqio::MultimodalSequence& seq);

/// Mean over supervised targets of text CE or (CE_head1 + CE_head2).
LossParts pretrain_loss(const model::LibraModel& m, std::span<const seqio::MultimodalSequence> batch);
/// Mean text CE over answer and <EOS> targets; vision heads get no loss.
LossParts sft_loss(const model::LibraModel& m, std::span<const seqio::MultimodalSequence> batch);

/// Next-token CE of the standalone backbone, mean over all targets.
num::Tensor backbone_loss(const model::LibraModel& m, std::span<const std::vector<int>> batch);

std::size_t supervised_total(std::span<const seqio::MultimodalSequence> batch);

}  // namespace libra::train
