#include "libra/train/loss.hpp"

#include "libra/error.hpp"
#include "libra/num/ops.hpp"

namespace libra::train {

using num::Tensor;

std::size_t supervised_total(std::span<const seqio::MultimodalSequence> batch) {
    std::size_t n = 0;
    for (const auto& s : batch) n += s.supervised_count();
    return n;
}

std::vector<int> next_token_labels(const seqio::MultimodalSequence& seq) {
    std::vector<int> labels(seq.size(), 0);
    for (std::size_t l = 0; l + 1 < seq.size(); ++l) labels[l] = seq.tokens[l + 1];
    return labels;
}

LossParts sequence_loss(const model::LibraModel& m, const seqio::MultimodalSequence& seq, double denominator,
                        bool vision_heads) {
    const auto labels = next_token_labels(seq);
    return masked_loss(m.forward(seq), seq, labels, denominator, vision_heads);
}

LossParts masked_loss(const model::ForwardResult& f, const seqio::MultimodalSequence& seq,
                      std::span<const int> labels, double denominator, bool vision_heads) {
    const std::size_t L = seq.size();
    if (labels.size() != L) throw ContractViolation("masked_loss: one label per position expected");
    std::vector<int> text_t(L, 0), v1(L, 0), v2(L, 0);
    std::vector<double> text_w(L, 0.0), vis_w(L, 0.0);
    LossParts parts;
    for (std::size_t l = 0; l + 1 < L; ++l) {
        if (!seq.supervised[l]) continue;
        if (seq.is_patch[l + 1]) {
            if (!vision_heads) continue;
            v1[l] = static_cast<int>(seq.codes[l + 1].id1);
            v2[l] = static_cast<int>(seq.codes[l + 1].id2);
            vis_w[l] = 1.0;
            ++parts.vision_targets;
        } else {
            text_t[l] = labels[l];
            text_w[l] = 1.0;
            ++parts.text_targets;
        }
    }
    std::vector<Tensor> terms;
    if (parts.text_targets) {
        const auto ce = num::cross_entropy(f.lang, text_t, text_w);
        parts.text_ce = ce.item();
        terms.push_back(ce);
    }
    if (parts.vision_targets) {
        const auto ce1 = num::cross_entropy(f.vis1, v1, vis_w);
        const auto ce2 = num::cross_entropy(f.vis2, v2, vis_w);
        parts.vision_ce1 = ce1.item();
        parts.vision_ce2 = ce2.item();
        terms.push_back(ce1);
        terms.push_back(ce2);
    }
    if (terms.empty()) {
        parts.total = Tensor::scalar(0.0);
        return parts;
    }
    Tensor sum = terms[0];
    for (std::size_t i = 1; i < terms.size(); ++i) sum = num::add(sum, terms[i]);
    parts.total = num::scale(sum, 1.0 / denominator);
    return parts;
}

namespace {

LossParts batch_loss(const model::LibraModel& m, std::span<const seqio::MultimodalSequence> batch, bool vision_heads) {
    const std::size_t n = supervised_total(batch);
    if (n == 0) throw InputError("loss: batch has no supervised positions");
    LossParts out;
    double text_sum = 0.0, v1_sum = 0.0, v2_sum = 0.0;
    bool first = true;
    for (const auto& seq : batch) {
        auto p = sequence_loss(m, seq, static_cast<double>(n), vision_heads);
        out.total = first ? p.total : num::add(out.total, p.total);
        first = false;
        text_sum += p.text_ce;
        v1_sum += p.vision_ce1;
        v2_sum += p.vision_ce2;
        out.text_targets += p.text_targets;
        out.vision_targets += p.vision_targets;
    }
    if (out.text_targets) out.text_ce = text_sum / static_cast<double>(out.text_targets);
    if (out.vision_targets) {
        out.vision_ce1 = v1_sum / static_cast<double>(out.vision_targets);
        out.vision_ce2 = v2_sum / static_cast<double>(out.vision_targets);
    }
    return out;
}

}  // namespace

LossParts pretrain_loss(const model::LibraModel& m, std::span<const seqio::MultimodalSequence> batch) {
    return batch_loss(m, batch, true);
}

LossParts sft_loss(const model::LibraModel& m, std::span<const seqio::MultimodalSequence> batch) {
    return batch_loss(m, batch, false);
}

Tensor backbone_loss(const model::LibraModel& m, std::span<const std::vector<int>> batch) {
    std::size_t n = 0;
    for (const auto& s : batch) n += s.empty() ? 0 : s.size() - 1;
    if (n == 0) throw InputError("backbone loss: batch has no targets");
    Tensor total;
    bool first = true;
    for (const auto& s : batch) {
        if (s.size() < 2) continue;
        const auto logits = m.backbone_logits(std::span<const int>(s.data(), s.size() - 1));
        const std::vector<int> targets(s.begin() + 1, s.end());
        const std::vector<double> w(targets.size(), 1.0);
        const auto ce = num::scale(num::cross_entropy(logits, targets, w), 1.0 / static_cast<double>(n));
        total = first ? ce : num::add(total, ce);
        first = false;
    }
    return total;
}

}  // namespace libra::train
