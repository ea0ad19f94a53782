#include "libra/seqio/sequence.hpp"

#include <algorithm>

#include "libra/error.hpp"
#include "libra/num/ops.hpp"

namespace libra::seqio {

VisionTokens tokenize_image(const imgtok::LfqTokenizer& tok, const imgtok::ToyImage& image) {
    VisionTokens v;
    v.features = tok.encode_image(image);
    v.codes = tok.lfq_quantize(v.features);
    return v;
}

std::size_t MultimodalSequence::supervised_count() const {
    return static_cast<std::size_t>(std::count(supervised.begin(), supervised.end(), true));
}

void MultimodalSequence::validate() const {
    const std::size_t n = tokens.size();
    if (codes.size() != n || is_patch.size() != n || modality.size() != n || supervised.size() != n)
        throw ContractViolation("sequence: per-position arrays disagree in length");
    if (n > 0 && supervised.back()) throw ContractViolation("sequence: last position has no target");
    std::size_t patches = 0;
    for (std::size_t i = 0; i < n; ++i) {
        if (is_patch[i]) {
            if (i < image_start || i >= image_start + patch_count)
                throw ContractViolation("sequence: patch at position " + std::to_string(i) + " outside image block");
            if (modality[i] != Modality::vision) throw ContractViolation("sequence: patch routed as language");
            ++patches;
        } else if (tokens[i] < 0) {
            throw ContractViolation("sequence: text position " + std::to_string(i) + " has no token");
        }
    }
    if (patches != patch_count) throw ContractViolation("sequence: image block is not contiguous");
    if (patch_count > 0 && !disable_contiguous && features.rows() != patch_count)
        throw ContractViolation("sequence: " + std::to_string(features.rows()) + " feature rows for " +
                                std::to_string(patch_count) + " patches");
}

namespace {

void push(MultimodalSequence& s, int token, Modality m) {
    s.tokens.push_back(token);
    s.codes.push_back({});
    s.is_patch.push_back(false);
    s.modality.push_back(m);
    s.supervised.push_back(false);
}

void push_image(MultimodalSequence& s, const Vocab& vocab, const VisionTokens& vision, std::size_t k, bool close,
                const SequenceOptions& opts) {
    if (vision.codes.empty()) throw InputError("sequence: image has no patches");
    const Modality special = opts.route_specials ? Modality::vision : Modality::language;
    push(s, vocab.boi(), special);
    s.image_start = s.size();
    for (std::size_t i = 0; i < k; ++i) {
        s.tokens.push_back(-1);
        s.codes.push_back(vision.codes[i]);
        s.is_patch.push_back(true);
        s.modality.push_back(Modality::vision);
        s.supervised.push_back(false);
    }
    s.patch_count = k;
    if (k == vision.codes.size())
        s.features = vision.features;
    else if (k > 0)
        s.features = num::slice_rows(vision.features, 0, k);
    if (close) push(s, vocab.eoi(), special);
}

void push_text(MultimodalSequence& s, const std::vector<int>& ids) {
    for (int id : ids) push(s, id, Modality::language);
}

/// Marks targets [first, last) as supervised: position l-1 predicts l.
void supervise(MultimodalSequence& s, std::size_t first, std::size_t last) {
    for (std::size_t t = std::max<std::size_t>(first, 1); t < last; ++t) s.supervised[t - 1] = true;
}

}  // namespace

MultimodalSequence build_pretrain_sequence(const Vocab& vocab, const VisionTokens& vision, std::string_view caption,
                                           const SequenceOptions& opts) {
    MultimodalSequence s;
    push_image(s, vocab, vision, vision.codes.size(), true, opts);
    const std::size_t newline_pos = s.size();
    push(s, vocab.newline(), Modality::language);
    push_text(s, vocab.encode(caption));
    push(s, vocab.eos(), Modality::language);
    supervise(s, 1, s.size());
    s.supervised[newline_pos - 1] = false;
    return s;
}

std::string sft_prompt(std::string_view instruction, std::string_view system_msg) {
    std::string prompt(system_msg);
    prompt += "\n[USER]: ";
    prompt += instruction;
    prompt += "\n[ASSISTANT]: ";
    return prompt;
}

MultimodalSequence build_sft_sequence(const Vocab& vocab, const VisionTokens& vision, std::string_view instruction,
                                      std::string_view answer, std::string_view system_msg,
                                      const SequenceOptions& opts) {
    if (answer.empty()) throw InputError("sft sequence: empty answer");
    MultimodalSequence s;
    push_image(s, vocab, vision, vision.codes.size(), true, opts);
    push(s, vocab.newline(), Modality::language);
    push_text(s, vocab.encode(sft_prompt(instruction, system_msg)));
    const std::size_t answer_start = s.size();
    push_text(s, vocab.encode(answer));
    push(s, vocab.eos(), Modality::language);
    supervise(s, answer_start, s.size());
    return s;
}

MultimodalSequence build_prefix(const Vocab& vocab, const VisionTokens& vision, std::string_view text,
                                const SequenceOptions& opts) {
    MultimodalSequence s;
    push_image(s, vocab, vision, vision.codes.size(), true, opts);
    push(s, vocab.newline(), Modality::language);
    push_text(s, vocab.encode(text));
    return s;
}

MultimodalSequence build_image_prefix(const Vocab& vocab, const VisionTokens& vision, std::size_t k,
                                      const SequenceOptions& opts) {
    if (k > vision.codes.size())
        throw InputError("image prefix: " + std::to_string(k) + " patches requested from an image of " +
                         std::to_string(vision.codes.size()));
    MultimodalSequence s;
    push_image(s, vocab, vision, k, false, opts);
    s.disable_contiguous = true;
    return s;
}

MultimodalSequence build_text_sequence(const Vocab& vocab, std::string_view text) {
    MultimodalSequence s;
    push(s, vocab.newline(), Modality::language);
    push_text(s, vocab.encode(text));
    push(s, vocab.eos(), Modality::language);
    supervise(s, 1, s.size());
    return s;
}

void append_text(MultimodalSequence& seq, int token) { push(seq, token, Modality::language); }

void append_patch(MultimodalSequence& seq, imgtok::PatchCode code) {
    if (!seq.disable_contiguous) throw ContractViolation("append_patch: generated patches carry no contiguous signal");
    if (seq.size() != seq.image_start + seq.patch_count || seq.image_start == 0)
        throw ContractViolation("append_patch: sequence does not end inside an open image block");
    seq.tokens.push_back(-1);
    seq.codes.push_back(code);
    seq.is_patch.push_back(true);
    seq.modality.push_back(Modality::vision);
    seq.supervised.push_back(false);
    ++seq.patch_count;
}

}  // namespace libra::seqio
