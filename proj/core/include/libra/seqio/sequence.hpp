#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "libra/imgtok/tokenizer.hpp"
#include "libra/num/tensor.hpp"
#include "libra/seqio/vocab.hpp"

namespace libra::seqio {

enum class Modality : std::uint8_t { language, vision };

/// Output of the frozen tokenizer for one image.
struct VisionTokens {
    std::vector<imgtok::PatchCode> codes;
    num::Tensor features;  // E_c, patches x d_c
};

VisionTokens tokenize_image(const imgtok::LfqTokenizer& tok, const imgtok::ToyImage& image);

struct SequenceOptions {
    /// Route <BOI>/<EOI> through the vision expert.
    bool route_specials = true;
};

/// Token stream with per-position modality and next-token supervision.
///
/// Position l predicts position l + 1; `supervised[l]` marks whether that
/// target is part of the loss. Patch positions hold codes instead of text ids
/// (their `tokens` entry is -1).
struct MultimodalSequence {
    std::vector<int> tokens;
    std::vector<imgtok::PatchCode> codes;  // valid where is_patch
    std::vector<bool> is_patch;
    std::vector<Modality> modality;
    std::vector<bool> supervised;
    num::Tensor features;  // E_c rows for the patch block, empty when no image
    bool disable_contiguous = false;
    std::size_t image_start = 0;  // first patch position
    std::size_t patch_count = 0;

    std::size_t size() const { return tokens.size(); }
    std::size_t supervised_count() const;
    /// Checks the structural invariants; throws ContractViolation on failure.
    void validate() const;
};

inline constexpr std::string_view kSystemMessage =
    "A chat between a curious user and an artificial intelligence assistant. The assistant gives helpful, "
    "detailed, and polite answers to the user's questions.";

/// <BOI> v1..vP <EOI> \n caption <EOS>; every target except the newline is supervised.
MultimodalSequence build_pretrain_sequence(const Vocab& vocab, const VisionTokens& vision, std::string_view caption,
                                           const SequenceOptions& opts = {});

/// "system \n[USER]: instruction \n[ASSISTANT]: " as plain text.
std::string sft_prompt(std::string_view instruction, std::string_view system_msg = kSystemMessage);

/// <BOI> v <EOI> \n system \n [USER]: instruction \n [ASSISTANT]: answer <EOS>;
/// only answer characters and <EOS> are supervised targets.
MultimodalSequence build_sft_sequence(const Vocab& vocab, const VisionTokens& vision, std::string_view instruction,
                                      std::string_view answer, std::string_view system_msg = kSystemMessage,
                                      const SequenceOptions& opts = {});

/// Image block followed by `text` (no <EOS>, nothing supervised); input to generation.
MultimodalSequence build_prefix(const Vocab& vocab, const VisionTokens& vision, std::string_view text,
                                const SequenceOptions& opts = {});

/// <BOI> and the first `k` patches of `vision`; input to image completion.
MultimodalSequence build_image_prefix(const Vocab& vocab, const VisionTokens& vision, std::size_t k,
                                      const SequenceOptions& opts = {});

/// Text-only stream "\n text <EOS>" with every target supervised.
MultimodalSequence build_text_sequence(const Vocab& vocab, std::string_view text);

/// Appends one text token (language modality, unsupervised).
void append_text(MultimodalSequence& seq, int token);
/// Appends one patch token; it joins the image block and uses E_d only.
void append_patch(MultimodalSequence& seq, imgtok::PatchCode code);

}  // namespace libra::seqio
