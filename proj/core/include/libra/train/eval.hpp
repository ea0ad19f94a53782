#pragma once

#include <array>
#include <span>
#include <string>
#include <vector>

#include "libra/model/model.hpp"

namespace libra::train {

/// Held-out caption statistics. Caption targets are the characters after the
/// image block's newline plus <EOS>, scored with teacher forcing.
struct CaptionEval {
    double accuracy = 0.0;          // image-conditioned argmax accuracy
    double unigram_accuracy = 0.0;  // always predicting the most frequent training target
    double conditioned_ce = 0.0;    // mean CE with the image in context
    double backbone_ce = 0.0;       // mean CE of the standalone backbone on "\n caption <EOS>"
    double vision_ce1 = 0.0;        // mean patch-target CE per head
    double vision_ce2 = 0.0;
    std::size_t caption_targets = 0;
    std::size_t vision_targets = 0;
};

/// Most frequent caption target id across `captions` (ties: lowest id).
int caption_unigram_mode(const seqio::Vocab& vocab, std::span<const std::string> captions);

struct CaptionExample {
    imgtok::ToyImage image;
    std::string caption;
};

CaptionEval evaluate_captions(const model::LibraModel& m, std::span<const CaptionExample> held_out,
                              int unigram_mode, std::size_t threads = 1);

/// Bottom-half completion of an image whose top `keep` patches are given.
struct CompletionResult {
    imgtok::ToyImage decoded;                // visible codes + completed codes, decoded
    std::array<double, 3> visible_mean{};    // per channel, original visible rows
    std::array<double, 3> completed_mean{};  // per channel, decoded completed rows
    double max_channel_error = 0.0;
    bool eoi_predicted = false;
};
CompletionResult complete_bottom_half(const model::LibraModel& m, const imgtok::ToyImage& image);

struct CompletionEval {
    std::size_t samples = 0;
    std::size_t within = 0;  // max channel error <= tol
    double mean_error = 0.0;
    double fraction() const { return samples ? static_cast<double>(within) / static_cast<double>(samples) : 0.0; }
};
CompletionEval evaluate_completion(const model::LibraModel& m, std::span<const imgtok::ToyImage> images,
                                   double tol = 0.2, std::size_t threads = 1);

/// Token stream "\n caption <EOS>" used for backbone training and scoring.
std::vector<int> caption_text_tokens(const seqio::Vocab& vocab, const std::string& caption);

}  // namespace libra::train
