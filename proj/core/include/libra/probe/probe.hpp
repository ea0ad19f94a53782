#pragma once

#include <cstddef>
#include <ostream>
#include <string>
#include <vector>

#include "libra/model/model.hpp"

namespace libra::probe {

/// Half-open position range [begin, end).
struct Span {
    std::size_t begin = 0;
    std::size_t end = 0;
    std::size_t size() const { return end > begin ? end - begin : 0; }
};

/// Row-major queries x keys slice of one head's attention probabilities.
struct AttentionMap {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<double> values;
    double at(std::size_t r, std::size_t c) const { return values[r * cols + c]; }
};

struct AttentionRecord {
    /// maps[layer][head]
    std::vector<std::vector<AttentionMap>> maps;
    std::size_t layers() const { return maps.size(); }
    std::size_t heads() const { return maps.empty() ? 0 : maps.front().size(); }
};

/// Runs one forward pass with capture and keeps the query_span x key_span block.
AttentionRecord record_attention(const model::LibraModel& m, const seqio::MultimodalSequence& seq, Span query_span,
                                 Span key_span);

/// Per layer: spatial mean of |head-mean map - mean over layers of head-mean maps|.
std::vector<double> cross_layer_diff(const AttentionRecord& rec);

/// Per layer and head: spatial mean of |head map - mean over heads of that layer|.
std::vector<std::vector<double>> inner_layer_diff(const AttentionRecord& rec);

/// Head-mean single-query row of `layer`, reshaped to a grid_h x grid_w grid.
std::vector<std::vector<double>> activation_map(const AttentionRecord& rec, std::size_t layer, std::size_t grid_h,
                                                std::size_t grid_w);

/// SFT sequence for (image, question, answer) and the spans used for answer
/// probing: the first answer token against every image patch.
struct AnswerProbe {
    seqio::MultimodalSequence seq;
    Span answer;
    Span patches;
};
AnswerProbe answer_probe(const model::LibraModel& m, const imgtok::ToyImage& image, const std::string& question,
                         const std::string& answer);

/// CSV header "sample_id,kind,layer,head,diff"; kind is cross or inner and
/// head is "mean" for cross-layer rows.
void write_diff_csv_header(std::ostream& out);
void write_diff_csv_rows(std::ostream& out, const std::string& sample_id, const std::vector<double>& cross,
                         const std::vector<std::vector<double>>& inner);

}  // namespace libra::probe
