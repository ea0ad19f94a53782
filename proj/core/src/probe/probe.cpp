#include "libra/probe/probe.hpp"

#include <cmath>
#include <cstdio>

#include "libra/error.hpp"

namespace libra::probe {

AttentionRecord record_attention(const model::LibraModel& m, const seqio::MultimodalSequence& seq, Span query_span,
                                 Span key_span) {
    if (query_span.size() == 0 || key_span.size() == 0) throw InputError("record_attention: empty span");
    const std::size_t len = seq.tokens.size();
    if (query_span.end > len || key_span.end > len)
        throw InputError("record_attention: span exceeds sequence length " + std::to_string(len));
    model::ModelCapture cap;
    {
        num::NoGradGuard guard;
        m.forward(seq, &cap);
    }
    AttentionRecord rec;
    rec.maps.resize(cap.size());
    for (std::size_t l = 0; l < cap.size(); ++l)
        for (const auto& probs : cap[l]) {
            const auto d = probs.data();
            AttentionMap a{query_span.size(), key_span.size(), {}};
            a.values.reserve(a.rows * a.cols);
            for (std::size_t q = query_span.begin; q < query_span.end; ++q)
                for (std::size_t k = key_span.begin; k < key_span.end; ++k) a.values.push_back(d[q * len + k]);
            rec.maps[l].push_back(std::move(a));
        }
    return rec;
}

namespace {

// Running mean: exact when every input is identical.
std::vector<double> mean_of(const std::vector<const std::vector<double>*>& rows) {
    std::vector<double> out = *rows.front();
    for (std::size_t k = 1; k < rows.size(); ++k)
        for (std::size_t i = 0; i < out.size(); ++i) out[i] += ((*rows[k])[i] - out[i]) / static_cast<double>(k + 1);
    return out;
}

double mean_abs_diff(const std::vector<double>& a, const std::vector<double>& b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += std::fabs(a[i] - b[i]);
    return a.empty() ? 0.0 : s / static_cast<double>(a.size());
}

std::vector<double> head_mean(const std::vector<AttentionMap>& heads) {
    std::vector<const std::vector<double>*> ptrs;
    for (const auto& h : heads) ptrs.push_back(&h.values);
    return mean_of(ptrs);
}

}  // namespace

std::vector<double> cross_layer_diff(const AttentionRecord& rec) {
    if (rec.layers() == 0 || rec.heads() == 0) throw InputError("cross_layer_diff: empty record");
    std::vector<std::vector<double>> per_layer;
    for (const auto& heads : rec.maps) per_layer.push_back(head_mean(heads));
    std::vector<const std::vector<double>*> ptrs;
    for (const auto& a : per_layer) ptrs.push_back(&a);
    const auto overall = mean_of(ptrs);
    std::vector<double> out;
    for (const auto& a : per_layer) out.push_back(mean_abs_diff(a, overall));
    return out;
}

std::vector<std::vector<double>> inner_layer_diff(const AttentionRecord& rec) {
    if (rec.layers() == 0 || rec.heads() == 0) throw InputError("inner_layer_diff: empty record");
    std::vector<std::vector<double>> out;
    for (const auto& heads : rec.maps) {
        const auto mean = head_mean(heads);
        auto& row = out.emplace_back();
        for (const auto& h : heads) row.push_back(mean_abs_diff(h.values, mean));
    }
    return out;
}

std::vector<std::vector<double>> activation_map(const AttentionRecord& rec, std::size_t layer, std::size_t grid_h,
                                                std::size_t grid_w) {
    if (layer >= rec.layers()) throw InputError("activation_map: layer " + std::to_string(layer) + " out of range");
    const auto& heads = rec.maps[layer];
    if (heads.empty() || heads.front().rows != 1)
        throw InputError("activation_map: expects a single-query record");
    if (heads.front().cols != grid_h * grid_w)
        throw InputError("activation_map: " + std::to_string(heads.front().cols) + " keys do not form a " +
                         std::to_string(grid_h) + "x" + std::to_string(grid_w) + " patch grid");
    const auto row = head_mean(heads);
    std::vector<std::vector<double>> grid(grid_h, std::vector<double>(grid_w));
    for (std::size_t y = 0; y < grid_h; ++y)
        for (std::size_t x = 0; x < grid_w; ++x) grid[y][x] = row[y * grid_w + x];
    return grid;
}

AnswerProbe answer_probe(const model::LibraModel& m, const imgtok::ToyImage& image, const std::string& question,
                         const std::string& answer) {
    AnswerProbe p;
    p.seq = seqio::build_sft_sequence(m.vocab(), m.vision_tokens(image), question, answer, seqio::kSystemMessage,
                                      m.sequence_options());
    std::size_t first = 0;
    while (first < p.seq.supervised.size() && !p.seq.supervised[first]) ++first;
    // supervised[i] marks the target at i + 1, so the first answer token sits at first + 1.
    if (first + 1 >= p.seq.tokens.size()) throw InputError("answer_probe: sequence has no answer");
    p.answer = {first + 1, first + 2};
    p.patches = {p.seq.image_start, p.seq.image_start + p.seq.patch_count};
    return p;
}

void write_diff_csv_header(std::ostream& out) { out << "sample_id,kind,layer,head,diff\n"; }

void write_diff_csv_rows(std::ostream& out, const std::string& sample_id, const std::vector<double>& cross,
                         const std::vector<std::vector<double>>& inner) {
    char buf[64];
    for (std::size_t l = 0; l < cross.size(); ++l) {
        std::snprintf(buf, sizeof buf, "%.17g", cross[l]);
        out << sample_id << ",cross," << l << ",mean," << buf << '\n';
    }
    for (std::size_t l = 0; l < inner.size(); ++l)
        for (std::size_t h = 0; h < inner[l].size(); ++h) {
            std::snprintf(buf, sizeof buf, "%.17g", inner[l][h]);
            out << sample_id << ",inner," << l << ',' << h << ',' << buf << '\n';
        }
}

}  // namespace libra::probe
