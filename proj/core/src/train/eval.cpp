#include "libra/train/eval.hpp"

#include <cmath>
#include <map>
#include <thread>

#include "libra/error.hpp"
#include "libra/num/ops.hpp"

namespace libra::train {

std::vector<int> caption_text_tokens(const seqio::Vocab& vocab, const std::string& caption) {
    return seqio::build_text_sequence(vocab, caption).tokens;
}

int caption_unigram_mode(const seqio::Vocab& vocab, std::span<const std::string> captions) {
    if (captions.empty()) throw InputError("unigram baseline needs at least one caption");
    std::map<int, std::size_t> counts;
    for (const auto& c : captions) {
        const auto t = caption_text_tokens(vocab, c);
        for (std::size_t i = 1; i < t.size(); ++i) ++counts[t[i]];
    }
    int best = counts.begin()->first;
    for (const auto& [id, n] : counts)
        if (n > counts[best]) best = id;
    return best;
}

namespace {

double row_ce(const num::Tensor& logits, std::size_t row, int target) {
    const std::size_t v = logits.cols();
    const auto d = logits.data();
    const double* r = d.data() + row * v;
    double mx = r[0];
    for (std::size_t j = 1; j < v; ++j) mx = std::max(mx, r[j]);
    double s = 0.0;
    for (std::size_t j = 0; j < v; ++j) s += std::exp(r[j] - mx);
    return mx + std::log(s) - r[target];
}

struct Partial {
    double hits = 0, unigram = 0, cond = 0, back = 0, v1 = 0, v2 = 0;
    std::size_t n = 0, nv = 0;
};

Partial score_one(const model::LibraModel& m, const CaptionExample& ex, int mode) {
    Partial p;
    const auto& vocab = m.vocab();
    const auto seq = seqio::build_pretrain_sequence(vocab, m.vision_tokens(ex.image), ex.caption, m.sequence_options());
    const auto out = m.forward(seq);
    const std::size_t img_end = seq.image_start + seq.patch_count;
    for (std::size_t i = 0; i + 1 < seq.tokens.size(); ++i) {
        if (!seq.is_patch[i + 1]) continue;
        p.v1 += row_ce(out.vis1, i, static_cast<int>(seq.codes[i + 1].id1));
        p.v2 += row_ce(out.vis2, i, static_cast<int>(seq.codes[i + 1].id2));
        ++p.nv;
    }
    std::size_t nl = img_end;
    while (nl < seq.tokens.size() && seq.tokens[nl] != vocab.newline()) ++nl;
    if (nl >= seq.tokens.size()) throw ContractViolation("pretrain sequence without caption newline");

    const auto text = caption_text_tokens(vocab, ex.caption);
    const auto back = m.backbone_logits(std::span<const int>(text.data(), text.size() - 1));
    for (std::size_t i = nl, j = 0; i + 1 < seq.tokens.size(); ++i, ++j) {
        const int target = seq.tokens[i + 1];
        if (text[j + 1] != target) throw ContractViolation("caption streams disagree");
        p.hits += model::argmax_row(out.lang, i) == static_cast<std::size_t>(target) ? 1.0 : 0.0;
        p.unigram += target == mode ? 1.0 : 0.0;
        p.cond += row_ce(out.lang, i, target);
        p.back += row_ce(back, j, target);
        ++p.n;
    }
    return p;
}

}  // namespace

CaptionEval evaluate_captions(const model::LibraModel& m, std::span<const CaptionExample> held_out, int unigram_mode,
                              std::size_t threads) {
    if (held_out.empty()) throw InputError("caption evaluation needs at least one example");
    num::NoGradGuard guard;
    std::vector<Partial> parts(held_out.size());
    threads = std::max<std::size_t>(1, std::min(threads, held_out.size()));
    auto work = [&](std::size_t lo, std::size_t hi) {
        num::NoGradGuard inner;
        for (std::size_t i = lo; i < hi; ++i) parts[i] = score_one(m, held_out[i], unigram_mode);
    };
    if (threads == 1) {
        work(0, held_out.size());
    } else {
        std::vector<std::jthread> pool;
        for (std::size_t t = 0; t < threads; ++t)
            pool.emplace_back(work, held_out.size() * t / threads, held_out.size() * (t + 1) / threads);
    }
    Partial s;
    for (const auto& p : parts) {
        s.hits += p.hits;
        s.unigram += p.unigram;
        s.cond += p.cond;
        s.back += p.back;
        s.v1 += p.v1;
        s.v2 += p.v2;
        s.n += p.n;
        s.nv += p.nv;
    }
    CaptionEval e;
    const double n = static_cast<double>(s.n);
    e.accuracy = s.hits / n;
    e.unigram_accuracy = s.unigram / n;
    e.conditioned_ce = s.cond / n;
    e.backbone_ce = s.back / n;
    if (s.nv) {
        e.vision_ce1 = s.v1 / static_cast<double>(s.nv);
        e.vision_ce2 = s.v2 / static_cast<double>(s.nv);
    }
    e.caption_targets = s.n;
    e.vision_targets = s.nv;
    return e;
}

CompletionResult complete_bottom_half(const model::LibraModel& m, const imgtok::ToyImage& image) {
    const auto& tc = m.config().tokenizer;
    const std::size_t keep = (tc.grid_h() / 2) * tc.grid_w();
    const auto vision = m.vision_tokens(image);
    const auto done = model::complete_image(m, seqio::build_image_prefix(m.vocab(), vision, keep, m.sequence_options()));
    std::vector<imgtok::PatchCode> codes(vision.codes.begin(), vision.codes.begin() + static_cast<std::ptrdiff_t>(keep));
    codes.insert(codes.end(), done.codes.begin(), done.codes.end());

    CompletionResult r;
    r.decoded = m.tokenizer().decode_tokens(codes);
    r.eoi_predicted = done.eoi_predicted;
    const std::size_t split = (tc.grid_h() / 2) * tc.patch;
    for (std::size_t c = 0; c < 3; ++c) {
        double top = 0.0, bottom = 0.0;
        for (std::size_t y = 0; y < image.height; ++y)
            for (std::size_t x = 0; x < image.width; ++x) {
                if (y < split)
                    top += image.at(y, x, c);
                else
                    bottom += r.decoded.at(y, x, c);
            }
        r.visible_mean[c] = top / static_cast<double>(split * image.width);
        r.completed_mean[c] = bottom / static_cast<double>((image.height - split) * image.width);
        r.max_channel_error = std::max(r.max_channel_error, std::fabs(r.visible_mean[c] - r.completed_mean[c]));
    }
    return r;
}

CompletionEval evaluate_completion(const model::LibraModel& m, std::span<const imgtok::ToyImage> images, double tol,
                                   std::size_t threads) {
    std::vector<double> err(images.size());
    threads = std::max<std::size_t>(1, std::min(threads, images.size()));
    auto work = [&](std::size_t lo, std::size_t hi) {
        for (std::size_t i = lo; i < hi; ++i) err[i] = complete_bottom_half(m, images[i]).max_channel_error;
    };
    if (threads == 1) {
        work(0, images.size());
    } else {
        std::vector<std::jthread> pool;
        for (std::size_t t = 0; t < threads; ++t)
            pool.emplace_back(work, images.size() * t / threads, images.size() * (t + 1) / threads);
    }
    CompletionEval e;
    e.samples = images.size();
    for (double v : err) {
        e.within += v <= tol ? 1 : 0;
        e.mean_error += v;
    }
    if (e.samples) e.mean_error /= static_cast<double>(e.samples);
    return e;
}

}  // namespace libra::train
