#include "libra/train/trainer.hpp"

#include <cmath>
#include <cstdlib>
#include <fstream>
#include <thread>

#include <json.hpp>

#include "libra/error.hpp"
#include "libra/num/autodiff.hpp"
#include "libra/num/ops.hpp"
#include "libra/train/loss.hpp"

namespace libra::train {

std::size_t threads_from_env() {
    if (const char* v = std::getenv("LIBRA_TOY_THREADS")) {
        const long n = std::strtol(v, nullptr, 10);
        if (n > 0) return static_cast<std::size_t>(n);
    }
    return 1;
}

namespace {

nlohmann::json metrics_json(const StepMetrics& s) {
    return {{"stage", s.stage},       {"step", s.step},           {"loss", s.loss},
            {"text_ce", s.text_ce},   {"vision_ce1", s.vision_ce1}, {"vision_ce2", s.vision_ce2},
            {"grad_norm", s.grad_norm}, {"lr", s.lr}};
}

class MetricsSink {
public:
    explicit MetricsSink(const std::filesystem::path& dir) {
        if (dir.empty()) return;
        std::filesystem::create_directories(dir);
        out_.open(dir / "metrics.jsonl", std::ios::app);
        if (!out_) throw InputError("cannot write metrics in '" + dir.string() + "'");
    }
    void write(const StepMetrics& s) {
        if (out_.is_open()) out_ << metrics_json(s).dump() << '\n';
    }

private:
    std::ofstream out_;
};

void write_summary(const std::filesystem::path& dir, const std::vector<StepMetrics>& h) {
    if (dir.empty() || h.empty()) return;
    const auto path = dir / "summary.csv";
    const bool fresh = !std::filesystem::exists(path);
    std::ofstream out(path, std::ios::app);
    if (fresh) out << "stage,steps,initial_loss,final_loss,tail_mean_loss,final_grad_norm\n";
    const std::size_t tail = std::min<std::size_t>(50, h.size());
    double mean = 0.0;
    for (std::size_t i = h.size() - tail; i < h.size(); ++i) mean += h[i].loss;
    mean /= static_cast<double>(tail);
    char buf[256];
    std::snprintf(buf, sizeof buf, "%s,%zu,%.9g,%.9g,%.9g,%.9g\n", h.front().stage.c_str(), h.size(), h.front().loss,
                  h.back().loss, mean, h.back().grad_norm);
    out << buf;
}

[[noreturn]] void abort_with_dump(const std::filesystem::path& dir, const model::LibraModel& m, const std::string& stage,
                                  std::size_t step, const std::string& what) {
    if (!dir.empty()) {
        nlohmann::json d{{"stage", stage}, {"step", step}, {"error", what}};
        for (const auto& [name, t] : m.params().items()) {
            double ss = 0.0;
            bool finite = true;
            for (double v : t.data()) {
                ss += v * v;
                finite = finite && std::isfinite(v);
            }
            d["param_norms"][name] = finite ? nlohmann::json(std::sqrt(ss)) : nlohmann::json("non-finite");
        }
        std::filesystem::create_directories(dir);
        std::ofstream(dir / "diagnostic.json") << d.dump(2) << '\n';
    }
    throw NumericError(stage + " step " + std::to_string(step) + ": " + what);
}

/// Per-item gradient of a loss built by `loss_of(i)`, summed in index order so
/// the result does not depend on the number of workers.
template <class LossOf>
GradMap batch_gradients(std::size_t items, const std::vector<std::string>& names, const model::LibraModel& m,
                        std::size_t threads, LossOf loss_of) {
    std::vector<GradMap> per(items);
    auto work = [&](std::size_t lo, std::size_t hi) {
        for (std::size_t i = lo; i < hi; ++i) {
            const auto loss = loss_of(i);
            const auto g = num::backward(loss);
            for (const auto& n : names) per[i][n] = g.dense(m.params().get(n));
        }
    };
    threads = std::max<std::size_t>(1, std::min(threads, items));
    if (threads == 1) {
        work(0, items);
    } else {
        std::vector<std::thread> pool;
        std::vector<std::exception_ptr> errors(threads);
        for (std::size_t t = 0; t < threads; ++t)
            pool.emplace_back([&, t] {
                try {
                    work(items * t / threads, items * (t + 1) / threads);
                } catch (...) {
                    errors[t] = std::current_exception();
                }
            });
        for (auto& th : pool) th.join();
        for (auto& e : errors)
            if (e) std::rethrow_exception(e);
    }
    GradMap sum;
    for (const auto& n : names) sum[n].assign(m.params().get(n).size(), 0.0);
    for (const auto& g : per)
        for (auto& [n, v] : sum) {
            const auto& src = g.at(n);
            for (std::size_t k = 0; k < v.size(); ++k) v[k] += src[k];
        }
    return sum;
}

void maybe_checkpoint(const TrainConfig& cfg, const model::LibraModel& m, const std::string& stage, std::size_t step) {
    if (cfg.out_dir.empty() || cfg.checkpoint_every == 0 || step % cfg.checkpoint_every != 0) return;
    m.save(cfg.out_dir / (stage + "_step" + std::to_string(step) + ".ckpt"));
}

}  // namespace

std::vector<StepMetrics> train_stage(model::LibraModel& m, model::Stage stage,
                                     const std::vector<seqio::MultimodalSequence>& data, const TrainConfig& cfg,
                                     const StepCallback& on_step) {
    if (data.empty()) throw InputError(std::string(model::stage_name(stage)) + ": empty dataset");
    if (cfg.batch == 0) throw ConfigError("batch must be positive");
    const std::string name = model::stage_name(stage);
    const auto tok_before = m.tokenizer().encoder_checksum();
    const auto names = m.trainable_params(stage);
    FrozenRows frozen;
    if (stage == model::Stage::sft) frozen["lm.embed"] = {static_cast<std::size_t>(m.vocab().newline())};

    AdamW opt(cfg.opt);
    Rng rng(cfg.seed, "train." + name + ".batches");
    MetricsSink sink(cfg.out_dir);
    std::vector<StepMetrics> history;
    std::vector<seqio::MultimodalSequence> batch(cfg.batch);
    for (std::size_t step = 0; step < cfg.opt.total_steps; ++step) {
        for (auto& s : batch) {
            s = data[rng.index(data.size())];
            if (stage == model::Stage::pretrain && s.patch_count > 0 && rng.uniform() < cfg.contiguous_dropout)
                s.disable_contiguous = true;
        }
        const double denom = static_cast<double>(supervised_total(batch));
        if (denom == 0.0) throw InputError(name + ": sampled batch has no supervised positions");
        const bool vision = stage == model::Stage::pretrain;

        StepMetrics sm{name, step, 0, 0, 0, 0, 0, lr_at(cfg.opt, step)};
        GradMap grads;
        try {
            std::vector<LossParts> parts(batch.size());
            grads = batch_gradients(batch.size(), names, m, cfg.threads, [&](std::size_t i) {
                parts[i] = sequence_loss(m, batch[i], denom, vision);
                return parts[i].total;
            });
            std::size_t nt = 0, nv = 0;
            for (const auto& p : parts) {
                sm.loss += p.total.item();
                sm.text_ce += p.text_ce;
                sm.vision_ce1 += p.vision_ce1;
                sm.vision_ce2 += p.vision_ce2;
                nt += p.text_targets;
                nv += p.vision_targets;
            }
            if (nt) sm.text_ce /= static_cast<double>(nt);
            if (nv) {
                sm.vision_ce1 /= static_cast<double>(nv);
                sm.vision_ce2 /= static_cast<double>(nv);
            }
            if (!std::isfinite(sm.loss)) throw NumericError("non-finite loss");
            sm.grad_norm = opt.step(m.mutable_params(), grads, step, frozen);
        } catch (const NumericError& e) {
            abort_with_dump(cfg.out_dir, m, name, step, e.what());
        }
        sink.write(sm);
        history.push_back(sm);
        if (on_step) on_step(sm);
        maybe_checkpoint(cfg, m, name, step + 1);
    }
    if (m.tokenizer().encoder_checksum() != tok_before) throw ContractViolation(name + ": tokenizer changed");
    write_summary(cfg.out_dir, history);
    return history;
}

std::vector<StepMetrics> train_backbone(model::LibraModel& m, const std::vector<std::vector<int>>& data,
                                        const TrainConfig& cfg, const StepCallback& on_step) {
    if (data.empty()) throw InputError("backbone: empty dataset");
    std::vector<std::string> names;
    for (const auto& n : m.params().names())
        if (n.rfind("lm.", 0) == 0) names.push_back(n);
    AdamW opt(cfg.opt);
    Rng rng(cfg.seed, "train.backbone.batches");
    MetricsSink sink(cfg.out_dir);
    std::vector<StepMetrics> history;
    std::vector<std::vector<int>> batch(cfg.batch);
    for (std::size_t step = 0; step < cfg.opt.total_steps; ++step) {
        for (auto& s : batch) s = data[rng.index(data.size())];
        StepMetrics sm{"backbone", step, 0, 0, 0, 0, 0, lr_at(cfg.opt, step)};
        std::size_t n = 0;
        for (const auto& s : batch) n += s.size() - 1;
        try {
            std::vector<double> losses(batch.size());
            auto grads = batch_gradients(batch.size(), names, m, cfg.threads, [&](std::size_t i) {
                const auto& s = batch[i];
                const auto logits = m.backbone_logits(std::span<const int>(s.data(), s.size() - 1));
                const std::vector<int> targets(s.begin() + 1, s.end());
                const std::vector<double> w(targets.size(), 1.0);
                const auto loss = num::scale(num::cross_entropy(logits, targets, w), 1.0 / static_cast<double>(n));
                losses[i] = loss.item();
                return loss;
            });
            for (double l : losses) sm.loss += l;
            sm.text_ce = sm.loss;
            if (!std::isfinite(sm.loss)) throw NumericError("non-finite loss");
            sm.grad_norm = opt.step(m.mutable_params(), grads, step);
        } catch (const NumericError& e) {
            abort_with_dump(cfg.out_dir, m, "backbone", step, e.what());
        }
        sink.write(sm);
        history.push_back(sm);
        if (on_step) on_step(sm);
    }
    write_summary(cfg.out_dir, history);
    return history;
}

}  // namespace libra::train
