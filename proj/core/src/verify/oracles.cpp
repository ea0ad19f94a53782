#include "libra/verify/oracles.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "libra/num/ops.hpp"

namespace libra::verify {

Mat to_mat(const Tensor& t) {
    return {t.rows(), t.cols(), std::vector<double>(t.data().begin(), t.data().end())};
}

double max_abs_diff(const Mat& a, const Tensor& b) {
    double m = 0.0;
    for (std::size_t i = 0; i < a.v.size(); ++i) m = std::max(m, std::abs(a.v[i] - b[i]));
    return m;
}

namespace {

Mat mul(const Mat& a, const Mat& b) {
    Mat c{a.rows, b.cols, std::vector<double>(a.rows * b.cols, 0.0)};
    for (std::size_t i = 0; i < a.rows; ++i)
        for (std::size_t j = 0; j < b.cols; ++j) {
            double s = 0.0;
            for (std::size_t k = 0; k < a.cols; ++k) s += a(i, k) * b(k, j);
            c(i, j) = s;
        }
    return c;
}

std::vector<double> row_times(const Mat& x, std::size_t r, const Mat& w) {
    std::vector<double> out(w.cols, 0.0);
    for (std::size_t j = 0; j < w.cols; ++j)
        for (std::size_t k = 0; k < x.cols; ++k) out[j] += x(r, k) * w(k, j);
    return out;
}

void rotate(std::vector<double>& row, std::size_t pos, std::size_t heads, double theta) {
    const std::size_t dh = row.size() / heads;
    for (std::size_t h = 0; h < heads; ++h)
        for (std::size_t i = 0; i < dh / 2; ++i) {
            const double ang = static_cast<double>(pos) / std::pow(theta, static_cast<double>(2 * i) / dh);
            const double a = row[h * dh + 2 * i], b = row[h * dh + 2 * i + 1];
            row[h * dh + 2 * i] = a * std::cos(ang) - b * std::sin(ang);
            row[h * dh + 2 * i + 1] = a * std::sin(ang) + b * std::cos(ang);
        }
}

}  // namespace

Mat brute_force_routed_attention(const Tensor& xt, std::span<const bool> vis, const RoutedLayerParams& p,
                                 const RoutedConfig& cfg, std::vector<Mat>* probs) {
    const Mat x = to_mat(xt);
    const std::size_t L = x.rows, D = cfg.d_model, H = cfg.heads, dh = D / H;
    auto compose = [](const routed::LowRank& f) { return mul(to_mat(f.a), to_mat(f.b)); };
    const Mat wq_i = compose(p.q_i), wk_i = compose(p.k_i), wv_i = compose(p.v_i);
    const Mat bk_i = compose(p.bridge_k_i), bk_t = compose(p.bridge_k_t);
    const Mat bv_i = compose(p.bridge_v_i), bv_t = compose(p.bridge_v_t);
    const Mat wq_t = to_mat(p.wq_t), wk_t = to_mat(p.wk_t), wv_t = to_mat(p.wv_t), wo_t = to_mat(p.wo_t);

    std::vector<std::vector<double>> q(L), k(L), kc(L), v(L), vc(L);
    for (std::size_t r = 0; r < L; ++r) {
        q[r] = row_times(x, r, vis[r] ? wq_i : wq_t);
        k[r] = row_times(x, r, vis[r] ? wk_i : wk_t);
        v[r] = row_times(x, r, vis[r] ? wv_i : wv_t);
        const auto dk = row_times(x, r, vis[r] ? bk_i : bk_t);
        const auto dv = row_times(x, r, vis[r] ? bv_i : bv_t);
        kc[r] = k[r];
        vc[r] = v[r];
        for (std::size_t c = 0; c < D; ++c) {
            kc[r][c] += dk[c];
            vc[r][c] += dv[c];
        }
        rotate(q[r], r, H, cfg.rope_theta);
        rotate(k[r], r, H, cfg.rope_theta);
        rotate(kc[r], r, H, cfg.rope_theta);
    }

    Mat heads{L, D, std::vector<double>(L * D, 0.0)};
    if (probs) probs->assign(H, Mat{L, L, std::vector<double>(L * L, 0.0)});
    for (std::size_t h = 0; h < H; ++h)
        for (std::size_t qi = 0; qi < L; ++qi) {
            std::vector<double> s(qi + 1);
            double mx = -std::numeric_limits<double>::infinity();
            for (std::size_t ki = 0; ki <= qi; ++ki) {
                const bool same = vis[qi] == vis[ki];
                const auto& key = same ? k[ki] : kc[ki];
                double dot = 0.0;
                for (std::size_t c = 0; c < dh; ++c) dot += q[qi][h * dh + c] * key[h * dh + c];
                s[ki] = dot / std::sqrt(static_cast<double>(dh));
                mx = std::max(mx, s[ki]);
            }
            double z = 0.0;
            for (auto& e : s) z += (e = std::exp(e - mx));
            for (std::size_t ki = 0; ki <= qi; ++ki) {
                const double pr = s[ki] / z;
                if (probs) (*probs)[h](qi, ki) = pr;
                const auto& val = vis[qi] == vis[ki] ? v[ki] : vc[ki];
                for (std::size_t c = 0; c < dh; ++c) heads(qi, h * dh + c) += pr * val[h * dh + c];
            }
        }

    const Mat wo_i = cfg.route_output_proj ? compose(p.o_i) : wo_t;
    Mat out{L, D, std::vector<double>(L * D)};
    for (std::size_t r = 0; r < L; ++r) {
        const auto row = row_times(heads, r, vis[r] ? wo_i : wo_t);
        std::copy(row.begin(), row.end(), out.v.begin() + static_cast<std::ptrdiff_t>(r * D));
    }
    return out;
}

Mat brute_force_routed_ffn(const Tensor& xt, std::span<const bool> vis, const RoutedLayerParams& p) {
    const Mat x = to_mat(xt);
    Mat out{x.rows, x.cols, std::vector<double>(x.v.size())};
    for (std::size_t r = 0; r < x.rows; ++r) {
        const auto& f = vis[r] ? p.ffn_i : p.ffn_t;
        const auto g = row_times(x, r, to_mat(f.gate));
        const auto u = row_times(x, r, to_mat(f.up));
        Mat hidden{1, g.size(), std::vector<double>(g.size())};
        for (std::size_t j = 0; j < g.size(); ++j) hidden.v[j] = g[j] / (1.0 + std::exp(-g[j])) * u[j];
        const auto y = row_times(hidden, 0, to_mat(f.down));
        std::copy(y.begin(), y.end(), out.v.begin() + static_cast<std::ptrdiff_t>(r * x.cols));
    }
    return out;
}

Tensor simple_expert_layer(const Tensor& x, std::span<const bool> vis, const RoutedLayerParams& p,
                           const RoutedConfig& cfg) {
    using namespace num;
    auto attend = [&](const Tensor& h) {
        const auto q = rope(routed::routed_project(h, vis, p.wq_t, routed::compose_low_rank(p.q_i)), cfg.heads, 0,
                            cfg.rope_theta);
        const auto k = rope(routed::routed_project(h, vis, p.wk_t, routed::compose_low_rank(p.k_i)), cfg.heads, 0,
                            cfg.rope_theta);
        const auto v = routed::routed_project(h, vis, p.wv_t, routed::compose_low_rank(p.v_i));
        const std::size_t dh = cfg.head_dim();
        const double s = 1.0 / std::sqrt(static_cast<double>(dh));
        std::vector<Tensor> outs;
        for (std::size_t i = 0; i < cfg.heads; ++i) {
            const auto pr = softmax_rows(
                tril_mask(num::scale(matmul_nt(slice_cols(q, i * dh, dh), slice_cols(k, i * dh, dh)), s)));
            outs.push_back(matmul(pr, slice_cols(v, i * dh, dh)));
        }
        const auto cat = outs.size() == 1 ? outs[0] : concat_cols(outs);
        return cfg.route_output_proj ? routed::routed_project(cat, vis, p.wo_t, routed::compose_low_rank(p.o_i))
                                     : matmul(cat, p.wo_t);
    };
    const auto h = add(x, attend(routed::routed_norm(x, vis, p.attn_norm_t, p.attn_norm_i, cfg)));
    return add(h, routed::routed_ffn(routed::routed_norm(h, vis, p.ffn_norm_t, p.ffn_norm_i, cfg), vis, p));
}

namespace {

Tensor zeros_like_param(const Tensor& t) {
    return Tensor::parameter(t.shape(), std::vector<double>(t.size(), 0.0));
}

Tensor param_copy(const Tensor& t) {
    return Tensor::parameter(t.shape(), std::vector<double>(t.data().begin(), t.data().end()));
}

}  // namespace

RoutedLayerParams without_bridge(const RoutedLayerParams& p) {
    auto out = p;
    for (auto* f : {&out.bridge_k_i, &out.bridge_v_i, &out.bridge_k_t, &out.bridge_v_t}) f->b = zeros_like_param(f->b);
    return out;
}

RoutedLayerParams experts_tied(const RoutedLayerParams& p) {
    auto out = without_bridge(p);
    num::NoGradGuard guard;
    out.wq_t = param_copy(routed::compose_low_rank(p.q_i));
    out.wk_t = param_copy(routed::compose_low_rank(p.k_i));
    out.wv_t = param_copy(routed::compose_low_rank(p.v_i));
    out.wo_t = param_copy(routed::compose_low_rank(p.o_i));
    out.ffn_i = p.ffn_t;
    out.attn_norm_i = p.attn_norm_t;
    out.ffn_norm_i = p.ffn_norm_t;
    return out;
}

namespace {

template <class P, class F>
void for_each_tensor(P& p, F f) {
    for (auto* t : {&p.attn_norm_t, &p.ffn_norm_t, &p.attn_norm_i, &p.ffn_norm_i, &p.wq_t, &p.wk_t, &p.wv_t, &p.wo_t})
        f(*t);
    for (auto* l : {&p.q_i, &p.k_i, &p.v_i, &p.o_i, &p.bridge_k_i, &p.bridge_v_i, &p.bridge_k_t, &p.bridge_v_t}) {
        f(l->a);
        f(l->b);
    }
    for (auto* ff : {&p.ffn_t, &p.ffn_i}) {
        f(ff->gate);
        f(ff->up);
        f(ff->down);
    }
}

}  // namespace

std::vector<Tensor> flatten(const RoutedLayerParams& p) {
    std::vector<Tensor> out;
    for_each_tensor(p, [&](const Tensor& t) { out.push_back(t); });
    return out;
}

RoutedLayerParams unflatten(std::span<const Tensor> tensors) {
    RoutedLayerParams p;
    std::size_t i = 0;
    for_each_tensor(p, [&](Tensor& t) { t = tensors[i++]; });
    return p;
}

std::size_t matrix_rank(const Mat& m, double tol) {
    Mat a = m;
    std::size_t rank = 0;
    for (std::size_t c = 0; c < a.cols && rank < a.rows; ++c) {
        std::size_t piv = rank;
        for (std::size_t r = rank + 1; r < a.rows; ++r)
            if (std::abs(a(r, c)) > std::abs(a(piv, c))) piv = r;
        if (std::abs(a(piv, c)) <= tol) continue;
        for (std::size_t j = 0; j < a.cols; ++j) std::swap(a(rank, j), a(piv, j));
        for (std::size_t r = rank + 1; r < a.rows; ++r) {
            const double f = a(r, c) / a(rank, c);
            for (std::size_t j = c; j < a.cols; ++j) a(r, j) -= f * a(rank, j);
        }
        ++rank;
    }
    return rank;
}

}  // namespace libra::verify
