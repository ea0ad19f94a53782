#include <string>

#include "libra/error.hpp"
#include "libra/routed/routed.hpp"

namespace libra::routed {

namespace {

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape())
        throw ContractViolation(std::string(op) + ": inner/cross shapes differ " + num::to_string(a.shape()) + " vs " +
                                num::to_string(b.shape()));
}

}  // namespace

Tensor pair_select_scores(const Tensor& q, const Tensor& k, const Tensor& k_cross, std::span<const bool> is_vision,
                          double scale) {
    require_same_shape(k, k_cross, "pair_select_scores");
    const std::size_t m = q.rows(), n = k.rows(), d = q.cols();
    if (q.rank() != 2 || k.cols() != d || is_vision.size() != m || m != n)
        throw ContractViolation("pair_select_scores: Q " + num::to_string(q.shape()) + ", K " +
                                num::to_string(k.shape()) + ", mask of " + std::to_string(is_vision.size()));
    std::vector<bool> vis(is_vision.begin(), is_vision.end());
    std::vector<double> out(m * n);
    const double* Q = q.data().data();
    const double* K = k.data().data();
    const double* KC = k_cross.data().data();
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) {
            const double* krow = (vis[i] == vis[j] ? K : KC) + j * d;
            double acc = 0.0;
            for (std::size_t p = 0; p < d; ++p) acc += Q[i * d + p] * krow[p];
            out[i * n + j] = acc * scale;
        }
    return num::make_result(
        "pair_select_scores", {m, n}, std::move(out), {q, k, k_cross},
        [m, n, d, scale, vis = std::move(vis)](const num::Node& self, std::span<const double> g,
                                               std::span<const std::span<double>> gi) {
            const double* Q = self.inputs[0]->value.data();
            const double* K = self.inputs[1]->value.data();
            const double* KC = self.inputs[2]->value.data();
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < n; ++j) {
                    const double gs = g[i * n + j] * scale;
                    if (gs == 0.0) continue;
                    const bool same = vis[i] == vis[j];
                    const double* krow = (same ? K : KC) + j * d;
                    if (!gi[0].empty())
                        for (std::size_t p = 0; p < d; ++p) gi[0][i * d + p] += gs * krow[p];
                    auto& dk = same ? gi[1] : gi[2];
                    if (!dk.empty())
                        for (std::size_t p = 0; p < d; ++p) dk[j * d + p] += gs * Q[i * d + p];
                }
        });
}

Tensor pair_select_apply(const Tensor& probs, const Tensor& v, const Tensor& v_cross, std::span<const bool> is_vision) {
    require_same_shape(v, v_cross, "pair_select_apply");
    const std::size_t m = probs.rows(), n = probs.cols(), d = v.cols();
    if (probs.rank() != 2 || v.rows() != n || is_vision.size() != m || m != n)
        throw ContractViolation("pair_select_apply: P " + num::to_string(probs.shape()) + ", V " +
                                num::to_string(v.shape()) + ", mask of " + std::to_string(is_vision.size()));
    std::vector<bool> vis(is_vision.begin(), is_vision.end());
    std::vector<double> out(m * d, 0.0);
    const double* P = probs.data().data();
    const double* V = v.data().data();
    const double* VC = v_cross.data().data();
    for (std::size_t i = 0; i < m; ++i) {
        double* orow = out.data() + i * d;
        for (std::size_t j = 0; j < n; ++j) {
            const double pv = P[i * n + j];
            const double* vrow = (vis[i] == vis[j] ? V : VC) + j * d;
            for (std::size_t c = 0; c < d; ++c) orow[c] += pv * vrow[c];
        }
    }
    return num::make_result(
        "pair_select_apply", {m, d}, std::move(out), {probs, v, v_cross},
        [m, n, d, vis = std::move(vis)](const num::Node& self, std::span<const double> g,
                                        std::span<const std::span<double>> gi) {
            const double* P = self.inputs[0]->value.data();
            const double* V = self.inputs[1]->value.data();
            const double* VC = self.inputs[2]->value.data();
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < n; ++j) {
                    const bool same = vis[i] == vis[j];
                    const double* vrow = (same ? V : VC) + j * d;
                    const double* grow = g.data() + i * d;
                    if (!gi[0].empty()) {
                        double acc = 0.0;
                        for (std::size_t c = 0; c < d; ++c) acc += grow[c] * vrow[c];
                        gi[0][i * n + j] += acc;
                    }
                    auto& dv = same ? gi[1] : gi[2];
                    const double pv = P[i * n + j];
                    if (!dv.empty() && pv != 0.0)
                        for (std::size_t c = 0; c < d; ++c) dv[j * d + c] += pv * grow[c];
                }
        });
}

}  // namespace libra::routed
