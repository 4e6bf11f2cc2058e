// Test-only oracles, independent of the library's forward/backward paths:
// central finite differences, brute-force ranking, scalar reference
// implementations. Shared by the unit suites and the acceptance binary.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <vector>

#include "altalign/common.hpp"
#include "altalign/tensor.hpp"

namespace altalign::testing {

struct GradCheckCfg {
    double h;
    double rel_floor;  // guards the relative error against near-zero gradients
};

// Step sizes balance truncation against forward-evaluation roundoff for
// each precision.
inline GradCheckCfg grad_cfg_f32() { return {6e-3, 0.05}; }
inline GradCheckCfg grad_cfg_f64() { return {1e-5, 1e-3}; }

// Central finite differences across every element of every leaf vs the
// analytic gradients from one backward pass. `forward` must be pure in the
// leaves and return a scalar loss built on the supplied graph.
template <class S, class F>
double grad_check_max_rel_err(std::vector<TensorT<S>>& leaves, F forward, const GradCheckCfg& cfg) {
    GraphT<S> g;
    auto loss = forward(g);
    g.backward(loss);

    std::vector<std::vector<double>> analytic;
    analytic.reserve(leaves.size());
    for (auto& leaf : leaves) {
        std::vector<double> a(static_cast<std::size_t>(leaf.numel()), 0.0);
        if (leaf.has_grad())
            for (std::size_t i = 0; i < a.size(); ++i) a[i] = static_cast<double>(leaf.grad()[i]);
        analytic.push_back(std::move(a));
    }

    double max_rel = 0.0;
    const S h = static_cast<S>(cfg.h);
    for (std::size_t li = 0; li < leaves.size(); ++li) {
        auto& leaf = leaves[li];
        for (std::size_t i = 0; i < leaf.val().size(); ++i) {
            const S orig = leaf.val()[i];
            leaf.val()[i] = orig + h;
            double lp;
            {
                GraphT<S> gp;
                lp = static_cast<double>(forward(gp).val()[0]);
            }
            leaf.val()[i] = orig - h;
            double lm;
            {
                GraphT<S> gm;
                lm = static_cast<double>(forward(gm).val()[0]);
            }
            leaf.val()[i] = orig;
            const double numeric = (lp - lm) / (2.0 * cfg.h);
            const double a = analytic[li][i];
            const double denom = std::max({std::fabs(a), std::fabs(numeric), cfg.rel_floor});
            max_rel = std::max(max_rel, std::fabs(a - numeric) / denom);
        }
    }
    return max_rel;
}

// ---- brute-force ranking oracles ----

// 1-based rank of candidate `j` among `scores`: one plus the number of
// candidates that beat it (higher score, or equal score at lower index).
inline int rank_of(const std::vector<float>& scores, int j) {
    int rank = 1;
    for (int k = 0; k < static_cast<int>(scores.size()); ++k) {
        if (k == j) continue;
        if (scores[k] > scores[j] || (scores[k] == scores[j] && k < j)) ++rank;
    }
    return rank;
}

// Cosine scores of one query row against every candidate row, with the same
// float arithmetic order as the library (normalize, then dot).
inline std::vector<float> cosine_scores(const std::vector<float>& q,
                                        const std::vector<std::vector<float>>& cands) {
    auto normalized = [](const std::vector<float>& v) {
        float ss = 0.f;
        for (float x : v) ss += x * x;
        const float n = std::sqrt(ss);
        std::vector<float> out(v.size());
        for (std::size_t i = 0; i < v.size(); ++i) out[i] = v[i] / n;
        return out;
    };
    const auto qn = normalized(q);
    std::vector<float> scores(cands.size());
    for (std::size_t j = 0; j < cands.size(); ++j) {
        const auto cn = normalized(cands[j]);
        float dot = 0.f;
        for (std::size_t k = 0; k < qn.size(); ++k) dot += qn[k] * cn[k];
        scores[j] = dot;
    }
    return scores;
}

// Recall@K by exhaustive rank computation: a query scores a hit when its
// best-ranked relevant candidate lands within the top K.
inline double oracle_recall_at_k(const std::vector<std::vector<float>>& queries,
                                 const std::vector<std::vector<float>>& candidates,
                                 const std::vector<std::vector<int>>& relevant, int k) {
    int hits = 0;
    for (std::size_t q = 0; q < queries.size(); ++q) {
        const auto scores = cosine_scores(queries[q], candidates);
        int best_rank = static_cast<int>(candidates.size()) + 1;
        for (int j : relevant[q]) best_rank = std::min(best_rank, rank_of(scores, j));
        if (best_rank <= k) ++hits;
    }
    return 100.0 * static_cast<double>(hits) / static_cast<double>(queries.size());
}

// ---- scalar AdamW reference (one parameter) ----

struct ScalarAdamW {
    double m = 0.0, v = 0.0;
    int t = 0;

    // Decoupled decay applied before the moment update, AdamW convention.
    double step(double param, double grad, double lr, double beta1, double beta2, double eps,
                double weight_decay) {
        ++t;
        param -= lr * weight_decay * param;
        m = beta1 * m + (1.0 - beta1) * grad;
        v = beta2 * v + (1.0 - beta2) * grad * grad;
        const double mhat = m / (1.0 - std::pow(beta1, t));
        const double vhat = v / (1.0 - std::pow(beta2, t));
        param -= lr * mhat / (std::sqrt(vhat) + eps);
        return param;
    }
};

}  // namespace altalign::testing
