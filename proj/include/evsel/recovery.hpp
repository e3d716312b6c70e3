#pragma once
// Threshold-plus-repair discrete recovery.
//
// S0 = { i : pi_i > tau }; if empty, the single top-gate patch is used as a
// fallback. While any anchor's coverage at the indicator of S stays below the
// target c, the patch with the largest exact noisy-OR marginal gain joins S.
// A hard cap stops repair when the achievable coverage cannot reach c; the
// result then carries a saturation flag together with the achieved coverage.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "evsel/coverage.hpp"
#include "evsel/errors.hpp"
#include "evsel/linalg.hpp"
#include "evsel/predictor.hpp"

namespace evsel {

struct RecoveryConfig {
    double tau = 0.5;
    double coverage_target = 0.95;
    std::int64_t max_add = -1;  // < 0 means "up to the whole bag"

    void validate() const {
        if (!(tau > 0.0 && tau < 1.0)) throw ConfigError("recovery: tau must be in (0,1)");
        if (!(coverage_target > 0.0 && coverage_target <= 1.0))
            throw ConfigError("recovery: coverage target must be in (0,1]");
    }
};

enum class Provenance : std::uint8_t { thresholded = 0, fallback = 1, repaired = 2 };

inline const char* provenance_name(Provenance p) {
    switch (p) {
        case Provenance::thresholded: return "thresholded";
        case Provenance::fallback: return "fallback";
        default: return "repaired";
    }
}

struct EvidenceSubset {
    std::vector<std::uint32_t> indices;     // selection order
    std::vector<Provenance> provenance;     // aligned with indices
    double achieved_coverage = 0.0;         // min over anchors at the final set
    bool saturated = false;                 // repair stopped short of the target

    std::size_t size() const { return indices.size(); }

    std::vector<std::uint32_t> sorted() const {
        std::vector<std::uint32_t> s = indices;
        std::sort(s.begin(), s.end());
        return s;
    }
};

inline EvidenceSubset recover(std::span<const double> pi, const MatD& r,
                              std::span<const double> alpha, const RecoveryConfig& cfg) {
    cfg.validate();
    const std::size_t n = r.rows;
    const std::size_t m = r.cols;
    if (n == 0) throw ContractError("recover: empty bag");
    if (pi.size() != n) throw ContractError("recover: gate length mismatch");

    EvidenceSubset out;
    std::vector<char> taken(n, 0);
    std::vector<double> q(m, 1.0);  // remaining mass per anchor

    auto add = [&](std::size_t i, Provenance why) {
        taken[i] = 1;
        out.indices.push_back(static_cast<std::uint32_t>(i));
        out.provenance.push_back(why);
        for (std::size_t a = 0; a < m; ++a) q[a] *= 1.0 - r(i, a);
    };

    for (std::size_t i = 0; i < n; ++i) {
        if (pi[i] > cfg.tau) add(i, Provenance::thresholded);
    }
    if (out.indices.empty()) {
        std::size_t best = 0;
        for (std::size_t i = 1; i < n; ++i) {
            if (pi[i] > pi[best]) best = i;
        }
        add(best, Provenance::fallback);
    }

    auto min_coverage = [&]() {
        double worst = 1.0;
        for (std::size_t a = 0; a < m; ++a) worst = std::min(worst, 1.0 - q[a]);
        return worst;
    };

    const std::uint64_t cap =
        cfg.max_add < 0 ? static_cast<std::uint64_t>(n) : static_cast<std::uint64_t>(cfg.max_add);
    std::uint64_t added = 0;
    double achieved = min_coverage();
    while (achieved < cfg.coverage_target && out.indices.size() < n && added < cap) {
        std::size_t best = n;
        double best_gain = -1.0;
        for (std::size_t i = 0; i < n; ++i) {
            if (taken[i]) continue;
            const double g = covdetail::gain(r, alpha, q, i);
            if (g > best_gain) {
                best_gain = g;
                best = i;
            }
        }
        add(best, Provenance::repaired);
        ++added;
        achieved = min_coverage();
    }

    out.achieved_coverage = achieved;
    out.saturated = achieved < cfg.coverage_target;
    return out;
}

// |Phi(gated forward) - Phi(subset forward)| where Phi is the probability of
// the reference class (the full-bag prediction, frozen rather than re-argmaxed).
inline double cd_gap_at(const PredictorParams& params, const MatF& H,
                        std::span<const double> pi, std::span<const std::uint32_t> subset,
                        InjectionMode mode, int reference_class) {
    const ForwardResult cont = forward(params, H, pi, mode);
    const SubsetPrediction disc = predict_subset(params, H, subset);
    const auto c = static_cast<std::size_t>(reference_class);
    return std::abs(cont.probs[c] - disc.probs[c]);
}

inline double cd_gap(const PredictorParams& params, const MatF& H, std::span<const double> pi,
                     std::span<const std::uint32_t> subset, InjectionMode mode) {
    const ForwardResult full = forward(params, H, {}, mode);
    const int ref = static_cast<int>(
        std::max_element(full.probs.begin(), full.probs.end()) - full.probs.begin());
    return cd_gap_at(params, H, pi, subset, mode, ref);
}

}  // namespace evsel
