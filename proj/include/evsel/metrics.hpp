#pragma once
// Classification and set-overlap metrics.

#include <algorithm>
#include <cstdint>
#include <span>
#include <vector>

namespace evsel {

// Unweighted mean of per-class F1; a class with zero precision+recall
// contributes 0 (covers classes never predicted).
inline double macro_f1(std::span<const int> y_true, std::span<const int> y_pred, int classes) {
    std::vector<std::int64_t> tp(classes, 0), fp(classes, 0), fn(classes, 0);
    for (std::size_t i = 0; i < y_true.size(); ++i) {
        if (y_true[i] == y_pred[i]) {
            ++tp[y_true[i]];
        } else {
            ++fp[y_pred[i]];
            ++fn[y_true[i]];
        }
    }
    double sum = 0.0;
    for (int c = 0; c < classes; ++c) {
        const double prec_den = static_cast<double>(tp[c] + fp[c]);
        const double rec_den = static_cast<double>(tp[c] + fn[c]);
        const double prec = prec_den > 0 ? tp[c] / prec_den : 0.0;
        const double rec = rec_den > 0 ? tp[c] / rec_den : 0.0;
        sum += (prec + rec) > 0.0 ? 2.0 * prec * rec / (prec + rec) : 0.0;
    }
    return sum / static_cast<double>(classes);
}

inline double accuracy(std::span<const int> y_true, std::span<const int> y_pred) {
    if (y_true.empty()) return 0.0;
    std::size_t hit = 0;
    for (std::size_t i = 0; i < y_true.size(); ++i) hit += y_true[i] == y_pred[i];
    return static_cast<double>(hit) / static_cast<double>(y_true.size());
}

namespace setdetail {

inline std::size_t intersection_size(std::span<const std::uint32_t> a,
                                     std::span<const std::uint32_t> b) {
    // inputs sorted ascending
    std::size_t i = 0, j = 0, hits = 0;
    while (i < a.size() && j < b.size()) {
        if (a[i] < b[j]) {
            ++i;
        } else if (b[j] < a[i]) {
            ++j;
        } else {
            ++hits;
            ++i;
            ++j;
        }
    }
    return hits;
}

}  // namespace setdetail

struct OverlapStats {
    double dice = 0.0;
    double precision = 0.0;
    double recall = 0.0;
};

inline OverlapStats overlap(std::span<const std::uint32_t> selected,
                            std::span<const std::uint32_t> truth) {
    OverlapStats st;
    const std::size_t inter = setdetail::intersection_size(selected, truth);
    const std::size_t denom = selected.size() + truth.size();
    st.dice = denom > 0 ? 2.0 * static_cast<double>(inter) / static_cast<double>(denom) : 0.0;
    st.precision = selected.empty() ? 0.0 : static_cast<double>(inter) / selected.size();
    st.recall = truth.empty() ? 0.0 : static_cast<double>(inter) / truth.size();
    return st;
}

inline double jaccard(std::span<const std::uint32_t> a, std::span<const std::uint32_t> b) {
    const std::size_t inter = setdetail::intersection_size(a, b);
    const std::size_t uni = a.size() + b.size() - inter;
    if (uni == 0) return 1.0;  // two empty sets coincide
    return static_cast<double>(inter) / static_cast<double>(uni);
}

}  // namespace evsel
