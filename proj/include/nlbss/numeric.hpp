#pragma once

#include "nlbss/core.hpp"

#include <boost/math/distributions/normal.hpp>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <span>
#include <vector>

namespace nlbss {

/// Compensated (Neumaier) summation. Results are insensitive to summation
/// order up to a few ulps, which keeps per-bin moments reproducible.
class NeumaierSum {
public:
    void add(double x) noexcept {
        const double t = sum_ + x;
        if (std::abs(sum_) >= std::abs(x))
            comp_ += (sum_ - t) + x;
        else
            comp_ += (x - t) + sum_;
        sum_ = t;
    }
    double value() const noexcept { return sum_ + comp_; }

private:
    double sum_ = 0.0;
    double comp_ = 0.0;
};

inline double mean(std::span<const double> xs) {
    NeumaierSum s;
    for (double x : xs) s.add(x);
    return xs.empty() ? 0.0 : s.value() / static_cast<double>(xs.size());
}

/// Population variance (1/n normalization).
inline double variance(std::span<const double> xs) {
    const double m = mean(xs);
    NeumaierSum s;
    for (double x : xs) s.add((x - m) * (x - m));
    return xs.empty() ? 0.0 : s.value() / static_cast<double>(xs.size());
}

/// Pearson correlation. Returns NaN when either input has zero variance.
inline double pearson(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size())
        throw Error(Errc::shape_mismatch, "pearson: lengths differ");
    const double ma = mean(a), mb = mean(b);
    NeumaierSum sab, saa, sbb;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double da = a[i] - ma, db = b[i] - mb;
        sab.add(da * db);
        saa.add(da * da);
        sbb.add(db * db);
    }
    const double den = std::sqrt(saa.value() * sbb.value());
    if (!(den > 0.0)) return std::numeric_limits<double>::quiet_NaN();
    return sab.value() / den;
}

/// 1-based fractional ranks; ties receive their average rank.
inline std::vector<double> ranks(std::span<const double> xs) {
    std::vector<std::size_t> order(xs.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t i, std::size_t j) { return xs[i] < xs[j]; });
    std::vector<double> r(xs.size());
    std::size_t i = 0;
    while (i < order.size()) {
        std::size_t j = i;
        while (j + 1 < order.size() && xs[order[j + 1]] == xs[order[i]]) ++j;
        const double avg = 0.5 * static_cast<double>(i + j) + 1.0;
        for (std::size_t k = i; k <= j; ++k) r[order[k]] = avg;
        i = j + 1;
    }
    return r;
}

inline double spearman(std::span<const double> a, std::span<const double> b) {
    const auto ra = ranks(a);
    const auto rb = ranks(b);
    return pearson(ra, rb);
}

/// Rank-based normal scores: Phi^-1((rank - 1/2) / n). Zero mean and unit
/// variance up to O(1/n), and exactly invariant under strictly monotone
/// remapping of the input.
inline std::vector<double> normal_scores(std::span<const double> xs) {
    const boost::math::normal_distribution<double> unit;
    auto r = ranks(xs);
    const double n = static_cast<double>(xs.size());
    for (double& v : r) v = boost::math::quantile(unit, (v - 0.5) / n);
    return r;
}

/// z-score in place. Returns false if the variance is zero.
inline bool standardize(std::vector<double>& xs) {
    const double m = mean(xs);
    const double sd = std::sqrt(variance(xs));
    if (!(sd > 0.0)) return false;
    for (double& x : xs) x = (x - m) / sd;
    return true;
}

/// Lexicographic permutations of {0..n-1}, identity first.
inline std::vector<std::vector<std::size_t>> all_permutations(std::size_t n) {
    std::vector<std::size_t> p(n);
    std::iota(p.begin(), p.end(), std::size_t{0});
    std::vector<std::vector<std::size_t>> out;
    do {
        out.push_back(p);
    } while (std::next_permutation(p.begin(), p.end()));
    return out;
}

} // namespace nlbss
