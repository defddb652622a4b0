#pragma once

// Weights w = M(x) xdot: velocity coordinates in the local frame basis.
// Correlation-based bipartition search and signed-permutation matching.

#include "nlbss/core.hpp"
#include "nlbss/linalg.hpp"
#include "nlbss/local_frames.hpp"
#include "nlbss/numeric.hpp"
#include "nlbss/parallel.hpp"
#include "nlbss/phase_binning.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <ostream>
#include <span>
#include <vector>

namespace nlbss {

struct WeightSeries {
    std::size_t dims = 0;
    std::vector<std::size_t> t_index;
    std::vector<double> values; // row-major, dims per sample
    std::vector<std::size_t> bin; // frame bin used per sample (empty if unknown)
    std::size_t dropped = 0;

    std::size_t size() const noexcept { return t_index.size(); }
    double operator()(std::size_t i, std::size_t k) const { return values[i * dims + k]; }
    std::span<const double> row(std::size_t i) const { return {values.data() + i * dims, dims}; }
    std::vector<double> column(std::size_t k) const {
        std::vector<double> out(size());
        for (std::size_t i = 0; i < size(); ++i) out[i] = (*this)(i, k);
        return out;
    }
};

/// w = M(bin(x)) xdot with the nearest-valid-bin fallback. Samples outside
/// the grid box are dropped and counted.
inline WeightSeries compute_weights(const PhaseSeries& samples, const FrameField& field, std::size_t threads = 0) {
    if (field.valid_count() == 0) throw Error(Errc::no_valid_bins, "frame field has no valid bins");
    if (samples.dims() != field.dims()) throw Error(Errc::shape_mismatch, "sample dimension does not match field");
    const std::size_t n = samples.dims(), total = samples.size();
    constexpr std::size_t none = static_cast<std::size_t>(-1);
    std::vector<std::size_t> bins(total, none);
    std::vector<double> w(total * n, 0.0);
    parallel_for(total, threads, [&](std::size_t i) {
        const auto f = field.geometry.locate(samples.x(i));
        if (!f) return;
        const std::size_t b = field.redirect[*f];
        bins[i] = b;
        const Vector wi = field.frames[b].M * samples.vv(i);
        for (std::size_t k = 0; k < n; ++k) w[i * n + k] = wi(static_cast<Eigen::Index>(k));
    });
    WeightSeries out;
    out.dims = n;
    out.t_index.reserve(total);
    out.values.reserve(total * n);
    out.bin.reserve(total);
    for (std::size_t i = 0; i < total; ++i) {
        if (bins[i] == none) {
            ++out.dropped;
            continue;
        }
        out.t_index.push_back(samples.t_index(i));
        out.bin.push_back(bins[i]);
        out.values.insert(out.values.end(), w.begin() + static_cast<std::ptrdiff_t>(i * n),
                          w.begin() + static_cast<std::ptrdiff_t>((i + 1) * n));
    }
    return out;
}

/// Pearson correlation matrix of the weight components.
inline Matrix weight_correlation(const WeightSeries& w) {
    if (w.size() < 2) throw Error(Errc::invalid_argument, "need at least 2 weight samples");
    const auto n = static_cast<Eigen::Index>(w.dims);
    std::vector<std::vector<double>> cols;
    for (std::size_t k = 0; k < w.dims; ++k) cols.push_back(w.column(k));
    for (std::size_t k = 0; k < w.dims; ++k)
        if (!(variance(cols[k]) > 0.0))
            throw Error(Errc::degenerate, "weight component " + std::to_string(k + 1) + " has zero variance");
    Matrix c = Matrix::Identity(n, n);
    for (Eigen::Index a = 0; a < n; ++a)
        for (Eigen::Index b = a + 1; b < n; ++b) {
            const double r = pearson(cols[static_cast<std::size_t>(a)], cols[static_cast<std::size_t>(b)]);
            c(a, b) = r;
            c(b, a) = r;
        }
    return c;
}

struct Partition {
    IndexSet first;
    IndexSet second;
    double score = 0.0; // max |cross-group correlation|
};

/// Max |corr| between the two groups.
inline double partition_score(const Matrix& corr, const IndexSet& a, const IndexSet& b) {
    double s = 0.0;
    for (auto i : a)
        for (auto j : b) s = std::max(s, std::abs(corr(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j))));
    return s;
}

/// Every bipartition (index 0 always in the first group), sorted by score.
inline std::vector<Partition> all_partitions(const Matrix& corr) {
    const auto n = static_cast<std::size_t>(corr.rows());
    if (n < 2) throw Error(Errc::invalid_argument, "partitioning needs at least 2 components");
    if (n > 24) throw Error(Errc::unsupported, "too many components to enumerate bipartitions");
    std::vector<Partition> out;
    const std::size_t full = (std::size_t{1} << (n - 1)) - 1;
    for (std::size_t mask = 0; mask < full; ++mask) {
        Partition p;
        p.first.push_back(0);
        for (std::size_t k = 1; k < n; ++k) ((mask >> (k - 1)) & 1u ? p.first : p.second).push_back(k);
        p.score = partition_score(corr, p.first, p.second);
        out.push_back(std::move(p));
    }
    std::stable_sort(out.begin(), out.end(), [](const Partition& a, const Partition& b) { return a.score < b.score; });
    return out;
}

/// Bipartitions whose max |cross-group correlation| is at most `threshold`,
/// ascending by score. Empty means no uncorrelated split exists.
inline std::vector<Partition> enumerate_partitions(const Matrix& corr, double threshold) {
    auto all = all_partitions(corr);
    std::erase_if(all, [&](const Partition& p) { return !(p.score <= threshold); });
    return all;
}

// ---------------------------------------------------------------------------
// Signed-permutation matching

struct SignedMatch {
    SignedPermutation p;
    double residual = 0.0; // ||a - P b|| / ||a|| over rows finite in both
};

/// Minimizes ||a - P b|| over signed permutations. For a fixed permutation
/// the best signs follow the cross-products, so the search maximizes
/// sum_i |<a_i, b_pi(i)>|. Rows with non-finite entries are skipped.
inline SignedMatch match_signed_permutation(std::span<const double> a, std::span<const double> b, std::size_t dims) {
    if (a.size() != b.size() || dims == 0 || a.size() % dims != 0)
        throw Error(Errc::shape_mismatch, "series to match differ in shape");
    if (dims > max_permutation_width) throw Error(Errc::unsupported, "signed-permutation search is capped at 8 components");
    const std::size_t rows = a.size() / dims;
    auto finite_row = [&](std::size_t r) {
        for (std::size_t k = 0; k < dims; ++k)
            if (!std::isfinite(a[r * dims + k]) || !std::isfinite(b[r * dims + k])) return false;
        return true;
    };
    std::vector<NeumaierSum> cross(dims * dims);
    for (std::size_t r = 0; r < rows; ++r) {
        if (!finite_row(r)) continue;
        for (std::size_t i = 0; i < dims; ++i)
            for (std::size_t j = 0; j < dims; ++j) cross[i * dims + j].add(a[r * dims + i] * b[r * dims + j]);
    }
    std::vector<std::size_t> perm(dims), best_perm;
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    double best = -1.0;
    do {
        double s = 0.0;
        for (std::size_t i = 0; i < dims; ++i) s += std::abs(cross[i * dims + perm[i]].value());
        if (s > best) {
            best = s;
            best_perm = perm;
        }
    } while (std::next_permutation(perm.begin(), perm.end()));
    SignedMatch m{{best_perm, std::vector<int>(dims, 1)}, 0.0};
    for (std::size_t i = 0; i < dims; ++i)
        if (cross[i * dims + best_perm[i]].value() < 0.0) m.p.sign[i] = -1;
    NeumaierSum err, norm;
    for (std::size_t r = 0; r < rows; ++r) {
        if (!finite_row(r)) continue;
        for (std::size_t i = 0; i < dims; ++i) {
            const double d = a[r * dims + i] - m.p.sign[i] * b[r * dims + m.p.perm[i]];
            err.add(d * d);
            norm.add(a[r * dims + i] * a[r * dims + i]);
        }
    }
    m.residual = norm.value() > 0.0 ? std::sqrt(err.value() / norm.value()) : (err.value() > 0.0 ? std::numeric_limits<double>::infinity() : 0.0);
    return m;
}

inline SignedMatch match_signed_permutation(const WeightSeries& a, const WeightSeries& b) {
    if (a.size() != b.size() || a.dims != b.dims) throw Error(Errc::shape_mismatch, "weight series differ in shape");
    return match_signed_permutation(a.values, b.values, a.dims);
}

/// Restricts both series to their common time indices (in time order).
inline std::pair<WeightSeries, WeightSeries> align_on_time(const WeightSeries& a, const WeightSeries& b) {
    std::map<std::size_t, std::size_t> pos;
    for (std::size_t j = 0; j < b.size(); ++j) pos.emplace(b.t_index[j], j);
    WeightSeries ra{a.dims, {}, {}, {}, a.dropped}, rb{b.dims, {}, {}, {}, b.dropped};
    for (std::size_t i = 0; i < a.size(); ++i) {
        const auto it = pos.find(a.t_index[i]);
        if (it == pos.end()) continue;
        const std::size_t j = it->second;
        ra.t_index.push_back(a.t_index[i]);
        rb.t_index.push_back(b.t_index[j]);
        if (!a.bin.empty()) ra.bin.push_back(a.bin[i]);
        if (!b.bin.empty()) rb.bin.push_back(b.bin[j]);
        const auto x = a.row(i), y = b.row(j);
        ra.values.insert(ra.values.end(), x.begin(), x.end());
        rb.values.insert(rb.values.end(), y.begin(), y.end());
    }
    return {std::move(ra), std::move(rb)};
}

/// Concatenates the columns of per-block weight series on their common time
/// indices.
inline WeightSeries stack_blocks(const std::vector<WeightSeries>& blocks) {
    if (blocks.empty()) throw Error(Errc::invalid_argument, "no weight blocks to stack");
    std::map<std::size_t, std::vector<std::size_t>> rows;
    for (std::size_t b = 0; b < blocks.size(); ++b)
        for (std::size_t i = 0; i < blocks[b].size(); ++i) {
            auto& r = rows[blocks[b].t_index[i]];
            if (r.size() == b) r.push_back(i);
        }
    WeightSeries out;
    for (const auto& blk : blocks) out.dims += blk.dims;
    for (const auto& [t, idx] : rows) {
        if (idx.size() != blocks.size()) continue;
        out.t_index.push_back(t);
        for (std::size_t b = 0; b < blocks.size(); ++b) {
            const auto r = blocks[b].row(idx[b]);
            out.values.insert(out.values.end(), r.begin(), r.end());
        }
    }
    return out;
}

inline void write_weights(std::ostream& os, const WeightSeries& w) {
    os << "t";
    for (std::size_t k = 0; k < w.dims; ++k) os << ",w" << k + 1;
    os << '\n';
    for (std::size_t i = 0; i < w.size(); ++i) {
        os << w.t_index[i];
        for (std::size_t k = 0; k < w.dims; ++k) os << ',' << format_double(w(i, k));
        os << '\n';
    }
}

} // namespace nlbss
