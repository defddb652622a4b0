#pragma once

// Velocity estimation, rectangular binning of x-space and per-bin centered
// second- and fourth-order velocity moments.

#include "nlbss/core.hpp"
#include "nlbss/numeric.hpp"
#include "nlbss/parallel.hpp"
#include "nlbss/signal_io.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <optional>
#include <span>
#include <vector>

namespace nlbss {

struct PhaseSample {
    std::size_t t_index;
    Vector x;
    Vector v;
};

/// Structure-of-arrays phase samples (x, xdot), row-major per sample.
class PhaseSeries {
public:
    PhaseSeries() = default;
    PhaseSeries(std::size_t dims, double rate) : dims_(dims), rate_(rate) {}

    void push(std::size_t t, std::span<const double> x, std::span<const double> v) {
        t_.push_back(t);
        x_.insert(x_.end(), x.begin(), x.end());
        v_.insert(v_.end(), v.begin(), v.end());
    }

    std::size_t dims() const noexcept { return dims_; }
    double rate() const noexcept { return rate_; }
    std::size_t size() const noexcept { return t_.size(); }
    bool empty() const noexcept { return t_.empty(); }

    std::size_t t_index(std::size_t i) const { return t_[i]; }
    std::span<const double> x(std::size_t i) const { return {x_.data() + i * dims_, dims_}; }
    std::span<const double> v(std::size_t i) const { return {v_.data() + i * dims_, dims_}; }
    Eigen::Map<const Vector> xv(std::size_t i) const {
        return {x_.data() + i * dims_, static_cast<Eigen::Index>(dims_)};
    }
    Eigen::Map<const Vector> vv(std::size_t i) const {
        return {v_.data() + i * dims_, static_cast<Eigen::Index>(dims_)};
    }
    PhaseSample at(std::size_t i) const { return {t_[i], xv(i), vv(i)}; }

    const std::vector<std::size_t>& t_indices() const noexcept { return t_; }
    const std::vector<double>& positions() const noexcept { return x_; }
    const std::vector<double>& velocities() const noexcept { return v_; }

private:
    std::size_t dims_ = 0;
    double rate_ = 1.0;
    std::vector<std::size_t> t_;
    std::vector<double> x_;
    std::vector<double> v_;
};

/// Central differences v(t) = (x(t+1) - x(t-1)) * rate / 2 for t in [1, T-2].
inline PhaseSeries estimate_velocity(const TimeSeries& series) {
    if (series.size() < 3) throw Error(Errc::invalid_argument, "velocity estimation needs T >= 3");
    const std::size_t n = series.channels();
    PhaseSeries out(n, series.rate());
    std::vector<double> v(n);
    const double half_rate = 0.5 * series.rate();
    for (std::size_t t = 1; t + 1 < series.size(); ++t) {
        for (std::size_t k = 0; k < n; ++k) v[k] = (series(t + 1, k) - series(t - 1, k)) * half_rate;
        out.push(t, series.sample(t), v);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Fully symmetric 4-index tensor, one value per index multiset.

class SymmetricTensor4 {
public:
    SymmetricTensor4() = default;
    explicit SymmetricTensor4(std::size_t dims) : dims_(dims) {
        const std::size_t n4 = dims * dims * dims * dims;
        lookup_.assign(n4, 0);
        for (std::size_t a = 0; a < dims; ++a)
            for (std::size_t b = a; b < dims; ++b)
                for (std::size_t c = b; c < dims; ++c)
                    for (std::size_t d = c; d < dims; ++d) multisets_.push_back({a, b, c, d});
        for (std::size_t f = 0; f < n4; ++f) {
            std::array<std::size_t, 4> idx{f / (dims * dims * dims), (f / (dims * dims)) % dims, (f / dims) % dims,
                                           f % dims};
            std::sort(idx.begin(), idx.end());
            lookup_[f] = static_cast<std::size_t>(
                std::lower_bound(multisets_.begin(), multisets_.end(), idx) - multisets_.begin());
        }
        values_.assign(multisets_.size(), 0.0);
    }

    /// Builds from a dense dims^4 array (row-major). Throws Errc::not_symmetric
    /// if any two permuted entries differ by more than rel_tol * max|entry|.
    static SymmetricTensor4 from_full(std::span<const double> full, std::size_t dims, double rel_tol = 1e-12) {
        SymmetricTensor4 t(dims);
        if (full.size() != t.lookup_.size()) throw Error(Errc::shape_mismatch, "dense tensor has wrong size");
        double scale = 0.0;
        for (double v : full) scale = std::max(scale, std::abs(v));
        std::vector<bool> seen(t.values_.size(), false);
        for (std::size_t f = 0; f < full.size(); ++f) {
            const std::size_t m = t.lookup_[f];
            if (!seen[m]) {
                t.values_[m] = full[f];
                seen[m] = true;
            } else if (std::abs(t.values_[m] - full[f]) > rel_tol * scale) {
                throw Error(Errc::not_symmetric, "fourth-order tensor is not fully symmetric");
            }
        }
        return t;
    }

    std::size_t dims() const noexcept { return dims_; }
    std::size_t size() const noexcept { return values_.size(); }
    const std::vector<std::array<std::size_t, 4>>& multisets() const noexcept { return multisets_; }

    double operator()(std::size_t a, std::size_t b, std::size_t c, std::size_t d) const {
        return values_[lookup_[((a * dims_ + b) * dims_ + c) * dims_ + d]];
    }
    double& value(std::size_t multiset) { return values_[multiset]; }
    double value(std::size_t multiset) const { return values_[multiset]; }
    const std::vector<double>& values() const noexcept { return values_; }

    std::vector<double> full() const {
        std::vector<double> out(lookup_.size());
        for (std::size_t f = 0; f < out.size(); ++f) out[f] = values_[lookup_[f]];
        return out;
    }

    /// K_ab = sum_cd G_cd T_abcd.
    Matrix contract(const Matrix& g) const {
        const auto n = static_cast<Eigen::Index>(dims_);
        Matrix k = Matrix::Zero(n, n);
        for (Eigen::Index a = 0; a < n; ++a)
            for (Eigen::Index b = a; b < n; ++b) {
                double s = 0.0;
                for (Eigen::Index c = 0; c < n; ++c)
                    for (Eigen::Index d = 0; d < n; ++d)
                        s += g(c, d) * (*this)(static_cast<std::size_t>(a), static_cast<std::size_t>(b),
                                               static_cast<std::size_t>(c), static_cast<std::size_t>(d));
                k(a, b) = s;
                k(b, a) = s;
            }
        return k;
    }

private:
    std::size_t dims_ = 0;
    std::vector<std::array<std::size_t, 4>> multisets_;
    std::vector<std::size_t> lookup_;
    std::vector<double> values_;
};

// ---------------------------------------------------------------------------
// Grid

/// Axis-aligned box split into bins; flat index is row-major with the last
/// dimension fastest.
class GridGeometry {
public:
    GridGeometry() = default;
    GridGeometry(std::vector<std::size_t> bins, std::vector<double> lo, std::vector<double> hi)
        : bins_(std::move(bins)), lo_(std::move(lo)), hi_(std::move(hi)) {
        if (bins_.empty() || bins_.size() != lo_.size() || bins_.size() != hi_.size())
            throw Error(Errc::shape_mismatch, "grid geometry dimensions disagree");
        for (std::size_t k = 0; k < bins_.size(); ++k) {
            if (bins_[k] < 1) throw Error(Errc::invalid_argument, "grid needs at least one bin per dimension");
            if (!(hi_[k] > lo_[k])) throw Error(Errc::invalid_argument, "grid dimension has zero width");
            width_.push_back((hi_[k] - lo_[k]) / static_cast<double>(bins_[k]));
        }
    }

    std::size_t dims() const noexcept { return bins_.size(); }
    std::size_t bins(std::size_t k) const { return bins_[k]; }
    const std::vector<std::size_t>& bins() const noexcept { return bins_; }
    double lo(std::size_t k) const { return lo_[k]; }
    double hi(std::size_t k) const { return hi_[k]; }
    const std::vector<double>& lower() const noexcept { return lo_; }
    const std::vector<double>& upper() const noexcept { return hi_; }
    double width(std::size_t k) const { return width_[k]; }
    double min_width() const { return *std::min_element(width_.begin(), width_.end()); }
    double diagonal() const {
        double s = 0.0;
        for (std::size_t k = 0; k < dims(); ++k) s += (hi_[k] - lo_[k]) * (hi_[k] - lo_[k]);
        return std::sqrt(s);
    }

    std::size_t total() const {
        std::size_t n = 1;
        for (auto b : bins_) n *= b;
        return n;
    }

    std::size_t flat(std::span<const std::size_t> idx) const {
        std::size_t f = 0;
        for (std::size_t k = 0; k < dims(); ++k) f = f * bins_[k] + idx[k];
        return f;
    }
    std::vector<std::size_t> unflat(std::size_t f) const {
        std::vector<std::size_t> idx(dims());
        for (std::size_t k = dims(); k-- > 0;) {
            idx[k] = f % bins_[k];
            f /= bins_[k];
        }
        return idx;
    }
    Vector center(std::size_t f) const {
        const auto idx = unflat(f);
        Vector c(static_cast<Eigen::Index>(dims()));
        for (std::size_t k = 0; k < dims(); ++k)
            c(static_cast<Eigen::Index>(k)) = lo_[k] + (static_cast<double>(idx[k]) + 0.5) * width_[k];
        return c;
    }

    bool contains(std::span<const double> x) const {
        for (std::size_t k = 0; k < dims(); ++k)
            if (!(x[k] >= lo_[k] && x[k] <= hi_[k])) return false;
        return true;
    }

    /// Containing bin, or nullopt outside [lo, hi]. The upper face belongs to
    /// the last bin.
    std::optional<std::size_t> locate(std::span<const double> x) const {
        if (x.size() != dims()) throw Error(Errc::shape_mismatch, "point dimension does not match grid");
        std::size_t f = 0;
        for (std::size_t k = 0; k < dims(); ++k) {
            if (!(x[k] >= lo_[k] && x[k] <= hi_[k])) return std::nullopt;
            auto i = static_cast<std::size_t>((x[k] - lo_[k]) / width_[k]);
            i = std::min(i, bins_[k] - 1);
            f = f * bins_[k] + i;
        }
        return f;
    }
    std::optional<std::size_t> locate(const Vector& x) const {
        return locate(std::span<const double>(x.data(), static_cast<std::size_t>(x.size())));
    }

    /// Face-adjacent bins in ascending flat order.
    std::vector<std::size_t> neighbours(std::size_t f) const {
        const auto idx = unflat(f);
        std::vector<std::size_t> out;
        for (std::size_t k = 0; k < dims(); ++k) {
            auto j = idx;
            if (idx[k] > 0) {
                j[k] = idx[k] - 1;
                out.push_back(flat(j));
            }
            if (idx[k] + 1 < bins_[k]) {
                j[k] = idx[k] + 1;
                out.push_back(flat(j));
            }
        }
        std::sort(out.begin(), out.end());
        return out;
    }

    /// Squared center-to-center distance; exact for mirrored offsets.
    double center_distance2(std::size_t a, std::size_t b) const {
        const auto ia = unflat(a), ib = unflat(b);
        double s = 0.0;
        for (std::size_t k = 0; k < dims(); ++k) {
            const double d = (static_cast<double>(ia[k]) - static_cast<double>(ib[k])) * width_[k];
            s += d * d;
        }
        return s;
    }

    /// `f` itself when valid, else the valid bin with the nearest center
    /// (lowest flat index among equals). Throws Errc::no_valid_bins.
    std::size_t nearest_valid(std::size_t f, const std::vector<bool>& valid) const {
        if (valid.at(f)) return f;
        std::optional<std::size_t> best;
        double best_d = std::numeric_limits<double>::infinity();
        for (std::size_t g = 0; g < valid.size(); ++g) {
            if (!valid[g]) continue;
            const double d = center_distance2(f, g);
            if (d < best_d) {
                best_d = d;
                best = g;
            }
        }
        if (!best) throw Error(Errc::no_valid_bins, "grid has no valid bins");
        return *best;
    }

private:
    std::vector<std::size_t> bins_;
    std::vector<double> lo_, hi_, width_;
};

struct BinStats {
    std::size_t count = 0;
    Vector mean;           // mean velocity
    Matrix c2;             // centered second moment
    SymmetricTensor4 c4;   // centered fourth moment
    double centered_first = 0.0; // max |mean of centered velocity|, ~0 by construction
    bool valid = false;
};

struct GridSpec {
    std::vector<std::size_t> bins_per_dim{16}; // one entry broadcasts to all dimensions
    std::size_t min_count = 50;
    double margin = 1e-6; // fraction of range added on each side
    std::size_t threads = 0;
};

struct BinGrid {
    GridGeometry geometry;
    std::size_t min_count = 0;
    std::vector<BinStats> bins;
    std::size_t in_bounds = 0;

    std::size_t dims() const { return geometry.dims(); }
    std::vector<bool> valid_mask() const {
        std::vector<bool> m(bins.size());
        for (std::size_t i = 0; i < bins.size(); ++i) m[i] = bins[i].valid;
        return m;
    }
    std::size_t valid_count() const {
        return static_cast<std::size_t>(
            std::count_if(bins.begin(), bins.end(), [](const BinStats& b) { return b.valid; }));
    }
    /// Flat index of the highest-count valid bin (lowest index among ties).
    std::size_t densest_valid() const {
        std::optional<std::size_t> best;
        for (std::size_t i = 0; i < bins.size(); ++i)
            if (bins[i].valid && (!best || bins[i].count > bins[*best].count)) best = i;
        if (!best) throw Error(Errc::no_valid_bins, "grid has no valid bins");
        return *best;
    }
};

/// Per-bin velocity moments from a list of member samples. Two passes (mean,
/// then centered products), compensated sums.
inline BinStats bin_moments(const PhaseSeries& samples, std::span<const std::size_t> members, std::size_t min_count) {
    const std::size_t n = samples.dims();
    const auto ni = static_cast<Eigen::Index>(n);
    BinStats b;
    b.count = members.size();
    b.mean = Vector::Zero(ni);
    b.c2 = Matrix::Zero(ni, ni);
    b.c4 = SymmetricTensor4(n);
    b.valid = b.count >= min_count && b.count > 0;
    if (members.empty()) return b;
    const double inv = 1.0 / static_cast<double>(members.size());

    std::vector<NeumaierSum> s1(n);
    for (std::size_t i : members) {
        const auto v = samples.v(i);
        for (std::size_t k = 0; k < n; ++k) s1[k].add(v[k]);
    }
    for (std::size_t k = 0; k < n; ++k) b.mean(static_cast<Eigen::Index>(k)) = s1[k].value() * inv;

    const auto& ms = b.c4.multisets();
    std::vector<NeumaierSum> r1(n), s2(n * n), s4(ms.size());
    std::vector<double> d(n);
    for (std::size_t i : members) {
        const auto v = samples.v(i);
        for (std::size_t k = 0; k < n; ++k) {
            d[k] = v[k] - b.mean(static_cast<Eigen::Index>(k));
            r1[k].add(d[k]);
        }
        for (std::size_t k = 0; k < n; ++k)
            for (std::size_t l = k; l < n; ++l) s2[k * n + l].add(d[k] * d[l]);
        for (std::size_t m = 0; m < ms.size(); ++m) s4[m].add(d[ms[m][0]] * d[ms[m][1]] * d[ms[m][2]] * d[ms[m][3]]);
    }
    for (std::size_t k = 0; k < n; ++k) {
        b.centered_first = std::max(b.centered_first, std::abs(r1[k].value() * inv));
        for (std::size_t l = k; l < n; ++l) {
            const double c = s2[k * n + l].value() * inv;
            b.c2(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(l)) = c;
            b.c2(static_cast<Eigen::Index>(l), static_cast<Eigen::Index>(k)) = c;
        }
    }
    for (std::size_t m = 0; m < ms.size(); ++m) b.c4.value(m) = s4[m].value() * inv;
    return b;
}

/// Bounds from the data widened by `margin` of the range on each side.
inline GridGeometry fit_geometry(const PhaseSeries& samples, const std::vector<std::size_t>& bins_per_dim,
                                 double margin) {
    if (samples.empty()) throw Error(Errc::invalid_argument, "no phase samples to bin");
    const std::size_t n = samples.dims();
    std::vector<std::size_t> bins = bins_per_dim.size() == 1 ? std::vector<std::size_t>(n, bins_per_dim[0])
                                                              : bins_per_dim;
    if (bins.size() != n) throw Error(Errc::shape_mismatch, "bins_per_dim does not match sample dimension");
    for (auto b : bins)
        if (b < 2) throw Error(Errc::invalid_argument, "need at least 2 bins per dimension");
    if (!(margin >= 0.0)) throw Error(Errc::invalid_argument, "margin must be non-negative");
    std::vector<double> lo(n, std::numeric_limits<double>::infinity());
    std::vector<double> hi(n, -std::numeric_limits<double>::infinity());
    for (std::size_t i = 0; i < samples.size(); ++i) {
        const auto x = samples.x(i);
        for (std::size_t k = 0; k < n; ++k) {
            lo[k] = std::min(lo[k], x[k]);
            hi[k] = std::max(hi[k], x[k]);
        }
    }
    for (std::size_t k = 0; k < n; ++k) {
        const double span = hi[k] - lo[k];
        if (!(span > 0.0))
            throw Error(Errc::invalid_argument, "dimension " + std::to_string(k) + " has zero width");
        lo[k] -= margin * span;
        hi[k] += margin * span;
    }
    return {std::move(bins), std::move(lo), std::move(hi)};
}

/// Bins samples on a fixed geometry; out-of-box samples are ignored.
inline BinGrid build_grid(const PhaseSeries& samples, const GridGeometry& geometry, std::size_t min_count,
                          std::size_t threads = 0) {
    if (samples.empty()) throw Error(Errc::invalid_argument, "no phase samples to bin");
    if (samples.dims() != geometry.dims()) throw Error(Errc::shape_mismatch, "sample dimension does not match grid");
    const std::size_t nb = geometry.total();
    std::vector<std::vector<std::size_t>> members(nb);
    BinGrid grid{geometry, min_count, {}, 0};
    for (std::size_t i = 0; i < samples.size(); ++i)
        if (auto f = geometry.locate(samples.x(i))) {
            members[*f].push_back(i);
            ++grid.in_bounds;
        }
    grid.bins.resize(nb);
    parallel_for(nb, threads, [&](std::size_t f) { grid.bins[f] = bin_moments(samples, members[f], min_count); });
    return grid;
}

inline BinGrid build_grid(const PhaseSeries& samples, const GridSpec& spec) {
    return build_grid(samples, fit_geometry(samples, spec.bins_per_dim, spec.margin), spec.min_count, spec.threads);
}

/// Containing bin of x, or its nearest valid bin when that one is invalid.
/// Throws Errc::out_of_bounds outside the grid box.
inline std::size_t bin_lookup(const BinGrid& grid, std::span<const double> x) {
    const auto f = grid.geometry.locate(x);
    if (!f) throw Error(Errc::out_of_bounds, "point lies outside the grid");
    return grid.geometry.nearest_valid(*f, grid.valid_mask());
}

inline std::size_t bin_lookup(const BinGrid& grid, const Vector& x) {
    return bin_lookup(grid, std::span<const double>(x.data(), static_cast<std::size_t>(x.size())));
}

} // namespace nlbss
