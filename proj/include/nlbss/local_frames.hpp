#pragma once

// Local frame matrices M(x): whiten the second moment, then rotate so the
// contracted whitened quartic becomes diagonal. Frames are aligned across
// bins into a continuous field and interpolated as unit direction fields.

#include "nlbss/core.hpp"
#include "nlbss/linalg.hpp"
#include "nlbss/numeric.hpp"
#include "nlbss/parallel.hpp"
#include "nlbss/phase_binning.hpp"

#include <algorithm>
#include <cmath>
#include <optional>
#include <ostream>
#include <set>
#include <span>
#include <vector>

namespace nlbss {

struct FrameOptions {
    double degeneracy_tol = 1e-3; // relative gap between D entries
    double pd_rel_tol = 1e-10;    // PD threshold as a fraction of trace(C2)/N
    std::size_t threads = 0;
};

struct LocalFrame {
    Matrix M;
    Matrix V; // columns of M^-1
    Vector D;
    bool degenerate = false;
    bool valid = false;
    bool filled = false; // M taken from neighbours because D was degenerate
};

/// I2 = M C2 M^T and Q_kl = sum_m I_klmm, the contraction of the transformed
/// quartic.
inline std::pair<Matrix, Matrix> transformed_correlations(const Matrix& M, const Matrix& c2,
                                                          const SymmetricTensor4& c4) {
    const auto n = M.rows();
    if (M.cols() != n || c2.rows() != n || c2.cols() != n || static_cast<Eigen::Index>(c4.dims()) != n)
        throw Error(Errc::shape_mismatch, "frame, covariance and quartic sizes disagree");
    Matrix i2 = M * c2 * M.transpose();
    const Matrix k = c4.contract(M.transpose() * M);
    Matrix q = M * k * M.transpose();
    i2 = 0.5 * (i2 + i2.transpose()).eval();
    q = 0.5 * (q + q.transpose()).eval();
    return {i2, q};
}

inline bool is_degenerate(const Vector& d, double rel_tol) {
    const double scale = d.cwiseAbs().maxCoeff();
    for (Eigen::Index i = 0; i < d.size(); ++i)
        for (Eigen::Index j = i + 1; j < d.size(); ++j)
            if (std::abs(d(i) - d(j)) < rel_tol * scale) return true;
    return false;
}

/// M = E^T Lambda^-1/2 R1^T where C2 = R1 Lambda R1^T and E holds the
/// eigenvectors of the contracted whitened quartic (descending D).
inline LocalFrame build_frame(const Matrix& c2, const SymmetricTensor4& c4, const FrameOptions& opts = {}) {
    const auto n = c2.rows();
    if (c2.cols() != n || static_cast<Eigen::Index>(c4.dims()) != n)
        throw Error(Errc::shape_mismatch, "covariance and quartic sizes disagree");
    if (!c2.allFinite() || !is_symmetric(c2)) throw Error(Errc::not_symmetric, "second moment is not symmetric");
    const auto cov = sorted_eigen(c2);
    const double pd_tol = opts.pd_rel_tol * c2.trace() / static_cast<double>(n);
    if (!(cov.values(n - 1) > pd_tol) || !(pd_tol > 0.0))
        throw Error(Errc::not_positive_definite, "second moment is not positive definite");

    const Vector root = cov.values.cwiseSqrt();
    const Matrix whiten = root.cwiseInverse().asDiagonal() * cov.vectors.transpose();
    Matrix q = whiten * c4.contract(whiten.transpose() * whiten) * whiten.transpose();
    q = 0.5 * (q + q.transpose()).eval();
    const auto quart = sorted_eigen(q);

    LocalFrame f;
    f.M = quart.vectors.transpose() * whiten;
    f.V = cov.vectors * root.asDiagonal() * quart.vectors;
    f.D = quart.values;
    f.degenerate = is_degenerate(f.D, opts.degeneracy_tol);
    f.valid = true;
    return f;
}

/// Frames for every valid bin. Bins whose C2 fails the PD test are marked
/// invalid rather than aborting the whole field.
inline std::vector<LocalFrame> build_frames(const BinGrid& grid, const FrameOptions& opts = {}) {
    std::vector<LocalFrame> frames(grid.bins.size());
    parallel_for(frames.size(), opts.threads, [&](std::size_t f) {
        const auto& b = grid.bins[f];
        if (!b.valid) return;
        try {
            frames[f] = build_frame(b.c2, b.c4, opts);
        } catch (const Error& e) {
            if (e.code() != Errc::not_positive_definite && e.code() != Errc::not_symmetric) throw;
        }
    });
    return frames;
}

// ---------------------------------------------------------------------------
// Alignment

namespace detail {

inline Matrix normalized_rows(const Matrix& m) {
    Matrix out = m;
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
        const double norm = m.row(i).norm();
        if (norm > 0.0) out.row(i) /= norm;
    }
    return out;
}

} // namespace detail

inline constexpr std::size_t max_permutation_width = 8;

/// Signed permutation P maximizing sum_i |ref_i . m_pi(i)| / (|ref_i| |m_pi(i)|),
/// with signs making each matched dot product non-negative.
inline SignedPermutation best_row_match(const Matrix& ref, const Matrix& m) {
    const auto n = static_cast<std::size_t>(m.rows());
    if (n > max_permutation_width) throw Error(Errc::unsupported, "signed-permutation search is capped at 8 rows");
    const Matrix rn = detail::normalized_rows(ref), mn = detail::normalized_rows(m);
    const Matrix cos = rn * mn.transpose();
    std::vector<std::size_t> perm(n), best_perm;
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    double best = -1.0;
    do {
        double s = 0.0;
        for (std::size_t i = 0; i < n; ++i)
            s += std::abs(cos(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(perm[i])));
        if (s > best * (1.0 + 1e-14) + 1e-300) {
            best = s;
            best_perm = perm;
        }
    } while (std::next_permutation(perm.begin(), perm.end()));
    SignedPermutation p{best_perm, std::vector<int>(n, 1)};
    for (std::size_t i = 0; i < n; ++i)
        if (cos(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(best_perm[i])) < 0.0) p.sign[i] = -1;
    return p;
}

struct FrameField {
    GridGeometry geometry;
    std::vector<LocalFrame> frames;
    std::vector<std::size_t> counts;
    std::vector<SignedPermutation> alignment; // applied to the raw frame's rows
    std::vector<Matrix> unit_v;               // unit-normalized V columns per valid bin
    std::vector<std::size_t> redirect;        // nearest valid bin per bin
    std::size_t root = 0;

    std::size_t dims() const { return geometry.dims(); }
    bool valid(std::size_t f) const { return frames[f].valid; }
    std::vector<bool> valid_mask() const {
        std::vector<bool> m(frames.size());
        for (std::size_t i = 0; i < frames.size(); ++i) m[i] = frames[i].valid;
        return m;
    }
    std::size_t valid_count() const {
        return static_cast<std::size_t>(
            std::count_if(frames.begin(), frames.end(), [](const LocalFrame& f) { return f.valid; }));
    }
    std::size_t degenerate_count() const {
        return static_cast<std::size_t>(std::count_if(
            frames.begin(), frames.end(), [](const LocalFrame& f) { return f.valid && f.degenerate; }));
    }
    std::size_t filled_count() const {
        return static_cast<std::size_t>(
            std::count_if(frames.begin(), frames.end(), [](const LocalFrame& f) { return f.filled; }));
    }
    /// Highest-count valid bin, lowest index among ties.
    std::size_t densest_valid() const {
        std::optional<std::size_t> best;
        for (std::size_t i = 0; i < frames.size(); ++i)
            if (frames[i].valid && (!best || counts[i] > counts[*best])) best = i;
        if (!best) throw Error(Errc::no_valid_bins, "frame field has no valid bins");
        return *best;
    }

    /// Recomputes V, unit directions and nearest-valid redirects after the
    /// frames or validity changed.
    void finalize() {
        const std::size_t n = frames.size();
        unit_v.assign(n, Matrix());
        for (std::size_t f = 0; f < n; ++f) {
            auto& fr = frames[f];
            if (!fr.valid) continue;
            fr.V = fr.M.inverse();
            Matrix u = fr.V;
            for (Eigen::Index c = 0; c < u.cols(); ++c) u.col(c).normalize();
            unit_v[f] = u;
        }
        const auto mask = valid_mask();
        if (std::none_of(mask.begin(), mask.end(), [](bool b) { return b; }))
            throw Error(Errc::no_valid_bins, "frame field has no valid bins");
        redirect.assign(n, 0);
        for (std::size_t f = 0; f < n; ++f) redirect[f] = geometry.nearest_valid(f, mask);
    }
};

/// Resolves the per-bin signed-permutation ambiguity. Bins are visited
/// best-first by sample count starting from the densest one; each is matched
/// against the count-weighted normalized rows of its already aligned face
/// neighbours. Degenerate bins take the mean aligned M of their
/// non-degenerate neighbours, or become invalid when they have none.
inline FrameField align_frames(const BinGrid& grid, std::vector<LocalFrame> raw) {
    const std::size_t nb = grid.bins.size();
    if (raw.size() != nb) throw Error(Errc::shape_mismatch, "frame count does not match grid");
    FrameField field;
    field.geometry = grid.geometry;
    field.counts.resize(nb);
    for (std::size_t f = 0; f < nb; ++f) field.counts[f] = grid.bins[f].count;
    field.alignment.assign(nb, SignedPermutation::identity(grid.dims()));

    std::vector<bool> eligible(nb);
    for (std::size_t f = 0; f < nb; ++f) eligible[f] = raw[f].valid && !raw[f].degenerate;
    if (std::none_of(eligible.begin(), eligible.end(), [](bool b) { return b; }))
        for (std::size_t f = 0; f < nb; ++f) eligible[f] = raw[f].valid;
    if (std::none_of(eligible.begin(), eligible.end(), [](bool b) { return b; }))
        throw Error(Errc::no_valid_bins, "no valid bins to align");

    const auto& geo = grid.geometry;
    const auto& counts = field.counts;
    std::vector<bool> aligned(nb, false);
    // Ordered by count descending, then flat index ascending.
    auto before = [&](std::size_t a, std::size_t b) { return counts[a] != counts[b] ? counts[a] > counts[b] : a < b; };
    std::set<std::size_t, decltype(before)> frontier(before);

    auto settle = [&](std::size_t f, const Matrix& ref) {
        const auto p = best_row_match(ref, raw[f].M);
        raw[f].M = p.apply_rows(raw[f].M);
        raw[f].D = p.matrix().cwiseAbs() * raw[f].D;
        field.alignment[f] = p;
        aligned[f] = true;
        for (std::size_t g : geo.neighbours(f))
            if (eligible[g] && !aligned[g]) frontier.insert(g);
    };

    std::optional<std::size_t> root;
    for (std::size_t f = 0; f < nb; ++f)
        if (eligible[f] && (!root || before(f, *root))) root = f;
    field.root = *root;
    aligned[*root] = true;
    for (std::size_t g : geo.neighbours(*root))
        if (eligible[g]) frontier.insert(g);

    while (true) {
        while (!frontier.empty()) {
            const std::size_t f = *frontier.begin();
            frontier.erase(frontier.begin());
            if (aligned[f]) continue;
            const auto n = raw[f].M.rows();
            Matrix ref = Matrix::Zero(n, n);
            for (std::size_t g : geo.neighbours(f))
                if (aligned[g] && eligible[g])
                    ref += static_cast<double>(counts[g]) * detail::normalized_rows(raw[g].M);
            settle(f, ref);
        }
        // Disconnected islands: start from the densest remaining bin and
        // match it against the nearest aligned bin.
        std::optional<std::size_t> next;
        for (std::size_t f = 0; f < nb; ++f)
            if (eligible[f] && !aligned[f] && (!next || before(f, *next))) next = f;
        if (!next) break;
        std::optional<std::size_t> anchor;
        double best_d = 0.0;
        for (std::size_t g = 0; g < nb; ++g) {
            if (!aligned[g]) continue;
            const double d = geo.center_distance2(*next, g);
            if (!anchor || d < best_d) {
                anchor = g;
                best_d = d;
            }
        }
        settle(*next, raw[*anchor].M);
    }

    for (std::size_t f = 0; f < nb; ++f) {
        if (!raw[f].valid || eligible[f]) continue;
        const auto n = raw[f].M.rows();
        Matrix sum = Matrix::Zero(n, n);
        std::size_t used = 0;
        for (std::size_t g : geo.neighbours(f))
            if (eligible[g]) {
                sum += raw[g].M;
                ++used;
            }
        auto& fr = raw[f];
        fr.filled = true;
        if (used == 0) {
            fr.valid = false;
            continue;
        }
        fr.M = sum / static_cast<double>(used);
        const Eigen::JacobiSVD<Matrix> svd(fr.M);
        const auto& sv = svd.singularValues();
        if (!(sv(sv.size() - 1) > 1e-8 * sv(0))) fr.valid = false;
    }
    field.frames = std::move(raw);
    field.finalize();
    return field;
}

inline FrameField make_frame_field(const BinGrid& grid, const FrameOptions& opts = {}) {
    return align_frames(grid, build_frames(grid, opts));
}

// ---------------------------------------------------------------------------
// Interpolated direction field

/// Multilinear interpolation of unit V column `column` over bin centers with
/// invalid bins masked. nullopt outside the grid box or when the stencil has
/// no valid bin.
inline std::optional<Vector> try_field_at(const FrameField& field, std::span<const double> x, std::size_t column) {
    const auto& geo = field.geometry;
    const std::size_t n = geo.dims();
    if (x.size() != n) throw Error(Errc::shape_mismatch, "point dimension does not match field");
    if (column >= n) throw Error(Errc::invalid_argument, "field column out of range");
    if (!geo.contains(x)) return std::nullopt;
    std::vector<std::ptrdiff_t> base(n);
    std::vector<double> frac(n);
    for (std::size_t k = 0; k < n; ++k) {
        const double c = (x[k] - geo.lo(k)) / geo.width(k) - 0.5;
        const double fl = std::floor(c);
        base[k] = static_cast<std::ptrdiff_t>(fl);
        frac[k] = c - fl;
    }
    Vector acc = Vector::Zero(static_cast<Eigen::Index>(n));
    double total = 0.0;
    std::vector<std::size_t> idx(n);
    for (std::size_t corner = 0; corner < (std::size_t{1} << n); ++corner) {
        double w = 1.0;
        for (std::size_t k = 0; k < n; ++k) {
            const bool up = (corner >> (n - 1 - k)) & 1u;
            w *= up ? frac[k] : 1.0 - frac[k];
            const auto i = std::clamp<std::ptrdiff_t>(base[k] + (up ? 1 : 0), 0,
                                                      static_cast<std::ptrdiff_t>(geo.bins(k)) - 1);
            idx[k] = static_cast<std::size_t>(i);
        }
        if (!(w > 0.0)) continue;
        const std::size_t f = geo.flat(idx);
        if (!field.frames[f].valid) continue;
        acc += w * field.unit_v[f].col(static_cast<Eigen::Index>(column));
        total += w;
    }
    if (!(total > 1e-12)) return std::nullopt;
    const double norm = acc.norm();
    if (!(norm > 0.0)) return std::nullopt;
    return Vector(acc / norm);
}

inline std::optional<Vector> try_field_at(const FrameField& field, const Vector& x, std::size_t column) {
    return try_field_at(field, std::span<const double>(x.data(), static_cast<std::size_t>(x.size())), column);
}

/// Checked variant for a single-index group.
inline Vector field_at(const FrameField& field, const Vector& x, const IndexSet& group) {
    if (group.size() != 1) throw Error(Errc::unsupported, "direction fields are defined for single-index groups");
    if (!field.geometry.contains(std::span<const double>(x.data(), static_cast<std::size_t>(x.size()))))
        throw Error(Errc::out_of_bounds, "point lies outside the frame field");
    auto v = try_field_at(field, x, group[0]);
    if (!v) throw Error(Errc::invalid_bin, "no valid bin within the interpolation stencil");
    return *v;
}

/// One row per valid bin: flat index, count, center, then every V column.
inline void write_quiver(std::ostream& os, const FrameField& field) {
    const std::size_t n = field.dims();
    os << "bin,count";
    for (std::size_t k = 0; k < n; ++k) os << ",x" << k + 1;
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t k = 0; k < n; ++k) os << ",v" << i + 1 << "_" << k + 1;
    os << ",degenerate\n";
    for (std::size_t f = 0; f < field.frames.size(); ++f) {
        const auto& fr = field.frames[f];
        if (!fr.valid) continue;
        os << f << ',' << field.counts[f];
        const Vector c = field.geometry.center(f);
        for (Eigen::Index k = 0; k < c.size(); ++k) os << ',' << format_double(c(k));
        for (Eigen::Index i = 0; i < fr.V.cols(); ++i)
            for (Eigen::Index k = 0; k < fr.V.rows(); ++k) os << ',' << format_double(fr.V(k, i));
        os << ',' << (fr.degenerate ? 1 : 0) << '\n';
    }
}

} // namespace nlbss
