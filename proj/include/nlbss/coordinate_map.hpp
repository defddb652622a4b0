#pragma once

// Streamline integration of the aligned direction fields and the separable
// coordinate map u(x) built from two reference curves through a base point.

#include "nlbss/core.hpp"
#include "nlbss/local_frames.hpp"
#include "nlbss/parallel.hpp"
#include "nlbss/phase_binning.hpp"
#include "nlbss/weights.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <optional>
#include <ostream>
#include <span>
#include <vector>

namespace nlbss {

struct Streamline {
    std::vector<Vector> points;
    std::vector<double> param; // signed arc length, strictly monotone

    std::size_t size() const noexcept { return points.size(); }
};

struct TraceOptions {
    double step = 0.01;
    std::size_t max_steps = 10000;
    int max_halvings = 6; // near the support edge the step may shrink to step / 2^6
};

/// Classical RK4 on a unit direction field. `field(x)` returns the
/// direction or nullopt where undefined. Integration stops at `max_param`,
/// after max_steps, or when no step of at least step / 2^max_halvings stays
/// inside the defined region.
template <class Field>
Streamline trace_streamline(Field&& field, const Vector& start, int direction, double max_param,
                            const TraceOptions& opts) {
    if (!(opts.step > 0.0)) throw Error(Errc::invalid_argument, "integration step must be positive");
    const double sgn = direction < 0 ? -1.0 : 1.0;
    Streamline line;
    line.points.push_back(start);
    line.param.push_back(0.0);
    auto f = [&](const Vector& y) -> std::optional<Vector> {
        auto v = field(y);
        if (!v) return std::nullopt;
        return Vector(sgn * *v);
    };
    auto rk4 = [&](const Vector& y, double h) -> std::optional<Vector> {
        const auto k1 = f(y);
        if (!k1) return std::nullopt;
        const auto k2 = f(y + 0.5 * h * *k1);
        if (!k2) return std::nullopt;
        const auto k3 = f(y + 0.5 * h * *k2);
        if (!k3) return std::nullopt;
        const auto k4 = f(y + h * *k3);
        if (!k4) return std::nullopt;
        return Vector(y + (h / 6.0) * (*k1 + 2.0 * *k2 + 2.0 * *k3 + *k4));
    };
    const double h_min = std::ldexp(opts.step, -opts.max_halvings);
    Vector x = start;
    double p = 0.0;
    for (std::size_t n = 0; n < opts.max_steps && p < max_param * (1.0 - 1e-12); ++n) {
        double h = std::min(opts.step, max_param - p);
        auto next = rk4(x, h);
        while (!next && h > h_min) {
            h *= 0.5;
            next = rk4(x, h);
        }
        if (!next) break;
        x = *next;
        p += h;
        line.points.push_back(x);
        line.param.push_back(sgn * p);
    }
    return line;
}

/// Backward and forward traces joined into one polyline ordered by parameter.
template <class Field>
Streamline trace_both(Field&& field, const Vector& start, double max_param, const TraceOptions& opts) {
    const auto fwd = trace_streamline(field, start, +1, max_param, opts);
    const auto bwd = trace_streamline(field, start, -1, max_param, opts);
    Streamline out;
    for (std::size_t i = bwd.size(); i-- > 1;) {
        out.points.push_back(bwd.points[i]);
        out.param.push_back(bwd.param[i]);
    }
    out.points.insert(out.points.end(), fwd.points.begin(), fwd.points.end());
    out.param.insert(out.param.end(), fwd.param.begin(), fwd.param.end());
    return out;
}

/// Field-backed trace of V column `group[0]`; the start must lie in the grid.
inline Streamline trace_streamline(const FrameField& field, const Vector& start, const IndexSet& group, int direction,
                                   double max_param, const TraceOptions& opts) {
    if (group.size() != 1) throw Error(Errc::unsupported, "streamlines are traced for single-index groups");
    if (static_cast<std::size_t>(start.size()) != field.dims() ||
        !field.geometry.contains(std::span<const double>(start.data(), field.dims())))
        throw Error(Errc::out_of_bounds, "streamline start lies outside the frame field");
    const std::size_t column = group[0];
    return trace_streamline([&](const Vector& y) { return try_field_at(field, y, column); }, start, direction,
                            max_param, opts);
}

// ---------------------------------------------------------------------------
// Crossing of a traced curve with a reference curve (planar)

namespace detail {

inline double cross2(double ax, double ay, double bx, double by) { return ax * by - ay * bx; }

/// Parameter on `ref` where `line` meets it: the segment intersection with
/// the smallest |line parameter|, else the closest vertex-to-segment
/// approach if it is within `tol`.
inline std::optional<double> crossing_param(const Streamline& line, const Streamline& ref, double tol) {
    if (ref.size() < 2 || line.size() == 0) return std::nullopt;
    std::optional<double> found;
    double best_line = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i + 1 < line.size(); ++i) {
        const Vector& p = line.points[i];
        const Vector r = line.points[i + 1] - p;
        const double px0 = std::min(p(0), p(0) + r(0)), px1 = std::max(p(0), p(0) + r(0));
        const double py0 = std::min(p(1), p(1) + r(1)), py1 = std::max(p(1), p(1) + r(1));
        for (std::size_t j = 0; j + 1 < ref.size(); ++j) {
            const Vector& q = ref.points[j];
            const Vector s = ref.points[j + 1] - q;
            if (std::max(q(0), q(0) + s(0)) < px0 || std::min(q(0), q(0) + s(0)) > px1 ||
                std::max(q(1), q(1) + s(1)) < py0 || std::min(q(1), q(1) + s(1)) > py1)
                continue;
            const double rxs = cross2(r(0), r(1), s(0), s(1));
            if (std::abs(rxs) < 1e-300) continue;
            const Vector qp = q - p;
            const double t = cross2(qp(0), qp(1), s(0), s(1)) / rxs;
            const double u = cross2(qp(0), qp(1), r(0), r(1)) / rxs;
            if (t < 0.0 || t > 1.0 || u < 0.0 || u > 1.0) continue;
            const double lp = std::abs(line.param[i] + t * (line.param[i + 1] - line.param[i]));
            if (lp < best_line) {
                best_line = lp;
                found = ref.param[j] + u * (ref.param[j + 1] - ref.param[j]);
            }
        }
    }
    if (found) return found;

    double best_d = std::numeric_limits<double>::infinity();
    double best_param = 0.0;
    for (const Vector& v : line.points)
        for (std::size_t j = 0; j + 1 < ref.size(); ++j) {
            const Vector s = ref.points[j + 1] - ref.points[j];
            const double len2 = s.squaredNorm();
            const double u = len2 > 0.0 ? std::clamp((v - ref.points[j]).dot(s) / len2, 0.0, 1.0) : 0.0;
            const double d = (ref.points[j] + u * s - v).norm();
            if (d < best_d) {
                best_d = d;
                best_param = ref.param[j] + u * (ref.param[j + 1] - ref.param[j]);
            }
        }
    if (best_d < tol) return best_param;
    return std::nullopt;
}

} // namespace detail

// ---------------------------------------------------------------------------
// Coordinate map

struct MapOptions {
    double step_fraction = 0.01;   // RK4 step as a fraction of the domain diagonal
    std::size_t max_steps = 10000; // per trace direction
    double length_fraction = 2.0;  // max trace length per direction, fraction of the diagonal
    double cross_tol = 0.25;       // closest-approach acceptance, in bin widths
    std::size_t threads = 0;
};

struct CoordinateMap {
    std::vector<std::size_t> nodes_per_dim; // bins + 1 (bin-corner lattice)
    std::vector<double> lo, hi;
    double bin_width = 0.0; // smallest grid bin width
    double step = 0.0;
    Vector x0;
    Partition partition;
    std::array<std::size_t, 2> columns{0, 1}; // V column per u component
    Streamline gamma1, gamma2;
    std::vector<double> u;          // 2 per node, NaN where undefined
    std::vector<bool> in_support;   // node touches a valid bin

    std::size_t node_count() const { return u.size() / 2; }
    Vector node(std::size_t i) const {
        Vector x(2);
        const std::size_t a = i / nodes_per_dim[1], b = i % nodes_per_dim[1];
        x(0) = lo[0] + static_cast<double>(a) * spacing(0);
        x(1) = lo[1] + static_cast<double>(b) * spacing(1);
        return x;
    }
    double spacing(std::size_t k) const { return (hi[k] - lo[k]) / static_cast<double>(nodes_per_dim[k] - 1); }
    bool defined(std::size_t i) const { return std::isfinite(u[2 * i]) && std::isfinite(u[2 * i + 1]); }

    /// Share of in-support nodes with both coordinates defined.
    double defined_fraction() const {
        std::size_t support = 0, ok = 0;
        for (std::size_t i = 0; i < node_count(); ++i)
            if (in_support[i]) {
                ++support;
                if (defined(i)) ++ok;
            }
        return support ? static_cast<double>(ok) / static_cast<double>(support) : 0.0;
    }
};

inline TraceOptions map_trace_options(const GridGeometry& geo, const MapOptions& opts) {
    return {opts.step_fraction * geo.diagonal(), opts.max_steps, 6};
}

/// u1 at a node is the position, along the group-1 reference curve through
/// x0, where the group-2 streamline through the node meets it; u2
/// symmetrically. Both are arc length from x0.
inline CoordinateMap build_map(const FrameField& field, const Partition& partition, const Vector& x0,
                               const MapOptions& opts = {}) {
    const auto& geo = field.geometry;
    if (geo.dims() != 2 || partition.first.size() != 1 || partition.second.size() != 1)
        throw Error(Errc::unsupported, "coordinate maps are built for two one-dimensional groups");
    if (x0.size() != 2) throw Error(Errc::shape_mismatch, "base point must be two-dimensional");
    const auto bin0 = geo.locate(x0);
    if (!bin0) throw Error(Errc::out_of_bounds, "base point lies outside the frame field");
    if (!field.frames[*bin0].valid) throw Error(Errc::invalid_bin, "base point lies in an invalid bin");
    if (!(opts.step_fraction > 0.0) || !(opts.cross_tol > 0.0) || !(opts.length_fraction > 0.0))
        throw Error(Errc::invalid_argument, "map tolerances must be positive");

    CoordinateMap map;
    map.nodes_per_dim = {geo.bins(0) + 1, geo.bins(1) + 1};
    map.lo = geo.lower();
    map.hi = geo.upper();
    map.bin_width = geo.min_width();
    map.x0 = x0;
    map.partition = partition;
    map.columns = {partition.first[0], partition.second[0]};
    const auto trace = map_trace_options(geo, opts);
    map.step = trace.step;
    const double max_param = opts.length_fraction * geo.diagonal();
    const double tol = opts.cross_tol * map.bin_width;

    auto dir = [&](std::size_t column) {
        return [&field, column](const Vector& y) { return try_field_at(field, y, column); };
    };
    map.gamma1 = trace_both(dir(map.columns[0]), x0, max_param, trace);
    map.gamma2 = trace_both(dir(map.columns[1]), x0, max_param, trace);
    if (map.gamma1.size() < 2 || map.gamma2.size() < 2)
        throw Error(Errc::degenerate, "reference curve through the base point has fewer than 2 vertices");

    const std::size_t nodes = map.nodes_per_dim[0] * map.nodes_per_dim[1];
    map.u.assign(2 * nodes, std::numeric_limits<double>::quiet_NaN());
    map.in_support.assign(nodes, false);
    for (std::size_t i = 0; i < nodes; ++i) {
        const std::size_t a = i / map.nodes_per_dim[1], b = i % map.nodes_per_dim[1];
        for (std::size_t da = 0; da < 2; ++da)
            for (std::size_t db = 0; db < 2; ++db) {
                if (a + da == 0 || b + db == 0 || a + da > geo.bins(0) || b + db > geo.bins(1)) continue;
                const std::array<std::size_t, 2> idx{a + da - 1, b + db - 1};
                if (field.frames[geo.flat(idx)].valid) map.in_support[i] = true;
            }
    }
    parallel_for(nodes, opts.threads, [&](std::size_t i) {
        const Vector p = map.node(i);
        const auto across2 = trace_both(dir(map.columns[1]), p, max_param, trace);
        if (auto v = detail::crossing_param(across2, map.gamma1, tol)) map.u[2 * i] = *v;
        const auto across1 = trace_both(dir(map.columns[0]), p, max_param, trace);
        if (auto v = detail::crossing_param(across1, map.gamma2, tol)) map.u[2 * i + 1] = *v;
    });
    return map;
}

/// Samples of u along a series; rows are NaN where dropped.
struct USeries {
    std::size_t dims = 2;
    double rate = 1.0;
    std::vector<double> values;
    std::size_t dropped = 0;

    std::size_t size() const noexcept { return values.size() / dims; }
    double operator()(std::size_t t, std::size_t k) const { return values[t * dims + k]; }
    std::vector<double> column(std::size_t k) const {
        std::vector<double> out(size());
        for (std::size_t t = 0; t < size(); ++t) out[t] = (*this)(t, k);
        return out;
    }
};

/// Bilinear interpolation of node values at one point; nullopt if the point
/// is outside the lattice or either component has no defined stencil node.
inline std::optional<std::array<double, 2>> map_at(const CoordinateMap& map, std::span<const double> x) {
    std::array<std::ptrdiff_t, 2> base{};
    std::array<double, 2> frac{};
    for (std::size_t k = 0; k < 2; ++k) {
        if (!(x[k] >= map.lo[k] && x[k] <= map.hi[k])) return std::nullopt;
        const double c = (x[k] - map.lo[k]) / map.spacing(k);
        const auto last = static_cast<std::ptrdiff_t>(map.nodes_per_dim[k]) - 2;
        base[k] = std::clamp<std::ptrdiff_t>(static_cast<std::ptrdiff_t>(std::floor(c)), 0, last);
        frac[k] = c - static_cast<double>(base[k]);
    }
    std::array<double, 2> acc{0.0, 0.0}, total{0.0, 0.0};
    for (int da = 0; da < 2; ++da)
        for (int db = 0; db < 2; ++db) {
            const double w = (da ? frac[0] : 1.0 - frac[0]) * (db ? frac[1] : 1.0 - frac[1]);
            if (!(w > 0.0)) continue;
            const auto node = static_cast<std::size_t>(base[0] + da) * map.nodes_per_dim[1] +
                              static_cast<std::size_t>(base[1] + db);
            for (std::size_t k = 0; k < 2; ++k) {
                const double v = map.u[2 * node + k];
                if (!std::isfinite(v)) continue;
                acc[k] += w * v;
                total[k] += w;
            }
        }
    if (!(total[0] > 1e-12) || !(total[1] > 1e-12)) return std::nullopt;
    return std::array<double, 2>{acc[0] / total[0], acc[1] / total[1]};
}

inline USeries evaluate_map(const CoordinateMap& map, const TimeSeries& x, std::size_t threads = 0) {
    if (x.channels() != 2) throw Error(Errc::shape_mismatch, "coordinate map expects two-channel positions");
    if (std::none_of(map.u.begin(), map.u.end(), [](double v) { return std::isfinite(v); }))
        throw Error(Errc::precondition, "coordinate map has no defined nodes");
    USeries out;
    out.rate = x.rate();
    out.values.assign(2 * x.size(), std::numeric_limits<double>::quiet_NaN());
    parallel_for(x.size(), threads, [&](std::size_t t) {
        if (auto u = map_at(map, x.sample(t))) {
            out.values[2 * t] = (*u)[0];
            out.values[2 * t + 1] = (*u)[1];
        }
    });
    for (std::size_t t = 0; t < x.size(); ++t)
        if (!std::isfinite(out.values[2 * t])) ++out.dropped;
    return out;
}

struct MapCurve {
    int family; // 1: constant u1, 2: constant u2
    double level;
    Streamline line;
};

/// Curves of constant u1 (group-2 streamlines crossing the first reference
/// curve at evenly spaced u1) and of constant u2.
inline std::vector<MapCurve> constant_u_curves(const CoordinateMap& map, const FrameField& field,
                                               std::size_t per_family = 9, const MapOptions& opts = {}) {
    std::vector<MapCurve> out;
    const auto trace = map_trace_options(field.geometry, opts);
    const double max_param = opts.length_fraction * field.geometry.diagonal();
    for (int family = 1; family <= 2; ++family) {
        const auto& ref = family == 1 ? map.gamma1 : map.gamma2;
        const std::size_t column = map.columns[family == 1 ? 1 : 0];
        const double lo = ref.param.front(), hi = ref.param.back();
        for (std::size_t c = 0; c < per_family; ++c) {
            const double level = lo + (hi - lo) * (static_cast<double>(c) + 0.5) / static_cast<double>(per_family);
            const auto it = std::upper_bound(ref.param.begin(), ref.param.end(), level);
            const std::size_t j = std::clamp<std::size_t>(static_cast<std::size_t>(it - ref.param.begin()), 1,
                                                          ref.size() - 1);
            const double span = ref.param[j] - ref.param[j - 1];
            const double t = span > 0.0 ? (level - ref.param[j - 1]) / span : 0.0;
            const Vector start = ref.points[j - 1] + t * (ref.points[j] - ref.points[j - 1]);
            out.push_back({family, level,
                           trace_both([&](const Vector& y) { return try_field_at(field, y, column); }, start,
                                      max_param, trace)});
        }
    }
    return out;
}

inline void write_map_grid(std::ostream& os, const CoordinateMap& map) {
    os << "node,x1,x2,u1,u2,defined,in_support\n";
    for (std::size_t i = 0; i < map.node_count(); ++i) {
        const Vector p = map.node(i);
        os << i << ',' << format_double(p(0)) << ',' << format_double(p(1)) << ','
           << (std::isfinite(map.u[2 * i]) ? format_double(map.u[2 * i]) : "nan") << ','
           << (std::isfinite(map.u[2 * i + 1]) ? format_double(map.u[2 * i + 1]) : "nan") << ','
           << (map.defined(i) ? 1 : 0) << ',' << (map.in_support[i] ? 1 : 0) << '\n';
    }
}

inline void write_map_curves(std::ostream& os, const std::vector<MapCurve>& curves) {
    os << "family,level,vertex,x1,x2\n";
    for (const auto& c : curves)
        for (std::size_t v = 0; v < c.line.size(); ++v)
            os << c.family << ',' << format_double(c.level) << ',' << v << ','
               << format_double(c.line.points[v](0)) << ',' << format_double(c.line.points[v](1)) << '\n';
}

} // namespace nlbss
