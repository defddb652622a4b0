#pragma once

// Factorization check on transformed data: cross-correlations of powers of
// marginally Gaussianized positions and velocities, plus rank correlations.

#include "nlbss/coordinate_map.hpp"
#include "nlbss/core.hpp"
#include "nlbss/numeric.hpp"

#include <array>
#include <cmath>
#include <limits>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

namespace nlbss {

using MomentTable = std::array<std::array<double, 3>, 3>;

struct IndependenceReport {
    std::size_t first = 0, second = 1; // component pair the tables belong to
    MomentTable position{};            // corr(g^p, h^q), p, q = 1..3
    MomentTable velocity{};
    double spearman_position = 0.0;
    double spearman_velocity = 0.0;
    double max_stat = 0.0;
    std::string max_entry;
    double threshold = 0.05;
    bool verdict = false;
    double fluctuation = 0.0; // 3 / sqrt(samples)
    std::size_t samples = 0;
};

namespace detail {

inline std::vector<double> powers(const std::vector<double>& z, int p) {
    std::vector<double> out(z.size());
    for (std::size_t i = 0; i < z.size(); ++i) out[i] = std::pow(z[i], p);
    return out;
}

} // namespace detail

/// Rows t with u(t-1), u(t), u(t+1) all finite contribute a position u(t)
/// and a central-difference velocity. Each component is mapped to rank
/// normal scores before taking powers, so every entry is invariant under
/// strictly monotone remapping of a component. Reports the pair with the
/// largest statistic.
inline IndependenceReport independence_stats(const USeries& u, double threshold = 0.05) {
    const std::size_t n = u.dims, total = u.size();
    if (n < 2) throw Error(Errc::invalid_argument, "independence needs at least two components");
    std::vector<std::vector<double>> pos(n), vel(n);
    auto row_ok = [&](std::size_t t) {
        for (std::size_t k = 0; k < n; ++k)
            if (!std::isfinite(u(t, k))) return false;
        return true;
    };
    for (std::size_t t = 1; t + 1 < total; ++t) {
        if (!row_ok(t - 1) || !row_ok(t) || !row_ok(t + 1)) continue;
        for (std::size_t k = 0; k < n; ++k) {
            pos[k].push_back(u(t, k));
            vel[k].push_back((u(t + 1, k) - u(t - 1, k)) * 0.5 * u.rate);
        }
    }
    const std::size_t m = pos[0].size();
    if (m < 1000) throw Error(Errc::precondition, "independence statistics need at least 1000 usable samples");
    std::vector<std::vector<double>> zp(n), zv(n);
    for (std::size_t k = 0; k < n; ++k) {
        if (!(variance(pos[k]) > 0.0) || !(variance(vel[k]) > 0.0))
            throw Error(Errc::degenerate, "component " + std::to_string(k + 1) + " has zero variance");
        zp[k] = normal_scores(pos[k]);
        zv[k] = normal_scores(vel[k]);
    }

    IndependenceReport best;
    best.max_stat = -1.0;
    for (std::size_t a = 0; a < n; ++a)
        for (std::size_t b = a + 1; b < n; ++b) {
            IndependenceReport r;
            r.first = a;
            r.second = b;
            auto note = [&](double v, const std::string& what) {
                if (std::abs(v) > r.max_stat) {
                    r.max_stat = std::abs(v);
                    r.max_entry = what;
                }
            };
            for (int p = 1; p <= 3; ++p) {
                const auto pa = detail::powers(zp[a], p), va = detail::powers(zv[a], p);
                for (int q = 1; q <= 3; ++q) {
                    const double cp = pearson(pa, detail::powers(zp[b], q));
                    const double cv = pearson(va, detail::powers(zv[b], q));
                    r.position[p - 1][q - 1] = cp;
                    r.velocity[p - 1][q - 1] = cv;
                    note(cp, "position(" + std::to_string(p) + "," + std::to_string(q) + ")");
                    note(cv, "velocity(" + std::to_string(p) + "," + std::to_string(q) + ")");
                }
            }
            r.spearman_position = spearman(pos[a], pos[b]);
            r.spearman_velocity = spearman(vel[a], vel[b]);
            note(r.spearman_position, "spearman_position");
            note(r.spearman_velocity, "spearman_velocity");
            if (r.max_stat > best.max_stat) best = r;
        }
    best.threshold = threshold;
    best.samples = m;
    best.fluctuation = 3.0 / std::sqrt(static_cast<double>(m));
    best.verdict = best.max_stat <= threshold;
    return best;
}

struct Verdict {
    bool separable = false;
    std::size_t best = 0; // candidate index of the reported map
    IndependenceReport report;
    std::vector<std::optional<IndependenceReport>> reports; // per candidate
};

/// Evaluates each candidate map on the positions and keeps the one with the
/// smallest statistic; separable when that one passes.
inline Verdict verdict_pipeline(const TimeSeries& x, const std::vector<CoordinateMap>& candidates, double threshold,
                                std::size_t threads = 0) {
    if (candidates.empty()) throw Error(Errc::precondition, "no candidate coordinate maps");
    Verdict v;
    double best = std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < candidates.size(); ++c) {
        std::optional<IndependenceReport> r;
        try {
            r = independence_stats(evaluate_map(candidates[c], x, threads), threshold);
        } catch (const Error& e) {
            if (e.code() != Errc::precondition && e.code() != Errc::degenerate) throw;
        }
        v.reports.push_back(r);
        if (r && r->max_stat < best) {
            best = r->max_stat;
            v.best = c;
            v.report = *r;
        }
    }
    if (!std::isfinite(best)) {
        v.report.threshold = threshold;
        v.report.max_stat = std::numeric_limits<double>::infinity();
        v.report.max_entry = "no usable samples";
    }
    v.separable = std::isfinite(best) && v.report.verdict;
    return v;
}

inline void write_report_text(std::ostream& os, const IndependenceReport& r) {
    os << "components=" << r.first + 1 << "," << r.second + 1 << '\n'
       << "samples=" << r.samples << '\n'
       << "threshold=" << format_double(r.threshold) << '\n'
       << "fluctuation_scale=" << format_double(r.fluctuation) << '\n'
       << "max_stat=" << format_double(r.max_stat) << '\n'
       << "max_entry=" << r.max_entry << '\n'
       << "spearman_position=" << format_double(r.spearman_position) << '\n'
       << "spearman_velocity=" << format_double(r.spearman_velocity) << '\n'
       << "verdict=" << (r.verdict ? "separable" : "inseparable") << '\n';
}

inline void write_report_csv(std::ostream& os, const IndependenceReport& r) {
    os << "table,p,q,value\n";
    for (int p = 0; p < 3; ++p)
        for (int q = 0; q < 3; ++q) {
            os << "position," << p + 1 << ',' << q + 1 << ',' << format_double(r.position[p][q]) << '\n';
            os << "velocity," << p + 1 << ',' << q + 1 << ',' << format_double(r.velocity[p][q]) << '\n';
        }
    os << "spearman_position,0,0," << format_double(r.spearman_position) << '\n';
    os << "spearman_velocity,0,0," << format_double(r.spearman_velocity) << '\n';
}

} // namespace nlbss
