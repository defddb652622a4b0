#include "support.hpp"

#include <algorithm>
#include <numbers>
#include <sstream>

using namespace nlbss;
using namespace nlbss::test;

namespace {

// Largest |change| in defined node u when the trace step is halved, in units
// of the bin width.
constexpr double integration_tolerance = 0.02;

Vector vec2(double a, double b) {
    Vector v(2);
    v << a, b;
    return v;
}

FrameField uniform_field(const Matrix& m, std::size_t bins, double half = 1.0) {
    FrameField field;
    field.geometry = GridGeometry({bins, bins}, {-half, -half}, {half, half});
    for (std::size_t f = 0; f < bins * bins; ++f) {
        LocalFrame fr;
        fr.M = m;
        fr.D = vec2(3.0, 1.0);
        fr.valid = true;
        field.frames.push_back(fr);
        field.counts.push_back(100);
        field.alignment.push_back(SignedPermutation::identity(2));
    }
    field.finalize();
    return field;
}

Partition split(std::size_t a, std::size_t b) { return Partition{{a}, {b}, 0.0}; }

double median(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    return v.empty() ? std::numeric_limits<double>::quiet_NaN() : v[v.size() / 2];
}

/// Sources of a normalized mixture point: undo the whitening, then invert the
/// mixing by Newton iteration on the analytic Jacobian.
std::optional<std::array<double, 2>> invert_mixing(const Vector& y, const PcaRecord& pca,
                                                   const MixingParams& mp = {}) {
    const Vector x = pca.rotation * pca.scales.cwiseProduct(y) + pca.mean;
    Vector s = Vector::Zero(2);
    for (int it = 0; it < 60; ++it) {
        const double r1 = mp.radicand1(s(1)), r2 = mp.radicand2(s(0), s(1));
        if (!(r1 > 0.0) || !(r2 > 0.0)) return std::nullopt;
        const auto f = mp.apply(s(0), s(1));
        Vector res = vec2(f[0] - x(0), f[1] - x(1));
        Matrix j(2, 2);
        j << mp.a1, -mp.c1 * mp.p1 * std::pow(r1, mp.p1 - 1.0), -mp.c2 * mp.p2 * std::pow(r2, mp.p2 - 1.0),
            mp.a2 - mp.d2 * mp.p2 * std::pow(r2, mp.p2 - 1.0);
        const Vector ds = j.partialPivLu().solve(res);
        s -= ds;
        if (ds.norm() < 1e-9) return std::array<double, 2>{s(0), s(1)};
    }
    return std::nullopt;
}

Vector forward_mixing(double s1, double s2, const PcaRecord& pca, const MixingParams& mp = {}) {
    const auto f = mp.apply(s1, s2);
    const Vector x = vec2(f[0], f[1]) - pca.mean;
    return (pca.rotation.transpose() * x).cwiseQuotient(pca.scales);
}

std::vector<double> finite_column(const USeries& u, std::size_t k, const TimeSeries* s = nullptr,
                                  std::size_t sk = 0, std::vector<double>* paired = nullptr) {
    std::vector<double> out;
    for (std::size_t t = 0; t < u.size(); ++t) {
        if (!std::isfinite(u(t, 0)) || !std::isfinite(u(t, 1))) continue;
        out.push_back(u(t, k));
        if (s && paired) paired->push_back((*s)(t, sk));
    }
    return out;
}

/// Which source channel tracks u component k, by |Spearman|.
std::size_t matching_source(const USeries& u, const TimeSeries& s, std::size_t k) {
    double best = -1.0;
    std::size_t arg = 0;
    for (std::size_t c = 0; c < 2; ++c) {
        std::vector<double> sv;
        const auto uv = finite_column(u, k, &s, c, &sv);
        const double r = std::abs(spearman(uv, sv));
        if (r > best) {
            best = r;
            arg = c;
        }
    }
    return arg;
}

} // namespace

// ---------------------------------------------------------------------------
// Streamlines

TEST(Trace, ConstantFieldEndsAtExpectedPoint) {
    auto field = [](const Vector&) { return std::optional<Vector>(vec2(0.0, 1.0)); };
    const auto line = trace_streamline(field, vec2(0.2, 0.0), +1, 0.5, TraceOptions{0.01});
    ASSERT_GE(line.size(), 2u);
    EXPECT_NEAR(line.points.back()(0), 0.2, 1e-12);
    EXPECT_NEAR(line.points.back()(1), 0.5, 1e-12);
    EXPECT_NEAR(line.param.back(), 0.5, 1e-12);
}

TEST(Trace, BackwardDirectionNegatesParameter) {
    auto field = [](const Vector&) { return std::optional<Vector>(vec2(0.0, 1.0)); };
    const auto line = trace_streamline(field, vec2(0.2, 0.0), -1, 0.5, TraceOptions{0.01});
    EXPECT_NEAR(line.points.back()(1), -0.5, 1e-12);
    EXPECT_NEAR(line.param.back(), -0.5, 1e-12);
}

TEST(Trace, CircularFieldEndpointIsFourthOrder) {
    auto field = [](const Vector& y) {
        const double r = y.norm();
        return std::optional<Vector>(vec2(-y(1) / r, y(0) / r));
    };
    const double len = std::numbers::pi / 2.0;
    std::vector<double> err;
    for (int n : {8, 16, 32}) {
        const auto line = trace_streamline(field, vec2(1.0, 0.0), +1, len, TraceOptions{len / n, 100000, 0});
        err.push_back((line.points.back() - vec2(0.0, 1.0)).norm());
    }
    ASSERT_GT(err[2], 0.0);
    EXPECT_LT(err[0], 1e-3);
    EXPECT_GE(err[0] / err[1], 12.0);
    EXPECT_GE(err[1] / err[2], 12.0);
    const double order = std::log2(err[0] / err[2]) / 2.0;
    EXPECT_GE(order, 3.5);
    EXPECT_LE(order, 4.5);
}

TEST(Trace, StartOnEdgeHeadingOutwardStops) {
    const auto field = uniform_field(Matrix::Identity(2, 2), 4);
    const auto line = trace_streamline(field, vec2(1.0, 0.0), IndexSet{0}, +1, 1.0, TraceOptions{0.05});
    EXPECT_EQ(line.size(), 1u);
}

TEST(Trace, HalvesStepToApproachEdge) {
    const auto field = uniform_field(Matrix::Identity(2, 2), 4);
    const double step = 0.3;
    const auto line = trace_streamline(field, vec2(0.0, 0.0), IndexSet{0}, +1, 5.0, TraceOptions{step});
    ASSERT_GE(line.size(), 2u);
    EXPECT_LE(1.0 - line.points.back()(0), step / 64.0 + 1e-12);
    EXPECT_LE(line.points.back()(0), 1.0);
}

TEST(Trace, StartOutsideFieldRejected) {
    const auto field = uniform_field(Matrix::Identity(2, 2), 4);
    expect_error(Errc::out_of_bounds,
                 [&] { trace_streamline(field, vec2(1.5, 0.0), IndexSet{0}, +1, 1.0, TraceOptions{0.05}); });
    expect_error(Errc::unsupported,
                 [&] { trace_streamline(field, vec2(0.0, 0.0), IndexSet{0, 1}, +1, 1.0, TraceOptions{0.05}); });
    expect_error(Errc::invalid_argument, [&] {
        trace_streamline([](const Vector& y) { return std::optional<Vector>(y); }, vec2(0, 0), +1, 1.0,
                         TraceOptions{0.0});
    });
}

TEST(DeskTrace, ParameterMonotoneAndSpacingBounded) {
    const auto& a = desk().analysis;
    const auto& map = a.maps.at(a.verdict.best);
    for (const auto* line : {&map.gamma1, &map.gamma2}) {
        ASSERT_GE(line->size(), 2u);
        for (std::size_t i = 1; i < line->size(); ++i) {
            EXPECT_GT(line->param[i], line->param[i - 1]);
            EXPECT_LE((line->points[i] - line->points[i - 1]).norm(), map.step * (1.0 + 1e-9));
        }
    }
}

// ---------------------------------------------------------------------------
// Map construction

TEST(Map, IdentityFramesGiveCartesianCoordinates) {
    const auto field = uniform_field(Matrix::Identity(2, 2), 8);
    const auto map = build_map(field, split(0, 1), vec2(0.0, 0.0));
    ASSERT_EQ(map.node_count(), 81u);
    for (std::size_t i = 0; i < map.node_count(); ++i) {
        ASSERT_TRUE(map.defined(i)) << i;
        EXPECT_TRUE(map.in_support[i]);
        const Vector p = map.node(i);
        const bool edge = std::abs(std::abs(p(0)) - 1.0) < 1e-12 || std::abs(std::abs(p(1)) - 1.0) < 1e-12;
        const double tol = edge ? map.step / 64.0 + 1e-9 : 1e-9;
        EXPECT_NEAR(map.u[2 * i], p(0), tol) << i;
        EXPECT_NEAR(map.u[2 * i + 1], p(1), tol) << i;
    }
    EXPECT_EQ(map.defined_fraction(), 1.0);
}

TEST(Map, RotatedFramesGiveRotatedCoordinates) {
    const double c = std::cos(0.3), s = std::sin(0.3);
    Matrix r(2, 2);
    r << c, s, -s, c;
    const auto field = uniform_field(r, 8, 4.0);
    const auto map = build_map(field, split(0, 1), vec2(0.0, 0.0));
    const Matrix v = r.inverse();
    std::size_t checked = 0;
    for (std::size_t i = 0; i < map.node_count(); ++i) {
        const Vector p = map.node(i);
        if (p.norm() > 2.5 || !map.defined(i)) continue;
        const Vector want = v.inverse() * p;
        EXPECT_NEAR(map.u[2 * i], want(0), 1e-9);
        EXPECT_NEAR(map.u[2 * i + 1], want(1), 1e-9);
        ++checked;
    }
    EXPECT_GT(checked, 20u);
}

TEST(Map, SwappingGroupsSwapsCoordinates) {
    const auto& a = desk().analysis;
    const auto m01 = build_map(a.field, split(0, 1), vec2(0.0, 0.0));
    const auto m10 = build_map(a.field, split(1, 0), vec2(0.0, 0.0));
    ASSERT_EQ(m01.u.size(), m10.u.size());
    for (std::size_t i = 0; i < m01.node_count(); ++i) {
        const double a0 = m01.u[2 * i], a1 = m01.u[2 * i + 1];
        const double b0 = m10.u[2 * i], b1 = m10.u[2 * i + 1];
        EXPECT_TRUE(a0 == b1 || (std::isnan(a0) && std::isnan(b1))) << i;
        EXPECT_TRUE(a1 == b0 || (std::isnan(a1) && std::isnan(b0))) << i;
    }
}

TEST(Map, BaseNodeHasZeroCoordinates) {
    const auto field = uniform_field(Matrix::Identity(2, 2), 8);
    const auto map = build_map(field, split(0, 1), vec2(0.25, -0.5));
    const std::size_t i = 5 * map.nodes_per_dim[1] + 2; // node (0.25, -0.5)
    ASSERT_NEAR((map.node(i) - vec2(0.25, -0.5)).norm(), 0.0, 1e-12);
    EXPECT_NEAR(map.u[2 * i], 0.0, 1e-12);
    EXPECT_NEAR(map.u[2 * i + 1], 0.0, 1e-12);
}

TEST(Map, Errors) {
    auto field = uniform_field(Matrix::Identity(2, 2), 4);
    expect_error(Errc::out_of_bounds, [&] { build_map(field, split(0, 1), vec2(2.0, 0.0)); });
    expect_error(Errc::shape_mismatch, [&] { build_map(field, split(0, 1), Vector::Zero(3)); });
    expect_error(Errc::unsupported, [&] { build_map(field, Partition{{0, 1}, {}, 0.0}, vec2(0.0, 0.0)); });
    MapOptions bad;
    bad.step_fraction = 0.0;
    expect_error(Errc::invalid_argument, [&] { build_map(field, split(0, 1), vec2(0.0, 0.0), bad); });

    auto holey = field;
    for (std::size_t f = 0; f < holey.frames.size(); ++f) holey.frames[f].valid = false;
    holey.frames[holey.geometry.flat(std::array<std::size_t, 2>{0, 0})].valid = true;
    holey.finalize();
    expect_error(Errc::invalid_bin, [&] { build_map(holey, split(0, 1), vec2(0.1, 0.1)); });

    FrameField three;
    three.geometry = GridGeometry({2, 2, 2}, {-1, -1, -1}, {1, 1, 1});
    for (std::size_t f = 0; f < 8; ++f) {
        LocalFrame fr;
        fr.M = Matrix::Identity(3, 3);
        fr.D = Vector::LinSpaced(3, 3.0, 1.0);
        fr.valid = true;
        three.frames.push_back(fr);
        three.counts.push_back(10);
        three.alignment.push_back(SignedPermutation::identity(3));
    }
    three.finalize();
    expect_error(Errc::unsupported, [&] { build_map(three, Partition{{0}, {1, 2}, 0.0}, Vector::Zero(3)); });
}

TEST(Map, EmptyReferenceCurveIsDegenerate) {
    const auto field = uniform_field(Matrix::Identity(2, 2), 4);
    MapOptions opts;
    opts.max_steps = 0;
    expect_error(Errc::degenerate, [&] { build_map(field, split(0, 1), vec2(0.0, 0.0), opts); });
}

TEST(Map, UnmixedSourcesGiveAxisParallelCurves) {
    const auto s = generate_sources(SourceSpec{});
    std::vector<double> scaled(s.data().begin(), s.data().end());
    for (std::size_t k = 0; k < 2; ++k) {
        const auto col = s.channel(k);
        const double sd = std::sqrt(variance(col));
        for (std::size_t t = 0; t < s.size(); ++t) scaled[2 * t + k] /= sd;
    }
    const TimeSeries z(2, s.rate(), std::move(scaled));
    const auto phase = estimate_velocity(z);
    GridSpec spec;
    spec.min_count = 3000; // well-sampled bins only
    const auto field = make_frame_field(build_grid(phase, spec));
    const auto map = build_map(field, split(0, 1), vec2(0.0, 0.0));
    const auto curves = constant_u_curves(map, field, 9);
    std::vector<double> dev;
    for (const auto& c : curves)
        for (std::size_t i = 1; i < c.line.size(); ++i) {
            const Vector d = c.line.points[i] - c.line.points[i - 1];
            const double ang = std::atan2(std::abs(d(1)), std::abs(d(0)));
            dev.push_back(std::min(ang, std::numbers::pi / 2.0 - ang) * 180.0 / std::numbers::pi);
        }
    ASSERT_FALSE(dev.empty());
    EXPECT_LE(median(dev), 2.0);
}

TEST(Map, ThreadCountDoesNotChangeNodes) {
    const auto& a = desk().analysis;
    MapOptions one, many;
    one.threads = 1;
    many.threads = 4;
    const auto m1 = build_map(a.field, split(0, 1), vec2(0.0, 0.0), one);
    const auto m4 = build_map(a.field, split(0, 1), vec2(0.0, 0.0), many);
    for (std::size_t i = 0; i < m1.u.size(); ++i)
        EXPECT_TRUE(m1.u[i] == m4.u[i] || (std::isnan(m1.u[i]) && std::isnan(m4.u[i])));
}

// ---------------------------------------------------------------------------
// Desk map

TEST(DeskMap, MostSupportNodesDefined) {
    const auto& a = desk().analysis;
    EXPECT_GE(a.maps.at(a.verdict.best).defined_fraction(), 0.8);
}

TEST(DeskMap, HalvingStepStaysWithinIntegrationTolerance) {
    const auto& a = desk().analysis;
    const auto& base = a.maps.at(a.verdict.best);
    MapOptions fine;
    fine.step_fraction = 0.005;
    fine.max_steps = 20000;
    const auto half = build_map(a.field, base.partition, base.x0, fine);
    double worst = 0.0;
    std::size_t defined = 0, both = 0;
    for (std::size_t i = 0; i < base.node_count(); ++i) {
        if (!base.defined(i)) continue;
        ++defined;
        if (!half.defined(i)) continue;
        ++both;
        for (std::size_t k = 0; k < 2; ++k)
            worst = std::max(worst, std::abs(base.u[2 * i + k] - half.u[2 * i + k]));
    }
    EXPECT_GE(both, defined * 9 / 10);
    EXPECT_LE(worst, integration_tolerance * base.bin_width) << "worst " << worst / base.bin_width << " bins";
}

TEST(DeskMap, RecoversSourcesUpToMonotoneMaps) {
    const auto& d = desk();
    const auto& u = d.analysis.u;
    const std::size_t k0 = matching_source(u, d.sources, 0);
    std::vector<double> s_same, s_other;
    const auto u0 = finite_column(u, 0, &d.sources, k0, &s_same);
    const auto u1 = finite_column(u, 1, &d.sources, 1 - k0, &s_other);
    EXPECT_GE(std::abs(spearman(u0, s_same)), 0.95);
    EXPECT_GE(std::abs(spearman(u1, s_other)), 0.95);
    std::vector<double> x0, x1;
    const auto v0 = finite_column(u, 0, &d.sources, 1 - k0, &x0);
    const auto v1 = finite_column(u, 1, &d.sources, k0, &x1);
    EXPECT_LE(std::abs(spearman(v0, x0)), 0.2);
    EXPECT_LE(std::abs(spearman(v1, x1)), 0.2);
}

TEST(DeskMap, ConstantUCurvesFollowConstantSourceCurves) {
    const auto& d = desk();
    const auto& a = d.analysis;
    const auto& map = a.maps.at(a.verdict.best);
    const auto curves = constant_u_curves(map, a.field, 9);
    // family 1 holds u1 fixed; u1 tracks source k1
    const std::size_t k1 = matching_source(a.u, d.sources, 0);
    std::vector<double> dist;
    for (const auto& c : curves) {
        const std::size_t fixed = c.family == 1 ? k1 : 1 - k1;
        std::vector<std::array<double, 2>> src;
        for (const auto& p : c.line.points)
            if (auto s = invert_mixing(p, a.pca)) src.push_back(*s);
        if (src.size() < 5) continue;
        std::vector<double> levels;
        for (const auto& s : src) levels.push_back(s[fixed]);
        const double level = median(levels);
        for (std::size_t i = 0; i < src.size(); ++i) {
            auto s = src[i];
            s[fixed] = level;
            const Vector y = forward_mixing(s[0], s[1], a.pca);
            const Vector p = forward_mixing(src[i][0], src[i][1], a.pca);
            dist.push_back((y - p).norm());
        }
    }
    ASSERT_GT(dist.size(), 100u);
    EXPECT_LE(median(dist), map.bin_width);
}

TEST(DeskMap, InvertingMixingRoundTrips) {
    const auto& d = desk();
    for (std::size_t t = 0; t < d.sources.size(); t += 9973) {
        const Vector y = forward_mixing(d.sources(t, 0), d.sources(t, 1), d.analysis.pca);
        const auto s = invert_mixing(y, d.analysis.pca);
        ASSERT_TRUE(s.has_value());
        EXPECT_NEAR((*s)[0], d.sources(t, 0), 1e-6);
        EXPECT_NEAR((*s)[1], d.sources(t, 1), 1e-6);
    }
}

TEST(DeskMap, MonotoneReparameterizationKeepsVerdict) {
    const auto& a = desk().analysis;
    auto u = a.u;
    for (std::size_t t = 0; t < u.size(); ++t) {
        const double v = u.values[2 * t];
        if (std::isfinite(v)) u.values[2 * t] = v + 0.2 * v * v * v;
    }
    const auto before = independence_stats(a.u, 0.05);
    const auto after = independence_stats(u, 0.05);
    EXPECT_EQ(before.verdict, after.verdict);
    EXPECT_NEAR(before.spearman_position, after.spearman_position, 1e-12);
}

// ---------------------------------------------------------------------------
// Evaluation

TEST(Evaluate, NodeReturnsItsValueExactly) {
    const auto& a = desk().analysis;
    const auto& map = a.maps.at(a.verdict.best);
    std::vector<double> xs;
    std::vector<std::size_t> ids;
    for (std::size_t i = 0; i < map.node_count() && ids.size() < 50; i += 7)
        if (map.defined(i)) {
            const Vector p = map.node(i);
            xs.push_back(p(0));
            xs.push_back(p(1));
            ids.push_back(i);
        }
    while (xs.size() < 6) xs.insert(xs.end(), {0.0, 0.0});
    const auto u = evaluate_map(map, TimeSeries(2, 1.0, xs), 1);
    for (std::size_t j = 0; j < ids.size(); ++j) {
        EXPECT_NEAR(u(j, 0), map.u[2 * ids[j]], 1e-12);
        EXPECT_NEAR(u(j, 1), map.u[2 * ids[j] + 1], 1e-12);
    }
}

TEST(Evaluate, IdentityMapReturnsPositions) {
    const auto field = uniform_field(Matrix::Identity(2, 2), 8);
    const auto map = build_map(field, split(0, 1), vec2(0.0, 0.0));
    std::mt19937_64 rng(3);
    std::uniform_real_distribution<double> in(-0.7, 0.7);
    std::vector<double> xs;
    for (int i = 0; i < 200; ++i) xs.push_back(in(rng));
    const auto u = evaluate_map(map, TimeSeries(2, 1.0, xs));
    EXPECT_EQ(u.dropped, 0u);
    for (std::size_t t = 0; t < u.size(); ++t) {
        EXPECT_NEAR(u(t, 0), xs[2 * t], 1e-9);
        EXPECT_NEAR(u(t, 1), xs[2 * t + 1], 1e-9);
    }
}

TEST(Evaluate, OutsidePointsAreDropped) {
    const auto field = uniform_field(Matrix::Identity(2, 2), 8);
    const auto map = build_map(field, split(0, 1), vec2(0.0, 0.0));
    const auto u = evaluate_map(map, TimeSeries(2, 1.0, {0.0, 0.0, 3.0, 0.0, 0.5, -2.0}));
    EXPECT_EQ(u.dropped, 2u);
    EXPECT_TRUE(std::isfinite(u(0, 0)));
    EXPECT_TRUE(std::isnan(u(1, 0)));
    EXPECT_TRUE(std::isnan(u(2, 1)));
}

TEST(Evaluate, Errors) {
    const auto field = uniform_field(Matrix::Identity(2, 2), 4);
    auto map = build_map(field, split(0, 1), vec2(0.0, 0.0));
    expect_error(Errc::shape_mismatch, [&] { evaluate_map(map, TimeSeries(3, 1.0, std::vector<double>(9, 0.0))); });
    std::fill(map.u.begin(), map.u.end(), std::numeric_limits<double>::quiet_NaN());
    expect_error(Errc::precondition, [&] { evaluate_map(map, TimeSeries(2, 1.0, std::vector<double>(6, 0.0))); });
}

TEST(Export, GridAndCurveFormats) {
    const auto field = uniform_field(Matrix::Identity(2, 2), 2);
    const auto map = build_map(field, split(0, 1), vec2(0.0, 0.0));
    std::ostringstream g, c;
    write_map_grid(g, map);
    write_map_curves(c, constant_u_curves(map, field, 2));
    std::istringstream gi(g.str()), ci(c.str());
    std::string line;
    std::getline(gi, line);
    EXPECT_EQ(line, "node,x1,x2,u1,u2,defined,in_support");
    std::size_t rows = 0;
    while (std::getline(gi, line)) {
        EXPECT_EQ(std::count(line.begin(), line.end(), ','), 6);
        ++rows;
    }
    EXPECT_EQ(rows, 9u);
    std::getline(ci, line);
    EXPECT_EQ(line, "family,level,vertex,x1,x2");
    std::size_t crows = 0;
    while (std::getline(ci, line)) ++crows;
    EXPECT_GT(crows, 4u);
}
