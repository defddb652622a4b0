#include "support.hpp"

#include <algorithm>
#include <sstream>

using namespace nlbss;
using namespace nlbss::test;

namespace {

FrameField uniform_field(const Matrix& m, std::size_t bins = 4) {
    FrameField field;
    field.geometry = GridGeometry({bins, bins}, {-1, -1}, {1, 1});
    for (std::size_t f = 0; f < bins * bins; ++f) {
        LocalFrame fr;
        fr.M = m;
        fr.D = Vector::LinSpaced(2, 3.0, 1.0);
        fr.valid = true;
        field.frames.push_back(fr);
        field.counts.push_back(100);
        field.alignment.push_back(SignedPermutation::identity(2));
    }
    field.finalize();
    return field;
}

WeightSeries series(std::size_t dims, const std::vector<double>& values) {
    WeightSeries w;
    w.dims = dims;
    w.values = values;
    for (std::size_t i = 0; i < values.size() / dims; ++i) w.t_index.push_back(i);
    return w;
}

Matrix corr_matrix(std::initializer_list<std::initializer_list<double>> rows) {
    Matrix m(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(rows.size()));
    Eigen::Index i = 0;
    for (const auto& r : rows) {
        Eigen::Index j = 0;
        for (double v : r) m(i, j++) = v;
        ++i;
    }
    return m;
}

/// Weights recomputed from scratch on a series (own velocities, grid and
/// frames).
WeightSeries weights_of(const TimeSeries& x, const GridSpec& spec = {}) {
    const auto phase = estimate_velocity(x);
    return compute_weights(phase, make_frame_field(build_grid(phase, spec)));
}

} // namespace

TEST(Weights, IdentityFrameReturnsVelocity) {
    const auto field = uniform_field(Matrix::Identity(2, 2));
    const auto p = phase_from(2, {{0.2, -0.4}}, {{0.3, -0.5}});
    const auto w = compute_weights(p, field);
    ASSERT_EQ(w.size(), 1u);
    EXPECT_EQ(w(0, 0), 0.3);
    EXPECT_EQ(w(0, 1), -0.5);
    EXPECT_EQ(w.dropped, 0u);
}

TEST(Weights, BasisVectorGivesUnitWeight) {
    Matrix m(2, 2);
    m << 1.5, -0.4, 0.3, 0.8;
    const auto field = uniform_field(m);
    const Vector v1 = field.frames[0].V.col(0);
    const auto p = phase_from(2, {{0.5, 0.5}}, {{v1(0), v1(1)}});
    const auto w = compute_weights(p, field);
    EXPECT_NEAR(w(0, 0), 1.0, 1e-14);
    EXPECT_NEAR(w(0, 1), 0.0, 1e-14);
}

TEST(Weights, OutOfBoundsSamplesDroppedAndCounted) {
    const auto field = uniform_field(Matrix::Identity(2, 2));
    const auto p = phase_from(2, {{0.0, 0.0}, {1.5, 0.0}, {0.0, -3.0}, {0.9, 0.9}},
                              {{1, 1}, {2, 2}, {3, 3}, {4, 4}});
    const auto w = compute_weights(p, field);
    EXPECT_EQ(w.size(), 2u);
    EXPECT_EQ(w.dropped, 2u);
    EXPECT_EQ(w.t_index, (std::vector<std::size_t>{0, 3}));
}

TEST(Weights, InvalidBinsUseNearestValidFrame) {
    auto field = uniform_field(Matrix::Identity(2, 2), 2);
    field.frames[3].valid = false;
    field.frames[1].M *= 2.0;
    field.finalize();
    // Bin 3 (upper right) is invalid; its nearest valid bins 1 and 2 tie and
    // the lower index wins.
    const auto w = compute_weights(phase_from(2, {{0.5, 0.5}}, {{1.0, 1.0}}), field);
    EXPECT_EQ(w.bin[0], 1u);
    EXPECT_EQ(w(0, 0), 2.0);
}

TEST(Weights, NoValidBins) {
    FrameField field = uniform_field(Matrix::Identity(2, 2), 2);
    for (auto& f : field.frames) f.valid = false;
    expect_error(Errc::no_valid_bins, [&] { compute_weights(phase_from(2, {{0, 0}}, {{1, 1}}), field); });
}

TEST(Correlation, PerfectlyCorrelated) {
    std::vector<double> v;
    for (int i = 0; i < 50; ++i) v.insert(v.end(), {std::sin(i * 1.0), 2.0 * std::sin(i * 1.0)});
    const Matrix c = weight_correlation(series(2, v));
    EXPECT_NEAR(c(0, 1), 1.0, 1e-12);
    EXPECT_EQ(c(0, 1), c(1, 0));
    EXPECT_EQ(c(0, 0), 1.0);
}

TEST(Correlation, IndependentSamplesAreSmall) {
    std::mt19937_64 rng(41);
    std::normal_distribution<double> g;
    std::vector<double> v;
    for (int i = 0; i < 100000; ++i) v.insert(v.end(), {g(rng), g(rng), g(rng)});
    const Matrix c = weight_correlation(series(3, v));
    for (Eigen::Index i = 0; i < 3; ++i) {
        EXPECT_EQ(c(i, i), 1.0);
        for (Eigen::Index j = 0; j < 3; ++j) {
            EXPECT_EQ(c(i, j), c(j, i));
            if (i != j) EXPECT_LT(std::abs(c(i, j)), 0.02);
        }
    }
}

TEST(Correlation, ZeroVarianceIsDegenerate) {
    std::vector<double> v;
    for (int i = 0; i < 10; ++i) v.insert(v.end(), {double(i), 4.0});
    expect_error(Errc::degenerate, [&] { weight_correlation(series(2, v)); });
}

TEST(Partitions, TwoComponents) {
    const auto ok = enumerate_partitions(corr_matrix({{1, 0.001}, {0.001, 1}}), 0.05);
    ASSERT_EQ(ok.size(), 1u);
    EXPECT_EQ(ok[0].first, IndexSet{0});
    EXPECT_EQ(ok[0].second, IndexSet{1});
    EXPECT_NEAR(ok[0].score, 0.001, 1e-15);
    EXPECT_TRUE(enumerate_partitions(corr_matrix({{1, 0.5}, {0.5, 1}}), 0.05).empty());
    EXPECT_TRUE(enumerate_partitions(corr_matrix({{1, -0.5}, {-0.5, 1}}), 0.05).empty());
}

TEST(Partitions, ThreeComponentsWithOneCorrelatedPair) {
    const Matrix c = corr_matrix({{1, 0.8, 0.01}, {0.8, 1, -0.02}, {0.01, -0.02, 1}});
    // Hand enumeration: {0}|{1,2} scores 0.8, {0,1}|{2} scores 0.02,
    // {0,2}|{1} scores 0.8.
    const auto all = all_partitions(c);
    ASSERT_EQ(all.size(), 3u);
    EXPECT_NEAR(all[0].score, 0.02, 1e-15);
    EXPECT_NEAR(all[1].score, 0.8, 1e-15);
    EXPECT_NEAR(all[2].score, 0.8, 1e-15);
    const auto ok = enumerate_partitions(c, 0.05);
    ASSERT_EQ(ok.size(), 1u);
    EXPECT_EQ(ok[0].first, (IndexSet{0, 1}));
    EXPECT_EQ(ok[0].second, IndexSet{2});
}

TEST(Partitions, PropertyCoverDisjointSorted) {
    std::mt19937_64 rng(42);
    std::uniform_real_distribution<double> u(-0.3, 0.3);
    for (std::size_t n = 2; n <= 6; ++n) {
        Matrix c = Matrix::Identity(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(n));
        for (Eigen::Index i = 0; i < c.rows(); ++i)
            for (Eigen::Index j = i + 1; j < c.rows(); ++j) c(i, j) = c(j, i) = u(rng);
        const auto all = all_partitions(c);
        EXPECT_EQ(all.size(), (std::size_t{1} << (n - 1)) - 1);
        for (std::size_t i = 0; i < all.size(); ++i) {
            const auto& p = all[i];
            EXPECT_FALSE(p.first.empty());
            EXPECT_FALSE(p.second.empty());
            IndexSet joined = p.first;
            joined.insert(joined.end(), p.second.begin(), p.second.end());
            std::sort(joined.begin(), joined.end());
            for (std::size_t k = 0; k < n; ++k) EXPECT_EQ(joined[k], k);
            EXPECT_EQ(joined.size(), n);
            double worst = 0.0;
            for (auto a : p.first)
                for (auto b : p.second)
                    worst = std::max(worst, std::abs(c(static_cast<Eigen::Index>(a), static_cast<Eigen::Index>(b))));
            EXPECT_EQ(p.score, worst);
            if (i) EXPECT_LE(all[i - 1].score, p.score);
        }
        for (const auto& p : enumerate_partitions(c, 0.1)) EXPECT_LE(p.score, 0.1);
    }
    expect_error(Errc::invalid_argument, [] { all_partitions(Matrix::Identity(1, 1)); });
}

TEST(Matching, SwapAndNegation) {
    const std::vector<double> a{1, 2, 3, -4, 0.5, 6, -7, 8};
    std::vector<double> swapped, negated;
    for (std::size_t i = 0; i < a.size(); i += 2) {
        swapped.insert(swapped.end(), {a[i + 1], a[i]});
        negated.insert(negated.end(), {-a[i], -a[i + 1]});
    }
    const auto s = match_signed_permutation(a, swapped, 2);
    EXPECT_EQ(s.p.perm, (std::vector<std::size_t>{1, 0}));
    EXPECT_EQ(s.p.sign, (std::vector<int>{1, 1}));
    EXPECT_EQ(s.residual, 0.0);
    const auto n = match_signed_permutation(a, negated, 2);
    EXPECT_EQ(n.p.perm, (std::vector<std::size_t>{0, 1}));
    EXPECT_EQ(n.p.sign, (std::vector<int>{-1, -1}));
    EXPECT_EQ(n.residual, 0.0);
}

TEST(Matching, NoiseResidualEqualsNoiseRatio) {
    std::mt19937_64 rng(43);
    std::normal_distribution<double> g;
    std::vector<double> a, b, noise;
    for (int i = 0; i < 20000; ++i) {
        const double x = g(rng) * 3.0, e = 0.05 * g(rng);
        a.push_back(x);
        noise.push_back(e);
        b.push_back(x + e);
    }
    const auto m = match_signed_permutation(a, b, 2);
    EXPECT_EQ(m.p, SignedPermutation::identity(2));
    double ee = 0, aa = 0;
    for (std::size_t i = 0; i < a.size(); ++i) ee += noise[i] * noise[i], aa += a[i] * a[i];
    EXPECT_NEAR(m.residual, std::sqrt(ee / aa), 1e-12);
}

TEST(Matching, AgreesWithBruteForce) {
    std::mt19937_64 rng(44);
    std::normal_distribution<double> g;
    for (int trial = 0; trial < 20; ++trial) {
        const std::size_t n = 3;
        std::vector<double> a, b;
        for (int i = 0; i < 200; ++i)
            for (std::size_t k = 0; k < n; ++k) a.push_back(g(rng)), b.push_back(g(rng));
        const auto m = match_signed_permutation(a, b, n);
        double best = std::numeric_limits<double>::infinity();
        for (const auto& perm : all_permutations(n))
            for (int signs = 0; signs < 8; ++signs) {
                double err = 0;
                for (std::size_t r = 0; r < a.size() / n; ++r)
                    for (std::size_t i = 0; i < n; ++i) {
                        const double s = (signs >> i) & 1 ? -1.0 : 1.0;
                        err += std::pow(a[r * n + i] - s * b[r * n + perm[i]], 2);
                    }
                best = std::min(best, err);
            }
        double aa = 0;
        for (double v : a) aa += v * v;
        EXPECT_NEAR(m.residual, std::sqrt(best / aa), 1e-12);
    }
}

TEST(Matching, WidthCapAndShape) {
    std::vector<double> a(18, 1.0);
    expect_error(Errc::unsupported, [&] { match_signed_permutation(a, a, 9); });
    expect_error(Errc::shape_mismatch, [&] { match_signed_permutation(a, std::vector<double>(16, 1.0), 2); });
    EXPECT_EQ(match_signed_permutation(std::vector<double>{1, NAN, 2, 3}, std::vector<double>{1, 0, 2, 3}, 2).residual, 0.0);
}

TEST(Weights, ExportHasTimeAndComponents) {
    const auto w = series(2, {0.5, -1, 2, 3});
    std::ostringstream os;
    write_weights(os, w);
    EXPECT_EQ(os.str().substr(0, 8), "t,w1,w2\n");
    EXPECT_NE(os.str().find("0,0.5,-1"), std::string::npos);
}

TEST(DeskWeights, UncorrelatedComponents) {
    const auto& a = desk().analysis;
    EXPECT_LE(std::abs(a.partitions.corr(0, 1)), 0.02);
    EXPECT_EQ(a.weights.size() + a.weights.dropped, a.phase.size());
    for (double v : a.weights.values) ASSERT_TRUE(std::isfinite(v));
}

TEST(DeskWeights, MixedMatchesPerSourceWeights) {
    const auto& d = desk();
    const auto blocks = block_weights(d.sources, {{0}, {1}}, GridSpec{}, FrameOptions{});
    const auto [mixed, unmixed] = align_on_time(d.analysis.weights, blocks);
    EXPECT_GT(mixed.size(), d.analysis.weights.size() * 9 / 10);
    EXPECT_LE(match_signed_permutation(mixed, unmixed).residual, 0.15);
}

TEST(DeskWeights, PerBlockWeightsMatchFullSourceWeights) {
    const auto& d = desk();
    const auto full = weights_of(d.sources);
    const auto blocks = block_weights(d.sources, {{0}, {1}}, GridSpec{}, FrameOptions{});
    const auto [a, b] = align_on_time(full, blocks);
    EXPECT_LE(match_signed_permutation(a, b).residual, 0.15);
}

TEST(DeskWeights, ScalarUnderCoordinateChange) {
    const auto& a = desk().analysis;
    const auto& x = a.normalized;
    // z = g(x), a smooth invertible warp of the plane.
    std::vector<double> zd(x.data().size());
    for (std::size_t t = 0; t < x.size(); ++t) {
        const double x1 = x(t, 0), x2 = x(t, 1);
        zd[2 * t] = x1 + 0.1 * x2 * x2;
        zd[2 * t + 1] = x2 + 0.3 * std::tanh(x1);
    }
    const TimeSeries z(2, x.rate(), std::move(zd));
    const auto phase_z = estimate_velocity(z);
    const auto grid_z = build_grid(phase_z, GridSpec{});
    const auto wz = compute_weights(phase_z, make_frame_field(grid_z));
    const auto [wa, wb] = align_on_time(a.weights, wz);
    const auto m = match_signed_permutation(wa, wb);
    std::vector<double> rel;
    for (std::size_t i = 0; i < wa.size(); ++i) {
        if (a.grid.bins[wa.bin[i]].count < 200 || grid_z.bins[wb.bin[i]].count < 200) continue;
        double num = 0, den = 0;
        for (std::size_t k = 0; k < 2; ++k) {
            const double mapped = m.p.sign[k] * wb(i, m.p.perm[k]);
            num += std::pow(wa(i, k) - mapped, 2);
            den += wa(i, k) * wa(i, k);
        }
        if (den > 0) rel.push_back(std::sqrt(num / den));
    }
    ASSERT_GT(rel.size(), wa.size() / 2);
    std::nth_element(rel.begin(), rel.begin() + static_cast<std::ptrdiff_t>(rel.size() / 2), rel.end());
    EXPECT_LE(rel[rel.size() / 2], 0.1);
}

TEST(BlockStructure, ExactMomentsOfIndependentBlocks) {
    // Channels 0 and 1 form one subsystem (internally mixed), channel 2 is
    // a separate one.
    std::mt19937_64 rng(45);
    for (int trial = 0; trial < 20; ++trial) {
        Matrix mix = Matrix::Identity(3, 3);
        mix.topLeftCorner(2, 2) = random_invertible(rng, 2);
        mix(2, 2) = 0.5 + trial * 0.1;
        const std::vector<double> s2{1.0, 2.0, 0.7}, m4{4.5, 1.7, 2.4};
        Matrix c2 = Matrix::Zero(3, 3);
        for (Eigen::Index k = 0; k < 3; ++k) c2(k, k) = s2[static_cast<std::size_t>(k)];
        c2 = (mix * c2 * mix.transpose()).eval();
        const auto c4 = SymmetricTensor4::from_full(transform_c4_full(independent_c4_full(s2, m4), mix), 3, 1e-10);
        const auto f = build_frame(c2, c4);
        std::size_t lone = 0;
        for (Eigen::Index r = 0; r < 3; ++r) {
            const double norm = f.M.row(r).norm();
            const bool in_pair = std::abs(f.M(r, 2)) <= 1e-10 * norm;
            const bool in_single = f.M.row(r).head(2).norm() <= 1e-10 * norm;
            EXPECT_TRUE(in_pair != in_single) << f.M;
            if (in_single) ++lone;
        }
        EXPECT_EQ(lone, 1u);
    }
}

TEST(DeskWeights, UnmixedFramesNearlyDiagonalInWellSampledBins) {
    const auto& s = desk().sources;
    GridSpec spec;
    spec.min_count = 3000;
    const auto field = make_frame_field(build_grid(estimate_velocity(s), spec));
    std::vector<double> ratio;
    for (const auto& fr : field.frames) {
        if (!fr.valid) continue;
        const Matrix m = fr.M.cwiseAbs();
        ratio.push_back(std::min(std::max(m(0, 1), m(1, 0)), std::max(m(0, 0), m(1, 1))) / m.maxCoeff());
    }
    ASSERT_GT(ratio.size(), 20u);
    std::nth_element(ratio.begin(), ratio.begin() + static_cast<std::ptrdiff_t>(ratio.size() / 2), ratio.end());
    EXPECT_LE(ratio[ratio.size() / 2], 0.05);
}
