#pragma once

#include "nlbss/nlbss.hpp"

#include <gtest/gtest.h>

#include <chrono>
#include <cmath>
#include <random>
#include <vector>

namespace nlbss::test {

/// Reference scenario: default sources, default mixture, default analysis.
struct Desk {
    TimeSeries sources;
    TimeSeries mixtures;
    Analysis analysis;
    double seconds = 0.0;
};

inline Desk make_desk(SourceSpec spec = {}, AnalysisConfig cfg = {}) {
    auto s = generate_sources(spec);
    auto x = mix_sources(s, MixingParams{});
    const auto t0 = std::chrono::steady_clock::now();
    auto a = analyze(x, cfg);
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return {std::move(s), std::move(x), std::move(a), secs};
}

/// Default desk, built once per process.
inline const Desk& desk() {
    static const Desk d = make_desk();
    return d;
}

/// Isotropic Gaussian fourth moment, delta_ab delta_cd + delta_ac delta_bd +
/// delta_ad delta_bc, written out index by index.
inline std::vector<double> gaussian_c4_full(std::size_t n) {
    std::vector<double> out(n * n * n * n);
    auto d = [](std::size_t i, std::size_t j) { return i == j ? 1.0 : 0.0; };
    for (std::size_t a = 0; a < n; ++a)
        for (std::size_t b = 0; b < n; ++b)
            for (std::size_t c = 0; c < n; ++c)
                for (std::size_t e = 0; e < n; ++e)
                    out[((a * n + b) * n + c) * n + e] = d(a, b) * d(c, e) + d(a, c) * d(b, e) + d(a, e) * d(b, c);
    return out;
}

/// Fourth moment of independent zero-mean channels with variances s2 and
/// fourth moments m4 (in units of s2^2).
inline std::vector<double> independent_c4_full(const std::vector<double>& s2, const std::vector<double>& m4) {
    const std::size_t n = s2.size();
    std::vector<double> out(n * n * n * n, 0.0);
    for (std::size_t a = 0; a < n; ++a)
        for (std::size_t b = 0; b < n; ++b)
            for (std::size_t c = 0; c < n; ++c)
                for (std::size_t e = 0; e < n; ++e) {
                    double v = 0.0;
                    if (a == b && b == c && c == e) v = m4[a] * s2[a] * s2[a];
                    else if (a == b && c == e && a != c) v = s2[a] * s2[c];
                    else if (a == c && b == e && a != b) v = s2[a] * s2[b];
                    else if (a == e && b == c && a != b) v = s2[a] * s2[b];
                    out[((a * n + b) * n + c) * n + e] = v;
                }
    return out;
}

/// Full four-index transform T'_abcd = A_ai A_bj A_ck A_dl T_ijkl.
inline std::vector<double> transform_c4_full(const std::vector<double>& t, const Matrix& A) {
    const auto n = static_cast<std::size_t>(A.rows());
    std::vector<double> out(t.size(), 0.0);
    for (std::size_t a = 0; a < n; ++a)
        for (std::size_t b = 0; b < n; ++b)
            for (std::size_t c = 0; c < n; ++c)
                for (std::size_t d = 0; d < n; ++d) {
                    double s = 0.0;
                    for (std::size_t i = 0; i < n; ++i)
                        for (std::size_t j = 0; j < n; ++j)
                            for (std::size_t k = 0; k < n; ++k)
                                for (std::size_t l = 0; l < n; ++l)
                                    s += A(a, i) * A(b, j) * A(c, k) * A(d, l) * t[((i * n + j) * n + k) * n + l];
                    out[((a * n + b) * n + c) * n + d] = s;
                }
    return out;
}

inline Matrix random_matrix(std::mt19937_64& rng, Eigen::Index n, double spread = 1.0) {
    std::normal_distribution<double> g(0.0, spread);
    Matrix a(n, n);
    for (Eigen::Index i = 0; i < n; ++i)
        for (Eigen::Index j = 0; j < n; ++j) a(i, j) = g(rng);
    return a;
}

/// Well-conditioned random matrix (singular value ratio above 0.1).
inline Matrix random_invertible(std::mt19937_64& rng, Eigen::Index n) {
    while (true) {
        Matrix a = random_matrix(rng, n);
        const Eigen::JacobiSVD<Matrix> svd(a);
        if (svd.singularValues()(n - 1) > 0.1 * svd.singularValues()(0)) return a;
    }
}

/// True when m equals a signed permutation matrix to tolerance.
inline bool is_signed_permutation(const Matrix& m, double tol) {
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
        int big = 0;
        for (Eigen::Index j = 0; j < m.cols(); ++j) {
            const double a = std::abs(m(i, j));
            if (std::abs(a - 1.0) <= tol) ++big;
            else if (a > tol) return false;
        }
        if (big != 1) return false;
    }
    return std::abs(std::abs(m.determinant()) - 1.0) <= 10 * tol;
}

template <class Fn>
void expect_error(Errc code, Fn&& fn) {
    try {
        fn();
        ADD_FAILURE() << "expected error: " << to_string(code);
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), code) << e.what();
    }
}

/// Phase samples placed by hand.
inline PhaseSeries phase_from(std::size_t dims, const std::vector<std::vector<double>>& x,
                              const std::vector<std::vector<double>>& v) {
    PhaseSeries p(dims, 1.0);
    for (std::size_t i = 0; i < x.size(); ++i) p.push(i, x[i], v[i]);
    return p;
}

} // namespace nlbss::test
