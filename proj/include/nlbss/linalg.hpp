#pragma once

#include "nlbss/core.hpp"

#include <Eigen/Eigenvalues>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

namespace nlbss {

struct SymmetricEigen {
    Vector values;  // descending
    Matrix vectors; // column i pairs with values(i)
};

/// Eigen-decomposition of a symmetric matrix with a deterministic
/// convention: eigenvalues descending, and each eigenvector's
/// largest-magnitude component positive (ties: lowest index).
/// A multiple of the identity (to 1e-12 relative) returns the canonical
/// basis.
inline SymmetricEigen sorted_eigen(const Matrix& a) {
    const auto n = a.rows();
    const double scale = a.cwiseAbs().maxCoeff();
    const double level = a.trace() / static_cast<double>(n);
    if (scale > 0.0 && (a - level * Matrix::Identity(n, n)).cwiseAbs().maxCoeff() <= 1e-12 * scale)
        return {a.diagonal(), Matrix::Identity(n, n)};
    Eigen::SelfAdjointEigenSolver<Matrix> solver(a);
    if (solver.info() != Eigen::Success)
        throw Error(Errc::invalid_argument, "eigen-decomposition failed");
    std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), Eigen::Index{0});
    const Vector& ev = solver.eigenvalues();
    std::stable_sort(order.begin(), order.end(),
                     [&](Eigen::Index i, Eigen::Index j) { return ev(i) > ev(j); });
    SymmetricEigen out{Vector(n), Matrix(n, n)};
    for (Eigen::Index c = 0; c < n; ++c) {
        const auto src = order[static_cast<std::size_t>(c)];
        out.values(c) = ev(src);
        Vector col = solver.eigenvectors().col(src);
        Eigen::Index pivot = 0;
        for (Eigen::Index r = 1; r < n; ++r)
            if (std::abs(col(r)) > std::abs(col(pivot)) * (1.0 + 1e-12)) pivot = r;
        if (col(pivot) < 0.0) col = -col;
        out.vectors.col(c) = col;
    }
    return out;
}

inline bool is_symmetric(const Matrix& a, double rel_tol = 1e-12) {
    if (a.rows() != a.cols()) return false;
    const double scale = std::max(a.cwiseAbs().maxCoeff(), 1e-300);
    return (a - a.transpose()).cwiseAbs().maxCoeff() <= rel_tol * scale;
}

/// (P b)_i = sign[i] * b[perm[i]].
struct SignedPermutation {
    std::vector<std::size_t> perm;
    std::vector<int> sign;

    static SignedPermutation identity(std::size_t n) {
        SignedPermutation p{std::vector<std::size_t>(n), std::vector<int>(n, 1)};
        std::iota(p.perm.begin(), p.perm.end(), std::size_t{0});
        return p;
    }
    std::size_t size() const noexcept { return perm.size(); }

    Matrix matrix() const {
        const auto n = static_cast<Eigen::Index>(perm.size());
        Matrix m = Matrix::Zero(n, n);
        for (Eigen::Index i = 0; i < n; ++i)
            m(i, static_cast<Eigen::Index>(perm[static_cast<std::size_t>(i)])) = sign[static_cast<std::size_t>(i)];
        return m;
    }
    /// Rows of `m` reordered and sign-flipped.
    Matrix apply_rows(const Matrix& m) const { return matrix() * m; }

    /// this o other: applying `other` first, then this.
    SignedPermutation compose(const SignedPermutation& other) const {
        SignedPermutation out{std::vector<std::size_t>(size()), std::vector<int>(size())};
        for (std::size_t i = 0; i < size(); ++i) {
            out.perm[i] = other.perm[perm[i]];
            out.sign[i] = sign[i] * other.sign[perm[i]];
        }
        return out;
    }
    bool operator==(const SignedPermutation&) const = default;
};

} // namespace nlbss
