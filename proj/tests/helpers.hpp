#pragma once

#include <random>

#include "hmgp/hmgp.hpp"

namespace hmgp::testing {

inline Matrix randn(Index r, Index c, std::uint64_t seed, double scale = 1.0) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal(0.0, scale);
    Matrix m(r, c);
    for (Index i = 0; i < r; ++i)
        for (Index j = 0; j < c; ++j) m(i, j) = normal(rng);
    return m;
}

inline Matrix random_symmetric(Index n, std::uint64_t seed) {
    const Matrix a = randn(n, n, seed);
    return 0.5 * (a + a.transpose());
}

inline Matrix random_spd(Index n, std::uint64_t seed) {
    const Matrix a = randn(n, n, seed);
    return a * a.transpose() + static_cast<double>(n) * Matrix::Identity(n, n);
}

inline RbfHyperparams hyper(double sf2, double ell, double sb2, double sn2) {
    return {std::log(sf2), std::log(ell), std::log(sb2), std::log(sn2)};
}

/// Flattens (X row-major, then theta) for finite-difference checks of a
/// function of both.
inline Vector pack_x_theta(const Matrix &x, const RbfHyperparams &h) {
    return ParamLayout{x.rows(), x.cols(), 1}.pack(x, {h});
}

inline double max_abs(const Matrix &m) { return m.size() ? m.cwiseAbs().maxCoeff() : 0.0; }

}  // namespace hmgp::testing
