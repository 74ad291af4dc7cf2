#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace hmgp {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

// Per-modality observations Y^c, one object per row.
using FeatureMatrix = Matrix;
// Shared latent positions, one object per row.
using LatentMatrix = Matrix;

using Index = Eigen::Index;

class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Malformed input file; the message names the byte or line offset.
class ParseError : public Error {
public:
    using Error::Error;
};

/// Invalid or incompatible configuration.
class ConfigError : public Error {
public:
    using Error::Error;
};

/// Inputs that are well-formed but inconsistent (shape mismatch, missing labels, ...).
class DataError : public Error {
public:
    using Error::Error;
};

/// Factorization failure or non-finite values during a numerical routine.
class NumericalError : public Error {
public:
    using Error::Error;
};

inline bool all_finite(const Eigen::Ref<const Matrix> &m) {
    return m.allFinite();
}

/// Squared Euclidean distances between the rows of `a` and the rows of `b`.
inline Matrix pairwise_sq_dists(const Eigen::Ref<const Matrix> &a, const Eigen::Ref<const Matrix> &b) {
    Matrix d(a.rows(), b.rows());
    for (Index j = 0; j < b.rows(); ++j) {
        for (Index i = 0; i < a.rows(); ++i) {
            d(i, j) = (a.row(i) - b.row(j)).squaredNorm();
        }
    }
    return d;
}

/// Symmetric variant; only the upper triangle is computed.
inline Matrix pairwise_sq_dists(const Eigen::Ref<const Matrix> &a) {
    const Index n = a.rows();
    Matrix d(n, n);
    for (Index j = 0; j < n; ++j) {
        d(j, j) = 0.0;
        for (Index i = 0; i < j; ++i) {
            const double v = (a.row(i) - a.row(j)).squaredNorm();
            d(i, j) = v;
            d(j, i) = v;
        }
    }
    return d;
}

inline Matrix select_rows(const Eigen::Ref<const Matrix> &m, const std::vector<Index> &rows) {
    Matrix out(static_cast<Index>(rows.size()), m.cols());
    for (std::size_t i = 0; i < rows.size(); ++i) {
        out.row(static_cast<Index>(i)) = m.row(rows[i]);
    }
    return out;
}

inline Matrix select_block(const Eigen::Ref<const Matrix> &m, const std::vector<Index> &idx) {
    const auto n = static_cast<Index>(idx.size());
    Matrix out(n, n);
    for (Index j = 0; j < n; ++j) {
        for (Index i = 0; i < n; ++i) {
            out(i, j) = m(idx[static_cast<std::size_t>(i)], idx[static_cast<std::size_t>(j)]);
        }
    }
    return out;
}

}  // namespace hmgp
