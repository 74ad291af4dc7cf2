#pragma once

// RBF covariance matrices, exponential similarity matrices and their partial
// derivatives.

#include "hmgp/common.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <optional>
#include <string>

namespace hmgp {

/// Kernel hyperparameters of one modality, stored as logs.
struct RbfHyperparams {
    static constexpr int kCount = 4;

    double log_signal_variance = 0.0;
    double log_lengthscale = 0.0;
    double log_bias_variance = 0.0;
    double log_noise_variance = std::log(0.01);

    [[nodiscard]] double signal_variance() const { return std::exp(log_signal_variance); }
    [[nodiscard]] double lengthscale() const { return std::exp(log_lengthscale); }
    [[nodiscard]] double bias_variance() const { return std::exp(log_bias_variance); }
    [[nodiscard]] double noise_variance() const { return std::exp(log_noise_variance); }

    [[nodiscard]] std::array<double, kCount> pack() const {
        return {log_signal_variance, log_lengthscale, log_bias_variance, log_noise_variance};
    }

    static RbfHyperparams unpack(const double *p) { return {p[0], p[1], p[2], p[3]}; }

    [[nodiscard]] bool valid() const {
        for (double v : {signal_variance(), lengthscale(), bias_variance(), noise_variance()}) {
            if (!std::isfinite(v) || !(v > 0.0)) return false;
        }
        return true;
    }

    void validate() const {
        if (!valid()) throw NumericalError("RBF hyperparameters must exponentiate to finite positive values");
    }

    bool operator==(const RbfHyperparams &) const = default;
};

struct KernelMatrix {
    Matrix values;
    double jitter_applied = 0.0;

    [[nodiscard]] Index size() const { return values.rows(); }
};

enum class SimilaritySource { Feature, Latent };

struct SimilarityMatrix {
    Matrix values;
    double bandwidth = 1.0;
    SimilaritySource source = SimilaritySource::Feature;

    [[nodiscard]] Index size() const { return values.rows(); }
};

/// K_ij = sf2 * exp(-|x_i - x_j|^2 / (2 l^2)) + sb2 + sn2 * [i == j]
inline KernelMatrix rbf_kernel(const Eigen::Ref<const Matrix> &x, const RbfHyperparams &h) {
    h.validate();
    if (!x.allFinite()) throw NumericalError("latent positions contain non-finite values");
    const double sf2 = h.signal_variance();
    const double sb2 = h.bias_variance();
    const double inv_two_l2 = 0.5 / (h.lengthscale() * h.lengthscale());
    const Index n = x.rows();
    KernelMatrix k;
    k.values.resize(n, n);
    for (Index j = 0; j < n; ++j) {
        k.values(j, j) = sf2 + sb2 + h.noise_variance();
        for (Index i = j + 1; i < n; ++i) {
            const double v = sf2 * std::exp(-inv_two_l2 * (x.row(i) - x.row(j)).squaredNorm()) + sb2;
            k.values(i, j) = v;
            k.values(j, i) = v;
        }
    }
    return k;
}

/// Cross-covariance between rows of `a` and rows of `b` without the noise term.
inline Matrix rbf_cross_kernel(const Eigen::Ref<const Matrix> &a, const Eigen::Ref<const Matrix> &b,
                               const RbfHyperparams &h) {
    const double sf2 = h.signal_variance();
    const double inv_two_l2 = 0.5 / (h.lengthscale() * h.lengthscale());
    Matrix k = pairwise_sq_dists(a, b);
    k = (sf2 * (-inv_two_l2 * k.array()).exp() + h.bias_variance()).matrix();
    return k;
}

/// Partial derivatives of an RBF kernel matrix.
///
/// The X-derivatives are not materialized as a 4-index tensor. `dk_dx_weights`
/// holds W_ij = sf2 * exp(-d_ij^2 / (2 l^2)) / l^2 so that
/// dK_ij/dx_i = -W_ij (x_i - x_j); `contract_x` chains an outer sensitivity
/// through it.
struct RbfKernelGrads {
    Matrix dk_dx_weights;
    std::array<Matrix, RbfHyperparams::kCount> dk_dtheta;

    /// Gradient with respect to X of sum_ij G_ij K_ij for symmetric G.
    [[nodiscard]] Matrix contract_x(const Eigen::Ref<const Matrix> &g, const Eigen::Ref<const Matrix> &x) const {
        const Matrix w = g.cwiseProduct(dk_dx_weights);
        const Vector rs = w.rowwise().sum();
        return -2.0 * (rs.asDiagonal() * x - w * x);
    }

    /// sum_ij G_ij dK_ij/dtheta_k for each hyperparameter.
    [[nodiscard]] std::array<double, RbfHyperparams::kCount> contract_theta(const Eigen::Ref<const Matrix> &g) const {
        std::array<double, RbfHyperparams::kCount> out{};
        out[0] = g.cwiseProduct(dk_dtheta[0]).sum();
        out[1] = g.cwiseProduct(dk_dtheta[1]).sum();
        out[2] = g.sum() * dk_dtheta[2](0, 0);
        out[3] = g.diagonal().sum() * dk_dtheta[3](0, 0);
        return out;
    }

    /// dK_ij / dx_{p,d}, dense, for tests and small problems.
    [[nodiscard]] double dk_dx(const Eigen::Ref<const Matrix> &x, Index i, Index j, Index p, Index d) const {
        if (i == j) return 0.0;
        if (p == i) return -dk_dx_weights(i, j) * (x(i, d) - x(j, d));
        if (p == j) return dk_dx_weights(i, j) * (x(i, d) - x(j, d));
        return 0.0;
    }
};

/// dK/dtheta for the bias and noise terms are constant matrices (sb2 * 11^T and
/// sn2 * I); only their scalar factor is stored, in entry (0, 0) of a 1x1 matrix.
inline RbfKernelGrads rbf_kernel_grads(const Eigen::Ref<const Matrix> &x, const RbfHyperparams &h) {
    h.validate();
    const double sf2 = h.signal_variance();
    const double l2 = h.lengthscale() * h.lengthscale();
    const Matrix d2 = pairwise_sq_dists(x);
    const Matrix e = (-0.5 / l2 * d2.array()).exp().matrix();
    RbfKernelGrads g;
    g.dk_dtheta[0] = sf2 * e;
    g.dk_dtheta[1] = (sf2 / l2) * e.cwiseProduct(d2);
    g.dk_dtheta[2] = Matrix::Constant(1, 1, h.bias_variance());
    g.dk_dtheta[3] = Matrix::Constant(1, 1, h.noise_variance());
    g.dk_dx_weights = (sf2 / l2) * e;
    return g;
}

/// Dense dK/dtheta_k, expanding the compact bias/noise storage.
inline Matrix dense_dk_dtheta(const RbfKernelGrads &g, int k, Index n) {
    if (k == 2) return Matrix::Constant(n, n, g.dk_dtheta[2](0, 0));
    if (k == 3) return g.dk_dtheta[3](0, 0) * Matrix::Identity(n, n);
    return g.dk_dtheta[static_cast<std::size_t>(k)];
}

/// S_ij = exp(-|a_i - a_j|^2 / (2 gamma))
inline SimilarityMatrix exp_similarity(const Eigen::Ref<const Matrix> &rows, double gamma, SimilaritySource source) {
    if (!(gamma > 0.0) || !std::isfinite(gamma)) throw ConfigError("similarity bandwidth must be > 0");
    SimilarityMatrix s;
    s.bandwidth = gamma;
    s.source = source;
    s.values = (-0.5 / gamma * pairwise_sq_dists(rows).array()).exp().matrix();
    s.values.diagonal().setOnes();
    return s;
}

inline SimilarityMatrix feature_similarity(const Eigen::Ref<const Matrix> &y, double gamma) {
    return exp_similarity(y, gamma, SimilaritySource::Feature);
}

/// Similarity of each row of `queries` to each row of `reference`.
inline Matrix feature_similarity_cross(const Eigen::Ref<const Matrix> &queries, const Eigen::Ref<const Matrix> &reference,
                                       double gamma) {
    if (!(gamma > 0.0)) throw ConfigError("similarity bandwidth must be > 0");
    return (-0.5 / gamma * pairwise_sq_dists(queries, reference).array()).exp().matrix();
}

inline SimilarityMatrix latent_similarity(const Eigen::Ref<const Matrix> &x, double gamma_x = 1.0) {
    return exp_similarity(x, gamma_x, SimilaritySource::Latent);
}

/// Gradient with respect to X of sum_ij G_ij Sx_ij for symmetric G, using
/// dSx_ij/dx_i = -Sx_ij (x_i - x_j) / gamma_x.
inline Matrix latent_similarity_contract_x(const Eigen::Ref<const Matrix> &g, const SimilarityMatrix &sx,
                                           const Eigen::Ref<const Matrix> &x) {
    const Matrix w = g.cwiseProduct(sx.values) / sx.bandwidth;
    const Vector rs = w.rowwise().sum();
    return -2.0 * (rs.asDiagonal() * x - w * x);
}

/// dSx_ij / dx_i as a q-vector.
inline Vector latent_similarity_grad(const Eigen::Ref<const Matrix> &x, const SimilarityMatrix &sx, Index i, Index j) {
    return (-sx.values(i, j) / sx.bandwidth) * (x.row(i) - x.row(j)).transpose();
}

/// Median of the pairwise squared distances between rows.
inline double median_sq_distance(const Eigen::Ref<const Matrix> &y) {
    const Index n = y.rows();
    if (n < 2) throw DataError("median heuristic needs at least two rows");
    std::vector<double> d;
    d.reserve(static_cast<std::size_t>(n * (n - 1) / 2));
    for (Index j = 0; j < n; ++j) {
        for (Index i = 0; i < j; ++i) d.push_back((y.row(i) - y.row(j)).squaredNorm());
    }
    auto mid = d.begin() + static_cast<std::ptrdiff_t>(d.size() / 2);
    std::nth_element(d.begin(), mid, d.end());
    const double m = *mid;
    return m > 0.0 ? m : 1.0;
}

struct CholeskyResult {
    Eigen::LLT<Matrix> llt;
    double jitter = 0.0;

    [[nodiscard]] Matrix lower() const { return llt.matrixL(); }
    [[nodiscard]] double log_det() const {
        return 2.0 * llt.matrixLLT().diagonal().array().log().sum();
    }
    [[nodiscard]] Matrix inverse() const {
        const Index n = llt.matrixLLT().rows();
        return llt.solve(Matrix::Identity(n, n));
    }
};

/// Cholesky factorization, retrying with jitter * I added when it fails.
/// Jitter starts at 1e-10 and grows tenfold up to 1e-4, both relative to the
/// mean diagonal.
inline CholeskyResult safe_cholesky(const Eigen::Ref<const Matrix> &k) {
    if (k.rows() != k.cols()) throw DataError("Cholesky input must be square");
    if (!k.allFinite()) throw NumericalError("Cholesky input contains non-finite values");
    CholeskyResult r;
    r.llt.compute(k);
    if (r.llt.info() == Eigen::Success && r.llt.matrixLLT().diagonal().minCoeff() > 0.0) return r;
    const double mean_diag = std::max(k.diagonal().mean(), std::numeric_limits<double>::min());
    for (double rel = 1e-10; rel <= 1e-4 * (1.0 + 1e-9); rel *= 10.0) {
        const double jitter = rel * mean_diag;
        Matrix kj = k;
        kj.diagonal().array() += jitter;
        r.llt.compute(kj);
        if (r.llt.info() == Eigen::Success && r.llt.matrixLLT().diagonal().minCoeff() > 0.0) {
            r.jitter = jitter;
            return r;
        }
    }
    throw NumericalError("kernel matrix is singular even with jitter 1e-4 * mean diagonal");
}

}  // namespace hmgp
