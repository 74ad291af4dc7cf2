#pragma once

// Negative log-likelihoods, harmonization penalties, latent priors and the
// assembled model objective with its analytic gradient.
//
// All negative log-likelihoods drop their additive 2*pi constants.

#include "hmgp/common.hpp"
#include "hmgp/config.hpp"
#include "hmgp/kernels.hpp"
#include "hmgp/optimizer.hpp"

#include <array>
#include <cmath>
#include <set>
#include <string>
#include <utility>
#include <vector>

namespace hmgp {

using IndexPair = std::pair<Index, Index>;

struct SemanticConstraints {
    std::vector<IndexPair> similar;
    std::vector<IndexPair> dissimilar;
    double lambda_similar = 1.0;
    double lambda_dissimilar = 1.0;

    [[nodiscard]] bool empty() const { return similar.empty() && dissimilar.empty(); }

    void validate(Index n) const {
        if (!(lambda_similar >= 0.0) || !(lambda_dissimilar >= 0.0)) throw ConfigError("lambda must be >= 0");
        auto key = [](IndexPair p) { return p.first < p.second ? p : IndexPair{p.second, p.first}; };
        std::set<IndexPair> seen;
        for (const auto &p : similar) {
            if (p.first == p.second) throw DataError("self-pair in similar set");
            if (p.first < 0 || p.second < 0 || p.first >= n || p.second >= n) throw DataError("similar pair index out of range");
            seen.insert(key(p));
        }
        for (const auto &p : dissimilar) {
            if (p.first == p.second) throw DataError("self-pair in dissimilar set");
            if (p.first < 0 || p.second < 0 || p.first >= n || p.second >= n) {
                throw DataError("dissimilar pair index out of range");
            }
            if (seen.count(key(p)) != 0) throw DataError("pair appears in both similar and dissimilar sets");
        }
    }
};

struct ObjectiveValue {
    double total = 0.0;
    std::vector<std::pair<std::string, double>> breakdown;

    void add(std::string name, double v) {
        breakdown.emplace_back(std::move(name), v);
        total += v;
    }

    [[nodiscard]] double term(const std::string &name) const {
        for (const auto &[n, v] : breakdown) {
            if (n == name) return v;
        }
        throw Error("no objective term named " + name);
    }
};

// ---------------------------------------------------------------------------
// Scalar terms

/// (D/2) ln|K| + (1/2) tr(K^-1 T T^T) with D = T.cols(), from a factor of K.
inline double gp_nll(const Eigen::Ref<const Matrix> &targets, const CholeskyResult &chol) {
    const Matrix a = chol.llt.matrixL().solve(targets);
    return 0.5 * static_cast<double>(targets.cols()) * chol.log_det() + 0.5 * a.squaredNorm();
}

/// Feature-space GPLVM: (d/2) ln|K| + (1/2) tr(K^-1 Y Y^T).
inline double nll_gplvm(const Eigen::Ref<const Matrix> &y, const KernelMatrix &k) {
    if (y.rows() != k.size()) throw DataError("Y rows must match the kernel size");
    return gp_nll(y, safe_cholesky(k.values));
}

/// Similarity GPLVM: (N/2) ln|K| + (1/2) tr(K^-1 S S^T).
inline double nll_simgp(const SimilarityMatrix &s, const KernelMatrix &k) {
    if (s.size() != k.size()) throw DataError("similarity and kernel sizes differ");
    return gp_nll(s.values, safe_cholesky(k.values));
}

inline void check_same_size(const Eigen::Ref<const Matrix> &k, const Eigen::Ref<const Matrix> &sx) {
    if (k.rows() != sx.rows() || k.cols() != sx.cols()) throw DataError("kernel and latent similarity sizes differ");
}

inline double harmonization_loss(const Eigen::Ref<const Matrix> &k, const Eigen::Ref<const Matrix> &sx,
                                 HarmonizationKind kind, double constant_value = 0.0) {
    check_same_size(k, sx);
    switch (kind) {
        case HarmonizationKind::FNorm: return (k - sx).squaredNorm();
        case HarmonizationKind::L21: return (k - sx).colwise().norm().sum();
        case HarmonizationKind::Trace: {
            const auto chol = safe_cholesky(k);
            return 0.5 * chol.llt.solve(sx).trace();
        }
        case HarmonizationKind::Constant: return constant_value;
    }
    return 0.0;
}

inline double harmonization_loss(const KernelMatrix &k, const SimilarityMatrix &sx, HarmonizationKind kind) {
    return harmonization_loss(k.values, sx.values, kind);
}

/// Symmetric outer sensitivities dH/dK and dH/dSx.
struct HarmonizationSensitivity {
    Matrix wrt_kernel;
    Matrix wrt_similarity;
};

/// `kinv` is required for the trace kind and ignored otherwise.
inline HarmonizationSensitivity harmonization_sensitivity(const Eigen::Ref<const Matrix> &k,
                                                          const Eigen::Ref<const Matrix> &sx, HarmonizationKind kind,
                                                          const Matrix *kinv = nullptr) {
    check_same_size(k, sx);
    const Index n = k.rows();
    HarmonizationSensitivity s;
    switch (kind) {
        case HarmonizationKind::FNorm: {
            s.wrt_kernel = 2.0 * (k - sx);
            s.wrt_similarity = -s.wrt_kernel;
            break;
        }
        case HarmonizationKind::L21: {
            const Matrix diff = k - sx;
            Matrix g(n, n);
            for (Index j = 0; j < n; ++j) {
                const double norm = diff.col(j).norm();
                // zero subgradient for a zero column
                if (norm > 0.0) {
                    g.col(j) = diff.col(j) / norm;
                } else {
                    g.col(j).setZero();
                }
            }
            s.wrt_kernel = 0.5 * (g + g.transpose());
            s.wrt_similarity = -s.wrt_kernel;
            break;
        }
        case HarmonizationKind::Trace: {
            Matrix owned;
            if (kinv == nullptr) {
                owned = safe_cholesky(k).inverse();
                kinv = &owned;
            }
            s.wrt_kernel = -0.5 * (*kinv) * sx * (*kinv);
            s.wrt_kernel = 0.5 * (s.wrt_kernel + s.wrt_kernel.transpose()).eval();
            s.wrt_similarity = 0.5 * (*kinv);
            break;
        }
        case HarmonizationKind::Constant: {
            s.wrt_kernel = Matrix::Zero(n, n);
            s.wrt_similarity = Matrix::Zero(n, n);
            break;
        }
    }
    return s;
}

struct HarmonizationGrad {
    Matrix x;
    std::array<double, RbfHyperparams::kCount> theta{};
};

/// Gradient of H(K(X, theta), Sx(X)) with respect to X and theta.
inline HarmonizationGrad harmonization_grad(const KernelMatrix &k, const SimilarityMatrix &sx, HarmonizationKind kind,
                                            const RbfKernelGrads &kgrads, const Eigen::Ref<const Matrix> &x) {
    const auto sens = harmonization_sensitivity(k.values, sx.values, kind);
    HarmonizationGrad g;
    g.x = kgrads.contract_x(sens.wrt_kernel, x) + latent_similarity_contract_x(sens.wrt_similarity, sx, x);
    g.theta = kgrads.contract_theta(sens.wrt_kernel);
    return g;
}

/// lambda_1 * sum_S |x_i - x_j|^2 + lambda_2 * sum_D max(0, 1 - |x_i - x_j|^2)
inline double semantic_penalty(const Eigen::Ref<const Matrix> &x, const SemanticConstraints &c) {
    double sim = 0.0, dis = 0.0;
    for (const auto &[i, j] : c.similar) sim += (x.row(i) - x.row(j)).squaredNorm();
    for (const auto &[i, j] : c.dissimilar) dis += std::max(0.0, 1.0 - (x.row(i) - x.row(j)).squaredNorm());
    return c.lambda_similar * sim + c.lambda_dissimilar * dis;
}

inline Matrix semantic_penalty_grad(const Eigen::Ref<const Matrix> &x, const SemanticConstraints &c) {
    Matrix g = Matrix::Zero(x.rows(), x.cols());
    for (const auto &[i, j] : c.similar) {
        const Eigen::RowVectorXd d = 2.0 * c.lambda_similar * (x.row(i) - x.row(j));
        g.row(i) += d;
        g.row(j) -= d;
    }
    for (const auto &[i, j] : c.dissimilar) {
        const Eigen::RowVectorXd diff = x.row(i) - x.row(j);
        if (diff.squaredNorm() < 1.0) {
            g.row(i) -= 2.0 * c.lambda_dissimilar * diff;
            g.row(j) += 2.0 * c.lambda_dissimilar * diff;
        }
    }
    return g;
}

/// Negative log of prod_n N(x_n | 0, I) without constants.
inline double gaussian_latent_prior(const Eigen::Ref<const Matrix> &x) {
    return 0.5 * x.squaredNorm();
}

// ---------------------------------------------------------------------------
// Parameter packing

/// Flat layout: X row-major (n*q entries), then four log-hyperparameters per modality.
struct ParamLayout {
    Index n = 0;
    Index q = 0;
    Index modalities = 0;

    [[nodiscard]] Index size() const { return n * q + RbfHyperparams::kCount * modalities; }
    [[nodiscard]] Index theta_offset(Index c) const { return n * q + RbfHyperparams::kCount * c; }

    [[nodiscard]] Vector pack(const Eigen::Ref<const Matrix> &x, const std::vector<RbfHyperparams> &thetas) const {
        if (x.rows() != n || x.cols() != q || static_cast<Index>(thetas.size()) != modalities) {
            throw DataError("parameter shapes do not match the layout");
        }
        Vector p(size());
        for (Index i = 0; i < n; ++i) {
            for (Index d = 0; d < q; ++d) p(i * q + d) = x(i, d);
        }
        for (Index c = 0; c < modalities; ++c) {
            const auto t = thetas[static_cast<std::size_t>(c)].pack();
            for (int k = 0; k < RbfHyperparams::kCount; ++k) p(theta_offset(c) + k) = t[static_cast<std::size_t>(k)];
        }
        return p;
    }

    [[nodiscard]] Matrix latent(const Vector &p) const {
        Matrix x(n, q);
        for (Index i = 0; i < n; ++i) {
            for (Index d = 0; d < q; ++d) x(i, d) = p(i * q + d);
        }
        return x;
    }

    [[nodiscard]] RbfHyperparams theta(const Vector &p, Index c) const {
        return RbfHyperparams::unpack(p.data() + theta_offset(c));
    }

    [[nodiscard]] std::vector<RbfHyperparams> thetas(const Vector &p) const {
        std::vector<RbfHyperparams> out;
        for (Index c = 0; c < modalities; ++c) out.push_back(theta(p, c));
        return out;
    }
};

// ---------------------------------------------------------------------------
// Model objective

/// Data side of the objective. `targets[c]` is Y^c (n x d_c) for the feature
/// GPLVM variants and S^c (n x n) for the similarity variants.
struct ObjectiveInputs {
    std::vector<Matrix> targets;
    bool similarity_targets = false;
    SemanticConstraints semantics;

    [[nodiscard]] Index rows() const { return targets.empty() ? 0 : targets.front().rows(); }
};

/// Restricts targets and constraint pairs to the objects in `active`; pairs with
/// an endpoint outside the set are dropped and the rest are renumbered.
inline ObjectiveInputs restrict_to_active(const ObjectiveInputs &in, const ActiveSet &active) {
    ObjectiveInputs out;
    out.similarity_targets = in.similarity_targets;
    for (const auto &t : in.targets) {
        out.targets.push_back(in.similarity_targets ? select_block(t, active.indices) : select_rows(t, active.indices));
    }
    std::vector<Index> position(static_cast<std::size_t>(in.rows()), -1);
    for (std::size_t k = 0; k < active.indices.size(); ++k) {
        position[static_cast<std::size_t>(active.indices[k])] = static_cast<Index>(k);
    }
    auto remap = [&](const std::vector<IndexPair> &pairs) {
        std::vector<IndexPair> kept;
        for (const auto &[i, j] : pairs) {
            const Index a = position[static_cast<std::size_t>(i)], b = position[static_cast<std::size_t>(j)];
            if (a >= 0 && b >= 0) kept.emplace_back(a, b);
        }
        return kept;
    };
    out.semantics.lambda_similar = in.semantics.lambda_similar;
    out.semantics.lambda_dissimilar = in.semantics.lambda_dissimilar;
    out.semantics.similar = remap(in.semantics.similar);
    out.semantics.dissimilar = remap(in.semantics.dissimilar);
    return out;
}

/// Objective and gradient of one model variant over fixed data.
///
/// total = sum_c NLL_c + sum_c mu_c H_c(K_c, Sx) [+ semantic terms] [+ 0.5 |X|^2]
class ModelObjective {
public:
    ModelObjective(ModelConfig cfg, ObjectiveInputs inputs) : cfg_(std::move(cfg)), in_(std::move(inputs)) {
        if (in_.targets.size() < 2) throw DataError("at least two modalities are required");
        const Index n = in_.rows();
        for (const auto &t : in_.targets) {
            if (t.rows() != n) throw DataError("all modalities must have the same number of rows");
            if (in_.similarity_targets && t.cols() != n) throw DataError("similarity targets must be square");
        }
        if (uses_similarity(cfg_.variant) != in_.similarity_targets) {
            throw DataError(std::string("variant ") + to_string(cfg_.variant) +
                            (in_.similarity_targets ? " expects feature targets" : " expects similarity targets"));
        }
        if (uses_semantics(cfg_.variant)) {
            in_.semantics.validate(n);
        }
        if (is_harmonized(cfg_.variant) && !cfg_.harmonization) {
            throw ConfigError("harmonized variant without harmonization spec");
        }
        grams_.reserve(in_.targets.size());
        for (const auto &t : in_.targets) grams_.push_back(t * t.transpose());
        layout_ = {n, cfg_.latent_dim, static_cast<Index>(in_.targets.size())};
    }

    [[nodiscard]] const ParamLayout &layout() const { return layout_; }
    [[nodiscard]] const ModelConfig &config() const { return cfg_; }
    [[nodiscard]] const ObjectiveInputs &inputs() const { return in_; }

    [[nodiscard]] ObjectiveValue value(const Vector &params) const { return evaluate(params, nullptr); }

    [[nodiscard]] Vector gradient(const Vector &params) const {
        Vector g;
        evaluate(params, &g);
        return g;
    }

    /// Returns +inf instead of throwing when a kernel cannot be factorized.
    [[nodiscard]] double safe_value(const Vector &params) const {
        try {
            return value(params).total;
        } catch (const NumericalError &) {
            return std::numeric_limits<double>::infinity();
        }
    }

    [[nodiscard]] Vector safe_gradient(const Vector &params) const {
        try {
            return gradient(params);
        } catch (const NumericalError &) {
            return Vector::Constant(params.size(), std::numeric_limits<double>::quiet_NaN());
        }
    }

    ObjectiveValue evaluate(const Vector &params, Vector *grad) const {
        if (params.size() != layout_.size()) throw DataError("parameter vector has the wrong length");
        const Matrix x = layout_.latent(params);
        const auto nmod = in_.targets.size();
        const bool harmonized = is_harmonized(cfg_.variant);

        std::vector<KernelMatrix> kernels(nmod);
        std::vector<CholeskyResult> chols(nmod);
        std::vector<Matrix> kinvs(nmod);
        std::vector<double> nlls(nmod);
        for (std::size_t c = 0; c < nmod; ++c) {
            const auto theta = layout_.theta(params, static_cast<Index>(c));
            kernels[c] = rbf_kernel(x, theta);
            chols[c] = safe_cholesky(kernels[c].values);
            if (chols[c].jitter > 0.0) {
                kernels[c].values.diagonal().array() += chols[c].jitter;
                kernels[c].jitter_applied = chols[c].jitter;
            }
            kinvs[c] = chols[c].inverse();
            const double d = static_cast<double>(in_.targets[c].cols());
            nlls[c] = 0.5 * d * chols[c].log_det() + 0.5 * kinvs[c].cwiseProduct(grams_[c]).sum();
        }

        ObjectiveValue out;
        for (std::size_t c = 0; c < nmod; ++c) {
            out.add("nll" + std::to_string(c + 1) + "_no_const", nlls[c]);
        }

        SimilarityMatrix sx;
        std::vector<double> weighted_h(nmod, 0.0);
        if (harmonized) {
            sx = latent_similarity(x, cfg_.gamma_x);
            const auto &hs = *cfg_.harmonization;
            for (std::size_t c = 0; c < nmod; ++c) {
                double h = 0.0;
                if (hs.kind == HarmonizationKind::Trace) {
                    h = 0.5 * kinvs[c].cwiseProduct(sx.values).sum();
                } else {
                    h = harmonization_loss(kernels[c].values, sx.values, hs.kind, hs.constant_value);
                }
                weighted_h[c] = hs.weight(c) * h;
            }
            for (std::size_t c = 0; c < nmod; ++c) {
                out.add("harmonization" + std::to_string(c + 1), weighted_h[c]);
            }
        }
        if (cfg_.gaussian_prior_active()) out.add("latent_prior_no_const", gaussian_latent_prior(x));
        if (uses_semantics(cfg_.variant)) {
            SemanticConstraints sim_only = in_.semantics, dis_only = in_.semantics;
            sim_only.dissimilar.clear();
            dis_only.similar.clear();
            out.add("semantic_similar", semantic_penalty(x, sim_only));
            out.add("semantic_dissimilar", semantic_penalty(x, dis_only));
        }

        if (grad == nullptr) return out;

        Matrix gx = Matrix::Zero(x.rows(), x.cols());
        grad->resize(layout_.size());
        Matrix gsx;
        if (harmonized) gsx = Matrix::Zero(x.rows(), x.rows());
        for (std::size_t c = 0; c < nmod; ++c) {
            const auto theta = layout_.theta(params, static_cast<Index>(c));
            const double d = static_cast<double>(in_.targets[c].cols());
            // dNLL/dK = (D/2) K^-1 - (1/2) K^-1 T T^T K^-1
            Matrix gk = 0.5 * d * kinvs[c] - 0.5 * kinvs[c] * grams_[c] * kinvs[c];
            if (harmonized) {
                const auto &hs = *cfg_.harmonization;
                const double mu = hs.weight(c);
                const auto sens = harmonization_sensitivity(kernels[c].values, sx.values, hs.kind, &kinvs[c]);
                gk += mu * sens.wrt_kernel;
                gsx += mu * sens.wrt_similarity;
            }
            gk = 0.5 * (gk + gk.transpose()).eval();
            const auto kg = rbf_kernel_grads(x, theta);
            gx += kg.contract_x(gk, x);
            const auto gt = kg.contract_theta(gk);
            for (int k = 0; k < RbfHyperparams::kCount; ++k) {
                (*grad)(layout_.theta_offset(static_cast<Index>(c)) + k) = gt[static_cast<std::size_t>(k)];
            }
        }
        if (harmonized) gx += latent_similarity_contract_x(gsx, sx, x);
        if (cfg_.gaussian_prior_active()) gx += x;
        if (uses_semantics(cfg_.variant)) gx += semantic_penalty_grad(x, in_.semantics);

        for (Index i = 0; i < x.rows(); ++i) {
            for (Index q = 0; q < x.cols(); ++q) (*grad)(i * x.cols() + q) = gx(i, q);
        }
        return out;
    }

private:
    ModelConfig cfg_;
    ObjectiveInputs in_;
    std::vector<Matrix> grams_;
    ParamLayout layout_;
};

inline ObjectiveValue model_objective(const Vector &params, const ObjectiveInputs &inputs, const ModelConfig &cfg) {
    return ModelObjective(cfg, inputs).value(params);
}

inline Vector model_gradient(const Vector &params, const ObjectiveInputs &inputs, const ModelConfig &cfg) {
    return ModelObjective(cfg, inputs).gradient(params);
}

}  // namespace hmgp
