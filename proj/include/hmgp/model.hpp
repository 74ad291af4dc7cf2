#pragma once

// Initialization, active-set training, MAP inference of test latents and the
// trained-model container format.

#include "hmgp/common.hpp"
#include "hmgp/config.hpp"
#include "hmgp/dataio.hpp"
#include "hmgp/kernels.hpp"
#include "hmgp/objectives.hpp"
#include "hmgp/optimizer.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <map>
#include <random>
#include <thread>
#include <vector>

namespace hmgp {

// ---------------------------------------------------------------------------
// Initialization

struct CcaResult {
    Matrix directions1;  // d1 x q
    Matrix directions2;  // d2 x q
    Vector correlations;  // descending
    LatentMatrix latent;  // N x q, mean of the two projected views
};

namespace detail {

inline Matrix inverse_sqrt_spd(const Matrix &c) {
    Eigen::SelfAdjointEigenSolver<Matrix> es(c);
    if (es.info() != Eigen::Success || es.eigenvalues().minCoeff() <= 0.0) {
        throw NumericalError("covariance block is not positive definite after ridge");
    }
    return es.eigenvectors() * es.eigenvalues().cwiseSqrt().cwiseInverse().asDiagonal() * es.eigenvectors().transpose();
}

/// Flips each column so that its largest-magnitude entry is positive.
inline void fix_column_signs(Matrix &x, Matrix *a = nullptr, Matrix *b = nullptr) {
    for (Index j = 0; j < x.cols(); ++j) {
        Index arg = 0;
        x.col(j).cwiseAbs().maxCoeff(&arg);
        if (x(arg, j) < 0.0) {
            x.col(j) *= -1.0;
            if (a) a->col(j) *= -1.0;
            if (b) b->col(j) *= -1.0;
        }
    }
}

}  // namespace detail

/// Ridge-regularized two-view CCA (ridge added to both covariance blocks).
inline CcaResult cca(const Eigen::Ref<const Matrix> &y1, const Eigen::Ref<const Matrix> &y2, Index q,
                     double ridge = 1e-6) {
    const Index n = y1.rows();
    if (y2.rows() != n) throw DataError("CCA views must have the same number of rows");
    if (q < 1 || q > std::min(y1.cols(), y2.cols())) throw DataError("CCA needs 1 <= q <= min(d1, d2)");
    if (n <= q) throw DataError("CCA needs N > q");
    const Matrix c1 = y1.rowwise() - y1.colwise().mean();
    const Matrix c2 = y2.rowwise() - y2.colwise().mean();
    const double denom = static_cast<double>(n - 1);
    Matrix s11 = c1.transpose() * c1 / denom;
    Matrix s22 = c2.transpose() * c2 / denom;
    const Matrix s12 = c1.transpose() * c2 / denom;
    s11.diagonal().array() += ridge;
    s22.diagonal().array() += ridge;
    const Matrix w1 = detail::inverse_sqrt_spd(s11);
    const Matrix w2 = detail::inverse_sqrt_spd(s22);
    Eigen::JacobiSVD<Matrix> svd(w1 * s12 * w2, Eigen::ComputeThinU | Eigen::ComputeThinV);
    CcaResult r;
    r.directions1 = w1 * svd.matrixU().leftCols(q);
    r.directions2 = w2 * svd.matrixV().leftCols(q);
    r.correlations = svd.singularValues().head(q);
    r.latent = 0.5 * (c1 * r.directions1 + c2 * r.directions2);
    detail::fix_column_signs(r.latent, &r.directions1, &r.directions2);
    return r;
}

inline LatentMatrix cca_initialize(const Eigen::Ref<const Matrix> &y1, const Eigen::Ref<const Matrix> &y2, Index q) {
    return cca(y1, y2, q).latent;
}

/// Top-q principal components of the column-standardized, concatenated views,
/// scaled to unit variance.
inline LatentMatrix pca_initialize(const std::vector<Matrix> &views, Index q) {
    const Index n = views.front().rows();
    Index d = 0;
    for (const auto &v : views) d += v.cols();
    if (q > std::min(n - 1, d)) throw DataError("PCA init needs q <= min(N - 1, total dimension)");
    Matrix all(n, d);
    Index off = 0;
    for (const auto &v : views) {
        Matrix c = v.rowwise() - v.colwise().mean();
        for (Index j = 0; j < c.cols(); ++j) {
            const double sd = std::sqrt(c.col(j).squaredNorm() / static_cast<double>(n - 1));
            if (sd > 0.0) c.col(j) /= sd;
        }
        all.middleCols(off, v.cols()) = c;
        off += v.cols();
    }
    Eigen::JacobiSVD<Matrix> svd(all, Eigen::ComputeThinU);
    Matrix x = svd.matrixU().leftCols(q) * std::sqrt(static_cast<double>(n - 1));
    detail::fix_column_signs(x);
    return x;
}

inline LatentMatrix random_initialize(Index n, Index q, std::uint64_t seed) {
    std::mt19937_64 rng(seed ^ 0xA5A5A5A5ULL);
    std::normal_distribution<double> normal(0.0, 1.0);
    Matrix x(n, q);
    for (Index i = 0; i < n; ++i) {
        for (Index j = 0; j < q; ++j) x(i, j) = normal(rng);
    }
    return x;
}

// ---------------------------------------------------------------------------
// Semantic constraints

inline bool shares_label(const std::vector<int> &a, const std::vector<int> &b) {
    for (int x : a) {
        if (std::find(b.begin(), b.end(), x) != b.end()) return true;
    }
    return false;
}

/// Shared-label pairs become similar, disjoint-label pairs dissimilar; each set
/// is subsampled uniformly (seeded) to at most `budget` pairs.
inline SemanticConstraints constraints_from_labels(const LabelSet &labels, std::size_t budget, std::uint64_t seed,
                                                   double lambda_similar, double lambda_dissimilar) {
    SemanticConstraints c;
    c.lambda_similar = lambda_similar;
    c.lambda_dissimilar = lambda_dissimilar;
    const auto n = static_cast<Index>(labels.size());
    for (Index i = 0; i < n; ++i) {
        for (Index j = i + 1; j < n; ++j) {
            (shares_label(labels[static_cast<std::size_t>(i)], labels[static_cast<std::size_t>(j)]) ? c.similar
                                                                                                      : c.dissimilar)
                .emplace_back(i, j);
        }
    }
    std::mt19937_64 rng(seed ^ 0xC0FFEEULL);
    auto subsample = [&](std::vector<IndexPair> &pairs) {
        if (pairs.size() <= budget) return;
        for (std::size_t k = 0; k < budget; ++k) {
            std::uniform_int_distribution<std::size_t> pick(k, pairs.size() - 1);
            std::swap(pairs[k], pairs[pick(rng)]);
        }
        pairs.resize(budget);
        std::sort(pairs.begin(), pairs.end());
    };
    subsample(c.similar);
    subsample(c.dissimilar);
    return c;
}

/// Pair file: one "s i j" or "d i j" line per pair, indices into the dataset rows.
inline SemanticConstraints decode_pairs(std::string_view text) {
    SemanticConstraints c;
    std::istringstream in{std::string(text)};
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        std::istringstream ls(line);
        std::string kind;
        long long i = -1, j = -1;
        if (!(ls >> kind >> i >> j) || (kind != "s" && kind != "d") || i < 0 || j < 0) {
            throw ParseError("pairs: malformed line " + std::to_string(line_no));
        }
        (kind == "s" ? c.similar : c.dissimilar).emplace_back(static_cast<Index>(i), static_cast<Index>(j));
    }
    return c;
}

// ---------------------------------------------------------------------------
// Trained model

struct TrainedModel {
    ModelConfig cfg;
    LatentMatrix x;  // training latents
    std::vector<RbfHyperparams> thetas;
    std::vector<Matrix> train_features;  // raw training rows per modality
    std::vector<Vector> feature_means;   // column means used to center feature targets
    std::vector<double> feature_gammas;
    std::vector<Index> inference_set;    // training rows the predictive GP conditions on
    std::vector<double> jitters;         // jitter needed by each modality's final kernel
    std::uint64_t seed = 0;
    std::uint64_t split_seed = 0;

    [[nodiscard]] Index modalities() const { return static_cast<Index>(thetas.size()); }

    /// Kernel of modality c over all training latents.
    [[nodiscard]] KernelMatrix kernel(Index c) const { return rbf_kernel(x, thetas.at(static_cast<std::size_t>(c))); }
};

/// Targets for the objective: centered features or feature similarities.
inline ObjectiveInputs make_inputs(const TrainedModel &m, const SemanticConstraints &sem) {
    ObjectiveInputs in;
    in.similarity_targets = uses_similarity(m.cfg.variant);
    for (std::size_t c = 0; c < m.train_features.size(); ++c) {
        if (in.similarity_targets) {
            in.targets.push_back(feature_similarity(m.train_features[c], m.feature_gammas[c]).values);
        } else {
            in.targets.push_back(m.train_features[c].rowwise() - m.feature_means[c].transpose());
        }
    }
    in.semantics = sem;
    return in;
}

struct TrainResult {
    TrainedModel model;
    OptimTrace trace;
};

/// Runs active-set rotations over a fixed objective input.
///
/// Each rotation selects M objects, restricts the data to them and runs a fresh
/// SCG over their latents and all hyperparameters; the other latents stay
/// fixed. One epoch is ceil(N / M) rotations.
class ActiveSetTrainer {
public:
    ActiveSetTrainer(const ModelConfig &cfg, const ObjectiveInputs &inputs, LatentMatrix x,
                     std::vector<RbfHyperparams> thetas)
        : cfg_(cfg), inputs_(inputs), x_(std::move(x)), thetas_(std::move(thetas)) {}

    [[nodiscard]] Index active_size() const { return std::min(cfg_.active_set_size, x_.rows()); }
    [[nodiscard]] Index rotations_per_epoch() const {
        const Index m = active_size();
        return (x_.rows() + m - 1) / m;
    }

    void run_epoch(int epoch, OptimTrace &trace) {
        for (Index r = 0; r < rotations_per_epoch(); ++r) {
            const std::uint64_t rot_seed = cfg_.optim.seed * 1000003ULL + static_cast<std::uint64_t>(epoch) * 7919ULL +
                                           static_cast<std::uint64_t>(r);
            const auto active = select_active_set(x_.rows(), active_size(), cfg_.active_policy, rot_seed, &x_);
            run_rotation(active, trace);
        }
    }

    void run_rotation(const ActiveSet &active, OptimTrace &trace) {
        const ModelObjective obj(cfg_, restrict_to_active(inputs_, active));
        const Matrix xa = select_rows(x_, active.indices);
        const Vector p0 = obj.layout().pack(xa, thetas_);
        const auto res = scg_minimize([&](const Vector &p) { return obj.safe_value(p); },
                                      [&](const Vector &p) { return obj.safe_gradient(p); }, p0, cfg_.optim);
        trace.append(res.trace, segment_++);
        if (res.trace.status == OptimStatus::NumericalFailure && res.trace.entries.empty()) {
            throw NumericalError("objective is not finite at the start of a rotation");
        }
        const Matrix xn = obj.layout().latent(res.x);
        for (std::size_t k = 0; k < active.indices.size(); ++k) x_.row(active.indices[k]) = xn.row(static_cast<Index>(k));
        thetas_ = obj.layout().thetas(res.x);
    }

    [[nodiscard]] const LatentMatrix &latent() const { return x_; }
    [[nodiscard]] const std::vector<RbfHyperparams> &thetas() const { return thetas_; }

    /// Objective over all objects (no active-set restriction).
    [[nodiscard]] double full_objective() const {
        const ModelObjective obj(cfg_, inputs_);
        return obj.safe_value(obj.layout().pack(x_, thetas_));
    }

private:
    ModelConfig cfg_;
    const ObjectiveInputs &inputs_;
    LatentMatrix x_;
    std::vector<RbfHyperparams> thetas_;
    int segment_ = 0;
};

struct TrainOptions {
    /// Explicit constraint pairs (dataset row indices); otherwise derived from labels.
    std::optional<SemanticConstraints> pairs;
    /// Skip the full-data objective at start and end above this N.
    Index full_objective_limit = 3000;
    /// Replaces the initial latent (training rows) when set.
    std::optional<LatentMatrix> initial_latent;
};

inline LatentMatrix initial_latent(const ModelConfig &cfg, const std::vector<Matrix> &features) {
    switch (cfg.init) {
        case InitMethod::Cca: return cca_initialize(features[0], features[1], cfg.latent_dim);
        case InitMethod::Pca: return pca_initialize(features, cfg.latent_dim);
        case InitMethod::Random: return random_initialize(features[0].rows(), cfg.latent_dim, cfg.optim.seed);
    }
    return {};
}

inline TrainResult train(const DatasetBundle &bundle, const ModelConfig &cfg, const TrainOptions &opts = {}) {
    cfg.validate();
    bundle.validate();
    const auto train_idx = bundle.train_indices();
    const auto ntrain = static_cast<Index>(train_idx.size());
    if (ntrain < 2) throw DataError("training split needs at least two objects");

    TrainedModel m;
    m.cfg = cfg;
    m.seed = cfg.optim.seed;
    m.split_seed = bundle.split_seed;
    for (const auto &y : bundle.modalities) {
        m.train_features.push_back(select_rows(y, train_idx));
        m.feature_means.push_back(m.train_features.back().colwise().mean().transpose());
    }
    const auto nmod = m.train_features.size();
    if (!cfg.feature_gammas.empty() && cfg.feature_gammas.size() != nmod) {
        throw ConfigError("gamma_features needs one entry per modality");
    }
    for (std::size_t c = 0; c < nmod; ++c) {
        m.feature_gammas.push_back(cfg.feature_gammas.empty() ? median_sq_distance(m.train_features[c])
                                                              : cfg.feature_gammas[c]);
    }

    SemanticConstraints sem;
    sem.lambda_similar = cfg.lambda_similar;
    sem.lambda_dissimilar = cfg.lambda_dissimilar;
    if (uses_semantics(cfg.variant)) {
        if (opts.pairs) {
            std::vector<Index> pos(static_cast<std::size_t>(bundle.rows()), -1);
            for (std::size_t k = 0; k < train_idx.size(); ++k) pos[static_cast<std::size_t>(train_idx[k])] = static_cast<Index>(k);
            auto remap = [&](const std::vector<IndexPair> &in, std::vector<IndexPair> &out) {
                for (const auto &[i, j] : in) {
                    if (i >= bundle.rows() || j >= bundle.rows()) throw DataError("pair index out of range");
                    const Index a = pos[static_cast<std::size_t>(i)], b = pos[static_cast<std::size_t>(j)];
                    if (a >= 0 && b >= 0) out.emplace_back(a, b);
                }
            };
            remap(opts.pairs->similar, sem.similar);
            remap(opts.pairs->dissimilar, sem.dissimilar);
        } else if (bundle.labels) {
            sem = constraints_from_labels(select_labels(*bundle.labels, train_idx), cfg.pair_budget, cfg.optim.seed,
                                          cfg.lambda_similar, cfg.lambda_dissimilar);
        } else {
            throw DataError(std::string("variant ") + to_string(cfg.variant) + " needs labels or a pairs file");
        }
    }

    LatentMatrix x0 = opts.initial_latent ? *opts.initial_latent : initial_latent(cfg, m.train_features);
    if (x0.rows() != ntrain || x0.cols() != cfg.latent_dim) throw DataError("initial latent has the wrong shape");
    RbfHyperparams h0;
    h0.log_noise_variance = std::log(cfg.initial_noise_variance);
    std::vector<RbfHyperparams> thetas(nmod, h0);

    const auto inputs = make_inputs(m, sem);
    ActiveSetTrainer trainer(cfg, inputs, std::move(x0), std::move(thetas));
    TrainResult res;
    const bool track_full = ntrain <= opts.full_objective_limit;
    // With M < N each rotation descends on its own subset objective; the
    // full-data objective is recorded but not guaranteed to decrease.
    if (track_full) res.trace.initial_objective = trainer.full_objective();
    for (int e = 0; e < cfg.epochs; ++e) trainer.run_epoch(e, res.trace);
    if (track_full) res.trace.final_objective = trainer.full_objective();

    m.x = trainer.latent();
    m.thetas = trainer.thetas();
    if (cfg.infer_full_set || cfg.active_set_size >= ntrain) {
        m.inference_set = select_active_set(ntrain, ntrain, ActivePolicy::Random, 0).indices;
    } else {
        m.inference_set = select_active_set(ntrain, cfg.active_set_size, ActivePolicy::FarthestPoint,
                                            cfg.optim.seed + 17, &m.x).indices;
    }
    for (std::size_t c = 0; c < nmod; ++c) {
        m.jitters.push_back(safe_cholesky(rbf_kernel(select_rows(m.x, m.inference_set), m.thetas[c]).values).jitter);
    }
    res.model = std::move(m);
    return res;
}

// ---------------------------------------------------------------------------
// MAP inference

/// Predictive GP of one modality, conditioned on the model's inference set.
///
/// For a query latent x the negative log predictive density of an observation
/// o (centered features, or similarities to the conditioning rows) is
///   (D/2) ln s2(x) + |o - A^T k(x)|^2 / (2 s2(x)),   A = K^-1 T,
///   s2(x) = k(x, x) - k(x)^T K^-1 k(x),
/// with constants dropped.
class LatentInference {
public:
    LatentInference(const TrainedModel &model, Index modality) : model_(model), c_(static_cast<std::size_t>(modality)) {
        if (modality < 0 || modality >= model.modalities()) throw DataError("modality id out of range");
        theta_ = model.thetas[c_];
        xs_ = select_rows(model.x, model.inference_set);
        ys_ = select_rows(model.train_features[c_], model.inference_set);
        similarity_ = uses_similarity(model.cfg.variant);
        Matrix t = similarity_ ? feature_similarity(ys_, model.feature_gammas[c_]).values
                               : Matrix(ys_.rowwise() - model.feature_means[c_].transpose());
        const auto k = rbf_kernel(xs_, theta_);
        chol_ = safe_cholesky(k.values);
        alpha_ = chol_.llt.solve(t);
        kxx_ = theta_.signal_variance() + theta_.bias_variance() + theta_.noise_variance() + chol_.jitter;
    }

    [[nodiscard]] Index feature_dim() const { return model_.train_features[c_].cols(); }

    /// Observation vector the predictive density is evaluated on.
    [[nodiscard]] Vector observation(const Vector &y) const {
        if (y.size() != feature_dim()) {
            throw DataError("query has dimension " + std::to_string(y.size()) + ", modality expects " +
                            std::to_string(feature_dim()));
        }
        if (similarity_) {
            return feature_similarity_cross(y.transpose(), ys_, model_.feature_gammas[c_]).transpose();
        }
        return y - model_.feature_means[c_];
    }

    [[nodiscard]] double objective(const Vector &x, const Vector &obs, Vector *grad = nullptr) const {
        const double sf2 = theta_.signal_variance();
        const double l2 = theta_.lengthscale() * theta_.lengthscale();
        const Index m = xs_.rows();
        Vector e(m), k(m);
        for (Index j = 0; j < m; ++j) {
            e(j) = sf2 * std::exp(-0.5 * (x.transpose() - xs_.row(j)).squaredNorm() / l2);
            k(j) = e(j) + theta_.bias_variance();
        }
        const Vector kinv_k = chol_.llt.solve(k);
        const double s2 = std::max(kxx_ - k.dot(kinv_k), 1e-12);
        const Vector resid = obs - alpha_.transpose() * k;
        const double r = resid.squaredNorm();
        const double dd = static_cast<double>(obs.size());
        const double f = 0.5 * dd * std::log(s2) + 0.5 * r / s2;
        if (grad) {
            // dk_j/dx = -e_j (x - x_j) / l^2
            Matrix dk(m, x.size());
            for (Index j = 0; j < m; ++j) dk.row(j) = -e(j) / l2 * (x.transpose() - xs_.row(j));
            const Vector ds2 = -2.0 * dk.transpose() * kinv_k;
            const Vector dr = -2.0 * dk.transpose() * (alpha_ * resid);
            *grad = (0.5 * dd / s2 - 0.5 * r / (s2 * s2)) * ds2 + 0.5 / s2 * dr;
        }
        return f;
    }

    /// Training rows ordered by feature-space distance to y (first `count`).
    [[nodiscard]] std::vector<Index> nearest_training(const Vector &y, int count) const {
        const auto &f = model_.train_features[c_];
        std::vector<std::pair<double, Index>> d;
        d.reserve(static_cast<std::size_t>(f.rows()));
        for (Index i = 0; i < f.rows(); ++i) d.emplace_back((f.row(i) - y.transpose()).squaredNorm(), i);
        const auto k = std::min<std::size_t>(static_cast<std::size_t>(count), d.size());
        std::partial_sort(d.begin(), d.begin() + static_cast<std::ptrdiff_t>(k), d.end());
        std::vector<Index> out;
        for (std::size_t i = 0; i < k; ++i) out.push_back(d[i].second);
        return out;
    }

    struct Result {
        Vector x;
        double objective = 0.0;
        double initial_objective = 0.0;
    };

    [[nodiscard]] Result infer(const Vector &y) const {
        const Vector obs = observation(y);
        OptimOptions opts;
        opts.max_iters = model_.cfg.infer_iters;
        opts.grad_tol = 1e-8;
        opts.obj_tol = 1e-12;
        Result best;
        bool have = false;
        for (Index start : nearest_training(y, model_.cfg.infer_starts)) {
            const Vector x0 = model_.x.row(start).transpose();
            auto res = scg_minimize([&](const Vector &x) { return objective(x, obs); },
                                    [&](const Vector &x) {
                                        Vector g;
                                        (void)objective(x, obs, &g);
                                        return g;
                                    },
                                    x0, opts);
            if (!have || res.f < best.objective) {
                best = {res.x, res.f, res.trace.initial_objective};
                have = true;
            }
        }
        return best;
    }

private:
    const TrainedModel &model_;
    std::size_t c_;
    RbfHyperparams theta_;
    Matrix xs_, ys_, alpha_;
    CholeskyResult chol_;
    double kxx_ = 0.0;
    bool similarity_ = false;
};

/// Modality ids are zero-based here.
inline Vector infer_latent(const Vector &y, const TrainedModel &model, Index modality) {
    return LatentInference(model, modality).infer(y).x;
}

inline void parallel_for(Index n, int threads, const std::function<void(Index)> &fn) {
    const int t = std::max(1, std::min<int>(threads, static_cast<int>(std::max<Index>(n, 1))));
    if (t == 1) {
        for (Index i = 0; i < n; ++i) fn(i);
        return;
    }
    std::vector<std::thread> pool;
    std::vector<std::exception_ptr> errors(static_cast<std::size_t>(t));
    for (int w = 0; w < t; ++w) {
        pool.emplace_back([&, w] {
            try {
                for (Index i = w; i < n; i += t) fn(i);
            } catch (...) {
                errors[static_cast<std::size_t>(w)] = std::current_exception();
            }
        });
    }
    for (auto &th : pool) th.join();
    for (auto &e : errors) {
        if (e) std::rethrow_exception(e);
    }
}

/// Rows are inferred independently, so the result does not depend on `threads`.
inline LatentMatrix embed_test_set(const Eigen::Ref<const Matrix> &yt, Index modality, const TrainedModel &model,
                                   int threads = 1) {
    const LatentInference inf(model, modality);
    if (yt.rows() > 0 && yt.cols() != inf.feature_dim()) {
        throw DataError("test matrix has " + std::to_string(yt.cols()) + " columns, modality expects " +
                        std::to_string(inf.feature_dim()));
    }
    LatentMatrix out(yt.rows(), model.cfg.latent_dim);
    parallel_for(yt.rows(), threads, [&](Index i) { out.row(i) = inf.infer(yt.row(i).transpose()).x.transpose(); });
    return out;
}

// ---------------------------------------------------------------------------
// Serialization
//
// Container: "HMGP", u32 version, u32 metadata length, metadata JSON, u32 block
// count, then per block: u32 name length, name, u64 byte length, MTXB bytes.

inline std::string serialize_model(const TrainedModel &m) {
    nlohmann::json meta;
    meta["config"] = config_to_json(m.cfg);
    meta["variant"] = to_string(m.cfg.variant);
    meta["n"] = m.x.rows();
    meta["q"] = m.x.cols();
    meta["modalities"] = m.modalities();
    meta["feature_gammas"] = m.feature_gammas;
    meta["gamma_x"] = m.cfg.gamma_x;
    meta["seed"] = m.seed;
    meta["split_seed"] = m.split_seed;
    meta["jitters"] = m.jitters;

    std::vector<std::pair<std::string, std::string>> blocks;
    blocks.emplace_back("X", encode_mtxb(m.x));
    for (std::size_t c = 0; c < m.thetas.size(); ++c) {
        const auto t = m.thetas[c].pack();
        blocks.emplace_back("theta" + std::to_string(c + 1), encode_mtxb(Eigen::Map<const Eigen::RowVector4d>(t.data())));
        blocks.emplace_back("Y" + std::to_string(c + 1), encode_mtxb(m.train_features[c]));
        blocks.emplace_back("mean" + std::to_string(c + 1), encode_mtxb(m.feature_means[c].transpose()));
    }
    Matrix active(1, static_cast<Index>(m.inference_set.size()));
    for (std::size_t k = 0; k < m.inference_set.size(); ++k) active(0, static_cast<Index>(k)) = static_cast<double>(m.inference_set[k]);
    blocks.emplace_back("inference_set", encode_mtxb(active));

    std::string out = "HMGP";
    detail::put_u32(out, 1);
    const std::string js = meta.dump();
    detail::put_u32(out, static_cast<std::uint32_t>(js.size()));
    out += js;
    detail::put_u32(out, static_cast<std::uint32_t>(blocks.size()));
    for (const auto &[name, bytes] : blocks) {
        detail::put_u32(out, static_cast<std::uint32_t>(name.size()));
        out += name;
        const std::uint64_t len = bytes.size();
        char b[8];
        std::memcpy(b, &len, 8);
        out.append(b, 8);
        out += bytes;
    }
    return out;
}

inline TrainedModel deserialize_model(std::string_view bytes) {
    std::size_t pos = 0;
    auto need = [&](std::size_t k) {
        if (pos + k > bytes.size()) throw ParseError("model: truncated at byte " + std::to_string(pos));
    };
    need(12);
    if (bytes.substr(0, 4) != "HMGP") throw ParseError("model: bad magic at byte 0");
    if (detail::get_u32(bytes.data() + 4) != 1) throw ParseError("model: unsupported version at byte 4");
    const std::uint32_t jlen = detail::get_u32(bytes.data() + 8);
    pos = 12;
    need(jlen);
    nlohmann::json meta;
    try {
        meta = nlohmann::json::parse(bytes.substr(pos, jlen));
    } catch (const nlohmann::json::exception &e) {
        throw ParseError("model: metadata at byte 12: " + std::string(e.what()));
    }
    pos += jlen;
    need(4);
    const std::uint32_t nblocks = detail::get_u32(bytes.data() + pos);
    pos += 4;
    std::map<std::string, Matrix> blocks;
    for (std::uint32_t b = 0; b < nblocks; ++b) {
        need(4);
        const std::uint32_t nlen = detail::get_u32(bytes.data() + pos);
        pos += 4;
        need(nlen);
        std::string name(bytes.substr(pos, nlen));
        pos += nlen;
        need(8);
        std::uint64_t len;
        std::memcpy(&len, bytes.data() + pos, 8);
        pos += 8;
        need(len);
        blocks[name] = decode_mtxb(bytes.substr(pos, len));
        pos += len;
    }
    auto block = [&](const std::string &name) -> const Matrix & {
        auto it = blocks.find(name);
        if (it == blocks.end()) throw ParseError("model: missing block " + name);
        return it->second;
    };

    TrainedModel m;
    try {
        m.cfg = parse_config(meta.at("config"));
        m.feature_gammas = meta.at("feature_gammas").get<std::vector<double>>();
        m.seed = meta.at("seed").get<std::uint64_t>();
        m.split_seed = meta.at("split_seed").get<std::uint64_t>();
        m.jitters = meta.at("jitters").get<std::vector<double>>();
        const auto nmod = meta.at("modalities").get<std::size_t>();
        m.x = block("X");
        for (std::size_t c = 1; c <= nmod; ++c) {
            const Matrix &t = block("theta" + std::to_string(c));
            if (t.size() != RbfHyperparams::kCount) throw ParseError("model: theta block has the wrong size");
            m.thetas.push_back(RbfHyperparams::unpack(t.data()));
            m.train_features.push_back(block("Y" + std::to_string(c)));
            m.feature_means.push_back(block("mean" + std::to_string(c)).transpose());
        }
        const Matrix &active = block("inference_set");
        for (Index k = 0; k < active.cols(); ++k) m.inference_set.push_back(static_cast<Index>(active(0, k)));
    } catch (const nlohmann::json::exception &e) {
        throw ParseError("model: metadata: " + std::string(e.what()));
    }
    return m;
}

inline void save_model(const TrainedModel &m, const std::filesystem::path &p) { write_file_atomic(p, serialize_model(m)); }
inline TrainedModel load_model(const std::filesystem::path &p) { return deserialize_model(read_file(p)); }

}  // namespace hmgp
