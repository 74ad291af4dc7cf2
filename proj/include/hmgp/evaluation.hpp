#pragma once

// Cross-modal retrieval metrics and kernel/similarity divergence diagnostics.

#include "hmgp/common.hpp"
#include "hmgp/dataio.hpp"
#include "hmgp/kernels.hpp"
#include "hmgp/model.hpp"

#include <json.hpp>

#include <algorithm>
#include <array>
#include <cmath>
#include <numeric>
#include <ostream>
#include <vector>

namespace hmgp {

/// 1 iff the two label sets intersect.
inline int relevance(const std::vector<int> &query, const std::vector<int> &item) {
    if (query.empty() || item.empty()) throw DataError("relevance needs non-empty label sets");
    return shares_label(query, item) ? 1 : 0;
}

struct RankedRetrieval {
    Index query_index = 0;
    std::vector<Index> order;      // database indices, nearest first
    std::vector<double> distances; // along `order`
    std::vector<int> relevant;     // along `order`
};

/// AP = (1/T) sum_r p(r) rel(r); 0 when nothing is relevant. Accumulated in
/// extended precision so short lists round correctly (AP([1,0,1]) == 5.0/6).
inline double average_precision(const std::vector<int> &rel) {
    long double sum = 0.0L;
    int hits = 0;
    for (std::size_t r = 0; r < rel.size(); ++r) {
        if (rel[r]) {
            ++hits;
            sum += static_cast<long double>(hits) / static_cast<long double>(r + 1);
        }
    }
    return hits > 0 ? static_cast<double>(sum / hits) : 0.0;
}

inline double mean_ap(const std::vector<RankedRetrieval> &queries) {
    if (queries.empty()) throw DataError("mAP needs at least one query");
    double s = 0.0;
    for (const auto &q : queries) s += average_precision(q.relevant);
    return s / static_cast<double>(queries.size());
}

/// Ascending Euclidean distance, ties by ascending database index. Relevance
/// flags are filled when both label sets are given.
inline std::vector<RankedRetrieval> rank_by_distance(const Eigen::Ref<const Matrix> &queries,
                                                     const Eigen::Ref<const Matrix> &db,
                                                     const LabelSet *query_labels = nullptr,
                                                     const LabelSet *db_labels = nullptr) {
    if (queries.cols() != db.cols()) throw DataError("query and database latents differ in dimension");
    const Matrix d2 = pairwise_sq_dists(queries, db);
    std::vector<RankedRetrieval> out(static_cast<std::size_t>(queries.rows()));
    for (Index qi = 0; qi < queries.rows(); ++qi) {
        auto &r = out[static_cast<std::size_t>(qi)];
        r.query_index = qi;
        r.order.resize(static_cast<std::size_t>(db.rows()));
        std::iota(r.order.begin(), r.order.end(), Index{0});
        std::stable_sort(r.order.begin(), r.order.end(), [&](Index a, Index b) { return d2(qi, a) < d2(qi, b); });
        for (Index j : r.order) {
            r.distances.push_back(std::sqrt(d2(qi, j)));
            if (query_labels && db_labels) {
                r.relevant.push_back(relevance((*query_labels)[static_cast<std::size_t>(qi)],
                                               (*db_labels)[static_cast<std::size_t>(j)]));
            }
        }
    }
    return out;
}

struct PrCurve {
    std::array<double, 11> recall_levels{};
    std::array<double, 11> precision{};
};

/// 11-point interpolated precision averaged over queries. Queries without any
/// relevant item are skipped.
inline PrCurve precision_recall(const std::vector<RankedRetrieval> &queries) {
    PrCurve c;
    for (int l = 0; l <= 10; ++l) c.recall_levels[static_cast<std::size_t>(l)] = l / 10.0;
    int used = 0;
    for (const auto &q : queries) {
        const auto total = std::accumulate(q.relevant.begin(), q.relevant.end(), 0);
        if (total == 0) continue;
        ++used;
        std::vector<double> prec, rec;
        int hits = 0;
        for (std::size_t r = 0; r < q.relevant.size(); ++r) {
            hits += q.relevant[r];
            prec.push_back(static_cast<double>(hits) / static_cast<double>(r + 1));
            rec.push_back(static_cast<double>(hits) / total);
        }
        for (int l = 0; l <= 10; ++l) {
            const double level = l / 10.0;
            double best = 0.0;
            for (std::size_t r = 0; r < prec.size(); ++r) {
                if (rec[r] >= level - 1e-12) best = std::max(best, prec[r]);
            }
            c.precision[static_cast<std::size_t>(l)] += best;
        }
    }
    if (used > 0) {
        for (auto &p : c.precision) p /= used;
    }
    return c;
}

/// Mean precision and recall at every rank (queries without relevant items skipped).
struct RankSamples {
    std::vector<double> precision;
    std::vector<double> recall;
};

inline RankSamples per_rank_samples(const std::vector<RankedRetrieval> &queries) {
    RankSamples s;
    int used = 0;
    for (const auto &q : queries) {
        const auto total = std::accumulate(q.relevant.begin(), q.relevant.end(), 0);
        if (total == 0) continue;
        ++used;
        s.precision.resize(std::max(s.precision.size(), q.relevant.size()), 0.0);
        s.recall.resize(s.precision.size(), 0.0);
        int hits = 0;
        for (std::size_t r = 0; r < q.relevant.size(); ++r) {
            hits += q.relevant[r];
            s.precision[r] += static_cast<double>(hits) / static_cast<double>(r + 1);
            s.recall[r] += static_cast<double>(hits) / total;
        }
    }
    for (std::size_t r = 0; r < s.precision.size() && used > 0; ++r) {
        s.precision[r] /= used;
        s.recall[r] /= used;
    }
    return s;
}

inline void write_pr_csv(const PrCurve &c, std::ostream &os) {
    os << "recall,precision\n";
    os.precision(17);
    for (std::size_t l = 0; l < c.precision.size(); ++l) os << c.recall_levels[l] << ',' << c.precision[l] << '\n';
}

struct DirectionReport {
    double map = 0.0;
    std::vector<double> per_query_ap;
    PrCurve pr;
    RankSamples ranks;
};

struct MetricReport {
    DirectionReport a_to_b;  // e.g. image -> text
    DirectionReport b_to_a;
    [[nodiscard]] double average() const { return 0.5 * (a_to_b.map + b_to_a.map); }

    [[nodiscard]] nlohmann::json to_json() const {
        return {{"I2T", a_to_b.map}, {"T2I", b_to_a.map}, {"Average", average()}};
    }
};

inline DirectionReport evaluate_direction(const Matrix &queries, const Matrix &db, const LabelSet &labels) {
    DirectionReport d;
    const auto ranked = rank_by_distance(queries, db, &labels, &labels);
    for (const auto &r : ranked) d.per_query_ap.push_back(average_precision(r.relevant));
    d.map = mean_ap(ranked);
    d.pr = precision_recall(ranked);
    d.ranks = per_rank_samples(ranked);
    return d;
}

/// Both retrieval directions between paired latent sets sharing one label list.
inline MetricReport evaluate_retrieval(const Matrix &latents_a, const Matrix &latents_b, const LabelSet &labels) {
    if (latents_a.rows() != latents_b.rows() || static_cast<Index>(labels.size()) != latents_a.rows()) {
        throw DataError("paired latents and labels must have the same number of rows");
    }
    return {evaluate_direction(latents_a, latents_b, labels), evaluate_direction(latents_b, latents_a, labels)};
}

/// sqrt(sum_i ln^2 lambda_i) over the generalized eigenvalues of the pencil (A, B).
inline double riemannian_distance(const Eigen::Ref<const Matrix> &a, const Eigen::Ref<const Matrix> &b) {
    if (a.rows() != b.rows() || a.rows() != a.cols() || b.rows() != b.cols()) {
        throw DataError("Riemannian distance needs square matrices of the same size");
    }
    const auto ca = safe_cholesky(a);
    const auto cb = safe_cholesky(b);
    Matrix aj = a, bj = b;
    aj.diagonal().array() += ca.jitter;
    bj.diagonal().array() += cb.jitter;
    // L^-1 A L^-T has the generalized eigenvalues of (A, B) for B = L L^T.
    const Matrix lb = cb.lower();
    Matrix m = lb.triangularView<Eigen::Lower>().solve(aj);
    m = lb.triangularView<Eigen::Lower>().solve(m.transpose()).transpose();
    m = 0.5 * (m + m.transpose()).eval();
    Eigen::SelfAdjointEigenSolver<Matrix> es(m, Eigen::EigenvaluesOnly);
    if (es.info() != Eigen::Success) throw NumericalError("generalized eigenvalue solver failed");
    double s = 0.0;
    for (Index i = 0; i < es.eigenvalues().size(); ++i) {
        const double l = es.eigenvalues()(i);
        if (!(l > 0.0)) throw NumericalError("pencil is not positive definite");
        s += std::log(l) * std::log(l);
    }
    return std::sqrt(s);
}

struct ModalityDivergence {
    double riemannian = 0.0;
    double frobenius = 0.0;
    Matrix abs_difference;
    double kernel_diagonal = 0.0;
    double similarity_diagonal = 1.0;
};

struct DivergenceReport {
    std::vector<ModalityDivergence> modalities;
    [[nodiscard]] double total_riemannian() const {
        double s = 0.0;
        for (const auto &m : modalities) s += m.riemannian;
        return s;
    }
    [[nodiscard]] double total_frobenius() const {
        double s = 0.0;
        for (const auto &m : modalities) s += m.frobenius;
        return s;
    }

    [[nodiscard]] nlohmann::json to_json() const {
        nlohmann::json j;
        j["modalities"] = nlohmann::json::array();
        for (std::size_t c = 0; c < modalities.size(); ++c) {
            const auto &m = modalities[c];
            j["modalities"].push_back({{"modality", c + 1},
                                       {"riemannian", m.riemannian},
                                       {"frobenius", m.frobenius},
                                       {"kernel_diagonal", m.kernel_diagonal},
                                       {"similarity_diagonal", m.similarity_diagonal}});
        }
        j["total_riemannian"] = total_riemannian();
        j["total_frobenius"] = total_frobenius();
        return j;
    }
};

/// d(K_c, Sx) and |K_c - Sx| over all training latents.
inline DivergenceReport divergence_report(const TrainedModel &model) {
    const auto sx = latent_similarity(model.x, model.cfg.gamma_x);
    DivergenceReport r;
    for (Index c = 0; c < model.modalities(); ++c) {
        const auto k = model.kernel(c);
        ModalityDivergence m;
        m.riemannian = riemannian_distance(k.values, sx.values);
        m.abs_difference = (k.values - sx.values).cwiseAbs();
        m.frobenius = (k.values - sx.values).norm();
        m.kernel_diagonal = k.values(0, 0);
        m.similarity_diagonal = sx.values(0, 0);
        r.modalities.push_back(std::move(m));
    }
    return r;
}

}  // namespace hmgp
