#include <gtest/gtest.h>

#include <random>

#include "helpers.hpp"

using namespace hmgp;
using namespace hmgp::testing;

namespace {

RankedRetrieval ranked(std::vector<int> rel) {
    RankedRetrieval r;
    r.relevant = std::move(rel);
    return r;
}

// AP straight from its definition: precision at the rank of each relevant item.
double brute_ap(const std::vector<int> &rel) {
    std::vector<double> p;
    for (std::size_t k = 0; k < rel.size(); ++k) {
        if (!rel[k]) continue;
        int hits = 0;
        for (std::size_t j = 0; j <= k; ++j) hits += rel[j];
        p.push_back(static_cast<double>(hits) / static_cast<double>(k + 1));
    }
    if (p.empty()) return 0.0;
    double s = 0.0;
    for (double v : p) s += v;
    return s / static_cast<double>(p.size());
}

LabelSet class_labels(Index n, int classes) {
    LabelSet l;
    for (Index i = 0; i < n; ++i) l.push_back({static_cast<int>(i % classes)});
    return l;
}

}  // namespace

TEST(Relevance, SharedLabel) {
    EXPECT_EQ(relevance({3}, {3}), 1);
    EXPECT_EQ(relevance({1, 2}, {2, 5}), 1);
    EXPECT_EQ(relevance({1}, {2}), 0);
    EXPECT_THROW(relevance({}, {1}), DataError);
}

TEST(AveragePrecision, HandValues) {
    EXPECT_DOUBLE_EQ(average_precision({1, 1, 1}), 1.0);
    EXPECT_DOUBLE_EQ(average_precision({1, 0, 1}), 5.0 / 6.0);
    EXPECT_DOUBLE_EQ(average_precision({0, 1}), 0.5);
    EXPECT_DOUBLE_EQ(average_precision({0, 0, 0}), 0.0);
}

TEST(AveragePrecision, MatchesBruteForce) {
    std::mt19937_64 rng(5);
    std::bernoulli_distribution coin(0.3);
    for (int t = 0; t < 1000; ++t) {
        std::vector<int> rel(1 + t % 40);
        for (auto &r : rel) r = coin(rng) ? 1 : 0;
        EXPECT_NEAR(average_precision(rel), brute_ap(rel), 1e-12);
    }
}

TEST(AveragePrecision, BoundedByOne) {
    std::mt19937_64 rng(9);
    std::bernoulli_distribution coin(0.5);
    for (int t = 0; t < 200; ++t) {
        std::vector<int> rel(25);
        for (auto &r : rel) r = coin(rng) ? 1 : 0;
        const double ap = average_precision(rel);
        EXPECT_GE(ap, 0.0);
        EXPECT_LE(ap, 1.0);
    }
}

TEST(MeanAp, AveragesQueries) {
    // AP of [0,1,0,0,1] is (1/2 + 2/5) / 2 = 0.45; AP of [1,0] is 1.
    EXPECT_NEAR(mean_ap({ranked({0, 1, 0, 0, 1}), ranked({1, 0})}), 0.725, 1e-15);
    EXPECT_THROW(mean_ap({}), DataError);
}

TEST(PrecisionRecall, PerfectRankingIsFlat) {
    const auto c = precision_recall({ranked({1, 1, 0, 0}), ranked({1, 0, 0})});
    for (std::size_t l = 0; l < 11; ++l) {
        EXPECT_DOUBLE_EQ(c.recall_levels[l], l / 10.0);
        EXPECT_DOUBLE_EQ(c.precision[l], 1.0);
    }
}

TEST(PrecisionRecall, InterpolatedHandValues) {
    // Precision 1/2 at recall 1/2, 2/4 at recall 1.
    const auto c = precision_recall({ranked({0, 1, 0, 1})});
    EXPECT_DOUBLE_EQ(c.precision[0], 0.5);
    EXPECT_DOUBLE_EQ(c.precision[10], 0.5);
    const auto d = precision_recall({ranked({1, 0})});
    EXPECT_DOUBLE_EQ(d.precision[10], 1.0);
}

TEST(PrecisionRecall, SkipsQueriesWithoutRelevantItems) {
    const auto c = precision_recall({ranked({1, 0}), ranked({0, 0})});
    EXPECT_DOUBLE_EQ(c.precision[5], 1.0);
}

TEST(PrecisionRecall, InterpolatedPrecisionNonIncreasing) {
    std::mt19937_64 rng(2);
    std::bernoulli_distribution coin(0.25);
    for (int t = 0; t < 100; ++t) {
        std::vector<RankedRetrieval> qs;
        for (int k = 0; k < 5; ++k) {
            std::vector<int> rel(30);
            for (auto &r : rel) r = coin(rng) ? 1 : 0;
            qs.push_back(ranked(rel));
        }
        const auto c = precision_recall(qs);
        for (std::size_t l = 1; l < 11; ++l) EXPECT_LE(c.precision[l], c.precision[l - 1] + 1e-15);
    }
}

TEST(PerRankSamples, HandValues) {
    const auto s = per_rank_samples({ranked({0, 1, 1})});
    ASSERT_EQ(s.precision.size(), 3u);
    EXPECT_DOUBLE_EQ(s.precision[0], 0.0);
    EXPECT_DOUBLE_EQ(s.precision[1], 0.5);
    EXPECT_DOUBLE_EQ(s.precision[2], 2.0 / 3.0);
    EXPECT_DOUBLE_EQ(s.recall[1], 0.5);
    EXPECT_DOUBLE_EQ(s.recall[2], 1.0);
}

TEST(PrCsv, Layout) {
    std::ostringstream os;
    write_pr_csv(precision_recall({ranked({1})}), os);
    const std::string text = os.str();
    EXPECT_EQ(text.rfind("recall,precision\n0,1\n0.10000000000000001,1\n", 0), 0u);
    EXPECT_EQ(std::count(text.begin(), text.end(), '\n'), 12);
}

TEST(RankByDistance, NearestFirstTiesByIndex) {
    Matrix q(1, 1);
    q << 0.0;
    Matrix db(4, 1);
    db << 2.0, -1.0, 1.0, 0.5;
    const auto r = rank_by_distance(q, db);
    EXPECT_EQ(r[0].order, (std::vector<Index>{3, 1, 2, 0}));
    EXPECT_DOUBLE_EQ(r[0].distances[0], 0.5);
}

TEST(RankByDistance, MatchesSortOracle) {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        const Matrix q = randn(5, 3, seed);
        const Matrix db = randn(17, 3, seed + 100);
        const auto r = rank_by_distance(q, db);
        for (Index i = 0; i < q.rows(); ++i) {
            std::vector<std::pair<double, Index>> oracle;
            for (Index j = 0; j < db.rows(); ++j) oracle.emplace_back((q.row(i) - db.row(j)).norm(), j);
            std::sort(oracle.begin(), oracle.end());
            for (std::size_t k = 0; k < oracle.size(); ++k) {
                EXPECT_EQ(r[static_cast<std::size_t>(i)].order[k], oracle[k].second);
            }
        }
    }
}

TEST(RankByDistance, TranslationInvariant) {
    const Matrix q = randn(6, 2, 1);
    const Matrix db = randn(12, 2, 2);
    const Eigen::RowVector2d shift(3.0, -1.5);
    const auto a = rank_by_distance(q, db);
    const auto b = rank_by_distance(q.rowwise() + shift, db.rowwise() + shift);
    for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i].order, b[i].order);
}

TEST(RankByDistance, DimensionMismatchThrows) {
    EXPECT_THROW(rank_by_distance(Matrix::Zero(2, 2), Matrix::Zero(3, 3)), DataError);
}

TEST(Retrieval, SymmetricInputsGiveEqualDirections) {
    const Matrix z = randn(40, 3, 4);
    const auto rep = evaluate_retrieval(z, z, class_labels(40, 4));
    EXPECT_DOUBLE_EQ(rep.a_to_b.map, rep.b_to_a.map);
    EXPECT_DOUBLE_EQ(rep.average(), rep.a_to_b.map);
}

TEST(Retrieval, SeparatedClustersArePerfect) {
    const Index n = 60;
    const auto labels = class_labels(n, 3);
    Matrix a = 0.01 * randn(n, 2, 7), b = 0.01 * randn(n, 2, 8);
    for (Index i = 0; i < n; ++i) {
        a(i, 0) += 10.0 * labels[static_cast<std::size_t>(i)][0];
        b(i, 0) += 10.0 * labels[static_cast<std::size_t>(i)][0];
    }
    const auto rep = evaluate_retrieval(a, b, labels);
    EXPECT_DOUBLE_EQ(rep.average(), 1.0);
    EXPECT_EQ(rep.a_to_b.per_query_ap.size(), static_cast<std::size_t>(n));
}

TEST(Retrieval, RandomEmbeddingsNearChance) {
    // Ten balanced classes: a random ranking scores about 0.1.
    double s = 0.0;
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        s += evaluate_retrieval(randn(200, 3, seed), randn(200, 3, seed + 50), class_labels(200, 10)).average();
    }
    EXPECT_NEAR(s / 5.0, 0.1, 0.03);
}

TEST(Retrieval, InvariantUnderQueryPermutation) {
    const Index n = 30;
    const Matrix a = randn(n, 2, 11), b = randn(n, 2, 12);
    const auto labels = class_labels(n, 3);
    std::vector<Index> perm(static_cast<std::size_t>(n));
    std::iota(perm.begin(), perm.end(), Index{0});
    std::shuffle(perm.begin(), perm.end(), std::mt19937_64(3));
    const auto rep = evaluate_retrieval(a, b, labels);
    const auto rep2 = evaluate_retrieval(select_rows(a, perm), select_rows(b, perm), select_labels(labels, perm));
    EXPECT_NEAR(rep.a_to_b.map, rep2.a_to_b.map, 1e-12);
    EXPECT_NEAR(rep.b_to_a.map, rep2.b_to_a.map, 1e-12);
}

TEST(Retrieval, ShapeMismatchThrows) {
    EXPECT_THROW(evaluate_retrieval(Matrix::Zero(3, 2), Matrix::Zero(4, 2), class_labels(3, 2)), DataError);
    EXPECT_THROW(evaluate_retrieval(Matrix::Zero(3, 2), Matrix::Zero(3, 2), class_labels(4, 2)), DataError);
}

TEST(Retrieval, JsonKeys) {
    const Matrix z = randn(10, 2, 1);
    const auto j = evaluate_retrieval(z, z, class_labels(10, 2)).to_json();
    EXPECT_TRUE(j.contains("I2T"));
    EXPECT_TRUE(j.contains("T2I"));
    EXPECT_TRUE(j.contains("Average"));
}

TEST(RiemannianDistance, HandValue) {
    const Matrix i2 = Matrix::Identity(2, 2);
    EXPECT_NEAR(riemannian_distance(2.0 * i2, i2), std::sqrt(2.0) * std::log(2.0), 1e-10);
}

TEST(RiemannianDistance, ZeroOnSelf) {
    const Matrix k = random_spd(6, 3);
    EXPECT_NEAR(riemannian_distance(k, k), 0.0, 1e-10);
}

TEST(RiemannianDistance, Symmetric) {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        const Matrix a = random_spd(5, seed), b = random_spd(5, seed + 77);
        EXPECT_NEAR(riemannian_distance(a, b), riemannian_distance(b, a), 1e-9);
    }
}

TEST(RiemannianDistance, ScalingLaw) {
    const Matrix a = random_spd(7, 4);
    for (double c : {0.1, 0.5, 3.0, 20.0}) {
        EXPECT_NEAR(riemannian_distance(c * a, a), std::sqrt(7.0) * std::abs(std::log(c)), 1e-9);
    }
}

TEST(RiemannianDistance, CongruenceInvariant) {
    const Matrix a = random_spd(4, 1), b = random_spd(4, 2);
    const Matrix g = randn(4, 4, 3) + 3.0 * Matrix::Identity(4, 4);
    EXPECT_NEAR(riemannian_distance(g * a * g.transpose(), g * b * g.transpose()), riemannian_distance(a, b), 1e-8);
}

TEST(RiemannianDistance, ShapeMismatchThrows) {
    EXPECT_THROW(riemannian_distance(Matrix::Identity(2, 2), Matrix::Identity(3, 3)), DataError);
}

TEST(Divergence, ReportOnTrainedModel) {
    SyntheticOptions o;
    o.n = 40;
    o.q = 2;
    o.d1 = 5;
    o.d2 = 4;
    const auto bundle = generate_synthetic(o);
    ModelConfig cfg;
    cfg.variant = Variant::HmGplvm;
    cfg.latent_dim = 2;
    cfg.epochs = 1;
    cfg.optim.max_iters = 5;
    cfg.harmonization = HarmonizationSpec{};
    const auto r = train(bundle, cfg);
    const auto d = divergence_report(r.model);
    ASSERT_EQ(d.modalities.size(), 2u);
    for (const auto &m : d.modalities) {
        EXPECT_GE(m.riemannian, 0.0);
        EXPECT_GE(m.frobenius, 0.0);
        EXPECT_DOUBLE_EQ(m.similarity_diagonal, 1.0);
        EXPECT_GT(m.kernel_diagonal, 0.0);
        EXPECT_EQ(m.abs_difference.rows(), 40);
        EXPECT_GE(m.abs_difference.minCoeff(), 0.0);
    }
    EXPECT_NEAR(d.total_riemannian(), d.modalities[0].riemannian + d.modalities[1].riemannian, 1e-12);
    EXPECT_EQ(d.to_json()["modalities"].size(), 2u);
}
