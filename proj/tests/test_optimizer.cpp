#include <gtest/gtest.h>

#include <set>

#include "helpers.hpp"

using namespace hmgp;
using namespace hmgp::testing;

namespace {

double rosenbrock(const Vector &x) { return std::pow(1 - x(0), 2) + 100 * std::pow(x(1) - x(0) * x(0), 2); }

Vector rosenbrock_grad(const Vector &x) {
    Vector g(2);
    g(0) = -2 * (1 - x(0)) - 400 * x(0) * (x(1) - x(0) * x(0));
    g(1) = 200 * (x(1) - x(0) * x(0));
    return g;
}

}  // namespace

TEST(Scg, QuadraticBowl) {
    OptimOptions o;
    o.max_iters = 200;
    o.grad_tol = 1e-12;
    o.obj_tol = 1e-300;
    Vector x0(2);
    x0 << 3, 4;
    const auto r = scg_minimize([](const Vector &x) { return x.squaredNorm(); },
                                [](const Vector &x) { return Vector(2 * x); }, x0, o);
    EXPECT_LT(r.x.norm(), 1e-8);
    EXPECT_TRUE(r.trace.accepted_monotone());
}

TEST(Scg, Rosenbrock) {
    OptimOptions o;
    o.max_iters = 2000;
    o.grad_tol = 1e-10;
    o.obj_tol = 1e-300;
    Vector x0(2);
    x0 << -1.2, 1.0;
    const auto r = scg_minimize(rosenbrock, rosenbrock_grad, x0, o);
    EXPECT_LT(std::abs(r.x(0) - 1.0), 1e-4);
    EXPECT_LT(std::abs(r.x(1) - 1.0), 1e-4);
    EXPECT_LE(r.f, rosenbrock(x0));
    EXPECT_TRUE(r.trace.accepted_monotone());
    EXPECT_LE(static_cast<int>(r.trace.entries.size()), 2000);
}

TEST(Scg, ConvexQuadraticsConvergeQuickly) {
    for (Index n : {2, 5, 10, 20}) {
        const Matrix a = random_spd(n, static_cast<std::uint64_t>(n));
        const Vector b = randn(n, 1, 99);
        const Vector xstar = a.ldlt().solve(b);
        OptimOptions o;
        o.max_iters = static_cast<int>(10 * n);
        o.grad_tol = 1e-13;
        o.obj_tol = 1e-300;
        const auto r = scg_minimize([&](const Vector &x) { return 0.5 * x.dot(a * x) - b.dot(x); },
                                    [&](const Vector &x) { return Vector(a * x - b); }, Vector::Zero(n), o);
        EXPECT_LT((r.x - xstar).norm(), 1e-8 * std::max(1.0, xstar.norm())) << "n=" << n;
    }
}

TEST(Scg, DeterministicAndDescending) {
    OptimOptions o;
    o.max_iters = 50;
    Vector x0(2);
    x0 << -1.2, 1.0;
    const auto a = scg_minimize(rosenbrock, rosenbrock_grad, x0, o);
    const auto b = scg_minimize(rosenbrock, rosenbrock_grad, x0, o);
    EXPECT_EQ(a.x, b.x);
    ASSERT_EQ(a.trace.entries.size(), b.trace.entries.size());
    for (std::size_t i = 0; i < a.trace.entries.size(); ++i) EXPECT_EQ(a.trace.entries[i].objective, b.trace.entries[i].objective);
    EXPECT_LE(a.f, rosenbrock(x0));
}

TEST(Scg, StopsOnGradientTolerance) {
    OptimOptions o;
    o.max_iters = 100;
    o.grad_tol = 1e-3;
    Vector x0(1);
    x0 << 0.0;
    const auto r = scg_minimize([](const Vector &x) { return x.squaredNorm(); }, [](const Vector &x) { return Vector(2 * x); },
                                x0, o);
    EXPECT_EQ(r.trace.status, OptimStatus::ConvergedGrad);
}

TEST(Scg, NonFiniteTrialIsRejected) {
    // Objective is infinite beyond x = 1; the optimum at 0.9 is still found.
    auto f = [](const Vector &x) {
        return x(0) >= 1.0 ? std::numeric_limits<double>::infinity() : std::pow(x(0) - 0.9, 2);
    };
    auto g = [](const Vector &x) { return Vector::Constant(1, 2 * (x(0) - 0.9)); };
    OptimOptions o;
    o.max_iters = 200;
    const auto r = scg_minimize(f, g, Vector::Constant(1, -5.0), o);
    EXPECT_NEAR(r.x(0), 0.9, 1e-6);
    EXPECT_TRUE(r.trace.accepted_monotone());
}

TEST(Scg, NonFiniteStartAborts) {
    OptimOptions o;
    const auto r = scg_minimize([](const Vector &) { return std::numeric_limits<double>::quiet_NaN(); },
                                [](const Vector &x) { return x; }, Vector::Zero(2), o);
    EXPECT_EQ(r.trace.status, OptimStatus::NumericalFailure);
}

TEST(OptimOptions, Validation) {
    OptimOptions o;
    o.max_iters = 0;
    EXPECT_THROW(o.validate(), ConfigError);
    o = {};
    o.grad_tol = 0.0;
    EXPECT_THROW(o.validate(), ConfigError);
}

TEST(OptimTrace, CsvLayout) {
    OptimTrace t;
    t.entries = {{1, 3.5, 0.25, true, 0}, {2, 3.5, 0.25, false, 0}};
    std::ostringstream os;
    t.write_csv(os);
    EXPECT_EQ(os.str(), "iteration,objective,gradnorm,accepted,segment\n1,3.5,0.25,1,0\n2,3.5,0.25,0,0\n");
}

TEST(OptimTrace, MonotonicityIsCheckedPerSegment) {
    OptimTrace t;
    t.entries = {{1, 5.0, 1, true, 0}, {2, 4.0, 1, true, 0}, {1, 4.5, 1, true, 1}, {2, 4.4, 1, true, 1}};
    EXPECT_TRUE(t.accepted_monotone());
    t.entries.push_back({3, 4.41, 1, true, 1});
    EXPECT_FALSE(t.accepted_monotone());
}

TEST(GradientCheck, ExactGradient) {
    Vector x(3);
    x << 0.3, -1.2, 2.0;
    const auto r = check_gradients([](const Vector &v) { return v.squaredNorm(); }, [](const Vector &v) { return Vector(2 * v); },
                                   x, 1e-5);
    EXPECT_LT(r.max_rel_error, 1e-9);
}

TEST(GradientCheck, PlantedFaultDetected) {
    Vector x(3);
    x << 0.3, -1.2, 2.0;
    const auto r = check_gradients([](const Vector &v) { return v.squaredNorm(); },
                                   [](const Vector &v) { return Vector(2.02 * v); }, x, 1e-5);
    EXPECT_NEAR(r.max_rel_error, 0.01 / 1.01, 1e-6);
}

TEST(GradientCheck, ConstantFunction) {
    const auto r = check_gradients([](const Vector &) { return 4.0; }, [](const Vector &v) { return Vector(Vector::Zero(v.size())); },
                                   Vector::Ones(4), 1e-5);
    EXPECT_EQ(r.max_rel_error, 0.0);
}

TEST(ActiveSet, FullSetIsIdentity) {
    const auto a = select_active_set(7, 7, ActivePolicy::Random, 3);
    for (Index i = 0; i < 7; ++i) EXPECT_EQ(a.indices[static_cast<std::size_t>(i)], i);
}

TEST(ActiveSet, RandomIsSeededAndDistinct) {
    const auto a = select_active_set(100, 30, ActivePolicy::Random, 42);
    const auto b = select_active_set(100, 30, ActivePolicy::Random, 42);
    const auto c = select_active_set(100, 30, ActivePolicy::Random, 43);
    EXPECT_EQ(a.indices, b.indices);
    EXPECT_NE(a.indices, c.indices);
    EXPECT_EQ(std::set<Index>(a.indices.begin(), a.indices.end()).size(), 30u);
    for (Index i : a.indices) {
        EXPECT_GE(i, 0);
        EXPECT_LT(i, 100);
    }
}

TEST(ActiveSet, FarthestPointPicksDiagonal) {
    Matrix sq(4, 2);
    sq << 0, 0, 1, 0, 1, 1, 0, 1;
    for (std::uint64_t seed = 0; seed < 8; ++seed) {
        const auto a = select_active_set(4, 2, ActivePolicy::FarthestPoint, seed, &sq);
        ASSERT_EQ(a.size(), 2);
        const double d = (sq.row(a.indices[0]) - sq.row(a.indices[1])).squaredNorm();
        EXPECT_DOUBLE_EQ(d, 2.0);
    }
}

TEST(ActiveSet, Errors) {
    EXPECT_THROW((void)select_active_set(3, 4, ActivePolicy::Random, 0), ConfigError);
    EXPECT_THROW((void)select_active_set(3, 0, ActivePolicy::Random, 0), ConfigError);
    EXPECT_THROW((void)select_active_set(3, 2, ActivePolicy::FarthestPoint, 0), ConfigError);
}

TEST(RestrictToActive, IdentitySet) {
    const auto inst = make_gradcheck_instance(Variant::HmRSimGp, HarmonizationKind::Trace, 8, 2, 1);
    const auto r = restrict_to_active(inst.inputs, select_active_set(8, 8, ActivePolicy::Random, 0));
    ASSERT_EQ(r.targets.size(), inst.inputs.targets.size());
    for (std::size_t c = 0; c < r.targets.size(); ++c) EXPECT_EQ(r.targets[c], inst.inputs.targets[c]);
    EXPECT_EQ(r.semantics.similar, inst.inputs.semantics.similar);
    EXPECT_EQ(r.semantics.dissimilar, inst.inputs.semantics.dissimilar);
}

TEST(RestrictToActive, PairsInsideKeptStraddlingDropped) {
    ObjectiveInputs in;
    in.targets = {randn(4, 2, 1), randn(4, 3, 2)};
    in.semantics.similar = {{1, 3}, {0, 1}};
    in.semantics.dissimilar = {{3, 2}};
    ActiveSet a;
    a.indices = {1, 3};
    const auto r = restrict_to_active(in, a);
    ASSERT_EQ(r.semantics.similar.size(), 1u);
    EXPECT_EQ(r.semantics.similar[0], IndexPair(0, 1));
    EXPECT_TRUE(r.semantics.dissimilar.empty());
    EXPECT_EQ(r.targets[0].rows(), 2);
    EXPECT_EQ(r.targets[0].row(1), in.targets[0].row(3));
}

TEST(RestrictToActive, SimilarityAndKernelSubmatrices) {
    const Matrix y = randn(9, 3, 3);
    ObjectiveInputs in;
    in.similarity_targets = true;
    in.targets = {feature_similarity(y, 2.0).values, feature_similarity(y, 3.0).values};
    ActiveSet a;
    a.indices = {7, 2, 4};
    const auto r = restrict_to_active(in, a);
    EXPECT_EQ(r.targets[0], select_block(in.targets[0], a.indices));

    const Matrix x = randn(9, 2, 4);
    const auto h = hyper(1.3, 0.8, 0.1, 0.01);
    const Matrix full = rbf_kernel(x, h).values;
    const Matrix sub = rbf_kernel(select_rows(x, a.indices), h).values;
    EXPECT_LE(max_abs(sub - select_block(full, a.indices)), 0.0);
}
