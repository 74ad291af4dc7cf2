#pragma once

// Scaled conjugate gradients, gradient checking and active-set selection.

#include "hmgp/common.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <numeric>
#include <ostream>
#include <random>
#include <string>
#include <vector>

namespace hmgp {

struct OptimOptions {
    int max_iters = 20;
    double grad_tol = 1e-6;
    double obj_tol = 1e-10;
    double sigma0 = 1e-4;
    std::uint64_t seed = 0;

    void validate() const {
        if (max_iters < 1) throw ConfigError("max_iters must be >= 1");
        if (!(grad_tol > 0.0) || !(obj_tol > 0.0) || !(sigma0 > 0.0)) {
            throw ConfigError("grad_tol, obj_tol and sigma0 must be > 0");
        }
    }
};

enum class OptimStatus { ConvergedGrad, ConvergedObj, MaxIters, NumericalFailure };

inline const char *to_string(OptimStatus s) {
    switch (s) {
        case OptimStatus::ConvergedGrad: return "converged-grad";
        case OptimStatus::ConvergedObj: return "converged-obj";
        case OptimStatus::MaxIters: return "max-iters";
        case OptimStatus::NumericalFailure: return "numerical-failure";
    }
    return "unknown";
}

struct TraceEntry {
    int iteration = 0;
    double objective = 0.0;  // objective at the current point after this iteration
    double grad_norm = 0.0;
    bool accepted = false;
    int segment = 0;  // optimizer run this entry belongs to (one per active-set rotation)
};

struct OptimTrace {
    std::vector<TraceEntry> entries;
    OptimStatus status = OptimStatus::MaxIters;
    double initial_objective = std::numeric_limits<double>::quiet_NaN();
    double final_objective = std::numeric_limits<double>::quiet_NaN();

    /// Accepted objective values never increase within a segment.
    [[nodiscard]] bool accepted_monotone() const {
        for (std::size_t i = 1; i < entries.size(); ++i) {
            const auto &prev = entries[i - 1];
            const auto &cur = entries[i];
            if (cur.segment == prev.segment && cur.accepted && cur.objective > prev.objective) return false;
        }
        return true;
    }

    void append(const OptimTrace &other, int segment) {
        for (auto e : other.entries) {
            e.segment = segment;
            entries.push_back(e);
        }
        status = other.status;
    }

    void write_csv(std::ostream &os) const {
        os << "iteration,objective,gradnorm,accepted,segment\n";
        os.precision(17);
        for (const auto &e : entries) {
            os << e.iteration << ',' << e.objective << ',' << e.grad_norm << ',' << (e.accepted ? 1 : 0) << ','
               << e.segment << '\n';
        }
    }
};

using ObjectiveFn = std::function<double(const Vector &)>;
using GradientFn = std::function<Vector(const Vector &)>;

struct ScgResult {
    Vector x;
    double f = 0.0;
    OptimTrace trace;
};

/// Møller's scaled conjugate gradient method.
///
/// Trial points with a non-finite objective are treated as failed steps (the
/// scale parameter grows and the step shrinks). A non-finite gradient at an
/// accepted point, or a non-finite objective at x0, aborts with
/// NumericalFailure and returns the best point so far.
inline ScgResult scg_minimize(const ObjectiveFn &f, const GradientFn &g, Vector x0, const OptimOptions &opts) {
    opts.validate();
    constexpr double beta_min = 1e-15;
    constexpr double beta_max = 1e100;
    const auto nparams = x0.size();

    ScgResult res;
    res.x = std::move(x0);
    double fold = f(res.x);
    res.trace.initial_objective = fold;
    res.f = fold;
    res.trace.final_objective = fold;
    if (!std::isfinite(fold)) {
        res.trace.status = OptimStatus::NumericalFailure;
        return res;
    }
    Vector grad_new = g(res.x);
    if (!grad_new.allFinite()) {
        res.trace.status = OptimStatus::NumericalFailure;
        return res;
    }
    if (nparams == 0 || grad_new.norm() < opts.grad_tol) {
        res.trace.status = OptimStatus::ConvergedGrad;
        return res;
    }
    Vector grad_old = grad_new;
    Vector d = -grad_new;
    bool success = true;
    Index nsuccess = 0;
    double beta = 1.0;
    double mu = 0.0, kappa = 0.0, theta = 0.0;

    for (int j = 1; j <= opts.max_iters; ++j) {
        if (success) {
            mu = d.dot(grad_new);
            if (mu >= 0.0) {
                d = -grad_new;
                mu = d.dot(grad_new);
            }
            kappa = d.squaredNorm();
            if (kappa < std::numeric_limits<double>::epsilon()) {
                res.trace.status = OptimStatus::ConvergedGrad;
                break;
            }
            const double sigma = opts.sigma0 / std::sqrt(kappa);
            const Vector gplus = g(res.x + sigma * d);
            if (!gplus.allFinite()) {
                res.trace.status = OptimStatus::NumericalFailure;
                break;
            }
            theta = d.dot(gplus - grad_new) / sigma;
        }

        double delta = theta + beta * kappa;
        if (delta <= 0.0) {
            delta = beta * kappa;
            beta = beta - theta / kappa;
        }
        const double alpha = -mu / delta;
        const Vector x_new = res.x + alpha * d;
        const double fnew = f(x_new);
        const double comparison = std::isfinite(fnew) ? 2.0 * (fnew - fold) / (alpha * mu)
                                                      : -std::numeric_limits<double>::infinity();

        bool converged_obj = false;
        if (comparison >= 0.0) {
            success = true;
            ++nsuccess;
            res.x = x_new;
            converged_obj = std::abs(fnew - fold) < opts.obj_tol * std::max(std::abs(fold), 1e-300);
            grad_old = grad_new;
            grad_new = g(res.x);
            fold = fnew;
        } else {
            success = false;
        }
        res.trace.entries.push_back({j, fold, grad_new.norm(), success, 0});

        if (success) {
            if (!grad_new.allFinite()) {
                res.trace.status = OptimStatus::NumericalFailure;
                break;
            }
            if (grad_new.norm() < opts.grad_tol) {
                res.trace.status = OptimStatus::ConvergedGrad;
                break;
            }
            if (converged_obj) {
                res.trace.status = OptimStatus::ConvergedObj;
                break;
            }
        }

        if (comparison < 0.25) beta = std::min(4.0 * beta, beta_max);
        if (comparison > 0.75) beta = std::max(0.5 * beta, beta_min);

        if (nsuccess == nparams) {
            d = -grad_new;
            nsuccess = 0;
        } else if (success) {
            const double gamma = (grad_old - grad_new).dot(grad_new) / mu;
            d = gamma * d - grad_new;
        }
        if (j == opts.max_iters) res.trace.status = OptimStatus::MaxIters;
    }
    res.f = fold;
    res.trace.final_objective = fold;
    return res;
}

struct GradientCheck {
    double max_rel_error = 0.0;
    Index worst_index = -1;
    double analytic = 0.0;
    double numeric = 0.0;
};

/// Central-difference comparison of `g` against `f` at `x`.
///
/// The relative error of coordinate i is |a - n| / max(|a|, |n|, 1e-6 * scale)
/// where scale is the largest absolute entry of the numeric gradient (at least
/// one), so coordinates whose derivative is negligibly small compared to the
/// rest are compared on an absolute footing.
inline GradientCheck check_gradients(const ObjectiveFn &f, const GradientFn &g, const Vector &x, double h) {
    if (!(h > 0.0)) throw ConfigError("finite-difference step must be > 0");
    const Vector analytic = g(x);
    Vector numeric(x.size());
    Vector xp = x;
    for (Index i = 0; i < x.size(); ++i) {
        xp(i) = x(i) + h;
        const double fp = f(xp);
        xp(i) = x(i) - h;
        const double fm = f(xp);
        xp(i) = x(i);
        numeric(i) = (fp - fm) / (2.0 * h);
    }
    const double scale = std::max(1.0, numeric.size() ? numeric.cwiseAbs().maxCoeff() : 0.0);
    GradientCheck out;
    for (Index i = 0; i < x.size(); ++i) {
        const double a = analytic(i), n = numeric(i);
        const double denom = std::max({std::abs(a), std::abs(n), 1e-6 * scale});
        const double err = std::abs(a - n) / denom;
        if (!(err <= out.max_rel_error)) {
            out.max_rel_error = std::isfinite(err) ? err : std::numeric_limits<double>::infinity();
            out.worst_index = i;
            out.analytic = a;
            out.numeric = n;
        }
    }
    return out;
}

enum class ActivePolicy { Random, FarthestPoint };

struct ActiveSet {
    std::vector<Index> indices;
    ActivePolicy policy = ActivePolicy::Random;

    [[nodiscard]] Index size() const { return static_cast<Index>(indices.size()); }
};

/// Chooses M of N objects. Farthest-point selection needs `coords` (one row per
/// object); it starts at a seeded random object and then greedily adds the
/// object with the largest distance to the current selection. M == N always
/// yields the identity set.
inline ActiveSet select_active_set(Index n, Index m, ActivePolicy policy, std::uint64_t seed,
                                   const Matrix *coords = nullptr) {
    if (m < 1) throw ConfigError("active-set size must be >= 1");
    if (m > n) throw ConfigError("active-set size " + std::to_string(m) + " exceeds N = " + std::to_string(n));
    ActiveSet set;
    set.policy = policy;
    if (m == n) {
        set.indices.resize(static_cast<std::size_t>(n));
        std::iota(set.indices.begin(), set.indices.end(), Index{0});
        return set;
    }
    std::mt19937_64 rng(seed);
    if (policy == ActivePolicy::Random) {
        std::vector<Index> all(static_cast<std::size_t>(n));
        std::iota(all.begin(), all.end(), Index{0});
        // partial Fisher-Yates; std::shuffle's draw pattern is implementation-defined
        for (Index i = 0; i < m; ++i) {
            std::uniform_int_distribution<Index> pick(i, n - 1);
            std::swap(all[static_cast<std::size_t>(i)], all[static_cast<std::size_t>(pick(rng))]);
        }
        set.indices.assign(all.begin(), all.begin() + m);
        return set;
    }
    if (coords == nullptr || coords->rows() != n) {
        throw ConfigError("farthest-point selection needs one coordinate row per object");
    }
    std::uniform_int_distribution<Index> pick(0, n - 1);
    Index current = pick(rng);
    Vector min_dist = Vector::Constant(n, std::numeric_limits<double>::infinity());
    for (Index k = 0; k < m; ++k) {
        set.indices.push_back(current);
        for (Index i = 0; i < n; ++i) {
            min_dist(i) = std::min(min_dist(i), (coords->row(i) - coords->row(current)).squaredNorm());
        }
        Index best = 0;
        double best_d = -1.0;
        for (Index i = 0; i < n; ++i) {
            if (min_dist(i) > best_d) {
                best_d = min_dist(i);
                best = i;
            }
        }
        current = best;
    }
    return set;
}

inline const char *to_string(ActivePolicy p) {
    return p == ActivePolicy::Random ? "random" : "farthest-point";
}

}  // namespace hmgp
