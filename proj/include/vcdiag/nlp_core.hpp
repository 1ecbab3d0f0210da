#pragma once

// Primal-dual interior-point engine for
//
//   min f(x)  s.t.  h(x) = 0,  c(x) + s = 0,  s >= 0
//
// Newton-Raphson on the perturbed KKT conditions
//
//   grad f + Jh' lambda + Jc' mu = 0
//   h(x) = 0
//   c(x) + s = 0
//   mu .* s - barrier = 0
//
// with fraction-to-boundary, per-iteration voltage limiting and residual
// damping, under a monotone barrier schedule.

#include <algorithm>
#include <cmath>
#include <concepts>
#include <limits>
#include <span>
#include <stdexcept>
#include <vector>

#include <Eigen/Dense>
#include <Eigen/Sparse>
#include <Eigen/SparseLU>

namespace vcdiag {

using Eigen::Index;
using Eigen::VectorXd;
using Triplets = std::vector<Eigen::Triplet<double>>;
using SparseMatrix = Eigen::SparseMatrix<double>;

struct SolverOptions {
    double tol_feas = 1e-6;
    double tol_opt = 1e-6;
    int max_newton_iters = 200;
    double barrier_init = 1e-1;
    double barrier_shrink = 0.2;
    double barrier_floor = 1e-9;
    double step_fraction_to_boundary = 0.995;
    double v_step_cap = 0.1;
    double damping_factor = 0.7;
    int max_damping_retries = 8;

    void validate() const {
        if (!(tol_feas > 0 && tol_opt > 0 && max_newton_iters > 0 && barrier_init > 0 && barrier_floor > 0 &&
              v_step_cap > 0 && damping_factor > 0 && max_damping_retries >= 0))
            throw std::invalid_argument("solver options must be positive");
        if (!(barrier_shrink > 0 && barrier_shrink < 1)) throw std::invalid_argument("barrier_shrink must be in (0,1)");
        if (!(step_fraction_to_boundary > 0 && step_fraction_to_boundary < 1))
            throw std::invalid_argument("step_fraction_to_boundary must be in (0,1)");
        if (!(damping_factor < 1)) throw std::invalid_argument("damping_factor must be < 1");
    }
};

/// Interface a problem exposes to the engine. Jacobian and Hessian triplets
/// must have an iterate-independent pattern; the Hessian is the Lagrangian
/// Hessian (objective plus multiplier-weighted constraint curvature), with
/// both triangles emitted.
template <class P>
concept NlpProblem = requires(const P& p, const VectorXd& x, const VectorXd& y, Triplets& trip) {
    { p.num_vars() } -> std::convertible_to<Index>;
    { p.num_eq() } -> std::convertible_to<Index>;
    { p.num_ineq() } -> std::convertible_to<Index>;
    { p.objective(x) } -> std::convertible_to<double>;
    { p.gradient(x) } -> std::convertible_to<VectorXd>;
    { p.eq_residual(x) } -> std::convertible_to<VectorXd>;
    { p.ineq_residual(x) } -> std::convertible_to<VectorXd>;
    p.eq_jacobian(x, trip);
    p.ineq_jacobian(x, trip);
    p.lagrangian_hessian(x, y, y, trip);
    { p.voltage_indices() } -> std::convertible_to<std::span<const Index>>;
};

struct KktDims {
    Index nx = 0;
    Index ne = 0;
    Index ni = 0;
    [[nodiscard]] Index size() const { return nx + ne + 2 * ni; }
    [[nodiscard]] Index lambda_begin() const { return nx; }
    [[nodiscard]] Index mu_begin() const { return nx + ne; }
    [[nodiscard]] Index s_begin() const { return nx + ne + ni; }
};

/// Primal-dual iterate.
struct KktSystem {
    VectorXd x;
    VectorXd lambda_eq;
    VectorXd mu_ineq;
    VectorXd s_ineq;
    double barrier = 0.1;

    [[nodiscard]] KktDims dims() const { return {x.size(), lambda_eq.size(), mu_ineq.size()}; }
    [[nodiscard]] bool strictly_interior() const {
        return (mu_ineq.array() > 0).all() && (s_ineq.array() > 0).all();
    }
    void advance(const VectorXd& d, double alpha) {
        const KktDims k = dims();
        x += alpha * d.segment(0, k.nx);
        lambda_eq += alpha * d.segment(k.lambda_begin(), k.ne);
        mu_ineq += alpha * d.segment(k.mu_begin(), k.ni);
        s_ineq += alpha * d.segment(k.s_begin(), k.ni);
    }
};

struct KktResidualNorms {
    double primal = 0.0;           // max(|h|, |c + s|)
    double dual = 0.0;             // stationarity
    double complementarity = 0.0;  // max |mu s - barrier|
    double max_product = 0.0;      // max mu s
};

struct AssembledKkt {
    VectorXd residual;
    SparseMatrix matrix;
    KktDims dims;
};

enum class SolveStatus { converged, max_iter, numerical_failure };

inline const char* to_string(SolveStatus s) {
    switch (s) {
        case SolveStatus::converged: return "converged";
        case SolveStatus::max_iter: return "max_iter";
        case SolveStatus::numerical_failure: return "numerical_failure";
    }
    return "unknown";
}

struct IterationRecord {
    double primal = 0.0;
    double dual = 0.0;
    double complementarity = 0.0;
    double merit_before = 0.0;
    double merit_after = 0.0;
    double step_norm = 0.0;
    double barrier = 0.0;
    double alpha = 1.0;
    int damping_retries = 0;
    bool damping_failed = false;
    double regularization = 0.0;
    bool interior = true;
};

struct IterationLog {
    std::vector<IterationRecord> records;
    [[nodiscard]] std::size_t size() const { return records.size(); }
};

struct NlpSolution {
    KktSystem iterate;
    IterationLog log;
    SolveStatus status = SolveStatus::max_iter;
    KktResidualNorms norms;
};

/// Unpermuted KKT residual [stationarity; h; c + s; mu.*s - barrier].
template <NlpProblem P>
VectorXd kkt_residual(const P& problem, const KktSystem& it) {
    const KktDims k = it.dims();
    VectorXd F(k.size());
    Triplets jt;
    problem.eq_jacobian(it.x, jt);
    SparseMatrix Jh(k.ne, k.nx);
    Jh.setFromTriplets(jt.begin(), jt.end());
    jt.clear();
    problem.ineq_jacobian(it.x, jt);
    SparseMatrix Jc(k.ni, k.nx);
    Jc.setFromTriplets(jt.begin(), jt.end());

    VectorXd stat = problem.gradient(it.x);
    if (k.ne) stat += Jh.transpose() * it.lambda_eq;
    if (k.ni) stat += Jc.transpose() * it.mu_ineq;
    F.segment(0, k.nx) = stat;
    if (k.ne) F.segment(k.lambda_begin(), k.ne) = problem.eq_residual(it.x);
    if (k.ni) {
        F.segment(k.mu_begin(), k.ni) = problem.ineq_residual(it.x) + it.s_ineq;
        F.segment(k.s_begin(), k.ni) = (it.mu_ineq.array() * it.s_ineq.array() - it.barrier).matrix();
    }
    return F;
}

inline KktResidualNorms residual_norms(const VectorXd& F, const KktSystem& it) {
    const KktDims k = it.dims();
    KktResidualNorms n;
    n.dual = k.nx ? F.segment(0, k.nx).lpNorm<Eigen::Infinity>() : 0.0;
    const double eq = k.ne ? F.segment(k.lambda_begin(), k.ne).lpNorm<Eigen::Infinity>() : 0.0;
    const double in = k.ni ? F.segment(k.mu_begin(), k.ni).lpNorm<Eigen::Infinity>() : 0.0;
    n.primal = std::max(eq, in);
    n.complementarity = k.ni ? F.segment(k.s_begin(), k.ni).lpNorm<Eigen::Infinity>() : 0.0;
    n.max_product = k.ni ? (it.mu_ineq.array() * it.s_ineq.array()).maxCoeff() : 0.0;
    return n;
}

/// Residual and exact Newton matrix of the perturbed KKT conditions.
/// Diagonal entries of the primal and equality blocks are always present
/// (possibly zero) so that regularization keeps the pattern fixed.
template <NlpProblem P>
AssembledKkt assemble_kkt(const P& problem, const KktSystem& it) {
    if (!it.strictly_interior()) throw std::invalid_argument("assemble_kkt: iterate is not strictly interior");
    const KktDims k = it.dims();
    if (k.nx != problem.num_vars() || k.ne != problem.num_eq() || k.ni != problem.num_ineq())
        throw std::invalid_argument("assemble_kkt: iterate dimensions do not match the problem");

    AssembledKkt out;
    out.dims = k;
    out.residual = kkt_residual(problem, it);

    Triplets t;
    problem.lagrangian_hessian(it.x, it.lambda_eq, it.mu_ineq, t);
    for (Index i = 0; i < k.nx; ++i) t.emplace_back(i, i, 0.0);
    for (Index i = 0; i < k.ne; ++i) t.emplace_back(k.lambda_begin() + i, k.lambda_begin() + i, 0.0);

    Triplets jt;
    problem.eq_jacobian(it.x, jt);
    for (const auto& e : jt) {
        t.emplace_back(k.lambda_begin() + e.row(), e.col(), e.value());
        t.emplace_back(e.col(), k.lambda_begin() + e.row(), e.value());
    }
    jt.clear();
    problem.ineq_jacobian(it.x, jt);
    for (const auto& e : jt) {
        t.emplace_back(k.mu_begin() + e.row(), e.col(), e.value());
        t.emplace_back(e.col(), k.mu_begin() + e.row(), e.value());
    }
    for (Index j = 0; j < k.ni; ++j) {
        t.emplace_back(k.mu_begin() + j, k.s_begin() + j, 1.0);
        t.emplace_back(k.s_begin() + j, k.mu_begin() + j, it.s_ineq[j]);
        t.emplace_back(k.s_begin() + j, k.s_begin() + j, it.mu_ineq[j]);
    }
    out.matrix.resize(k.size(), k.size());
    out.matrix.setFromTriplets(t.begin(), t.end());
    out.matrix.makeCompressed();
    return out;
}

/// Reusable sparse LU; the symbolic analysis is redone only when the
/// matrix pattern changes.
class LinearSolveCache {
public:
    bool factorize(const SparseMatrix& A) {
        if (!analyzed_ || A.rows() != rows_ || A.nonZeros() != nnz_) {
            lu_.analyzePattern(A);
            analyzed_ = true;
            rows_ = A.rows();
            nnz_ = A.nonZeros();
        }
        lu_.factorize(A);
        return lu_.info() == Eigen::Success;
    }
    [[nodiscard]] VectorXd solve(const VectorXd& b) { return lu_.solve(b); }

private:
    Eigen::SparseLU<SparseMatrix, Eigen::COLAMDOrdering<int>> lu_;
    bool analyzed_ = false;
    Index rows_ = 0;
    Index nnz_ = 0;
};

struct StepOutcome {
    VectorXd direction;
    bool ok = false;
    double regularization = 0.0;
};

/// Solve K d = -F. On factorization failure (or an inaccurate solve) shift
/// the primal diagonal by +delta and the equality diagonal by -delta,
/// starting at 1e-8 and doubling up to 1e-2.
inline StepOutcome newton_step(const AssembledKkt& kkt, LinearSolveCache& cache) {
    StepOutcome out;
    const VectorXd rhs = -kkt.residual;
    const double rhs_norm = std::max(1.0, rhs.norm());
    SparseMatrix A = kkt.matrix;
    double delta = 0.0;
    for (;;) {
        if (delta > 0) {
            A = kkt.matrix;
            for (Index i = 0; i < kkt.dims.nx; ++i) A.coeffRef(i, i) += delta;
            for (Index i = 0; i < kkt.dims.ne; ++i)
                A.coeffRef(kkt.dims.lambda_begin() + i, kkt.dims.lambda_begin() + i) -= delta;
        }
        if (cache.factorize(A)) {
            VectorXd d = cache.solve(rhs);
            if (d.allFinite() && (A * d - rhs).norm() <= 1e-8 * rhs_norm) {
                out.direction = std::move(d);
                out.ok = true;
                out.regularization = delta;
                return out;
            }
        }
        delta = delta == 0.0 ? 1e-8 : 2.0 * delta;
        if (delta > 1e-2) return out;
    }
}

/// Inline overload for a caller without a cache.
inline StepOutcome newton_step(const AssembledKkt& kkt) {
    LinearSolveCache cache;
    return newton_step(kkt, cache);
}

struct LimitResult {
    double alpha = 1.0;
    bool boundary_limited = false;
    bool voltage_limited = false;
};

/// Largest step in (0, 1] keeping mu and s above (1 - tau) of their current
/// values, further capped so no voltage component moves more than v_step_cap.
inline LimitResult apply_limits(const VectorXd& direction, const KktSystem& it, std::span<const Index> voltage_idx,
                                const SolverOptions& opts) {
    const KktDims k = it.dims();
    LimitResult r;
    const double tau = opts.step_fraction_to_boundary;
    auto boundary = [&](const VectorXd& val, Index off) {
        for (Index j = 0; j < k.ni; ++j) {
            const double dv = direction[off + j];
            if (dv < 0) {
                const double a = -tau * val[j] / dv;
                if (a < r.alpha) {
                    r.alpha = a;
                    r.boundary_limited = true;
                }
            }
        }
    };
    boundary(it.mu_ineq, k.mu_begin());
    boundary(it.s_ineq, k.s_begin());
    double dv_max = 0.0;
    for (Index v : voltage_idx) dv_max = std::max(dv_max, std::abs(direction[v]));
    if (r.alpha * dv_max > opts.v_step_cap) {
        r.alpha = opts.v_step_cap / dv_max;
        r.voltage_limited = true;
    }
    return r;
}

struct DampingOutcome {
    double alpha = 1.0;
    int retries = 0;
    bool failed = false;
    double merit_after = 0.0;
};

/// Shrink the step by damping_factor while the KKT residual norm would
/// increase; the last (smallest) trial is used if every retry fails.
template <NlpProblem P>
DampingOutcome damp_step(const P& problem, const KktSystem& it, const VectorXd& direction, double alpha,
                         double merit_before, const SolverOptions& opts) {
    DampingOutcome out;
    out.alpha = alpha;
    for (;;) {
        KktSystem trial = it;
        trial.advance(direction, out.alpha);
        double merit = std::numeric_limits<double>::infinity();
        try {
            VectorXd F = kkt_residual(problem, trial);
            if (F.allFinite()) merit = F.norm();
        } catch (const std::domain_error&) {
        }
        out.merit_after = merit;
        if (merit <= merit_before) return out;
        if (out.retries >= opts.max_damping_retries) {
            out.failed = true;
            return out;
        }
        out.alpha *= opts.damping_factor;
        ++out.retries;
    }
}

/// Default dual/slack initialization: lambda = 0, mu = sqrt(barrier_init),
/// s = max(-c(x0), sqrt(barrier_init)) so strictly satisfied inequalities
/// start with c + s = 0.
template <NlpProblem P>
KktSystem initial_iterate(const P& problem, const VectorXd& x0, const SolverOptions& opts) {
    KktSystem it;
    it.x = x0;
    it.lambda_eq = VectorXd::Zero(problem.num_eq());
    const Index ni = problem.num_ineq();
    const double root = std::sqrt(opts.barrier_init);
    it.mu_ineq = VectorXd::Constant(ni, root);
    it.s_ineq.resize(ni);
    if (ni) {
        const VectorXd c = problem.ineq_residual(x0);
        for (Index j = 0; j < ni; ++j) it.s_ineq[j] = -c[j] > 0 ? -c[j] : root;
    }
    it.barrier = ni ? opts.barrier_init : opts.barrier_floor;
    return it;
}

/// Run the barrier schedule from a given primal-dual start.
template <NlpProblem P>
NlpSolution solve_nlp(const P& problem, KktSystem start, const SolverOptions& opts) {
    opts.validate();
    NlpSolution sol;
    sol.iterate = std::move(start);
    KktSystem& it = sol.iterate;
    const KktDims k = it.dims();
    const bool has_ineq = k.ni > 0;
    if (!has_ineq) it.barrier = opts.barrier_floor;
    const auto vidx = problem.voltage_indices();
    LinearSolveCache cache;

    auto stage_done = [&](const KktResidualNorms& n, bool final_stage) {
        if (final_stage)
            return n.primal <= opts.tol_feas && n.dual <= opts.tol_opt && n.max_product <= 10.0 * opts.barrier_floor &&
                   n.complementarity <= 10.0 * it.barrier;
        const double tol = 10.0 * it.barrier;
        return n.primal <= std::max(opts.tol_feas, tol) && n.dual <= std::max(opts.tol_opt, tol) &&
               n.complementarity <= tol;
    };

    int iters = 0;
    for (;;) {
        const bool final_stage = !has_ineq || it.barrier <= opts.barrier_floor;
        for (;;) {
            VectorXd F;
            try {
                F = kkt_residual(problem, it);
            } catch (const std::domain_error&) {
                sol.status = SolveStatus::numerical_failure;
                return sol;
            }
            sol.norms = residual_norms(F, it);
            if (stage_done(sol.norms, final_stage)) break;
            if (iters >= opts.max_newton_iters) {
                sol.status = SolveStatus::max_iter;
                return sol;
            }

            AssembledKkt kkt;
            try {
                kkt = assemble_kkt(problem, it);
            } catch (const std::domain_error&) {
                sol.status = SolveStatus::numerical_failure;
                return sol;
            }
            const StepOutcome step = newton_step(kkt, cache);
            if (!step.ok) {
                sol.status = SolveStatus::numerical_failure;
                return sol;
            }
            const LimitResult lim = apply_limits(step.direction, it, vidx, opts);
            const double merit_before = F.norm();
            const DampingOutcome damp = damp_step(problem, it, step.direction, lim.alpha, merit_before, opts);
            it.advance(step.direction, damp.alpha);
            ++iters;

            IterationRecord rec;
            rec.primal = sol.norms.primal;
            rec.dual = sol.norms.dual;
            rec.complementarity = sol.norms.complementarity;
            rec.merit_before = merit_before;
            rec.merit_after = damp.merit_after;
            rec.step_norm = damp.alpha * step.direction.norm();
            rec.barrier = it.barrier;
            rec.alpha = damp.alpha;
            rec.damping_retries = damp.retries;
            rec.damping_failed = damp.failed;
            rec.regularization = step.regularization;
            rec.interior = it.strictly_interior();
            sol.log.records.push_back(rec);
            if (!rec.interior) {
                sol.status = SolveStatus::numerical_failure;
                return sol;
            }
        }
        if (final_stage) {
            sol.status = SolveStatus::converged;
            return sol;
        }
        it.barrier = std::max(opts.barrier_floor, it.barrier * opts.barrier_shrink);
    }
}

template <NlpProblem P>
NlpSolution solve_nlp(const P& problem, const VectorXd& x0, const SolverOptions& opts) {
    return solve_nlp(problem, initial_iterate(problem, x0, opts), opts);
}

}  // namespace vcdiag
