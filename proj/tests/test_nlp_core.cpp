#include <gtest/gtest.h>

#include <random>

#include "fixtures.hpp"
#include "vcdiag/diagnosis.hpp"
#include "vcdiag/nlp_core.hpp"
#include "vcdiag/reference_oracles.hpp"

using namespace vcdiag;

namespace {

// min 0.5 x'Qx + g'x  s.t.  A x = b,  C x <= d   (dense, small)
struct QuadProblem {
    Eigen::MatrixXd Q, A, C;
    VectorXd g, b, d;
    std::vector<Index> vidx;

    Index num_vars() const { return Q.rows(); }
    Index num_eq() const { return A.rows(); }
    Index num_ineq() const { return C.rows(); }
    double objective(const VectorXd& x) const { return 0.5 * x.dot(Q * x) + g.dot(x); }
    VectorXd gradient(const VectorXd& x) const { return Q * x + g; }
    VectorXd eq_residual(const VectorXd& x) const { return A * x - b; }
    VectorXd ineq_residual(const VectorXd& x) const { return C * x - d; }
    static void dense(const Eigen::MatrixXd& M, Triplets& t) {
        for (Index i = 0; i < M.rows(); ++i)
            for (Index j = 0; j < M.cols(); ++j)
                if (M(i, j) != 0.0) t.emplace_back(i, j, M(i, j));
    }
    void eq_jacobian(const VectorXd&, Triplets& t) const { dense(A, t); }
    void ineq_jacobian(const VectorXd&, Triplets& t) const { dense(C, t); }
    void lagrangian_hessian(const VectorXd&, const VectorXd&, const VectorXd&, Triplets& t) const { dense(Q, t); }
    std::span<const Index> voltage_indices() const { return vidx; }
};
static_assert(NlpProblem<QuadProblem>);

QuadProblem make(Index nx, Index ne, Index ni) {
    QuadProblem p;
    p.Q = Eigen::MatrixXd::Identity(nx, nx);
    p.g = VectorXd::Zero(nx);
    p.A = Eigen::MatrixXd::Zero(ne, nx);
    p.b = VectorXd::Zero(ne);
    p.C = Eigen::MatrixXd::Zero(ni, nx);
    p.d = VectorXd::Zero(ni);
    return p;
}

// min 0.5 n^2 s.t. n = 1
QuadProblem scalar_pin() {
    QuadProblem p = make(1, 1, 0);
    p.A(0, 0) = 1.0;
    p.b[0] = 1.0;
    return p;
}

}  // namespace

TEST(KktResidual, ScalarPinExactPoint) {
    const QuadProblem p = scalar_pin();
    KktSystem it;
    it.x = VectorXd::Ones(1);
    it.lambda_eq = VectorXd::Constant(1, -1.0);
    EXPECT_LT(kkt_residual(p, it).lpNorm<Eigen::Infinity>(), 1e-12);
}

TEST(KktResidual, ComplementarityRow) {
    QuadProblem p = make(1, 0, 1);
    p.C(0, 0) = 1.0;
    KktSystem it;
    it.x = VectorXd::Zero(1);
    it.lambda_eq.resize(0);
    it.mu_ineq = VectorXd::Constant(1, 2.0);
    it.s_ineq = VectorXd::Constant(1, 3.0);
    it.barrier = 1.0;
    const VectorXd F = kkt_residual(p, it);
    EXPECT_DOUBLE_EQ(F[it.dims().s_begin()], 5.0);
    EXPECT_DOUBLE_EQ(F[it.dims().mu_begin()], 3.0);  // c + s = 0 + 3
    EXPECT_DOUBLE_EQ(F[0], 2.0);                    // x + C' mu
}

TEST(AssembleKkt, RejectsNonInterior) {
    QuadProblem p = make(1, 0, 1);
    p.C(0, 0) = 1.0;
    KktSystem it;
    it.x = VectorXd::Zero(1);
    it.lambda_eq.resize(0);
    it.mu_ineq = VectorXd::Constant(1, 0.0);
    it.s_ineq = VectorXd::Constant(1, 1.0);
    EXPECT_THROW(assemble_kkt(p, it), std::invalid_argument);
}

TEST(AssembleKkt, MatchesFiniteDifferenceOfResidual) {
    QuadProblem p = make(3, 1, 2);
    p.Q << 2, 0.5, 0, 0.5, 1, 0, 0, 0, 3;
    p.A << 1, 1, 1;
    p.b << 1;
    p.C << 1, 0, -1, 0, 1, 0;
    p.d << 0.5, 0.7;
    KktSystem it;
    it.x = VectorXd::LinSpaced(3, 0.1, 0.3);
    it.lambda_eq = VectorXd::Constant(1, 0.4);
    it.mu_ineq = VectorXd::Constant(2, 0.6);
    it.s_ineq = VectorXd::Constant(2, 0.8);
    const AssembledKkt kkt = assemble_kkt(p, it);
    const Index n = it.dims().size();
    Eigen::MatrixXd fd(n, n);
    const double h = 1e-7;
    for (Index j = 0; j < n; ++j) {
        VectorXd e = VectorXd::Zero(n);
        e[j] = 1.0;
        KktSystem a = it, b = it;
        a.advance(e, h);
        b.advance(e, -h);
        fd.col(j) = (kkt_residual(p, a) - kkt_residual(p, b)) / (2 * h);
    }
    EXPECT_LT((Eigen::MatrixXd(kkt.matrix) - fd).cwiseAbs().maxCoeff(), 1e-7);
}

TEST(NewtonStep, ScalarPinOneStep) {
    const QuadProblem p = scalar_pin();
    SolverOptions o;
    KktSystem it = initial_iterate(p, VectorXd::Zero(1), o);
    const StepOutcome s = newton_step(assemble_kkt(p, it));
    ASSERT_TRUE(s.ok);
    it.advance(s.direction, 1.0);
    EXPECT_NEAR(it.x[0], 1.0, 1e-14);
    EXPECT_NEAR(it.lambda_eq[0], -1.0, 1e-14);
}

TEST(NewtonStep, IdentitySystem) {
    AssembledKkt k;
    k.dims = {4, 0, 0};
    k.matrix.resize(4, 4);
    k.matrix.setIdentity();
    k.residual = VectorXd::LinSpaced(4, 1.0, 4.0);
    const StepOutcome s = newton_step(k);
    ASSERT_TRUE(s.ok);
    EXPECT_EQ(s.regularization, 0.0);
    EXPECT_LT((s.direction + k.residual).norm(), 1e-15);
}

TEST(NewtonStep, RandomBorderedSystem) {
    std::mt19937 rng(17);
    std::normal_distribution<double> N;
    for (int trial = 0; trial < 10; ++trial) {
        const Index nx = 12, ne = 4;
        Eigen::MatrixXd R(nx, nx), B(ne, nx);
        for (Index i = 0; i < nx; ++i)
            for (Index j = 0; j < nx; ++j) R(i, j) = N(rng);
        for (Index i = 0; i < ne; ++i)
            for (Index j = 0; j < nx; ++j) B(i, j) = N(rng);
        Eigen::MatrixXd K = Eigen::MatrixXd::Zero(nx + ne, nx + ne);
        K.topLeftCorner(nx, nx) = R * R.transpose() + Eigen::MatrixXd::Identity(nx, nx);
        K.topRightCorner(nx, ne) = B.transpose();
        K.bottomLeftCorner(ne, nx) = B;
        AssembledKkt k;
        k.dims = {nx, ne, 0};
        k.matrix = K.sparseView();
        k.residual.resize(nx + ne);
        for (Index i = 0; i < nx + ne; ++i) k.residual[i] = N(rng);
        const StepOutcome s = newton_step(k);
        ASSERT_TRUE(s.ok);
        const VectorXd ref = K.fullPivLu().solve(-k.residual);
        EXPECT_LT((s.direction - ref).norm(), 1e-9 * std::max(1.0, ref.norm()));
    }
}

TEST(NewtonStep, SingularFallsBackToRegularization) {
    AssembledKkt k;
    k.dims = {2, 0, 0};
    Eigen::MatrixXd K(2, 2);
    K << 1, 0, 0, 0;
    k.matrix = K.sparseView();
    k.matrix.coeffRef(1, 1) = 0.0;
    k.residual = VectorXd::Ones(2);
    const StepOutcome s = newton_step(k);
    ASSERT_TRUE(s.ok);
    EXPECT_GT(s.regularization, 0.0);
    EXPECT_TRUE(s.direction.allFinite());
}

TEST(ApplyLimits, FractionToBoundary) {
    SolverOptions o;
    KktSystem it;
    it.x = VectorXd::Zero(1);
    it.lambda_eq.resize(0);
    it.mu_ineq = VectorXd::Constant(1, 1.0);
    it.s_ineq = VectorXd::Constant(1, 0.1);
    VectorXd d(3);
    d << 0.0, 0.0, -1.0;
    const LimitResult r = apply_limits(d, it, {}, o);
    EXPECT_TRUE(r.boundary_limited);
    EXPECT_NEAR(r.alpha, 0.0995, 1e-15);
    it.advance(d, r.alpha);
    EXPECT_NEAR(it.s_ineq[0], 0.0005, 1e-15);
}

TEST(ApplyLimits, VoltageCap) {
    SolverOptions o;
    KktSystem it;
    it.x = VectorXd::Zero(2);
    it.lambda_eq.resize(0);
    it.mu_ineq.resize(0);
    it.s_ineq.resize(0);
    VectorXd d(2);
    d << 0.5, -0.05;
    const std::vector<Index> v{0, 1};
    const LimitResult r = apply_limits(d, it, v, o);
    EXPECT_TRUE(r.voltage_limited);
    EXPECT_DOUBLE_EQ(r.alpha, 0.2);
    d << 0.05, -0.05;
    const LimitResult u = apply_limits(d, it, v, o);
    EXPECT_FALSE(u.voltage_limited);
    EXPECT_EQ(u.alpha, 1.0);
}

TEST(DampStep, DescentStepUnchanged) {
    const QuadProblem p = scalar_pin();
    SolverOptions o;
    KktSystem it = initial_iterate(p, VectorXd::Zero(1), o);
    const AssembledKkt k = assemble_kkt(p, it);
    const StepOutcome s = newton_step(k);
    const DampingOutcome d = damp_step(p, it, s.direction, 1.0, k.residual.norm(), o);
    EXPECT_EQ(d.alpha, 1.0);
    EXPECT_EQ(d.retries, 0);
    EXPECT_FALSE(d.failed);
}

TEST(DampStep, AscentStepShrinksAndFails) {
    const QuadProblem p = scalar_pin();
    SolverOptions o;
    KktSystem it = initial_iterate(p, VectorXd::Ones(1), o);
    it.lambda_eq[0] = -1.0;  // exact point: any move increases the merit
    VectorXd d(2);
    d << 1.0, 0.0;
    const DampingOutcome r = damp_step(p, it, d, 1.0, kkt_residual(p, it).norm(), o);
    EXPECT_TRUE(r.failed);
    EXPECT_EQ(r.retries, o.max_damping_retries);
    EXPECT_NEAR(r.alpha, std::pow(0.7, 8), 1e-15);
}

TEST(SolveNlp, EqualityQuadratic) {
    QuadProblem p = make(2, 1, 0);
    p.A << 1, 0;
    p.b << 2;
    const NlpSolution s = solve_nlp(p, VectorXd::Zero(2), SolverOptions{});
    ASSERT_EQ(s.status, SolveStatus::converged);
    EXPECT_NEAR(p.objective(s.iterate.x), 2.0, 1e-10);
    EXPECT_NEAR(s.iterate.x[1], 0.0, 1e-12);
}

TEST(SolveNlp, ActiveInequality) {
    // min x^2 s.t. 1 - x <= 0  (Q = 2 so the objective is x^2)
    QuadProblem p = make(1, 0, 1);
    p.Q(0, 0) = 2.0;
    p.C(0, 0) = -1.0;
    p.d[0] = -1.0;
    const NlpSolution s = solve_nlp(p, VectorXd::Constant(1, 3.0), SolverOptions{});
    ASSERT_EQ(s.status, SolveStatus::converged);
    EXPECT_NEAR(s.iterate.x[0], 1.0, 1e-6);
    EXPECT_NEAR(s.iterate.mu_ineq[0], 2.0, 1e-5);
    EXPECT_TRUE(s.iterate.strictly_interior());
}

TEST(SolveNlp, LogInvariants) {
    QuadProblem p = make(3, 1, 3);
    p.Q.diagonal() << 1, 2, 3;
    p.g << -1, 1, 0.5;
    p.A << 1, 1, 1;
    p.b << 0.5;
    p.C = -Eigen::MatrixXd::Identity(3, 3);  // x >= 0
    const NlpSolution s = solve_nlp(p, VectorXd::Constant(3, 0.5), SolverOptions{});
    ASSERT_EQ(s.status, SolveStatus::converged);
    ASSERT_FALSE(s.log.records.empty());
    double barrier = s.log.records.front().barrier;
    for (const auto& r : s.log.records) {
        EXPECT_TRUE(r.interior);
        EXPECT_LE(r.barrier, barrier);
        barrier = r.barrier;
        if (!r.damping_failed) {
            EXPECT_LE(r.merit_after, r.merit_before);
        }
    }
    EXPECT_GE(s.iterate.x.minCoeff(), -1e-8);
    EXPECT_NEAR(s.iterate.x.sum(), 0.5, 1e-8);
}

TEST(SolveNlp, TwoBusPowerFlowPointIsFixed) {
    const CircuitModel m = build_model(fixtures::two_bus());
    const auto pf = oracle::newton_power_flow(m, {30, 1e-14});
    ASSERT_EQ(pf.status, oracle::PfStatus::converged);
    const DiagnosisProblem prob(m, m.layout);
    const VectorXd x0 = pack(m.layout, oracle::complete_state(m, pf.v_real, pf.v_imag));
    const NlpSolution s = solve_nlp(prob, x0, SolverOptions{});
    ASSERT_EQ(s.status, SolveStatus::converged);
    EXPECT_LE(s.log.size(), 1u);
    EXPECT_LT((s.iterate.x - x0).lpNorm<Eigen::Infinity>(), 1e-10);
}

TEST(SolverOptions, Validate) {
    SolverOptions o;
    EXPECT_NO_THROW(o.validate());
    o.barrier_shrink = 1.0;
    EXPECT_THROW(o.validate(), std::invalid_argument);
    o = {};
    o.step_fraction_to_boundary = 1.0;
    EXPECT_THROW(o.validate(), std::invalid_argument);
    o = {};
    o.tol_feas = 0.0;
    EXPECT_THROW(o.validate(), std::invalid_argument);
    o = {};
    o.damping_factor = 1.5;
    EXPECT_THROW(o.validate(), std::invalid_argument);
}
