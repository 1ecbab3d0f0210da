#include <gtest/gtest.h>

#include <algorithm>
#include <random>

#include "fixtures.hpp"
#include "vcdiag/network_model.hpp"
#include "vcdiag/reference_oracles.hpp"

using namespace vcdiag;
using cplx = std::complex<double>;

namespace {

CircuitModel stock(const std::string& name, double lf = 1.0, ModelOptions o = {}) {
    return build_model(scale_load(load_case(fixtures::case_path(name)), lf), o);
}

// Random state near the operating region: |V| in [0.8, 1.2], small angles,
// q and slack current in [-1, 1], n and t in [-0.5, 0.5], v_sq in [0.8, 1.2].
StateVector random_state(const CircuitModel& m, const VariableLayout& l, std::mt19937& rng) {
    std::uniform_real_distribution<double> mag(0.8, 1.2), ang(-0.5, 0.5), unit(-1.0, 1.0), half(-0.5, 0.5);
    StateVector s = initial_state(m, l);
    for (Index k = 0; k < m.n_bus; ++k) {
        const cplx v = std::polar(mag(rng), ang(rng));
        s.v_real[k] = v.real();
        s.v_imag[k] = v.imag();
    }
    for (Index k = 0; k < l.n_pv; ++k) s.q_gen[k] = unit(rng);
    s.i_slack_real = unit(rng);
    s.i_slack_imag = unit(rng);
    for (Index k = 0; k < l.n_comp; ++k) s.n[k] = half(rng);
    for (Index k = 0; k < l.n_t; ++k) s.t[k] = std::abs(half(rng));
    for (Index k = 0; k < l.n_vsq; ++k) s.v_sq[k] = mag(rng);
    return s;
}

}  // namespace

TEST(PqInjectionCurrent, Examples) {
    auto [a, b] = pq_injection_current(1.0, 0.0, 1.0, 0.0);
    EXPECT_DOUBLE_EQ(a, 1.0);
    EXPECT_DOUBLE_EQ(b, 0.0);
    std::tie(a, b) = pq_injection_current(0.0, 0.0, 0.7, -0.3);
    EXPECT_EQ(a, 0.0);
    EXPECT_EQ(b, 0.0);
    // conj(S / V) by complex arithmetic.
    const cplx i = std::conj(cplx(0.5, 0.2) / cplx(0.95, -0.05));
    std::tie(a, b) = pq_injection_current(0.5, 0.2, 0.95, -0.05);
    EXPECT_NEAR(a, 0.513812154696, 1e-12);
    EXPECT_NEAR(b, -0.237569060773, 1e-12);
    EXPECT_NEAR(a, i.real(), 1e-15);
    EXPECT_NEAR(b, i.imag(), 1e-15);
    EXPECT_THROW(pq_injection_current(1.0, 0.0, 0.0, 0.0), SingularVoltageError);
}

TEST(PqInjectionCurrent, PowerIdentityRandom) {
    std::mt19937 rng(7);
    std::uniform_real_distribution<double> pq(-5.0, 5.0), mag(0.3, 1.5), ang(-3.14159, 3.14159);
    for (int k = 0; k < 1000; ++k) {
        const double p = pq(rng), q = pq(rng);
        const cplx v = std::polar(mag(rng), ang(rng));
        const auto [ir, ii] = pq_injection_current(p, q, v.real(), v.imag());
        const cplx s = v * std::conj(cplx(ir, ii));
        EXPECT_NEAR(s.real(), p, 1e-12);
        EXPECT_NEAR(s.imag(), q, 1e-12);
    }
}

TEST(BuildModel, TwoBusAdmittance) {
    const CircuitModel m = build_model(fixtures::two_bus());
    const cplx y = 1.0 / cplx(0.01, 0.1);
    EXPECT_NEAR(std::abs(m.y(0, 1) + y), 0.0, 1e-12);
    EXPECT_NEAR(std::abs(m.y(1, 0) + y), 0.0, 1e-12);
    EXPECT_NEAR(std::abs(m.y(0, 0) - y), 0.0, 1e-12);
    EXPECT_NEAR(std::abs(m.y(1, 1) - y), 0.0, 1e-12);
    ASSERT_EQ(m.pq_devices.size(), 1u);
    EXPECT_EQ(m.pq_devices[0].bus, 1);
    EXPECT_DOUBLE_EQ(m.pq_devices[0].p, 0.5);
    EXPECT_EQ(m.slack.bus, 0);
    EXPECT_EQ(m.compensation.size(), 2u);
}

TEST(BuildModel, BranchOffAbsent) {
    NetworkCase c = fixtures::two_bus();
    BranchRecord extra = c.branches[0];
    extra.x = 0.2;
    c.branches.push_back(extra);
    const CircuitModel both = build_model(c);
    c.branches[1].status = Status::off;
    const CircuitModel one = build_model(c);
    EXPECT_NEAR(std::abs(one.y(0, 1) + 1.0 / cplx(0.01, 0.1)), 0.0, 1e-12);
    EXPECT_GT(std::abs(both.y(0, 1) - one.y(0, 1)), 1.0);
}

TEST(BuildModel, TapAndShiftStamp) {
    NetworkCase c = fixtures::two_bus();
    c.branches[0].tap = 0.95;
    c.branches[0].shift = 0.1;
    c.branches[0].b_charging = 0.04;
    const CircuitModel m = build_model(c);
    const cplx ys = 1.0 / cplx(0.01, 0.1), a = std::polar(0.95, 0.1), hb(0, 0.02);
    EXPECT_NEAR(std::abs(m.y(0, 0) - (ys + hb) / (0.95 * 0.95)), 0.0, 1e-12);
    EXPECT_NEAR(std::abs(m.y(0, 1) + ys / std::conj(a)), 0.0, 1e-12);
    EXPECT_NEAR(std::abs(m.y(1, 0) + ys / a), 0.0, 1e-12);
    EXPECT_NEAR(std::abs(m.y(1, 1) - (ys + hb)), 0.0, 1e-12);
}

TEST(BuildModel, Case30StructureSymmetric) {
    const CircuitModel m = stock("case30");
    EXPECT_EQ(m.n_bus, 30);
    const SparseMatrix& y = m.y_lin;
    for (Index j = 0; j < y.outerSize(); ++j)
        for (SparseMatrix::InnerIterator it(y, j); it; ++it)
            EXPECT_TRUE(y.coeff(it.col(), it.row()) != 0.0 || it.value() == 0.0) << it.row() << "," << it.col();
    EXPECT_EQ(m.pv_devices.size(), 5u);
    EXPECT_EQ(m.compensation.size(), 58u);
    const CircuitModel pq = stock("case30", 1.0, {Placement::pq_only, true});
    EXPECT_EQ(pq.compensation.size(), 24u);
    for (const auto& c : pq.compensation) EXPECT_EQ(c.part, CurrentPart::imag);
}

TEST(KclResidual, SolvedPowerFlowIsZero) {
    for (const char* name : {"case9", "case30", "case118"}) {
        const CircuitModel m = stock(name);
        const auto pf = oracle::newton_power_flow(m);
        ASSERT_EQ(pf.status, oracle::PfStatus::converged) << name;
        const StateVector s = oracle::complete_state(m, pf.v_real, pf.v_imag);
        EXPECT_LT(kcl_residual(m, s).lpNorm<Eigen::Infinity>(), 1e-8) << name;
    }
}

TEST(KclResidual, TwoBusFlatStart) {
    const CircuitModel m = build_model(fixtures::two_bus());
    StateVector s = initial_state(m, m.layout);
    s.v_real.setOnes();
    s.v_imag.setZero();
    const VectorXd r = kcl_residual(m, s);
    // Flat voltages carry no line current; bus 2 draws its load current
    // (0.5, -0.2) and bus 1 only sees the slack current (zero here).
    EXPECT_NEAR(r[0], 0.0, 1e-15);
    EXPECT_NEAR(r[1], 0.5, 1e-15);
    EXPECT_NEAR(r[2], 0.0, 1e-15);
    EXPECT_NEAR(r[3], -0.2, 1e-15);
    EXPECT_NEAR(r[m.layout.row_slack_real()], 0.0, 1e-15);
}

TEST(KclResidual, CompensationEntersWithMinusSign) {
    const CircuitModel m = stock("case30");
    StateVector s = initial_state(m, m.layout);
    const VectorXd r0 = kcl_residual(m, s);
    for (Index k : {Index(0), Index(7), Index(33)}) {
        StateVector p = s;
        p.n[k] += 0.125;
        const VectorXd diff = kcl_residual(m, p) - r0;
        const auto& c = m.compensation[static_cast<std::size_t>(k)];
        const Index row = c.part == CurrentPart::real ? m.layout.row_kcl_real(c.bus) : m.layout.row_kcl_imag(c.bus);
        for (Index i = 0; i < diff.size(); ++i) EXPECT_EQ(diff[i], i == row ? -0.125 : 0.0);
    }
}

TEST(KclResidual, FlatLosslessFixtureIsZero) {
    NetworkCase c = fixtures::two_bus(0.0);
    c.branches[0].r = 0.0;
    const CircuitModel m = build_model(c);
    StateVector s = initial_state(m, m.layout);
    s.v_real.setConstant(1.0);
    s.v_imag.setZero();
    EXPECT_EQ(kcl_residual(m, s).lpNorm<Eigen::Infinity>(), 0.0);
}

TEST(Jacobian, MatchesFiniteDifferences) {
    std::mt19937 rng(11);
    for (const char* name : {"case9", "case30", "case118"}) {
        const CircuitModel m = stock(name);
        for (bool with_vsq : {false, true}) {
            const VariableLayout l = m.layout_with(with_vsq, with_vsq);
            for (int k = 0; k < 20; ++k) {
                const StateVector s = random_state(m, l, rng);
                const auto rep = oracle::check_jacobian(m, s, 1e-5);
                EXPECT_TRUE(rep.pass) << name << " state " << k << " err " << rep.details[0].value;
            }
        }
    }
}

TEST(Jacobian, TwoBusTight) {
    std::mt19937 rng(3);
    const CircuitModel m = build_model(fixtures::two_bus());
    for (int k = 0; k < 10; ++k) {
        const StateVector s = random_state(m, m.layout, rng);
        EXPECT_LT(oracle::max_relative_error(Eigen::MatrixXd(jacobian(m, s)), oracle::finite_diff_jacobian(m, s)), 1e-6);
    }
}

TEST(Jacobian, VsqRowDerivative) {
    const CircuitModel m = stock("case30");
    const VariableLayout l = m.layout_with(false, true);
    std::mt19937 rng(5);
    const StateVector s = random_state(m, l, rng);
    const SparseMatrix j = jacobian(m, s);
    for (Index k = 0; k < l.n_vsq; ++k) {
        const Index b = m.bounded_buses[static_cast<std::size_t>(k)];
        EXPECT_DOUBLE_EQ(j.coeff(l.row_vsq(k), l.v_real(b)), 2.0 * s.v_real[b]);
        EXPECT_DOUBLE_EQ(j.coeff(l.row_vsq(k), l.v_imag(b)), 2.0 * s.v_imag[b]);
        EXPECT_DOUBLE_EQ(j.coeff(l.row_vsq(k), l.vsq(k)), -1.0);
    }
}

TEST(Jacobian, PatternConstant) {
    const CircuitModel m = stock("case30");
    const VariableLayout l = m.layout_with(true, true);
    std::mt19937 rng(9);
    auto pattern = [&](const StateVector& s) {
        Triplets t;
        equality_jacobian(m, l, pack(l, s), t);
        std::vector<std::pair<Index, Index>> p;
        for (const auto& e : t) p.emplace_back(e.row(), e.col());
        return p;
    };
    const auto ref = pattern(random_state(m, l, rng));
    for (int k = 0; k < 10; ++k) EXPECT_EQ(pattern(random_state(m, l, rng)), ref);
}

TEST(Hessian, MatchesFiniteDifferences) {
    std::mt19937 rng(13);
    for (const char* name : {"case9", "case30"}) {
        const CircuitModel m = stock(name);
        const VariableLayout l = m.layout_with(true, true);
        for (int k = 0; k < 5; ++k) {
            const VectorXd x = pack(l, random_state(m, l, rng));
            VectorXd lambda(l.n_eq());
            std::uniform_real_distribution<double> u(-1.0, 1.0);
            for (Index i = 0; i < lambda.size(); ++i) lambda[i] = u(rng);
            Triplets t;
            equality_hessian(m, l, x, lambda, t);
            SparseMatrix h(l.size(), l.size());
            h.setFromTriplets(t.begin(), t.end());
            EXPECT_LT(oracle::max_relative_error(Eigen::MatrixXd(h), oracle::finite_diff_hessian(m, l, x, lambda)),
                      1e-5)
                << name;
        }
    }
}

// Reversing bus ids (and row order) permutes residual and Jacobian.
TEST(BusRelabeling, PermutationEquivariant) {
    const NetworkCase c = load_case(fixtures::case_path("case14"));
    NetworkCase r = c;
    std::reverse(r.buses.begin(), r.buses.end());
    const int n = static_cast<int>(c.buses.size());
    auto relabel = [n](int id) { return n + 1 - id; };
    for (auto& b : r.buses) b.id = relabel(b.id);
    for (auto& g : r.gens) g.bus = relabel(g.bus);
    for (auto& br : r.branches) {
        br.from_bus = relabel(br.from_bus);
        br.to_bus = relabel(br.to_bus);
    }
    const CircuitModel a = build_model(c), b = build_model(r);
    ASSERT_EQ(a.n_bus, b.n_bus);
    // Bus k of a sits at position n-1-k in b.
    auto perm_bus = [&](Index k) { return a.n_bus - 1 - k; };

    std::mt19937 rng(21);
    const StateVector sa = random_state(a, a.layout, rng);
    StateVector sb = initial_state(b, b.layout);
    for (Index k = 0; k < a.n_bus; ++k) {
        sb.v_real[perm_bus(k)] = sa.v_real[k];
        sb.v_imag[perm_bus(k)] = sa.v_imag[k];
    }
    // PV devices and compensation components follow bus order.
    for (std::size_t k = 0; k < a.pv_devices.size(); ++k)
        for (std::size_t j = 0; j < b.pv_devices.size(); ++j)
            if (b.pv_devices[j].bus == perm_bus(a.pv_devices[k].bus))
                sb.q_gen[static_cast<Index>(j)] = sa.q_gen[static_cast<Index>(k)];
    for (std::size_t k = 0; k < a.compensation.size(); ++k)
        for (std::size_t j = 0; j < b.compensation.size(); ++j)
            if (b.compensation[j].bus == perm_bus(a.compensation[k].bus) &&
                b.compensation[j].part == a.compensation[k].part)
                sb.n[static_cast<Index>(j)] = sa.n[static_cast<Index>(k)];
    sb.i_slack_real = sa.i_slack_real;
    sb.i_slack_imag = sa.i_slack_imag;

    const VectorXd ra = kcl_residual(a, sa), rb = kcl_residual(b, sb);
    for (Index k = 0; k < a.n_bus; ++k) {
        EXPECT_NEAR(ra[a.layout.row_kcl_real(k)], rb[b.layout.row_kcl_real(perm_bus(k))], 1e-12);
        EXPECT_NEAR(ra[a.layout.row_kcl_imag(k)], rb[b.layout.row_kcl_imag(perm_bus(k))], 1e-12);
    }
    const Eigen::MatrixXd ja(jacobian(a, sa)), jb(jacobian(b, sb));
    for (Index i = 0; i < a.n_bus; ++i)
        for (Index k = 0; k < a.n_bus; ++k) {
            EXPECT_NEAR(ja(a.layout.row_kcl_real(i), a.layout.v_real(k)),
                        jb(b.layout.row_kcl_real(perm_bus(i)), b.layout.v_real(perm_bus(k))), 1e-12);
            EXPECT_NEAR(ja(a.layout.row_kcl_imag(i), a.layout.v_real(k)),
                        jb(b.layout.row_kcl_imag(perm_bus(i)), b.layout.v_real(perm_bus(k))), 1e-12);
            EXPECT_NEAR(ja(a.layout.row_kcl_real(i), a.layout.v_imag(k)),
                        jb(b.layout.row_kcl_real(perm_bus(i)), b.layout.v_imag(perm_bus(k))), 1e-12);
        }
}

TEST(StateVector, PackUnpackRoundTrip) {
    const CircuitModel m = stock("case30");
    const VariableLayout l = m.layout_with(true, true);
    std::mt19937 rng(1);
    const VectorXd x = pack(l, random_state(m, l, rng));
    EXPECT_EQ(pack(l, unpack(l, x)), x);
    EXPECT_EQ(x.size(), l.size());
}

TEST(Residual, SingularVoltageThrows) {
    const CircuitModel m = build_model(fixtures::two_bus());
    StateVector s = initial_state(m, m.layout);
    s.v_real[1] = 0.0;
    s.v_imag[1] = 0.0;
    EXPECT_THROW(kcl_residual(m, s), SingularVoltageError);
}
