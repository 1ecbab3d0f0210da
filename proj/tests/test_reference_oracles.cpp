#include <gtest/gtest.h>

#include <cmath>

#include "fixtures.hpp"
#include "vcdiag/diagnosis.hpp"
#include "vcdiag/reference_oracles.hpp"

using namespace vcdiag;
using cplx = std::complex<double>;

namespace {

constexpr double kDeg = 3.14159265358979323846 / 180.0;

CircuitModel stock(const std::string& name, double lf = 1.0) {
    return build_model(scale_load(load_case(fixtures::case_path(name)), lf));
}

CircuitModel fixture(const std::string& name) { return build_model(load_case(fixtures::fixture_path(name))); }

struct BusRef {
    int bus;
    double vm, va_deg;
};

// Reference solutions from an independent Newton power flow (PYPOWER, 1e-12 mismatch).
void expect_matches(const CircuitModel& m, const oracle::PowerFlowResult& pf, const std::vector<BusRef>& ref) {
    ASSERT_EQ(pf.status, oracle::PfStatus::converged);
    for (const auto& r : ref) {
        const auto k = static_cast<Index>(std::find(m.bus_ids.begin(), m.bus_ids.end(), r.bus) - m.bus_ids.begin());
        const cplx v(pf.v_real[k], pf.v_imag[k]);
        EXPECT_NEAR(std::abs(v), r.vm, 1e-9) << "bus " << r.bus;
        EXPECT_NEAR(std::arg(v), r.va_deg * kDeg, 1e-9) << "bus " << r.bus;
    }
}

}  // namespace

TEST(PowerFlowOracle, Case9) {
    const CircuitModel m = stock("case9");
    expect_matches(m, oracle::newton_power_flow(m, {30, 1e-12}),
                   {{1, 1.04, 0.0},
                    {2, 1.025, 9.280005481643},
                    {3, 1.025, 4.664751333137},
                    {4, 1.025788392844, -2.216787799950},
                    {5, 1.012654324018, -3.687396170157},
                    {6, 1.032352949002, 1.966716074449},
                    {7, 1.015882583627, 0.727536076874},
                    {8, 1.025769372386, 3.719701154622},
                    {9, 0.995630858048, -3.988805272851}});
}

TEST(PowerFlowOracle, Case30) {
    const CircuitModel m = stock("case30");
    expect_matches(m, oracle::newton_power_flow(m, {30, 1e-12}),
                   {{3, 0.983138289103, -1.522073937460},
                    {8, 0.960623708294, -2.725769438627},
                    {19, 0.965287039634, -3.958204696191},
                    {26, 0.972194149801, -2.139345989041},
                    {30, 0.967882879188, -3.041523583879}});
}

TEST(PowerFlowOracle, Case30Stressed) {
    const CircuitModel m = stock("case30", 1.5);
    expect_matches(m, oracle::newton_power_flow(m, {30, 1e-12}),
                   {{26, 0.957327870247, -10.722449430783},
                    {29, 0.968480294530, -10.753841158613},
                    {30, 0.950420397723, -12.164036652195}});
}

TEST(PowerFlowOracle, Case118) {
    const CircuitModel m = stock("case118");
    expect_matches(m, oracle::newton_power_flow(m, {30, 1e-12}),
                   {{20, 0.956934313100, 12.191003930856},
                    {53, 0.945982900105, 14.436148733426},
                    {118, 0.949437532052, 21.941866628112}});
}

TEST(PowerFlowOracle, TwoBusClosedForm) {
    for (double lf : {0.5, 1.0, 2.0, 4.0}) {
        const CircuitModel m = build_model(fixtures::two_bus(lf));
        const auto pf = oracle::newton_power_flow(m, {30, 1e-13});
        ASSERT_EQ(pf.status, oracle::PfStatus::converged) << lf;
        const cplx v = fixtures::two_bus_voltage(0.5 * lf, 0.2 * lf);
        EXPECT_NEAR(pf.v_real[1], v.real(), 1e-10) << lf;
        EXPECT_NEAR(pf.v_imag[1], v.imag(), 1e-10) << lf;
        EXPECT_LT(pf.kcl_inf, 1e-10);
    }
}

TEST(PowerFlowOracle, CollapsedCaseDiverges) {
    EXPECT_EQ(oracle::newton_power_flow(stock("case30", 4.3)).status, oracle::PfStatus::diverged);
    EXPECT_EQ(oracle::newton_power_flow(build_model(fixtures::two_bus(20.0))).status, oracle::PfStatus::diverged);
}

TEST(PowerFlowOracle, AgreesWithCurrentInjectionBaseline) {
    for (const char* name : {"case14", "case118", "case1354pegase"}) {
        const CircuitModel m = stock(name);
        const auto pf = oracle::newton_power_flow(m);
        const PowerFlowOutcome base = run_baseline_powerflow(m);
        ASSERT_EQ(pf.status, oracle::PfStatus::converged) << name;
        ASSERT_EQ(base.status, DiagnosisStatus::converged) << name;
        EXPECT_LT((pf.v_real - base.v_real).lpNorm<Eigen::Infinity>(), 1e-7) << name;
        EXPECT_LT((pf.v_imag - base.v_imag).lpNorm<Eigen::Infinity>(), 1e-7) << name;
    }
}

TEST(FiniteDifference, CompensationColumnsAreExact) {
    const CircuitModel m = stock("case9");
    const StateVector s = initial_state(m, m.layout);
    const Eigen::MatrixXd fd = oracle::finite_diff_jacobian(m, s);
    for (std::size_t k = 0; k < m.compensation.size(); ++k) {
        const auto& c = m.compensation[k];
        const Index row = c.part == CurrentPart::real ? m.layout.row_kcl_real(c.bus) : m.layout.row_kcl_imag(c.bus);
        const VectorXd col = fd.col(m.layout.comp(static_cast<Index>(k)));
        EXPECT_NEAR(col[row], -1.0, 1e-8);
        EXPECT_NEAR(col.cwiseAbs().sum(), 1.0, 1e-8);
    }
}

TEST(FiniteDifference, RelativeErrorMetric) {
    Eigen::MatrixXd a(2, 2), b(2, 2);
    a << 100, 0, 0, 0.5;
    b << 101, 0, 0, 0.5;
    EXPECT_NEAR(oracle::max_relative_error(a, b), 0.01, 1e-15);
    b << 100, 0, 0, 0.6;
    EXPECT_NEAR(oracle::max_relative_error(a, b), 0.1, 1e-15);
}

TEST(OracleReport, NanFails) {
    oracle::OracleReport r;
    r.add("ok", 0.5, 1.0);
    EXPECT_TRUE(r.pass);
    r.add("nan", std::nan(""), 1.0);
    EXPECT_FALSE(r.pass);
    EXPECT_FALSE(r.details.back().pass);
}

TEST(Certificate, PowerFlowSolutionPasses) {
    const NetworkCase c = load_case(fixtures::case_path("case30"));
    const CircuitModel m = build_model(c);
    const auto pf = oracle::newton_power_flow(m, {30, 1e-12});
    const std::vector<double> vr(pf.v_real.begin(), pf.v_real.end()), vi(pf.v_imag.begin(), pf.v_imag.end());
    EXPECT_TRUE(oracle::certify_feasibility(c, m.bus_ids, vr, vi, {}, {}, 1e-8).pass);

    std::vector<double> bad = vr;
    bad[20] += 1e-3;
    const auto r = oracle::certify_feasibility(c, m.bus_ids, bad, vi, {}, {}, 1e-6);
    EXPECT_FALSE(r.pass);
    EXPECT_GT(r.details[0].value, 1e-4);
    EXPECT_THROW(oracle::certify_feasibility(c, {1, 2}, {1, 1}, {0, 0}, {}, {}), std::invalid_argument);
}

TEST(Certificate, Bounds) {
    const NetworkCase c = scale_load(load_case(fixtures::case_path("case30")), 1.5);
    const CircuitModel m = build_model(c);
    const auto pf = oracle::newton_power_flow(m);
    const std::vector<double> vr(pf.v_real.begin(), pf.v_real.end()), vi(pf.v_imag.begin(), pf.v_imag.end());
    const auto r = oracle::certify_bounds(c, m.bus_ids, vr, vi);
    EXPECT_FALSE(r.pass);
    EXPECT_TRUE(oracle::certify_bounds(load_case(fixtures::case_path("case9")), stock("case9").bus_ids,
                                       std::vector<double>(9, 1.0), std::vector<double>(9, 0.0))
                    .pass);
}

TEST(Enumeration, RefusesLargeCases) {
    EXPECT_THROW(oracle::enumerate_supports(stock("case9"), 2), oracle::EnumerationRefused);
    EXPECT_THROW(oracle::enumerate_supports(fixture("ring4"), -1), std::invalid_argument);
}

TEST(Enumeration, TwoBusSingleSupportMatchesDense) {
    const CircuitModel m = build_model(fixtures::two_bus(20.0));
    const auto f = oracle::enumerate_supports(m, 1);
    EXPECT_TRUE(f.report.pass);
    ASSERT_EQ(f.best.size(), 2u);
    EXPECT_FALSE(f.best[0].has_value());
    ASSERT_TRUE(f.best[1].has_value());
    const DiagnosisResult d = solve_dense(m);
    EXPECT_NEAR(f.best[1]->objective, d.objective, 1e-7 * d.objective);
}

TEST(Enumeration, FixtureFrontiersMonotone) {
    for (const char* name : {"radial3", "ring4", "twofeeder5"}) {
        const CircuitModel m = fixture(name);
        const auto f = oracle::enumerate_supports(m, 4);
        EXPECT_TRUE(f.report.pass) << name;
        ASSERT_TRUE(f.min_cardinality().has_value()) << name;
        EXPECT_GE(*f.min_cardinality(), 1u) << name;  // none of them is solvable as-is
        const DiagnosisResult d = solve_dense(m);
        ASSERT_EQ(d.status, DiagnosisStatus::converged) << name;
        for (const auto& b : f.best)
            if (b) {
                EXPECT_GE(b->objective, d.objective * (1 - 1e-6)) << name;
            }
        // Every feasible solution satisfies the independent KCL check.
        const NetworkCase c = load_case(fixtures::fixture_path(name));
        for (const auto& s : f.all) {
            if (!s.feasible) continue;
            std::vector<double> vr(s.v_real.begin(), s.v_real.end()), vi(s.v_imag.begin(), s.v_imag.end()), nr, ni;
            for (const auto& z : s.n) {
                nr.push_back(z.real());
                ni.push_back(z.imag());
            }
            EXPECT_TRUE(oracle::certify_feasibility(c, m.bus_ids, vr, vi, nr, ni, 1e-6).pass) << name;
        }
    }
}
