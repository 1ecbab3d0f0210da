#pragma once
// Independent checks used by tests and acceptance runs: a polar Newton power
// flow, finite-difference derivatives, exhaustive support enumeration on tiny
// grids, and a KCL certificate computed straight from the case tables.
// Nothing here goes through the interior-point solver.

#include <algorithm>
#include <bit>
#include <cmath>
#include <complex>
#include <cstdint>
#include <limits>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <Eigen/SparseLU>

#include "vcdiag/case_io.hpp"
#include "vcdiag/network_model.hpp"

namespace vcdiag::oracle {

using Eigen::MatrixXd;
using cplx = std::complex<double>;

enum class OracleKind { powerflow, jacobian_fd, support_enum };

inline const char* to_string(OracleKind k) {
    switch (k) {
        case OracleKind::powerflow: return "powerflow";
        case OracleKind::jacobian_fd: return "jacobian_fd";
        case OracleKind::support_enum: return "support_enum";
    }
    return "unknown";
}

struct OracleCheck {
    std::string name;
    double value = 0.0;
    double tolerance = 0.0;
    bool pass = false;
};

struct OracleReport {
    OracleKind kind = OracleKind::powerflow;
    bool pass = true;
    std::vector<OracleCheck> details;

    // NaN never passes.
    void add(std::string name, double value, double tolerance) {
        const bool ok = value <= tolerance;
        details.push_back({std::move(name), value, tolerance, ok});
        pass = pass && ok;
    }
};

// ---------------------------------------------------------------------------
// Polar Newton power flow on power mismatches

struct PowerFlowOptions {
    int max_iters = 30;
    double tol = 1e-10;  // power mismatch, pu
};

enum class PfStatus { converged, diverged };

struct PowerFlowResult {
    PfStatus status = PfStatus::diverged;
    VectorXd v_real;
    VectorXd v_imag;
    int iterations = 0;
    double mismatch_inf = std::numeric_limits<double>::infinity();
    // Current mismatch with generator reactive output taken from the solution.
    double kcl_inf = std::numeric_limits<double>::infinity();
};

namespace detail {

inline Eigen::SparseMatrix<cplx> complex_admittance(const CircuitModel& m) {
    const Index n = m.n_bus;
    std::vector<Eigen::Triplet<cplx>> trip;
    for (Index j = 0; j < n; ++j)
        for (SparseMatrix::InnerIterator it(m.y_lin, j); it; ++it) {
            if (it.row() < n)
                trip.emplace_back(it.row(), j, cplx(it.value(), 0.0));
            else
                trip.emplace_back(it.row() - n, j, cplx(0.0, it.value()));
        }
    Eigen::SparseMatrix<cplx> y(n, n);
    y.setFromTriplets(trip.begin(), trip.end());
    return y;
}

// Scheduled injection per bus; at PV buses only the real part is meaningful.
inline std::vector<cplx> scheduled_injection(const CircuitModel& m) {
    std::vector<cplx> s(static_cast<std::size_t>(m.n_bus));
    for (const auto& d : m.pq_devices) s[static_cast<std::size_t>(d.bus)] -= cplx(d.p, d.q);
    for (const auto& d : m.pv_devices) s[static_cast<std::size_t>(d.bus)] += d.p_net;
    return s;
}

}  // namespace detail

inline PowerFlowResult newton_power_flow(const CircuitModel& m, const PowerFlowOptions& opts = {}) {
    const Index n = m.n_bus;
    const auto y = detail::complex_admittance(m);
    const auto s_sched = detail::scheduled_injection(m);

    std::vector<char> is_pv(static_cast<std::size_t>(n), 0);
    for (const auto& d : m.pv_devices) is_pv[static_cast<std::size_t>(d.bus)] = 1;
    std::vector<Index> pvpq, pq;
    for (Index k = 0; k < n; ++k) {
        if (k == m.slack.bus) continue;
        pvpq.push_back(k);
        if (!is_pv[static_cast<std::size_t>(k)]) pq.push_back(k);
    }
    std::vector<Index> col_va(static_cast<std::size_t>(n), -1), col_vm(static_cast<std::size_t>(n), -1);
    for (std::size_t k = 0; k < pvpq.size(); ++k) col_va[static_cast<std::size_t>(pvpq[k])] = static_cast<Index>(k);
    for (std::size_t k = 0; k < pq.size(); ++k)
        col_vm[static_cast<std::size_t>(pq[k])] = static_cast<Index>(pvpq.size() + k);
    const Index dim = static_cast<Index>(pvpq.size() + pq.size());

    Eigen::VectorXcd v(n);
    for (Index k = 0; k < n; ++k) v[k] = cplx(m.v_real_init[k], m.v_imag_init[k]);
    VectorXd va = v.unaryExpr([](cplx z) { return std::arg(z); }).real();
    VectorXd vm = v.cwiseAbs();

    PowerFlowResult out;
    Eigen::VectorXcd cur, mis;
    auto evaluate = [&]() {
        cur = y * v;
        mis.resize(n);
        for (Index k = 0; k < n; ++k) mis[k] = v[k] * std::conj(cur[k]) - s_sched[static_cast<std::size_t>(k)];
        VectorXd f(dim);
        for (Index k : pvpq) f[col_va[static_cast<std::size_t>(k)]] = mis[k].real();
        for (Index k : pq) f[col_vm[static_cast<std::size_t>(k)]] = mis[k].imag();
        return f;
    };

    Eigen::SparseLU<SparseMatrix> lu;
    for (int it = 0;; ++it) {
        const VectorXd f = evaluate();
        out.iterations = it;
        out.mismatch_inf = dim ? f.lpNorm<Eigen::Infinity>() : 0.0;
        if (!std::isfinite(out.mismatch_inf)) break;
        if (out.mismatch_inf < opts.tol) {
            out.status = PfStatus::converged;
            break;
        }
        if (it == opts.max_iters) break;

        // dS/dVa and dS/dVm entry by entry:
        //   dS_i/dVa_k = j V_i conj(d_ik I_i - Y_ik V_k)
        //   dS_i/dVm_k = V_i conj(Y_ik V_k / |V_k|) + d_ik conj(I_i) V_i / |V_i|
        Triplets trip;
        auto put = [&](Index i, Index k, cplx dva, cplx dvm) {
            const Index ri = col_va[static_cast<std::size_t>(i)], qi = col_vm[static_cast<std::size_t>(i)];
            const Index ca = col_va[static_cast<std::size_t>(k)], cm = col_vm[static_cast<std::size_t>(k)];
            if (ri >= 0 && ca >= 0) trip.emplace_back(ri, ca, dva.real());
            if (ri >= 0 && cm >= 0) trip.emplace_back(ri, cm, dvm.real());
            if (qi >= 0 && ca >= 0) trip.emplace_back(qi, ca, dva.imag());
            if (qi >= 0 && cm >= 0) trip.emplace_back(qi, cm, dvm.imag());
        };
        for (Index k = 0; k < n; ++k)
            for (Eigen::SparseMatrix<cplx>::InnerIterator e(y, k); e; ++e) {
                const Index i = e.row();
                const cplx yik = e.value();
                put(i, k, cplx(0, -1) * v[i] * std::conj(yik * v[k]), v[i] * std::conj(yik * v[k] / vm[k]));
            }
        for (Index i = 0; i < n; ++i)
            put(i, i, cplx(0, 1) * v[i] * std::conj(cur[i]), std::conj(cur[i]) * v[i] / vm[i]);
        SparseMatrix jac(dim, dim);
        jac.setFromTriplets(trip.begin(), trip.end());
        lu.compute(jac);
        if (lu.info() != Eigen::Success) break;
        const VectorXd dx = -lu.solve(f);
        if (!dx.allFinite()) break;
        for (Index k : pvpq) va[k] += dx[col_va[static_cast<std::size_t>(k)]];
        for (Index k : pq) vm[k] += dx[col_vm[static_cast<std::size_t>(k)]];
        if ((vm.array() <= 0.0).any()) break;
        for (Index k = 0; k < n; ++k) v[k] = std::polar(vm[k], va[k]);
    }

    out.v_real = v.real();
    out.v_imag = v.imag();
    if (out.status == PfStatus::converged) {
        double worst = 0.0;
        for (Index k : pvpq) {
            const double e = is_pv[static_cast<std::size_t>(k)] ? std::abs(mis[k].real()) : std::abs(mis[k]);
            worst = std::max(worst, e / vm[k]);
        }
        out.kcl_inf = worst;
    }
    return out;
}

/// Fill generator reactive outputs and slack current so that the model's
/// equality residual can be evaluated at given voltages (n = 0).
inline StateVector complete_state(const CircuitModel& m, const VectorXd& v_real, const VectorXd& v_imag) {
    const auto y = detail::complex_admittance(m);
    Eigen::VectorXcd v(m.n_bus);
    for (Index k = 0; k < m.n_bus; ++k) v[k] = cplx(v_real[k], v_imag[k]);
    const Eigen::VectorXcd cur = y * v;
    std::vector<cplx> load(static_cast<std::size_t>(m.n_bus));
    for (const auto& d : m.pq_devices) load[static_cast<std::size_t>(d.bus)] += cplx(d.p, d.q);

    StateVector s = initial_state(m, m.layout);
    s.v_real = v_real;
    s.v_imag = v_imag;
    for (Index k = 0; k < m.layout.n_pv; ++k) {
        const Index b = m.pv_devices[static_cast<std::size_t>(k)].bus;
        s.q_gen[k] = (v[b] * std::conj(cur[b])).imag() + load[static_cast<std::size_t>(b)].imag();
    }
    const Index sb = m.slack.bus;
    const cplx i_slack = cur[sb] + std::conj(load[static_cast<std::size_t>(sb)] / v[sb]);
    s.i_slack_real = i_slack.real();
    s.i_slack_imag = i_slack.imag();
    return s;
}

// ---------------------------------------------------------------------------
// Finite differences

/// Central-difference Jacobian of the full equality residual at `state`.
inline MatrixXd finite_diff_jacobian(const CircuitModel& m, const StateVector& state, double step = 1e-7) {
    VariableLayout l = m.layout;
    l.n_t = state.t.size();
    l.n_vsq = state.v_sq.size();
    const VectorXd x = pack(l, state);
    MatrixXd jac(l.n_eq(), l.size());
    for (Index j = 0; j < l.size(); ++j) {
        VectorXd xp = x, xm = x;
        xp[j] += step;
        xm[j] -= step;
        jac.col(j) = (equality_residual(m, l, xp) - equality_residual(m, l, xm)) / (2.0 * step);
    }
    return jac;
}

/// Central differences of J(x)^T lambda, i.e. the constraint part of the
/// Lagrangian Hessian.
inline MatrixXd finite_diff_hessian(const CircuitModel& m, const VariableLayout& l, const VectorXd& x,
                                    const VectorXd& lambda, double step = 1e-6) {
    MatrixXd h(l.size(), l.size());
    for (Index j = 0; j < l.size(); ++j) {
        VectorXd xp = x, xm = x;
        xp[j] += step;
        xm[j] -= step;
        const VectorXd gp = equality_jacobian(m, l, xp).transpose() * lambda;
        const VectorXd gm = equality_jacobian(m, l, xm).transpose() * lambda;
        h.col(j) = (gp - gm) / (2.0 * step);
    }
    return h;
}

/// Largest entrywise error relative to max(1, |analytic|).
inline double max_relative_error(const MatrixXd& analytic, const MatrixXd& approx) {
    double worst = 0.0;
    for (Index i = 0; i < analytic.rows(); ++i)
        for (Index j = 0; j < analytic.cols(); ++j) {
            const double a = analytic(i, j);
            worst = std::max(worst, std::abs(a - approx(i, j)) / std::max(1.0, std::abs(a)));
        }
    return worst;
}

inline OracleReport check_jacobian(const CircuitModel& m, const StateVector& state, double tol = 1e-5) {
    OracleReport r;
    r.kind = OracleKind::jacobian_fd;
    const MatrixXd analytic = MatrixXd(jacobian(m, state));
    r.add("jacobian_max_rel_err", max_relative_error(analytic, finite_diff_jacobian(m, state)), tol);
    return r;
}

// ---------------------------------------------------------------------------
// Certificate from the case tables

/// Recomputes branch and shunt currents from `c` and checks KCL with the
/// given compensation, PV magnitudes and the slack voltage. Voltages and n
/// are indexed like `bus_ids`.
inline OracleReport certify_feasibility(const NetworkCase& c, const std::vector<int>& bus_ids,
                                        const std::vector<double>& v_real, const std::vector<double>& v_imag,
                                        const std::vector<double>& n_real, const std::vector<double>& n_imag,
                                        double tol = 1e-6) {
    const std::size_t nb = c.buses.size();
    std::vector<cplx> v(nb), comp(nb), cur(nb), inj(nb);
    std::vector<char> seen(nb, 0);
    for (std::size_t k = 0; k < bus_ids.size(); ++k) {
        const auto at = c.bus_index(bus_ids[k]);
        if (!at) throw std::invalid_argument("bus " + std::to_string(bus_ids[k]) + " not in case");
        v[*at] = {v_real[k], v_imag[k]};
        comp[*at] = {n_real.empty() ? 0.0 : n_real[k], n_imag.empty() ? 0.0 : n_imag[k]};
        seen[*at] = 1;
    }
    if (std::count(seen.begin(), seen.end(), 1) != static_cast<long>(nb))
        throw std::invalid_argument("voltages must cover every bus of the case");

    for (std::size_t k = 0; k < nb; ++k) cur[k] += cplx(c.buses[k].g_shunt, c.buses[k].b_shunt) * v[k];
    for (const auto& br : c.branches) {
        if (br.status != Status::on) continue;
        const std::size_t f = *c.bus_index(br.from_bus), t = *c.bus_index(br.to_bus);
        const cplx ys = 1.0 / cplx(br.r, br.x);
        const cplx bc(0.0, br.b_charging / 2.0);
        const cplx a = std::polar(br.tap == 0.0 ? 1.0 : br.tap, br.shift);
        cur[f] += (ys + bc) / std::norm(a) * v[f] - ys / std::conj(a) * v[t];
        cur[t] += -ys / a * v[f] + (ys + bc) * v[t];
    }
    std::vector<double> v_set(nb, 0.0);
    for (std::size_t k = 0; k < nb; ++k) {
        inj[k] = -cplx(c.buses[k].p_demand, c.buses[k].q_demand);
        v_set[k] = c.buses[k].v_mag_init;
    }
    for (const auto& g : c.gens) {
        if (g.status != Status::on) continue;
        const std::size_t k = *c.bus_index(g.bus);
        inj[k] += cplx(g.p_set, g.q_init);
        v_set[k] = g.v_set;
    }

    double kcl = 0.0, pv = 0.0, slack = 0.0;
    for (std::size_t k = 0; k < nb; ++k) {
        const auto& b = c.buses[k];
        const double vm = std::abs(v[k]);
        if (!(vm > 0)) {
            kcl = std::numeric_limits<double>::infinity();
            continue;
        }
        // Power mismatch including the compensation injection, per unit voltage.
        const cplx mis = v[k] * std::conj(cur[k]) - inj[k] - v[k] * std::conj(comp[k]);
        switch (b.btype) {
            case BusType::SLACK:
                slack = std::max(slack, std::abs(v[k] - std::polar(v_set[k], b.v_ang_init)));
                break;
            case BusType::PV:
                kcl = std::max(kcl, std::abs(mis.real()) / vm);
                pv = std::max(pv, std::abs(vm - v_set[k]));
                break;
            default: kcl = std::max(kcl, std::abs(mis) / vm);
        }
    }
    OracleReport r;
    r.kind = OracleKind::powerflow;
    r.add("kcl_inf", kcl, tol);
    r.add("pv_magnitude_inf", pv, tol);
    r.add("slack_voltage_inf", slack, tol);
    return r;
}

/// Bounds check on PQ buses straight from the case's v_min / v_max.
inline OracleReport certify_bounds(const NetworkCase& c, const std::vector<int>& bus_ids,
                                   const std::vector<double>& v_real, const std::vector<double>& v_imag,
                                   double tol = 1e-6) {
    double worst = 0.0;
    for (std::size_t k = 0; k < bus_ids.size(); ++k) {
        const auto& b = c.buses[*c.bus_index(bus_ids[k])];
        if (b.btype != BusType::PQ) continue;
        const double vm = std::hypot(v_real[k], v_imag[k]);
        worst = std::max({worst, b.v_min - vm, vm - b.v_max});
    }
    OracleReport r;
    r.kind = OracleKind::powerflow;
    r.add("bound_violation", worst, tol);
    return r;
}

// ---------------------------------------------------------------------------
// Exhaustive support enumeration

class EnumerationRefused : public std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

struct SupportSolution {
    std::vector<int> buses;  // bus ids allowed to carry compensation
    bool feasible = false;
    double objective = std::numeric_limits<double>::infinity();  // 0.5 |n|^2
    VectorXd v_real;
    VectorXd v_imag;
    std::vector<cplx> n;  // per bus
    // Bound multipliers carry the sign of a minimum (only meaningful with bounds).
    bool multipliers_ok = true;
};

struct SupportFrontier {
    std::vector<SupportSolution> all;
    // best[k]: lowest objective among feasible supports with k buses.
    std::vector<std::optional<SupportSolution>> best;
    OracleReport report;

    [[nodiscard]] std::optional<std::size_t> min_cardinality() const {
        for (std::size_t k = 0; k < best.size(); ++k)
            if (best[k]) return k;
        return std::nullopt;
    }
};

namespace detail {

// min 0.5 sum w_k n_k^2  s.t.  h(x) = 0, and optionally
// |V|^2 - vmin^2 - s^2 = 0, vmax^2 - |V|^2 - r^2 = 0 on bounded buses.
// Extended unknowns: [x; s; r].
struct LagrangeProblem {
    const CircuitModel* m = nullptr;
    VariableLayout l;
    std::vector<double> w;
    std::vector<double> lo2, hi2;  // empty without bounds

    [[nodiscard]] Index nb() const { return static_cast<Index>(lo2.size()); }
    [[nodiscard]] Index nx() const { return l.size() + 2 * nb(); }
    [[nodiscard]] Index ne() const { return l.n_eq() + 2 * nb(); }

    [[nodiscard]] VectorXd residual(const VectorXd& xe) const {
        VectorXd c(ne());
        c.head(l.n_eq()) = equality_residual(*m, l, xe.head(l.size()));
        for (Index k = 0; k < nb(); ++k) {
            const Index b = m->bounded_buses[static_cast<std::size_t>(k)];
            const double v2 = xe[b] * xe[b] + xe[l.n_bus + b] * xe[l.n_bus + b];
            const double s = xe[l.size() + k], r = xe[l.size() + nb() + k];
            c[l.n_eq() + k] = v2 - lo2[static_cast<std::size_t>(k)] - s * s;
            c[l.n_eq() + nb() + k] = hi2[static_cast<std::size_t>(k)] - v2 - r * r;
        }
        return c;
    }

    [[nodiscard]] MatrixXd jacobian(const VectorXd& xe) const {
        MatrixXd j = MatrixXd::Zero(ne(), nx());
        j.topLeftCorner(l.n_eq(), l.size()) = MatrixXd(equality_jacobian(*m, l, xe.head(l.size())));
        for (Index k = 0; k < nb(); ++k) {
            const Index b = m->bounded_buses[static_cast<std::size_t>(k)];
            const Index rl = l.n_eq() + k, rh = l.n_eq() + nb() + k;
            j(rl, b) = 2.0 * xe[b];
            j(rl, l.n_bus + b) = 2.0 * xe[l.n_bus + b];
            j(rh, b) = -2.0 * xe[b];
            j(rh, l.n_bus + b) = -2.0 * xe[l.n_bus + b];
            j(rl, l.size() + k) = -2.0 * xe[l.size() + k];
            j(rh, l.size() + nb() + k) = -2.0 * xe[l.size() + nb() + k];
        }
        return j;
    }

    [[nodiscard]] VectorXd gradient(const VectorXd& xe) const {
        VectorXd g = VectorXd::Zero(nx());
        for (Index k = 0; k < l.n_comp; ++k) g[l.comp(k)] = w[static_cast<std::size_t>(k)] * xe[l.comp(k)];
        return g;
    }

    [[nodiscard]] VectorXd kkt(const VectorXd& xe, const VectorXd& lam) const {
        VectorXd f(nx() + ne());
        f.head(nx()) = gradient(xe) + jacobian(xe).transpose() * lam;
        f.tail(ne()) = residual(xe);
        return f;
    }

    // Objective Hessian exact, constraint part by differencing J^T lam.
    [[nodiscard]] MatrixXd hessian(const VectorXd& xe, const VectorXd& lam) const {
        MatrixXd h(nx(), nx());
        for (Index j = 0; j < nx(); ++j) {
            const double step = 1e-6 * std::max(1.0, std::abs(xe[j]));
            VectorXd xp = xe, xm = xe;
            xp[j] += step;
            xm[j] -= step;
            h.col(j) = (jacobian(xp).transpose() * lam - jacobian(xm).transpose() * lam) / (2.0 * step);
        }
        h = 0.5 * (h + h.transpose()).eval();
        for (Index k = 0; k < l.n_comp; ++k) h(l.comp(k), l.comp(k)) += w[static_cast<std::size_t>(k)];
        return h;
    }
};

struct LagrangeOutcome {
    VectorXd x;
    VectorXd lambda;
    bool converged = false;
};

inline LagrangeOutcome newton_lagrange(const LagrangeProblem& p, VectorXd x, VectorXd lam, int max_iters = 100,
                                       double tol = 1e-10) {
    const Index nx = p.nx(), ne = p.ne();
    auto safe_kkt = [&](const VectorXd& xe, const VectorXd& le) -> std::optional<VectorXd> {
        try {
            VectorXd f = p.kkt(xe, le);
            if (!f.allFinite()) return std::nullopt;
            return f;
        } catch (const SingularVoltageError&) {
            return std::nullopt;
        }
    };
    LagrangeOutcome out;
    auto f = safe_kkt(x, lam);
    for (int it = 0; f && it <= max_iters; ++it) {
        if (f->lpNorm<Eigen::Infinity>() < tol) {
            out.converged = true;
            break;
        }
        MatrixXd k = MatrixXd::Zero(nx + ne, nx + ne);
        k.topLeftCorner(nx, nx) = p.hessian(x, lam);
        const MatrixXd j = p.jacobian(x);
        k.topRightCorner(nx, ne) = j.transpose();
        k.bottomLeftCorner(ne, nx) = j;
        VectorXd d;
        for (double delta = 0.0; delta <= 1e-2; delta = delta == 0.0 ? 1e-10 : delta * 10.0) {
            MatrixXd kr = k;
            kr.topLeftCorner(nx, nx).diagonal().array() += delta;
            kr.bottomRightCorner(ne, ne).diagonal().array() -= delta;
            Eigen::FullPivLU<MatrixXd> lu(kr);
            if (!lu.isInvertible()) continue;
            d = -lu.solve(*f);
            if (d.allFinite()) break;
        }
        if (d.size() == 0) break;
        const double merit = f->norm();
        bool accepted = false;
        for (double alpha = 1.0; alpha > 1e-10; alpha *= 0.5) {
            const VectorXd xt = x + alpha * d.head(nx), lt = lam + alpha * d.tail(ne);
            auto ft = safe_kkt(xt, lt);
            if (ft && ft->norm() < (1.0 - 1e-4 * alpha) * merit) {
                x = xt;
                lam = lt;
                f = std::move(ft);
                accepted = true;
                break;
            }
        }
        if (!accepted) break;
    }
    out.x = std::move(x);
    out.lambda = std::move(lam);
    return out;
}

inline VectorXd extend(const LagrangeProblem& p, const VectorXd& x) {
    VectorXd xe(p.nx());
    xe.head(p.l.size()) = x;
    for (Index k = 0; k < p.nb(); ++k) {
        const Index b = p.m->bounded_buses[static_cast<std::size_t>(k)];
        const double v2 = x[b] * x[b] + x[p.l.n_bus + b] * x[p.l.n_bus + b];
        xe[p.l.size() + k] = std::sqrt(std::max(v2 - p.lo2[static_cast<std::size_t>(k)], 1e-4));
        xe[p.l.size() + p.nb() + k] = std::sqrt(std::max(p.hi2[static_cast<std::size_t>(k)] - v2, 1e-4));
    }
    return xe;
}

}  // namespace detail

/// Solve the dense problem with compensation restricted to every subset of
/// compensable buses of size <= max_card and report the best per size.
inline SupportFrontier enumerate_supports(const CircuitModel& m, int max_card,
                                          const std::optional<VoltageBounds>& bounds = std::nullopt) {
    if (m.n_bus > 6) throw EnumerationRefused("support enumeration is limited to 6 buses");
    if (max_card < 0) throw std::invalid_argument("max_card must be non-negative");

    std::vector<Index> cbus;
    for (const auto& c : m.compensation)
        if (std::find(cbus.begin(), cbus.end(), c.bus) == cbus.end()) cbus.push_back(c.bus);

    std::vector<double> lo2, hi2;
    if (bounds)
        for (Index b : m.bounded_buses) {
            lo2.push_back(std::pow(bounds->v_min[static_cast<std::size_t>(b)], 2));
            hi2.push_back(std::pow(bounds->v_max[static_cast<std::size_t>(b)], 2));
        }
    auto problem = [&](const CircuitModel& mm, std::vector<double> w) {
        return detail::LagrangeProblem{&mm, mm.layout, std::move(w), lo2, hi2};
    };

    // Dense solution with every component free, the path start for each
    // subset. Reached by ramping demand up from zero.
    const detail::LagrangeProblem full = problem(m, std::vector<double>(m.compensation.size(), 1.0));
    detail::LagrangeOutcome dense{detail::extend(full, pack(m.layout, initial_state(m, m.layout))),
                                  VectorXd::Zero(full.ne()), false};
    {
        CircuitModel ramp = m;
        const detail::LagrangeProblem rp = problem(ramp, full.w);
        double sigma = 0.0, step = 0.25;
        while (step > 1e-3) {
            const double next = std::min(1.0, sigma + step);
            for (std::size_t k = 0; k < m.pq_devices.size(); ++k) {
                ramp.pq_devices[k].p = next * m.pq_devices[k].p;
                ramp.pq_devices[k].q = next * m.pq_devices[k].q;
            }
            const detail::LagrangeOutcome o = detail::newton_lagrange(rp, dense.x, dense.lambda);
            if (!o.converged) {
                step *= 0.5;
                continue;
            }
            dense = o;
            sigma = next;
            if (sigma == 1.0) break;
            step = std::min(0.25, 2.0 * step);
        }
        dense.converged = sigma == 1.0;
    }

    SupportFrontier out;
    out.best.resize(static_cast<std::size_t>(std::min<std::size_t>(max_card, cbus.size())) + 1);
    const std::uint32_t subsets = 1u << cbus.size();
    for (std::uint32_t mask = 0; mask < subsets; ++mask) {
        const int card = std::popcount(mask);
        if (card > max_card) continue;
        std::vector<CompensationComponent> keep;
        std::vector<double> path_w;
        for (const auto& c : m.compensation) {
            const auto pos = std::find(cbus.begin(), cbus.end(), c.bus) - cbus.begin();
            const bool in = mask & (1u << pos);
            if (in) keep.push_back(c);
            path_w.push_back(in ? 1.0 : 0.0);
        }
        const CircuitModel sub = m.restricted_to(keep);
        const detail::LagrangeProblem pinned = problem(sub, std::vector<double>(keep.size(), 1.0));

        // Drop the outside components from an iterate of the full problem.
        auto pin = [&](const detail::LagrangeOutcome& o) {
            StateVector s = unpack(m.layout, o.x.head(m.layout.size()));
            VectorXd n(static_cast<Index>(keep.size()));
            Index j = 0;
            for (std::size_t k = 0; k < m.compensation.size(); ++k)
                if (path_w[k] > 0) n[j++] = s.n[static_cast<Index>(k)];
            s.n = n;
            VectorXd xe(pinned.nx());
            xe.head(sub.layout.size()) = pack(sub.layout, s);
            xe.tail(pinned.nx() - sub.layout.size()) = o.x.tail(full.nx() - m.layout.size());
            return detail::newton_lagrange(pinned, xe, o.lambda);
        };

        std::vector<detail::LagrangeOutcome> tries;
        tries.push_back(detail::newton_lagrange(
            pinned, detail::extend(pinned, pack(sub.layout, initial_state(sub, sub.layout))),
            VectorXd::Zero(pinned.ne())));
        if (dense.converged) {
            // Penalize outside components progressively, then pin them.
            detail::LagrangeOutcome cur = dense;
            bool ok = true;
            for (double big = 10.0; ok && big <= 1e8; big *= 10.0) {
                std::vector<double> w = path_w;
                for (auto& x : w) x = x > 0 ? 1.0 : big;
                const detail::LagrangeOutcome next = detail::newton_lagrange(problem(m, w), cur.x, cur.lambda);
                ok = next.converged;
                if (ok) cur = next;
            }
            tries.push_back(pin(cur));
        }

        SupportSolution sol;
        for (std::size_t k = 0; k < cbus.size(); ++k)
            if (mask & (1u << k)) sol.buses.push_back(m.bus_ids[static_cast<std::size_t>(cbus[k])]);
        for (const auto& t : tries) {
            if (!t.converged) continue;
            const StateVector s = unpack(sub.layout, t.x.head(sub.layout.size()));
            const double h_inf = equality_residual(sub, sub.layout, t.x.head(sub.layout.size())).lpNorm<Eigen::Infinity>();
            if (!(h_inf <= 1e-8)) continue;
            const double obj = 0.5 * s.n.squaredNorm();
            if (sol.feasible && obj >= sol.objective) continue;
            sol.feasible = true;
            sol.objective = obj;
            sol.v_real = s.v_real;
            sol.v_imag = s.v_imag;
            sol.n = compensation_by_bus(sub, s.n);
            sol.multipliers_ok = true;
            for (Index k = 0; k < 2 * pinned.nb(); ++k)
                if (t.lambda[sub.layout.n_eq() + k] > 1e-8) sol.multipliers_ok = false;
        }
        auto& slot = out.best[static_cast<std::size_t>(card)];
        if (sol.feasible && (!slot || sol.objective < slot->objective)) slot = sol;
        out.all.push_back(std::move(sol));
    }

    out.report.kind = OracleKind::support_enum;
    double rise = 0.0;
    std::optional<double> prev;
    for (const auto& b : out.best) {
        if (!b) continue;
        if (prev) rise = std::max(rise, b->objective - *prev);
        prev = prev ? std::min(*prev, b->objective) : b->objective;
    }
    out.report.add("frontier_rise", rise, 1e-8);
    out.report.add("dense_converged", dense.converged ? 0.0 : 1.0, 0.0);
    return out;
}

}  // namespace vcdiag::oracle
