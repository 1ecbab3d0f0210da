#pragma once

// Circuit-theoretic current-injection model in Cartesian coordinates.
//
// Sign convention: each bus residual is the current leaving the bus,
//
//   r_i = (Y v)_i + I_load,i(v) - I_gen,i(v, q) - I_slack,i - n_i
//
// so generator, slack and compensation currents are injections, and a
// positive compensation n_i acts like a small current source at bus i.

#include <cmath>
#include <complex>
#include <cstddef>
#include <map>
#include <span>
#include <stdexcept>
#include <tuple>
#include <utility>
#include <vector>

#include <Eigen/Dense>
#include <Eigen/Sparse>

#include "vcdiag/case_io.hpp"

namespace vcdiag {

using Eigen::Index;
using Eigen::VectorXd;
using Triplets = std::vector<Eigen::Triplet<double>>;
using SparseMatrix = Eigen::SparseMatrix<double>;

class SingularVoltageError : public std::domain_error {
public:
    explicit SingularVoltageError(Index bus)
        : std::domain_error("zero voltage magnitude at bus index " + std::to_string(bus)), bus_(bus) {}
    [[nodiscard]] Index bus() const noexcept { return bus_; }

private:
    Index bus_;
};

enum class Placement { all_non_slack, pq_only };
enum class CurrentPart { real, imag };

struct ModelOptions {
    Placement placement = Placement::all_non_slack;
    // Drop the real-current compensation components.
    bool reactive_only = false;
};

struct PqDevice {
    Index bus;
    double p;  // net demand, pu
    double q;
};

struct PvDevice {
    Index bus;
    double p_net;  // generation, pu
    double v_set;
    double q_init;
};

struct SlackDevice {
    Index bus = 0;
    double v_real_set = 1.0;
    double v_imag_set = 0.0;
};

struct CompensationComponent {
    Index bus;
    CurrentPart part;
    bool operator==(const CompensationComponent&) const = default;
};

/// Flat index map of every unknown. Blocks appear in this order:
/// v_real | v_imag | q_gen | i_slack (re, im) | n | t | v_sq.
struct VariableLayout {
    Index n_bus = 0;
    Index n_pv = 0;
    Index n_comp = 0;
    Index n_t = 0;
    Index n_vsq = 0;

    [[nodiscard]] Index v_real(Index bus) const { return bus; }
    [[nodiscard]] Index v_imag(Index bus) const { return n_bus + bus; }
    [[nodiscard]] Index q_gen(Index k) const { return 2 * n_bus + k; }
    [[nodiscard]] Index i_slack_real() const { return 2 * n_bus + n_pv; }
    [[nodiscard]] Index i_slack_imag() const { return 2 * n_bus + n_pv + 1; }
    [[nodiscard]] Index n_begin() const { return 2 * n_bus + n_pv + 2; }
    [[nodiscard]] Index comp(Index k) const { return n_begin() + k; }
    [[nodiscard]] Index t_begin() const { return n_begin() + n_comp; }
    [[nodiscard]] Index t(Index k) const { return t_begin() + k; }
    [[nodiscard]] Index vsq_begin() const { return t_begin() + n_t; }
    [[nodiscard]] Index vsq(Index k) const { return vsq_begin() + k; }
    [[nodiscard]] Index size() const { return vsq_begin() + n_vsq; }

    // Equality rows: KCL real | KCL imag | PV magnitude | slack pin (re, im) | v_sq definition.
    [[nodiscard]] Index row_kcl_real(Index bus) const { return bus; }
    [[nodiscard]] Index row_kcl_imag(Index bus) const { return n_bus + bus; }
    [[nodiscard]] Index row_pv(Index k) const { return 2 * n_bus + k; }
    [[nodiscard]] Index row_slack_real() const { return 2 * n_bus + n_pv; }
    [[nodiscard]] Index row_slack_imag() const { return 2 * n_bus + n_pv + 1; }
    [[nodiscard]] Index row_vsq(Index k) const { return 2 * n_bus + n_pv + 2 + k; }
    [[nodiscard]] Index n_eq() const { return 2 * n_bus + n_pv + 2 + n_vsq; }

    bool operator==(const VariableLayout&) const = default;
};

struct CircuitModel {
    Index n_bus = 0;
    std::vector<int> bus_ids;
    std::vector<BusType> bus_types;
    // Real-expanded nodal admittance [G -B; B G] of branches and shunts.
    SparseMatrix y_lin;
    std::vector<PqDevice> pq_devices;
    std::vector<PvDevice> pv_devices;
    SlackDevice slack;
    std::vector<CompensationComponent> compensation;
    // Buses whose magnitude is free and therefore carries voltage bounds (PQ buses).
    std::vector<Index> bounded_buses;
    std::vector<double> v_min;
    std::vector<double> v_max;
    // Starting voltages: case values with PV/slack magnitudes at setpoint.
    VectorXd v_real_init;
    VectorXd v_imag_init;
    VariableLayout layout;

    [[nodiscard]] std::complex<double> y(Index i, Index j) const {
        return {y_lin.coeff(i, j), y_lin.coeff(n_bus + i, j)};
    }

    [[nodiscard]] VariableLayout layout_with(bool l1_slacks, bool v_sq) const {
        VariableLayout l = layout;
        l.n_t = l1_slacks ? l.n_comp : 0;
        l.n_vsq = v_sq ? static_cast<Index>(bounded_buses.size()) : 0;
        return l;
    }

    /// Copy of the model with compensation allowed only on `components`.
    [[nodiscard]] CircuitModel restricted_to(std::vector<CompensationComponent> components) const {
        CircuitModel m = *this;
        m.compensation = std::move(components);
        m.layout.n_comp = static_cast<Index>(m.compensation.size());
        return m;
    }
};

struct VoltageBounds {
    std::vector<double> v_min;  // per bus
    std::vector<double> v_max;
};

/// Named view of the unknowns; `n` follows `CircuitModel::compensation` order.
struct StateVector {
    VectorXd v_real;
    VectorXd v_imag;
    VectorXd q_gen;
    double i_slack_real = 0.0;
    double i_slack_imag = 0.0;
    VectorXd n;
    VectorXd t;
    VectorXd v_sq;
};

inline VectorXd pack(const VariableLayout& l, const StateVector& s) {
    VectorXd x = VectorXd::Zero(l.size());
    x.segment(0, l.n_bus) = s.v_real;
    x.segment(l.n_bus, l.n_bus) = s.v_imag;
    if (l.n_pv) x.segment(l.q_gen(0), l.n_pv) = s.q_gen;
    x[l.i_slack_real()] = s.i_slack_real;
    x[l.i_slack_imag()] = s.i_slack_imag;
    if (l.n_comp) x.segment(l.n_begin(), l.n_comp) = s.n;
    if (l.n_t) x.segment(l.t_begin(), l.n_t) = s.t;
    if (l.n_vsq) x.segment(l.vsq_begin(), l.n_vsq) = s.v_sq;
    return x;
}

inline StateVector unpack(const VariableLayout& l, const VectorXd& x) {
    StateVector s;
    s.v_real = x.segment(0, l.n_bus);
    s.v_imag = x.segment(l.n_bus, l.n_bus);
    s.q_gen = x.segment(2 * l.n_bus, l.n_pv);
    s.i_slack_real = x[l.i_slack_real()];
    s.i_slack_imag = x[l.i_slack_imag()];
    s.n = x.segment(l.n_begin(), l.n_comp);
    s.t = x.segment(l.t_begin(), l.n_t);
    s.v_sq = x.segment(l.vsq_begin(), l.n_vsq);
    return s;
}

/// Current drawn by a constant-power device: I = conj(S / V).
inline std::pair<double, double> pq_injection_current(double p, double q, double v_real, double v_imag) {
    const double m = v_real * v_real + v_imag * v_imag;
    if (!(m > 0)) throw SingularVoltageError(-1);
    return {(p * v_real + q * v_imag) / m, (p * v_imag - q * v_real) / m};
}

namespace detail {

// u = Re(1/V) = vr/m and w = -Im(1/V) = vi/m with first and second
// derivatives. A constant-power current is I = (p u + q w) + j (p w - q u).
struct InverseVoltage {
    double u, w;
    double ur, ui, wr, wi;
    double urr, uri, uii, wrr, wri, wii;

    InverseVoltage(double vr, double vi, Index bus) {
        const double m = vr * vr + vi * vi;
        if (!(m > 0)) throw SingularVoltageError(bus);
        const double m2 = m * m, m3 = m2 * m;
        u = vr / m;
        w = vi / m;
        ur = (vi * vi - vr * vr) / m2;
        ui = -2.0 * vr * vi / m2;
        wr = ui;
        wi = -ur;
        urr = (2.0 * vr * vr * vr - 6.0 * vr * vi * vi) / m3;
        uri = (6.0 * vr * vr * vi - 2.0 * vi * vi * vi) / m3;
        uii = -urr;
        wrr = uri;
        wri = -urr;
        wii = -uri;
    }
};

}  // namespace detail

/// Assemble the circuit model: pi-model branch stamps, shunts, devices and layout.
inline CircuitModel build_model(const NetworkCase& c, const ModelOptions& opts = {}) {
    CircuitModel m;
    const Index n = static_cast<Index>(c.buses.size());
    m.n_bus = n;
    std::map<int, Index> index_of;
    for (Index k = 0; k < n; ++k) {
        const auto& b = c.buses[static_cast<std::size_t>(k)];
        index_of[b.id] = k;
        m.bus_ids.push_back(b.id);
        m.bus_types.push_back(b.btype);
        m.v_min.push_back(b.v_min);
        m.v_max.push_back(b.v_max);
    }

    std::vector<std::complex<double>> diag(static_cast<std::size_t>(n));
    std::vector<std::tuple<Index, Index, std::complex<double>>> offdiag;
    for (const auto& b : c.buses) diag[static_cast<std::size_t>(index_of.at(b.id))] += std::complex<double>(b.g_shunt, b.b_shunt);
    for (const auto& br : c.branches) {
        if (br.status != Status::on) continue;
        const Index f = index_of.at(br.from_bus);
        const Index t = index_of.at(br.to_bus);
        const std::complex<double> ys = 1.0 / std::complex<double>(br.r, br.x);
        const std::complex<double> half_b(0.0, br.b_charging / 2.0);
        const double tap_mag = br.tap == 0.0 ? 1.0 : br.tap;
        const std::complex<double> tap = std::polar(tap_mag, br.shift);
        diag[static_cast<std::size_t>(f)] += (ys + half_b) / (tap_mag * tap_mag);
        diag[static_cast<std::size_t>(t)] += ys + half_b;
        offdiag.emplace_back(f, t, -ys / std::conj(tap));
        offdiag.emplace_back(t, f, -ys / tap);
    }
    Triplets trip;
    auto stamp = [&](Index i, Index j, std::complex<double> y) {
        trip.emplace_back(i, j, y.real());
        trip.emplace_back(i, n + j, -y.imag());
        trip.emplace_back(n + i, j, y.imag());
        trip.emplace_back(n + i, n + j, y.real());
    };
    for (Index k = 0; k < n; ++k) stamp(k, k, diag[static_cast<std::size_t>(k)]);
    for (const auto& [i, j, y] : offdiag) stamp(i, j, y);
    m.y_lin.resize(2 * n, 2 * n);
    m.y_lin.setFromTriplets(trip.begin(), trip.end());

    std::map<int, const GenRecord*> gen_at;
    for (const auto& g : c.gens)
        if (g.status == Status::on) gen_at[g.bus] = &g;

    m.v_real_init.resize(n);
    m.v_imag_init.resize(n);
    bool have_slack = false;
    for (Index k = 0; k < n; ++k) {
        const auto& b = c.buses[static_cast<std::size_t>(k)];
        const auto g = gen_at.find(b.id);
        double vm = b.v_mag_init;
        double pd = b.p_demand, qd = b.q_demand;
        if (b.btype == BusType::PV) {
            if (g == gen_at.end()) throw ValidationError("PV bus " + std::to_string(b.id) + " has no generator");
            m.pv_devices.push_back({k, g->second->p_set, g->second->v_set, g->second->q_init});
            vm = g->second->v_set;
        } else if (b.btype == BusType::SLACK) {
            if (g != gen_at.end()) vm = g->second->v_set;
            m.slack = {k, vm * std::cos(b.v_ang_init), vm * std::sin(b.v_ang_init)};
            have_slack = true;
        } else if (g != gen_at.end()) {
            pd -= g->second->p_set;
            qd -= g->second->q_init;
        }
        if (pd != 0.0 || qd != 0.0) m.pq_devices.push_back({k, pd, qd});
        m.v_real_init[k] = vm * std::cos(b.v_ang_init);
        m.v_imag_init[k] = vm * std::sin(b.v_ang_init);

        const bool compensable = b.btype != BusType::SLACK &&
                                 (opts.placement == Placement::all_non_slack || b.btype == BusType::PQ);
        if (compensable) {
            if (!opts.reactive_only) m.compensation.push_back({k, CurrentPart::real});
            m.compensation.push_back({k, CurrentPart::imag});
        }
        if (b.btype == BusType::PQ) m.bounded_buses.push_back(k);
    }
    if (!have_slack) throw ValidationError("case has no slack bus");

    m.layout.n_bus = n;
    m.layout.n_pv = static_cast<Index>(m.pv_devices.size());
    m.layout.n_comp = static_cast<Index>(m.compensation.size());
    return m;
}

/// Starting state for the model's base layout (plus optional t / v_sq blocks).
inline StateVector initial_state(const CircuitModel& m, const VariableLayout& l) {
    StateVector s;
    s.v_real = m.v_real_init;
    s.v_imag = m.v_imag_init;
    s.q_gen.resize(l.n_pv);
    for (Index k = 0; k < l.n_pv; ++k) s.q_gen[k] = m.pv_devices[static_cast<std::size_t>(k)].q_init;
    s.n = VectorXd::Zero(l.n_comp);
    s.t = VectorXd::Zero(l.n_t);
    s.v_sq.resize(l.n_vsq);
    for (Index k = 0; k < l.n_vsq; ++k) {
        const Index b = m.bounded_buses[static_cast<std::size_t>(k)];
        s.v_sq[k] = s.v_real[b] * s.v_real[b] + s.v_imag[b] * s.v_imag[b];
    }
    return s;
}

/// Equality residual h(x): KCL per bus, PV magnitudes, slack pin, and
/// v_sq definitions (|V|^2 - v_sq) when the layout carries them.
inline VectorXd equality_residual(const CircuitModel& m, const VariableLayout& l, const VectorXd& x) {
    const Index n = m.n_bus;
    VectorXd h = VectorXd::Zero(l.n_eq());
    h.head(2 * n) = m.y_lin * x.head(2 * n);
    for (const auto& d : m.pq_devices) {
        const double vr = x[l.v_real(d.bus)], vi = x[l.v_imag(d.bus)];
        if (vr == 0.0 && vi == 0.0) throw SingularVoltageError(d.bus);
        const auto [ir, ii] = pq_injection_current(d.p, d.q, vr, vi);
        h[l.row_kcl_real(d.bus)] += ir;
        h[l.row_kcl_imag(d.bus)] += ii;
    }
    for (Index k = 0; k < l.n_pv; ++k) {
        const auto& d = m.pv_devices[static_cast<std::size_t>(k)];
        const double vr = x[l.v_real(d.bus)], vi = x[l.v_imag(d.bus)];
        if (vr == 0.0 && vi == 0.0) throw SingularVoltageError(d.bus);
        const auto [ir, ii] = pq_injection_current(d.p_net, x[l.q_gen(k)], vr, vi);
        h[l.row_kcl_real(d.bus)] -= ir;
        h[l.row_kcl_imag(d.bus)] -= ii;
        h[l.row_pv(k)] = vr * vr + vi * vi - d.v_set * d.v_set;
    }
    h[l.row_kcl_real(m.slack.bus)] -= x[l.i_slack_real()];
    h[l.row_kcl_imag(m.slack.bus)] -= x[l.i_slack_imag()];
    h[l.row_slack_real()] = x[l.v_real(m.slack.bus)] - m.slack.v_real_set;
    h[l.row_slack_imag()] = x[l.v_imag(m.slack.bus)] - m.slack.v_imag_set;
    for (Index k = 0; k < l.n_comp; ++k) {
        const auto& c = m.compensation[static_cast<std::size_t>(k)];
        h[c.part == CurrentPart::real ? l.row_kcl_real(c.bus) : l.row_kcl_imag(c.bus)] -= x[l.comp(k)];
    }
    for (Index k = 0; k < l.n_vsq; ++k) {
        const Index b = m.bounded_buses[static_cast<std::size_t>(k)];
        const double vr = x[l.v_real(b)], vi = x[l.v_imag(b)];
        h[l.row_vsq(k)] = vr * vr + vi * vi - x[l.vsq(k)];
    }
    return h;
}

/// Analytic Jacobian of `equality_residual` as triplets. The emitted
/// pattern depends only on the model and layout.
inline void equality_jacobian(const CircuitModel& m, const VariableLayout& l, const VectorXd& x, Triplets& out) {
    const Index n = m.n_bus;
    for (Index col = 0; col < m.y_lin.outerSize(); ++col)
        for (SparseMatrix::InnerIterator it(m.y_lin, col); it; ++it) out.emplace_back(it.row(), it.col(), it.value());

    for (const auto& d : m.pq_devices) {
        const detail::InverseVoltage iv(x[l.v_real(d.bus)], x[l.v_imag(d.bus)], d.bus);
        const Index rr = l.row_kcl_real(d.bus), ri = l.row_kcl_imag(d.bus);
        const Index cr = l.v_real(d.bus), ci = l.v_imag(d.bus);
        out.emplace_back(rr, cr, d.p * iv.ur + d.q * iv.wr);
        out.emplace_back(rr, ci, d.p * iv.ui + d.q * iv.wi);
        out.emplace_back(ri, cr, d.p * iv.wr - d.q * iv.ur);
        out.emplace_back(ri, ci, d.p * iv.wi - d.q * iv.ui);
    }
    for (Index k = 0; k < l.n_pv; ++k) {
        const auto& d = m.pv_devices[static_cast<std::size_t>(k)];
        const double vr = x[l.v_real(d.bus)], vi = x[l.v_imag(d.bus)];
        const double q = x[l.q_gen(k)];
        const detail::InverseVoltage iv(vr, vi, d.bus);
        const Index rr = l.row_kcl_real(d.bus), ri = l.row_kcl_imag(d.bus);
        const Index cr = l.v_real(d.bus), ci = l.v_imag(d.bus), cq = l.q_gen(k);
        out.emplace_back(rr, cr, -(d.p_net * iv.ur + q * iv.wr));
        out.emplace_back(rr, ci, -(d.p_net * iv.ui + q * iv.wi));
        out.emplace_back(ri, cr, -(d.p_net * iv.wr - q * iv.ur));
        out.emplace_back(ri, ci, -(d.p_net * iv.wi - q * iv.ui));
        out.emplace_back(rr, cq, -iv.w);
        out.emplace_back(ri, cq, iv.u);
        out.emplace_back(l.row_pv(k), cr, 2.0 * vr);
        out.emplace_back(l.row_pv(k), ci, 2.0 * vi);
    }
    out.emplace_back(l.row_kcl_real(m.slack.bus), l.i_slack_real(), -1.0);
    out.emplace_back(l.row_kcl_imag(m.slack.bus), l.i_slack_imag(), -1.0);
    out.emplace_back(l.row_slack_real(), l.v_real(m.slack.bus), 1.0);
    out.emplace_back(l.row_slack_imag(), l.v_imag(m.slack.bus), 1.0);
    for (Index k = 0; k < l.n_comp; ++k) {
        const auto& c = m.compensation[static_cast<std::size_t>(k)];
        out.emplace_back(c.part == CurrentPart::real ? l.row_kcl_real(c.bus) : l.row_kcl_imag(c.bus), l.comp(k), -1.0);
    }
    for (Index k = 0; k < l.n_vsq; ++k) {
        const Index b = m.bounded_buses[static_cast<std::size_t>(k)];
        out.emplace_back(l.row_vsq(k), l.v_real(b), 2.0 * x[l.v_real(b)]);
        out.emplace_back(l.row_vsq(k), l.v_imag(b), 2.0 * x[l.v_imag(b)]);
        out.emplace_back(l.row_vsq(k), l.vsq(k), -1.0);
    }
    (void)n;
}

inline SparseMatrix equality_jacobian(const CircuitModel& m, const VariableLayout& l, const VectorXd& x) {
    Triplets t;
    equality_jacobian(m, l, x, t);
    SparseMatrix J(l.n_eq(), l.size());
    J.setFromTriplets(t.begin(), t.end());
    return J;
}

/// Sum_k lambda_k * Hessian(h_k), both triangles, constant pattern.
inline void equality_hessian(const CircuitModel& m, const VariableLayout& l, const VectorXd& x,
                             const VectorXd& lambda, Triplets& out) {
    auto add_block = [&](Index a, Index b, double haa, double hab, double hbb) {
        out.emplace_back(a, a, haa);
        out.emplace_back(a, b, hab);
        out.emplace_back(b, a, hab);
        out.emplace_back(b, b, hbb);
    };
    for (const auto& d : m.pq_devices) {
        const detail::InverseVoltage iv(x[l.v_real(d.bus)], x[l.v_imag(d.bus)], d.bus);
        const double lr = lambda[l.row_kcl_real(d.bus)], li = lambda[l.row_kcl_imag(d.bus)];
        // lr * (p u + q w) + li * (p w - q u)
        const double cu = lr * d.p - li * d.q, cw = lr * d.q + li * d.p;
        add_block(l.v_real(d.bus), l.v_imag(d.bus), cu * iv.urr + cw * iv.wrr, cu * iv.uri + cw * iv.wri,
                  cu * iv.uii + cw * iv.wii);
    }
    for (Index k = 0; k < l.n_pv; ++k) {
        const auto& d = m.pv_devices[static_cast<std::size_t>(k)];
        const double q = x[l.q_gen(k)];
        const detail::InverseVoltage iv(x[l.v_real(d.bus)], x[l.v_imag(d.bus)], d.bus);
        const double lr = lambda[l.row_kcl_real(d.bus)], li = lambda[l.row_kcl_imag(d.bus)];
        const double lp = lambda[l.row_pv(k)];
        const double cu = -(lr * d.p_net - li * q), cw = -(lr * q + li * d.p_net);
        const Index cr = l.v_real(d.bus), ci = l.v_imag(d.bus), cq = l.q_gen(k);
        add_block(cr, ci, cu * iv.urr + cw * iv.wrr + 2.0 * lp, cu * iv.uri + cw * iv.wri,
                  cu * iv.uii + cw * iv.wii + 2.0 * lp);
        // d/dq of the PV current terms: -lr * w + li * u
        const double dr = -lr * iv.wr + li * iv.ur, di = -lr * iv.wi + li * iv.ui;
        out.emplace_back(cq, cr, dr);
        out.emplace_back(cr, cq, dr);
        out.emplace_back(cq, ci, di);
        out.emplace_back(ci, cq, di);
    }
    for (Index k = 0; k < l.n_vsq; ++k) {
        const Index b = m.bounded_buses[static_cast<std::size_t>(k)];
        const double lv = lambda[l.row_vsq(k)];
        out.emplace_back(l.v_real(b), l.v_real(b), 2.0 * lv);
        out.emplace_back(l.v_imag(b), l.v_imag(b), 2.0 * lv);
    }
}

/// Full equality residual at a named state (KCL, PV, slack, v_sq rows).
inline VectorXd kcl_residual(const CircuitModel& m, const StateVector& s) {
    VariableLayout l = m.layout;
    l.n_t = s.t.size();
    l.n_vsq = s.v_sq.size();
    return equality_residual(m, l, pack(l, s));
}

inline SparseMatrix jacobian(const CircuitModel& m, const StateVector& s) {
    VariableLayout l = m.layout;
    l.n_t = s.t.size();
    l.n_vsq = s.v_sq.size();
    return equality_jacobian(m, l, pack(l, s));
}

/// Per-bus compensation current (zero where the bus has no component).
inline std::vector<std::complex<double>> compensation_by_bus(const CircuitModel& m, const VectorXd& n) {
    std::vector<std::complex<double>> out(static_cast<std::size_t>(m.n_bus));
    for (std::size_t k = 0; k < m.compensation.size(); ++k) {
        const auto& c = m.compensation[k];
        auto& z = out[static_cast<std::size_t>(c.bus)];
        if (c.part == CurrentPart::real)
            z.real(n[static_cast<Index>(k)]);
        else
            z.imag(n[static_cast<Index>(k)]);
    }
    return out;
}

}  // namespace vcdiag
