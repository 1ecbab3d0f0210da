#pragma once

// Infeasibility diagnosis on top of the interior-point engine:
//   dense   min 1/2|n|^2                      s.t. KCL
//   sparse  min 1/2|n|^2 + sum c_k t_k        s.t. KCL, -t <= n <= t
//   vreg    sparse + v_sq = |V|^2, vmin^2 <= v_sq <= vmax^2
// The sparse modes run a series of subproblems starting from the dense
// solution, re-weighting c between c_low and c_high after each solve.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <complex>
#include <limits>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "vcdiag/network_model.hpp"
#include "vcdiag/nlp_core.hpp"

namespace vcdiag {

enum class DiagnosisStatus { converged, max_iter, numerical_failure, bounds_infeasible, diverged };

inline const char* to_string(DiagnosisStatus s) {
    switch (s) {
        case DiagnosisStatus::converged: return "converged";
        case DiagnosisStatus::max_iter: return "max_iter";
        case DiagnosisStatus::numerical_failure: return "numerical_failure";
        case DiagnosisStatus::bounds_infeasible: return "bounds_infeasible";
        case DiagnosisStatus::diverged: return "diverged";
    }
    return "unknown";
}

inline DiagnosisStatus diagnosis_status_from_string(const std::string& s) {
    for (auto st : {DiagnosisStatus::converged, DiagnosisStatus::max_iter, DiagnosisStatus::numerical_failure,
                    DiagnosisStatus::bounds_infeasible, DiagnosisStatus::diverged})
        if (s == to_string(st)) return st;
    throw std::invalid_argument("unknown status '" + s + "'");
}

inline DiagnosisStatus from_solve_status(SolveStatus s) {
    switch (s) {
        case SolveStatus::converged: return DiagnosisStatus::converged;
        case SolveStatus::max_iter: return DiagnosisStatus::max_iter;
        case SolveStatus::numerical_failure: return DiagnosisStatus::numerical_failure;
    }
    return DiagnosisStatus::numerical_failure;
}

/// Per-component L1 weights; every entry is either c_low or c_high.
struct SparsityCoefficients {
    std::vector<double> c;
    double c_high = 10.0;
    double c_low = 0.1;
    double support_threshold = 1e-4;
    double relative_threshold = 0.5;
    bool operator==(const SparsityCoefficients&) const = default;
};

/// Components at or above the cut keep the cheap weight c_low; the rest get
/// c_high and are pushed to zero in the next solve. The cut is the absolute
/// support threshold or a fraction of the largest component, whichever is
/// larger. A purely absolute cut is a fixed point right after the dense
/// phase on large grids, where the dense optimum touches nearly every bus.
/// Set relative_threshold to 0 for the absolute rule.
inline SparsityCoefficients update_coefficients(const VectorXd& n, SparsityCoefficients coeffs) {
    coeffs.c.assign(static_cast<std::size_t>(n.size()), coeffs.c_high);
    const double peak = n.size() ? n.cwiseAbs().maxCoeff() : 0.0;
    const double cut = std::max(coeffs.support_threshold, coeffs.relative_threshold * peak);
    for (Index k = 0; k < n.size(); ++k)
        if (std::abs(n[k]) >= cut) coeffs.c[static_cast<std::size_t>(k)] = coeffs.c_low;
    return coeffs;
}

struct DiagnosisOptions {
    SolverOptions nlp;
    SparsityCoefficients coefficients;
    int max_subproblems = 20;
    double relax_delta = 0.05;
    int relax_steps = 5;
    // Newton power flow used for the baseline.
    int pf_max_iters = 50;
    double pf_tol = 1e-9;
};


inline VoltageBounds bounds_of(const CircuitModel& m) { return {m.v_min, m.v_max}; }

struct Violation {
    int bus = 0;
    double v_mag = 0.0;
    bool operator==(const Violation&) const = default;
};

struct SubproblemRecord {
    std::string kind;  // dense | sparse | relaxed
    std::vector<double> coefficients;
    std::size_t support_size = 0;
    int inner_iterations = 0;
    DiagnosisStatus status = DiagnosisStatus::converged;
    double objective = 0.0;
    bool operator==(const SubproblemRecord&) const = default;
};

struct DiagnosisResult {
    std::string mode;
    DiagnosisStatus status = DiagnosisStatus::converged;
    std::vector<int> bus_ids;
    std::vector<double> v_real;
    std::vector<double> v_imag;
    std::vector<double> n_real;  // per bus, injection convention
    std::vector<double> n_imag;
    std::vector<int> support;
    std::vector<double> v_min;
    std::vector<double> v_max;
    std::vector<bool> bounded;
    std::string baseline_status;
    std::vector<double> v_baseline;  // |V| from the baseline power flow, empty if it diverged
    std::vector<Violation> violations_before;
    std::vector<Violation> violations_after;
    double objective = 0.0;
    double kcl_residual_inf = 0.0;
    std::vector<SubproblemRecord> subproblem_history;
    std::map<std::string, double> wall_time;
    bool operator==(const DiagnosisResult&) const = default;

    [[nodiscard]] int total_inner_iterations() const {
        int s = 0;
        for (const auto& h : subproblem_history) s += h.inner_iterations;
        return s;
    }
    [[nodiscard]] double v_mag(std::size_t k) const { return std::hypot(v_real[k], v_imag[k]); }
    [[nodiscard]] double n_mag(std::size_t k) const { return std::hypot(n_real[k], n_imag[k]); }
};

// ---------------------------------------------------------------------------

/// NLP adapter: objective, KCL equalities and the L1 / voltage-bound
/// inequalities for one subproblem.
class DiagnosisProblem {
public:
    DiagnosisProblem(const CircuitModel& model, VariableLayout layout, std::vector<double> weights = {},
                     std::vector<double> vsq_min = {}, std::vector<double> vsq_max = {})
        : model_(&model),
          layout_(layout),
          weights_(std::move(weights)),
          vsq_min_(std::move(vsq_min)),
          vsq_max_(std::move(vsq_max)) {
        if (static_cast<Index>(weights_.size()) != layout_.n_t)
            throw std::invalid_argument("one weight per L1 slack required");
        if (static_cast<Index>(vsq_min_.size()) != layout_.n_vsq || static_cast<Index>(vsq_max_.size()) != layout_.n_vsq)
            throw std::invalid_argument("one bound pair per v_sq variable required");
        for (Index b = 0; b < 2 * layout_.n_bus; ++b) vidx_.push_back(b);
    }

    [[nodiscard]] const VariableLayout& layout() const { return layout_; }
    [[nodiscard]] Index num_vars() const { return layout_.size(); }
    [[nodiscard]] Index num_eq() const { return layout_.n_eq(); }
    [[nodiscard]] Index num_ineq() const { return 2 * layout_.n_t + 2 * layout_.n_vsq; }
    [[nodiscard]] std::span<const Index> voltage_indices() const { return vidx_; }

    [[nodiscard]] double objective(const VectorXd& x) const {
        double f = 0.5 * x.segment(layout_.n_begin(), layout_.n_comp).squaredNorm();
        for (Index k = 0; k < layout_.n_t; ++k) f += weights_[static_cast<std::size_t>(k)] * x[layout_.t(k)];
        return f;
    }
    [[nodiscard]] VectorXd gradient(const VectorXd& x) const {
        VectorXd g = VectorXd::Zero(num_vars());
        g.segment(layout_.n_begin(), layout_.n_comp) = x.segment(layout_.n_begin(), layout_.n_comp);
        for (Index k = 0; k < layout_.n_t; ++k) g[layout_.t(k)] = weights_[static_cast<std::size_t>(k)];
        return g;
    }
    [[nodiscard]] VectorXd eq_residual(const VectorXd& x) const { return equality_residual(*model_, layout_, x); }
    void eq_jacobian(const VectorXd& x, Triplets& t) const { equality_jacobian(*model_, layout_, x, t); }

    // Rows: per component (n - t, -n - t), then per bounded bus (v_sq - max, min - v_sq).
    [[nodiscard]] VectorXd ineq_residual(const VectorXd& x) const {
        VectorXd c(num_ineq());
        for (Index k = 0; k < layout_.n_t; ++k) {
            c[2 * k] = x[layout_.comp(k)] - x[layout_.t(k)];
            c[2 * k + 1] = -x[layout_.comp(k)] - x[layout_.t(k)];
        }
        const Index off = 2 * layout_.n_t;
        for (Index k = 0; k < layout_.n_vsq; ++k) {
            c[off + 2 * k] = x[layout_.vsq(k)] - vsq_max_[static_cast<std::size_t>(k)];
            c[off + 2 * k + 1] = vsq_min_[static_cast<std::size_t>(k)] - x[layout_.vsq(k)];
        }
        return c;
    }
    void ineq_jacobian(const VectorXd&, Triplets& t) const {
        for (Index k = 0; k < layout_.n_t; ++k) {
            t.emplace_back(2 * k, layout_.comp(k), 1.0);
            t.emplace_back(2 * k, layout_.t(k), -1.0);
            t.emplace_back(2 * k + 1, layout_.comp(k), -1.0);
            t.emplace_back(2 * k + 1, layout_.t(k), -1.0);
        }
        const Index off = 2 * layout_.n_t;
        for (Index k = 0; k < layout_.n_vsq; ++k) {
            t.emplace_back(off + 2 * k, layout_.vsq(k), 1.0);
            t.emplace_back(off + 2 * k + 1, layout_.vsq(k), -1.0);
        }
    }
    void lagrangian_hessian(const VectorXd& x, const VectorXd& lambda, const VectorXd&, Triplets& t) const {
        for (Index k = 0; k < layout_.n_comp; ++k) t.emplace_back(layout_.comp(k), layout_.comp(k), 1.0);
        equality_hessian(*model_, layout_, x, lambda, t);
    }

private:
    const CircuitModel* model_;
    VariableLayout layout_;
    std::vector<double> weights_;
    std::vector<double> vsq_min_;
    std::vector<double> vsq_max_;
    std::vector<Index> vidx_;
};

static_assert(NlpProblem<DiagnosisProblem>);

// ---------------------------------------------------------------------------

struct PowerFlowOutcome {
    DiagnosisStatus status = DiagnosisStatus::diverged;
    VectorXd v_real;
    VectorXd v_imag;
    int iterations = 0;
    double residual_inf = std::numeric_limits<double>::infinity();
    std::vector<Violation> violations;
};

inline std::vector<Violation> find_violations(const CircuitModel& m, const VectorXd& vr, const VectorXd& vi,
                                              const VoltageBounds& b, double slack = 1e-6) {
    std::vector<Violation> out;
    for (Index k : m.bounded_buses) {
        const double v = std::hypot(vr[k], vi[k]);
        const auto kk = static_cast<std::size_t>(k);
        if (v < b.v_min[kk] - slack || v > b.v_max[kk] + slack) out.push_back({m.bus_ids[kk], v});
    }
    return out;
}

/// Plain current-injection Newton power flow with n frozen at zero.
inline PowerFlowOutcome run_baseline_powerflow(const CircuitModel& model, const DiagnosisOptions& opts = {}) {
    const CircuitModel m = model.restricted_to({});
    const VariableLayout l = m.layout;
    VectorXd x = pack(l, initial_state(m, l));
    PowerFlowOutcome out;
    Eigen::SparseLU<SparseMatrix, Eigen::COLAMDOrdering<int>> lu;
    bool analyzed = false;
    for (int it = 0;; ++it) {
        VectorXd h;
        try {
            h = equality_residual(m, l, x);
        } catch (const SingularVoltageError&) {
            break;
        }
        out.residual_inf = h.lpNorm<Eigen::Infinity>();
        out.iterations = it;
        if (!std::isfinite(out.residual_inf) || out.residual_inf > 1e8) break;
        if (out.residual_inf <= opts.pf_tol) {
            out.status = DiagnosisStatus::converged;
            break;
        }
        if (it >= opts.pf_max_iters) break;
        const SparseMatrix J = equality_jacobian(m, l, x);
        if (!analyzed) {
            lu.analyzePattern(J);
            analyzed = true;
        }
        lu.factorize(J);
        if (lu.info() != Eigen::Success) break;
        VectorXd dx = lu.solve(-h);
        if (!dx.allFinite()) break;
        const double dv = dx.head(2 * m.n_bus).lpNorm<Eigen::Infinity>();
        if (dv > opts.nlp.v_step_cap) dx *= opts.nlp.v_step_cap / dv;
        x += dx;
    }
    out.v_real = x.head(m.n_bus);
    out.v_imag = x.segment(m.n_bus, m.n_bus);
    if (out.status == DiagnosisStatus::converged) out.violations = find_violations(m, out.v_real, out.v_imag, bounds_of(m));
    return out;
}

namespace detail {

using Clock = std::chrono::steady_clock;
inline double seconds_since(Clock::time_point t0) {
    return std::chrono::duration<double>(Clock::now() - t0).count();
}

struct Phase {
    VectorXd x;
    VariableLayout layout;
    NlpSolution sol;
    double objective = 0.0;
};

inline std::vector<int> support_of(const CircuitModel& m, const VectorXd& n, double threshold) {
    std::vector<double> mag(static_cast<std::size_t>(m.n_bus), 0.0);
    for (std::size_t k = 0; k < m.compensation.size(); ++k) {
        auto& v = mag[static_cast<std::size_t>(m.compensation[k].bus)];
        v = std::max(v, std::abs(n[static_cast<Index>(k)]));
    }
    std::vector<int> s;
    for (std::size_t b = 0; b < mag.size(); ++b)
        if (mag[b] > threshold) s.push_back(m.bus_ids[b]);
    return s;
}

// Re-layout a converged point for the next subproblem: keeps v, q, slack
// current and n; t starts strictly above |n|; v_sq starts strictly inside
// its bounds.
inline VectorXd warm_start(const CircuitModel& m, const VariableLayout& from, const VectorXd& x_prev,
                           const VariableLayout& to, const std::vector<double>& vsq_min,
                           const std::vector<double>& vsq_max, double t_margin) {
    StateVector s = unpack(from, x_prev);
    s.t.resize(to.n_t);
    for (Index k = 0; k < to.n_t; ++k) s.t[k] = std::abs(s.n[k]) + t_margin;
    s.v_sq.resize(to.n_vsq);
    for (Index k = 0; k < to.n_vsq; ++k) {
        const Index b = m.bounded_buses[static_cast<std::size_t>(k)];
        const double lo = vsq_min[static_cast<std::size_t>(k)], hi = vsq_max[static_cast<std::size_t>(k)];
        const double margin = std::min(1e-3, 0.25 * (hi - lo));
        const double v2 = s.v_real[b] * s.v_real[b] + s.v_imag[b] * s.v_imag[b];
        s.v_sq[k] = std::clamp(v2, lo + margin, hi - margin);
    }
    return pack(to, s);
}

inline Phase run_phase(const CircuitModel& m, const VariableLayout& layout, const VectorXd& x0,
                       std::vector<double> weights, std::vector<double> vsq_min, std::vector<double> vsq_max,
                       const SolverOptions& opts) {
    DiagnosisProblem prob(m, layout, std::move(weights), std::move(vsq_min), std::move(vsq_max));
    Phase ph;
    ph.layout = layout;
    ph.sol = solve_nlp(prob, x0, opts);
    ph.x = ph.sol.iterate.x;
    ph.objective = prob.objective(ph.x);
    return ph;
}

inline void squared_bounds(const CircuitModel& m, const VoltageBounds& b, double relax, std::vector<double>& lo,
                           std::vector<double>& hi) {
    lo.clear();
    hi.clear();
    for (Index k : m.bounded_buses) {
        const auto kk = static_cast<std::size_t>(k);
        const double vmin = std::max(0.0, b.v_min[kk] - relax), vmax = b.v_max[kk] + relax;
        lo.push_back(vmin * vmin);
        hi.push_back(vmax * vmax);
    }
}

inline DiagnosisResult make_result(const CircuitModel& m, const std::string& mode, const VariableLayout& l,
                                   const VectorXd& x, const VoltageBounds& b, double threshold) {
    DiagnosisResult r;
    r.mode = mode;
    r.bus_ids = m.bus_ids;
    const StateVector s = unpack(l, x);
    r.v_real.assign(s.v_real.data(), s.v_real.data() + s.v_real.size());
    r.v_imag.assign(s.v_imag.data(), s.v_imag.data() + s.v_imag.size());
    const auto n = compensation_by_bus(m, s.n);
    for (const auto& z : n) {
        r.n_real.push_back(z.real());
        r.n_imag.push_back(z.imag());
    }
    r.support = support_of(m, s.n, threshold);
    r.v_min = b.v_min;
    r.v_max = b.v_max;
    r.bounded.assign(static_cast<std::size_t>(m.n_bus), false);
    for (Index k : m.bounded_buses) r.bounded[static_cast<std::size_t>(k)] = true;
    r.violations_after = find_violations(m, s.v_real, s.v_imag, b);
    const VectorXd h = equality_residual(m, m.layout, pack(m.layout, s));
    r.kcl_residual_inf = h.head(2 * m.n_bus).lpNorm<Eigen::Infinity>();
    return r;
}

inline SubproblemRecord record(const std::string& kind, const Phase& ph, const CircuitModel& m,
                               const std::vector<double>& weights, double threshold) {
    SubproblemRecord rec;
    rec.kind = kind;
    rec.coefficients = weights;
    rec.support_size = support_of(m, ph.x.segment(ph.layout.n_begin(), ph.layout.n_comp), threshold).size();
    rec.inner_iterations = static_cast<int>(ph.sol.log.size());
    rec.status = from_solve_status(ph.sol.status);
    rec.objective = ph.objective;
    return rec;
}

// Unbounded dense phase. From a flat start with zero multipliers the Newton
// step is a plain power-flow step, which can wander off on a collapsed
// system; if so, retry from a start where n already carries the mismatch.
inline Phase dense_phase(const CircuitModel& m, const SolverOptions& opts, std::vector<SubproblemRecord>& history,
                         double thr) {
    const VariableLayout l = m.layout;
    const VectorXd x0 = pack(l, initial_state(m, l));
    Phase direct = run_phase(m, l, x0, {}, {}, {}, opts);
    if (direct.sol.status == SolveStatus::converged) return direct;
    history.push_back(record("dense", direct, m, {}, thr));

    // Second try: n absorbs the starting mismatch, with the multipliers that
    // make the n-part of the gradient vanish (lambda = n on those rows).
    {
        const DiagnosisProblem prob(m, l);
        KktSystem start = initial_iterate(prob, x0, opts);
        const VectorXd h = equality_residual(m, l, x0);
        for (Index k = 0; k < l.n_comp; ++k) {
            const auto& c = m.compensation[static_cast<std::size_t>(k)];
            const Index row = c.part == CurrentPart::real ? l.row_kcl_real(c.bus) : l.row_kcl_imag(c.bus);
            start.x[l.comp(k)] = h[row];
            start.lambda_eq[row] = h[row];
        }
        Phase ph;
        ph.layout = l;
        ph.sol = solve_nlp(prob, start, opts);
        ph.x = ph.sol.iterate.x;
        ph.objective = prob.objective(ph.x);
        if (ph.sol.status == SolveStatus::converged) return ph;
        history.push_back(record("absorb", ph, m, {}, thr));
    }
    return direct;
}

// Shared reweighting loop for the sparse and vreg modes, starting from a
// converged dense phase.
inline DiagnosisResult sparse_loop(const CircuitModel& m, const std::string& mode, Phase dense, bool with_vsq,
                                   const std::vector<double>& vsq_min, const std::vector<double>& vsq_max,
                                   const VoltageBounds& bounds, const DiagnosisOptions& opts,
                                   std::vector<SubproblemRecord> history, std::map<std::string, double> timing) {
    const double thr = opts.coefficients.support_threshold;
    const auto t0 = Clock::now();
    Phase best = std::move(dense);
    DiagnosisStatus status = DiagnosisStatus::converged;
    SparsityCoefficients coeffs = update_coefficients(best.x.segment(best.layout.n_begin(), best.layout.n_comp),
                                                      opts.coefficients);
    std::vector<int> prev_support = support_of(m, best.x.segment(best.layout.n_begin(), best.layout.n_comp), thr);
    const VariableLayout l = m.layout_with(true, with_vsq);
    for (int k = 0; k < opts.max_subproblems; ++k) {
        const VectorXd x0 = warm_start(m, best.layout, best.x, l, vsq_min, vsq_max, std::sqrt(opts.nlp.barrier_init));
        Phase ph = run_phase(m, l, x0, coeffs.c, with_vsq ? vsq_min : std::vector<double>{},
                             with_vsq ? vsq_max : std::vector<double>{}, opts.nlp);
        history.push_back(record("sparse", ph, m, coeffs.c, thr));
        if (ph.sol.status != SolveStatus::converged) {
            status = from_solve_status(ph.sol.status);
            if (with_vsq) {
                const StateVector s = unpack(l, ph.x);
                if (!find_violations(m, s.v_real, s.v_imag, bounds).empty())
                    status = DiagnosisStatus::bounds_infeasible;
            }
            break;
        }
        best = std::move(ph);
        const VectorXd n = best.x.segment(l.n_begin(), l.n_comp);
        const std::vector<int> support = support_of(m, n, thr);
        coeffs = update_coefficients(n, coeffs);
        if (support == prev_support) break;
        prev_support = support;
    }
    timing["sparse"] = seconds_since(t0);
    DiagnosisResult r = make_result(m, mode, best.layout, best.x, bounds, thr);
    r.status = status;
    r.objective = best.objective;
    r.subproblem_history = std::move(history);
    r.wall_time = std::move(timing);
    return r;
}

}  // namespace detail

/// Minimum-norm compensation restoring KCL.
inline DiagnosisResult solve_dense(const CircuitModel& m, const DiagnosisOptions& opts = {}) {
    const auto t0 = detail::Clock::now();
    const double thr = opts.coefficients.support_threshold;
    std::vector<SubproblemRecord> history;
    const detail::Phase ph = detail::dense_phase(m, opts.nlp, history, thr);
    DiagnosisResult r = detail::make_result(m, "dense", m.layout, ph.x, bounds_of(m), thr);
    r.status = from_solve_status(ph.sol.status);
    r.objective = ph.objective;
    history.push_back(detail::record("dense", ph, m, {}, thr));
    r.subproblem_history = std::move(history);
    r.wall_time["dense"] = detail::seconds_since(t0);
    return r;
}

/// Reweighted-L1 diagnosis restoring KCL at few buses.
inline DiagnosisResult solve_sparse(const CircuitModel& m, const DiagnosisOptions& opts = {}) {
    const auto t0 = detail::Clock::now();
    const VariableLayout l = m.layout;
    std::vector<SubproblemRecord> history;
    detail::Phase dense = detail::dense_phase(m, opts.nlp, history, opts.coefficients.support_threshold);
    history.push_back(detail::record("dense", dense, m, {}, opts.coefficients.support_threshold));
    std::map<std::string, double> timing{{"dense", detail::seconds_since(t0)}};
    if (dense.sol.status != SolveStatus::converged) {
        DiagnosisResult r =
            detail::make_result(m, "sparse", l, dense.x, bounds_of(m), opts.coefficients.support_threshold);
        r.status = from_solve_status(dense.sol.status);
        r.objective = dense.objective;
        r.subproblem_history = std::move(history);
        r.wall_time = std::move(timing);
        return r;
    }
    return detail::sparse_loop(m, "sparse", std::move(dense), false, {}, {}, bounds_of(m), opts, std::move(history),
                               std::move(timing));
}

/// Voltage-regulated sparse diagnosis: KCL plus vmin <= |V| <= vmax on PQ buses.
inline DiagnosisResult solve_vreg(const CircuitModel& m, const VoltageBounds& bounds, const DiagnosisOptions& opts = {}) {
    if (bounds.v_min.size() != static_cast<std::size_t>(m.n_bus) || bounds.v_max.size() != bounds.v_min.size())
        throw std::invalid_argument("bounds must have one entry per bus");
    for (std::size_t k = 0; k < bounds.v_min.size(); ++k)
        if (!(bounds.v_min[k] > 0 && bounds.v_min[k] < bounds.v_max[k]))
            throw std::invalid_argument("invalid voltage bounds at bus " + std::to_string(m.bus_ids[k]));

    const double thr = opts.coefficients.support_threshold;
    const auto t0 = detail::Clock::now();
    std::vector<double> lo, hi;
    detail::squared_bounds(m, bounds, 0.0, lo, hi);
    const VariableLayout lb = m.layout_with(false, true);
    const VariableLayout l0 = m.layout;
    std::vector<SubproblemRecord> history;

    detail::Phase free0 = detail::dense_phase(m, opts.nlp, history, thr);
    const VectorXd x_init = detail::warm_start(m, l0, free0.x, lb, lo, hi, 0.0);
    detail::Phase dense = detail::run_phase(m, lb, x_init, {}, lo, hi, opts.nlp);
    history.push_back(detail::record("dense", dense, m, {}, thr));

    if (dense.sol.status != SolveStatus::converged) {
        // Continuation: unbounded dense solve, then bounds relaxed by delta
        // and tightened to zero.
        history.push_back(detail::record("relaxed", free0, m, {}, thr));
        detail::Phase cur = free0;
        bool ok = cur.sol.status == SolveStatus::converged;
        for (int k = 0; ok && k <= opts.relax_steps; ++k) {
            const double delta = opts.relax_delta * (1.0 - static_cast<double>(k) / opts.relax_steps);
            std::vector<double> rlo, rhi;
            detail::squared_bounds(m, bounds, delta, rlo, rhi);
            const VectorXd x0 = detail::warm_start(m, cur.layout, cur.x, lb, rlo, rhi, 0.0);
            detail::Phase ph = detail::run_phase(m, lb, x0, {}, rlo, rhi, opts.nlp);
            history.push_back(detail::record("relaxed", ph, m, {}, thr));
            ok = ph.sol.status == SolveStatus::converged;
            if (ok) cur = std::move(ph);
        }
        if (!ok) {
            DiagnosisResult r = detail::make_result(m, "vreg", cur.layout, cur.x, bounds, thr);
            r.status = DiagnosisStatus::bounds_infeasible;
            r.objective = cur.objective;
            r.subproblem_history = std::move(history);
            r.wall_time["dense"] = detail::seconds_since(t0);
            return r;
        }
        dense = std::move(cur);
    }
    std::map<std::string, double> timing{{"dense", detail::seconds_since(t0)}};
    return detail::sparse_loop(m, "vreg", std::move(dense), true, lo, hi, bounds, opts, std::move(history),
                               std::move(timing));
}

enum class Mode { powerflow, dense, sparse, vreg };

inline const char* to_string(Mode m) {
    switch (m) {
        case Mode::powerflow: return "powerflow";
        case Mode::dense: return "dense";
        case Mode::sparse: return "sparse";
        case Mode::vreg: return "vreg";
    }
    return "unknown";
}

/// Baseline power flow followed by the requested diagnosis; the result
/// carries baseline voltages and the before/after violation lists.
inline DiagnosisResult diagnose(const CircuitModel& m, Mode mode, const DiagnosisOptions& opts = {}) {
    const auto t0 = detail::Clock::now();
    const PowerFlowOutcome pf = run_baseline_powerflow(m, opts);
    const double t_pf = detail::seconds_since(t0);
    DiagnosisResult r;
    const VoltageBounds b = bounds_of(m);
    switch (mode) {
        case Mode::powerflow: {
            VariableLayout l = m.layout;
            StateVector s = initial_state(m, l);
            s.v_real = pf.v_real;
            s.v_imag = pf.v_imag;
            r = detail::make_result(m, "powerflow", l, pack(l, s), b, opts.coefficients.support_threshold);
            r.status = pf.status;
            if (pf.status != DiagnosisStatus::converged) r.violations_after.clear();
            break;
        }
        case Mode::dense: r = solve_dense(m, opts); break;
        case Mode::sparse: r = solve_sparse(m, opts); break;
        case Mode::vreg: r = solve_vreg(m, b, opts); break;
    }
    r.baseline_status = to_string(pf.status);
    r.wall_time["baseline"] = t_pf;
    if (pf.status == DiagnosisStatus::converged) {
        r.violations_before = pf.violations;
        r.v_baseline.resize(static_cast<std::size_t>(m.n_bus));
        for (Index k = 0; k < m.n_bus; ++k) r.v_baseline[static_cast<std::size_t>(k)] = std::hypot(pf.v_real[k], pf.v_imag[k]);
    }
    r.wall_time["total"] = detail::seconds_since(t0);
    return r;
}

}  // namespace vcdiag
