#pragma once
// Run configuration, single runs and load-factor sweeps, result JSON, and
// the CSV files consumed by external plotting.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "vcdiag/case_io.hpp"
#include "vcdiag/diagnosis.hpp"
#include "vcdiag/network_model.hpp"

namespace vcdiag {

class UsageError : public std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

struct LoadFactorRange {
    double start = 1.0;
    double stop = 1.0;
    double step = 0.1;

    /// Factors start, start + step, ... up to stop (inclusive, with a small
    /// tolerance so 1.4:1.6:0.05 yields five values).
    [[nodiscard]] std::vector<double> values() const {
        const auto count = static_cast<long>(std::floor((stop - start) / step + 1e-9)) + 1;
        std::vector<double> v;
        for (long k = 0; k < count; ++k) v.push_back(start + static_cast<double>(k) * step);
        return v;
    }
};

inline LoadFactorRange parse_range(const std::string& text) {
    LoadFactorRange r;
    double* parts[] = {&r.start, &r.stop, &r.step};
    std::size_t pos = 0;
    for (int k = 0; k < 3; ++k) {
        const std::size_t end = k < 2 ? text.find(':', pos) : text.size();
        if (end == std::string::npos) throw UsageError("load factor range must be start:stop:step");
        const std::string field = text.substr(pos, end - pos);
        std::size_t used = 0;
        try {
            *parts[k] = std::stod(field, &used);
        } catch (const std::exception&) {
            used = 0;
        }
        if (field.empty() || used != field.size()) throw UsageError("bad number in load factor range: '" + field + "'");
        pos = end + 1;
    }
    if (!(r.step > 0) || !std::isfinite(r.step)) throw UsageError("load factor step must be positive");
    if (!(r.start >= 0) || !(r.stop >= r.start) || !std::isfinite(r.stop))
        throw UsageError("load factor range needs 0 <= start <= stop");
    return r;
}

inline Mode parse_mode(const std::string& s) {
    for (Mode m : {Mode::powerflow, Mode::dense, Mode::sparse, Mode::vreg})
        if (s == to_string(m)) return m;
    throw UsageError("unknown mode '" + s + "'");
}

struct RunConfig {
    std::string case_path;
    std::string format;  // matpower | json, empty = by extension
    Mode mode = Mode::vreg;
    double load_factor = 1.0;
    std::optional<LoadFactorRange> sweep;
    std::optional<double> v_min;
    std::optional<double> v_max;
    Placement placement = Placement::all_non_slack;
    bool reactive_only = false;
    std::optional<double> tol_feas;
    std::optional<int> max_iters;
    std::string out_dir = "vcdiag_out";
    unsigned seed = 0;  // reserved; the solver is deterministic

    void validate() const {
        if (case_path.empty()) throw UsageError("--case is required");
        if (!format.empty() && format != "matpower" && format != "json")
            throw UsageError("--format must be matpower or json");
        if (!(load_factor >= 0) || !std::isfinite(load_factor)) throw UsageError("load factor must be >= 0");
        if (v_min && !(*v_min > 0)) throw UsageError("--vmin must be positive");
        if (v_max && !(*v_max > 0)) throw UsageError("--vmax must be positive");
        if (v_min && v_max && !(*v_min < *v_max)) throw UsageError("--vmin must be below --vmax");
        if (tol_feas && !(*tol_feas > 0)) throw UsageError("--tol-feas must be positive");
        if (max_iters && *max_iters <= 0) throw UsageError("--max-iters must be positive");
    }

    [[nodiscard]] DiagnosisOptions diagnosis_options() const {
        DiagnosisOptions o;
        if (tol_feas) o.nlp.tol_feas = *tol_feas;
        if (max_iters) o.nlp.max_newton_iters = *max_iters;
        return o;
    }
};

// ---------------------------------------------------------------------------
// JSON

inline void to_json(nlohmann::json& j, const Violation& v) { j = {{"bus", v.bus}, {"v_mag", v.v_mag}}; }
inline void from_json(const nlohmann::json& j, Violation& v) {
    j.at("bus").get_to(v.bus);
    j.at("v_mag").get_to(v.v_mag);
}

inline void to_json(nlohmann::json& j, const SubproblemRecord& r) {
    j = {{"kind", r.kind},
         {"coefficients", r.coefficients},
         {"support_size", r.support_size},
         {"inner_iterations", r.inner_iterations},
         {"status", to_string(r.status)},
         {"objective", r.objective}};
}
inline void from_json(const nlohmann::json& j, SubproblemRecord& r) {
    j.at("kind").get_to(r.kind);
    j.at("coefficients").get_to(r.coefficients);
    j.at("support_size").get_to(r.support_size);
    j.at("inner_iterations").get_to(r.inner_iterations);
    r.status = diagnosis_status_from_string(j.at("status").get<std::string>());
    j.at("objective").get_to(r.objective);
}

inline nlohmann::json result_to_json(const DiagnosisResult& r) {
    return {{"mode", r.mode},
            {"status", to_string(r.status)},
            {"bus_ids", r.bus_ids},
            {"v_real", r.v_real},
            {"v_imag", r.v_imag},
            {"n_real", r.n_real},
            {"n_imag", r.n_imag},
            {"support", r.support},
            {"v_min", r.v_min},
            {"v_max", r.v_max},
            {"bounded", r.bounded},
            {"baseline_status", r.baseline_status},
            {"v_baseline", r.v_baseline},
            {"violations_before", r.violations_before},
            {"violations_after", r.violations_after},
            {"objective", r.objective},
            {"kcl_residual_inf", r.kcl_residual_inf},
            {"subproblem_history", r.subproblem_history},
            {"wall_time", r.wall_time}};
}

inline DiagnosisResult result_from_json(const nlohmann::json& j) {
    DiagnosisResult r;
    j.at("mode").get_to(r.mode);
    r.status = diagnosis_status_from_string(j.at("status").get<std::string>());
    j.at("bus_ids").get_to(r.bus_ids);
    j.at("v_real").get_to(r.v_real);
    j.at("v_imag").get_to(r.v_imag);
    j.at("n_real").get_to(r.n_real);
    j.at("n_imag").get_to(r.n_imag);
    j.at("support").get_to(r.support);
    j.at("v_min").get_to(r.v_min);
    j.at("v_max").get_to(r.v_max);
    j.at("bounded").get_to(r.bounded);
    j.at("baseline_status").get_to(r.baseline_status);
    j.at("v_baseline").get_to(r.v_baseline);
    j.at("violations_before").get_to(r.violations_before);
    j.at("violations_after").get_to(r.violations_after);
    j.at("objective").get_to(r.objective);
    j.at("kcl_residual_inf").get_to(r.kcl_residual_inf);
    j.at("subproblem_history").get_to(r.subproblem_history);
    j.at("wall_time").get_to(r.wall_time);
    return r;
}

inline void write_result_json(const DiagnosisResult& r, const std::filesystem::path& path) {
    std::ofstream f(path);
    if (!f) throw std::runtime_error("cannot write " + path.string());
    f << result_to_json(r).dump(1) << '\n';
}

inline DiagnosisResult read_result_json(const std::filesystem::path& path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("cannot read " + path.string());
    return result_from_json(nlohmann::json::parse(f));
}

// ---------------------------------------------------------------------------
// CSV

inline std::string num(double x) {
    if (!std::isfinite(x)) return std::isnan(x) ? "nan" : (x > 0 ? "inf" : "-inf");
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.12g", x);
    return buf;
}

namespace detail {

inline std::ofstream open_out(const std::filesystem::path& p) {
    std::ofstream f(p);
    if (!f) throw std::runtime_error("cannot write " + p.string());
    return f;
}

inline std::set<int> violated_ids(const std::vector<Violation>& v) {
    std::set<int> s;
    for (const auto& x : v) s.insert(x.bus);
    return s;
}

}  // namespace detail

/// bus, |V|, angle (rad), |n|, n_real, n_imag, violated_before
inline void write_bus_csv(const DiagnosisResult& r, const std::filesystem::path& path) {
    auto f = detail::open_out(path);
    const auto before = detail::violated_ids(r.violations_before);
    f << "bus,v_mag,v_ang,n_mag,n_real,n_imag,violated_before\n";
    for (std::size_t k = 0; k < r.bus_ids.size(); ++k)
        f << r.bus_ids[k] << ',' << num(r.v_mag(k)) << ',' << num(std::atan2(r.v_imag[k], r.v_real[k])) << ','
          << num(r.n_mag(k)) << ',' << num(r.n_real[k]) << ',' << num(r.n_imag[k]) << ','
          << (before.contains(r.bus_ids[k]) ? 1 : 0) << '\n';
}

constexpr double kHistogramBin = 0.01;

/// Counts of |n| over the support buses in bins of width 0.01 pu, from zero
/// up to the largest occupied bin.
inline std::vector<std::size_t> compensation_histogram(const DiagnosisResult& r) {
    std::vector<std::size_t> counts;
    const std::set<int> support(r.support.begin(), r.support.end());
    for (std::size_t k = 0; k < r.bus_ids.size(); ++k) {
        if (!support.contains(r.bus_ids[k])) continue;
        const auto bin = static_cast<std::size_t>(std::floor(r.n_mag(k) / kHistogramBin));
        if (counts.size() <= bin) counts.resize(bin + 1, 0);
        ++counts[bin];
    }
    return counts;
}

/// voltages.csv, compensation_hist.csv, graph.csv and nodes.csv for
/// external plotting. `c` supplies the edge list.
inline void emit_plot_data(const DiagnosisResult& r, const NetworkCase& c, const std::filesystem::path& out_dir) {
    std::filesystem::create_directories(out_dir);
    const auto before = detail::violated_ids(r.violations_before);
    const auto after = detail::violated_ids(r.violations_after);

    auto v = detail::open_out(out_dir / "voltages.csv");
    v << "bus,v_baseline,v_result,v_min,v_max\n";
    for (std::size_t k = 0; k < r.bus_ids.size(); ++k)
        v << r.bus_ids[k] << ',' << (r.v_baseline.empty() ? std::string() : num(r.v_baseline[k])) << ','
          << num(r.v_mag(k)) << ',' << num(r.v_min[k]) << ',' << num(r.v_max[k]) << '\n';

    auto h = detail::open_out(out_dir / "compensation_hist.csv");
    h << "bin_lower,bin_upper,count\n";
    const auto counts = compensation_histogram(r);
    for (std::size_t b = 0; b < counts.size(); ++b)
        h << num(static_cast<double>(b) * kHistogramBin) << ',' << num(static_cast<double>(b + 1) * kHistogramBin)
          << ',' << counts[b] << '\n';

    auto g = detail::open_out(out_dir / "graph.csv");
    g << "from_bus,to_bus\n";
    for (const auto& br : c.branches)
        if (br.status == Status::on) g << br.from_bus << ',' << br.to_bus << '\n';

    // Stock case files carry no coordinates, so x and y stay blank.
    auto n = detail::open_out(out_dir / "nodes.csv");
    n << "bus,x,y,n_mag,violated_before,violated_after\n";
    for (std::size_t k = 0; k < r.bus_ids.size(); ++k)
        n << r.bus_ids[k] << ",,," << num(r.n_mag(k)) << ',' << (before.contains(r.bus_ids[k]) ? 1 : 0) << ','
          << (after.contains(r.bus_ids[k]) ? 1 : 0) << '\n';
}

inline std::string summary_line(const DiagnosisResult& r) {
    const auto it = r.wall_time.find("total");
    std::ostringstream s;
    s << "status=" << to_string(r.status) << " mode=" << r.mode << " support=" << r.support.size()
      << " violations_before=" << r.violations_before.size() << " violations_after=" << r.violations_after.size()
      << " wall_s=" << num(it == r.wall_time.end() ? 0.0 : it->second);
    return s.str();
}

// ---------------------------------------------------------------------------
// Commands

inline NetworkCase load_config_case(const RunConfig& cfg) {
    PerUnitOptions pu;
    pu.override_v_min = cfg.v_min;
    pu.override_v_max = cfg.v_max;
    return load_case(cfg.case_path, cfg.format, pu);
}

inline DiagnosisResult run_once(const NetworkCase& base, const RunConfig& cfg, double load_factor) {
    const CircuitModel m = build_model(scale_load(base, load_factor), {cfg.placement, cfg.reactive_only});
    return diagnose(m, cfg.mode, cfg.diagnosis_options());
}

inline int exit_code(DiagnosisStatus s) { return s == DiagnosisStatus::converged ? 0 : 2; }

/// Single run: result.json, buses.csv and plot data under out_dir, summary
/// on `out`. Returns the process exit code; usage and IO errors throw.
inline int cmd_solve(const RunConfig& cfg, std::ostream& out = std::cout) {
    cfg.validate();
    if (cfg.sweep) throw UsageError("solve takes --load-factor, not --load-factors");
    const NetworkCase c = load_config_case(cfg);
    const DiagnosisResult r = run_once(c, cfg, cfg.load_factor);
    const std::filesystem::path dir(cfg.out_dir);
    std::filesystem::create_directories(dir);
    write_result_json(r, dir / "result.json");
    write_bus_csv(r, dir / "buses.csv");
    emit_plot_data(r, c, dir);
    out << summary_line(r) << '\n';
    return exit_code(r.status);
}

struct SweepRow {
    double load_factor = 0.0;
    std::string mode;
    std::string status;
    std::size_t support = 0;
    std::size_t violations_before = 0;
    std::size_t violations_after = 0;
    int inner_iterations = 0;
    std::size_t subproblems = 0;
    double wall_seconds = 0.0;
};

inline void write_sweep_csv(const std::vector<SweepRow>& rows, std::ostream& f) {
    f << "load_factor,mode,status,support,violations_before,violations_after,inner_iterations,subproblems,"
         "wall_seconds\n";
    for (const auto& r : rows)
        f << num(r.load_factor) << ',' << r.mode << ',' << r.status << ',' << r.support << ',' << r.violations_before
          << ',' << r.violations_after << ',' << r.inner_iterations << ',' << r.subproblems << ','
          << num(r.wall_seconds) << '\n';
}

/// One row per load factor, ascending; runs spread over hardware threads.
/// A failing run is recorded in its row and the sweep continues.
inline std::vector<SweepRow> run_sweep(const NetworkCase& c, const RunConfig& cfg,
                                       unsigned threads = std::thread::hardware_concurrency()) {
    const std::vector<double> factors = cfg.sweep->values();
    std::vector<SweepRow> rows(factors.size());
    std::atomic<std::size_t> next{0};
    auto worker = [&] {
        for (std::size_t k; (k = next++) < factors.size();) {
            SweepRow& row = rows[k];
            row.load_factor = factors[k];
            row.mode = to_string(cfg.mode);
            try {
                const DiagnosisResult r = run_once(c, cfg, factors[k]);
                row.status = to_string(r.status);
                row.support = r.support.size();
                row.violations_before = r.violations_before.size();
                row.violations_after = r.violations_after.size();
                row.inner_iterations = r.total_inner_iterations();
                row.subproblems = r.subproblem_history.size();
                row.wall_seconds = r.wall_time.at("total");
            } catch (const std::exception&) {
                row.status = "error";
            }
        }
    };
    const unsigned n = std::clamp<unsigned>(threads, 1, static_cast<unsigned>(std::max<std::size_t>(1, factors.size())));
    std::vector<std::jthread> pool;
    for (unsigned t = 1; t < n; ++t) pool.emplace_back(worker);
    worker();
    return rows;
}

inline int cmd_sweep(const RunConfig& cfg, std::ostream& out = std::cout) {
    cfg.validate();
    if (!cfg.sweep) throw UsageError("sweep requires --load-factors start:stop:step");
    const NetworkCase c = load_config_case(cfg);
    const auto rows = run_sweep(c, cfg);
    const std::filesystem::path dir(cfg.out_dir);
    std::filesystem::create_directories(dir);
    auto f = detail::open_out(dir / "sweep.csv");
    write_sweep_csv(rows, f);
    write_sweep_csv(rows, out);
    const bool all = std::all_of(rows.begin(), rows.end(), [](const SweepRow& r) { return r.status == "converged"; });
    return all ? 0 : 2;
}

}  // namespace vcdiag
