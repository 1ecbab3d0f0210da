// vcdiag: voltage-collapse diagnosis from the command line.
//
//   vcdiag solve --case case30.m --mode vreg --load-factor 1.5 --out-dir out
//   vcdiag sweep --case case30.m --mode vreg --load-factors 1.4:1.6:0.05
//
// Exit status: 0 converged, 2 not converged, 1 usage or IO error.

#include <iostream>
#include <map>
#include <string>

#include "CLI11.hpp"
#include "vcdiag/cli_report.hpp"

namespace {

struct Flags {
    std::string mode = "vreg";
    std::string placement = "all_non_slack";
    std::string range;
    double vmin = 0.0, vmax = 0.0, tol = 0.0;
    int max_iters = 0;
};

void add_common(CLI::App* app, vcdiag::RunConfig& cfg, Flags& f) {
    app->add_option("--case", cfg.case_path, "MATPOWER .m or canonical JSON case")->required();
    app->add_option("--format", cfg.format, "matpower | json (default: by extension)");
    app->add_option("--mode", f.mode, "powerflow | dense | sparse | vreg")->capture_default_str();
    app->add_option("--vmin", f.vmin, "override every bus's lower voltage bound (pu)");
    app->add_option("--vmax", f.vmax, "override every bus's upper voltage bound (pu)");
    app->add_option("--placement", f.placement, "all_non_slack | pq_only")->capture_default_str();
    app->add_flag("--reactive-only", cfg.reactive_only, "compensate the imaginary current part only");
    app->add_option("--out-dir", cfg.out_dir, "output directory")->capture_default_str();
    app->add_option("--tol-feas", f.tol, "primal feasibility tolerance");
    app->add_option("--max-iters", f.max_iters, "Newton iteration cap per subproblem");
}

void finish(const CLI::App& app, vcdiag::RunConfig& cfg, const Flags& f) {
    cfg.mode = vcdiag::parse_mode(f.mode);
    if (f.placement == "all_non_slack")
        cfg.placement = vcdiag::Placement::all_non_slack;
    else if (f.placement == "pq_only")
        cfg.placement = vcdiag::Placement::pq_only;
    else
        throw vcdiag::UsageError("--placement must be all_non_slack or pq_only");
    if (app.count("--vmin")) cfg.v_min = f.vmin;
    if (app.count("--vmax")) cfg.v_max = f.vmax;
    if (app.count("--tol-feas")) cfg.tol_feas = f.tol;
    if (app.count("--max-iters")) cfg.max_iters = f.max_iters;
    if (const auto* o = app.get_option_no_throw("--load-factors"); o && o->count()) cfg.sweep = vcdiag::parse_range(f.range);
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Sparse compensation diagnosis of voltage collapse"};
    app.require_subcommand(1);

    vcdiag::RunConfig solve_cfg, sweep_cfg;
    Flags solve_flags, sweep_flags;
    auto* solve = app.add_subcommand("solve", "single diagnosis at one load factor");
    add_common(solve, solve_cfg, solve_flags);
    solve->add_option("--load-factor", solve_cfg.load_factor, "uniform demand multiplier")->capture_default_str();
    auto* sweep = app.add_subcommand("sweep", "diagnoses over a range of load factors");
    add_common(sweep, sweep_cfg, sweep_flags);
    sweep->add_option("--load-factors", sweep_flags.range, "start:stop:step")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : 1;
    }

    try {
        if (*solve) {
            finish(*solve, solve_cfg, solve_flags);
            return vcdiag::cmd_solve(solve_cfg);
        }
        finish(*sweep, sweep_cfg, sweep_flags);
        return vcdiag::cmd_sweep(sweep_cfg);
    } catch (const std::exception& e) {
        std::cerr << "vcdiag: " << e.what() << '\n';
        return 1;
    }
}
