#pragma once
// Shared test fixtures: paths to bundled cases and a hand-sized 2-bus grid.

#include <complex>
#include <string>

#include "vcdiag/case_io.hpp"

namespace fixtures {

inline std::string case_path(const std::string& name) { return std::string(VCDIAG_CASE_DIR) + "/" + name + ".m"; }
inline std::string fixture_path(const std::string& name) {
    return std::string(VCDIAG_FIXTURE_DIR) + "/" + name + ".m";
}

// Slack bus 1 at 1.0 pu, PQ bus 2 with 50 MW / 20 MVAr, one r=0.01 x=0.1 line.
inline const char* two_bus_text() {
    return R"(function mpc = twobus
mpc.version = '2';
mpc.baseMVA = 100;
mpc.bus = [
	1	3	0	0	0	0	1	1.0	0	230	1	1.1	0.9;
	2	1	50	20	0	0	1	1.0	0	230	1	1.1	0.9;
];
mpc.gen = [
	1	0	0	300	-300	1.0	100	1	250	10;
];
mpc.branch = [
	1	2	0.01	0.1	0	0	0	0	0	0	1;
];
)";
}

inline vcdiag::NetworkCase two_bus(double load_factor = 1.0) {
    return vcdiag::scale_load(vcdiag::to_per_unit(vcdiag::parse_matpower(two_bus_text(), nullptr)),
                              load_factor);
}

// High-voltage root of the 2-bus power flow with V1 = 1: with U = |V2|^2,
// U^2 + (2(RP + XQ) - 1) U + |z|^2 |S|^2 = 0 and V2 = U + conj(z) S.
inline std::complex<double> two_bus_voltage(double p, double q, double r = 0.01, double x = 0.1) {
    const double b = 2.0 * (r * p + x * q) - 1.0;
    const double c = (r * r + x * x) * (p * p + q * q);
    const double u = (-b + std::sqrt(b * b - 4.0 * c)) / 2.0;
    return u + std::conj(std::complex<double>(r, x)) * std::complex<double>(p, q);
}

}  // namespace fixtures
