#pragma once

// MATPOWER/JSON case loading, per-unit conversion and load scaling.

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <numbers>
#include <optional>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

namespace vcdiag {

enum class BusType { PQ = 1, PV = 2, SLACK = 3, ISOLATED = 4 };
enum class Status { off = 0, on = 1 };

struct BusRecord {
    int id = 0;
    BusType btype = BusType::PQ;
    double p_demand = 0.0;
    double q_demand = 0.0;
    double g_shunt = 0.0;
    double b_shunt = 0.0;
    double v_mag_init = 1.0;
    double v_ang_init = 0.0;
    double base_kv = 0.0;
    double v_max = 0.0;
    double v_min = 0.0;
    bool operator==(const BusRecord&) const = default;
};

struct BranchRecord {
    int from_bus = 0;
    int to_bus = 0;
    double r = 0.0;
    double x = 0.0;
    double b_charging = 0.0;
    double tap = 0.0;
    double shift = 0.0;
    Status status = Status::on;
    bool operator==(const BranchRecord&) const = default;
};

struct GenRecord {
    int bus = 0;
    double p_set = 0.0;
    double q_init = 0.0;
    double q_max = 0.0;
    double q_min = 0.0;
    double v_set = 1.0;
    Status status = Status::on;
    bool operator==(const GenRecord&) const = default;
};

/// Case tables as read from a file: MW, MVAr, degrees.
struct RawCase {
    std::string name;
    double base_mva = 100.0;
    std::vector<BusRecord> buses;
    std::vector<GenRecord> gens;
    std::vector<BranchRecord> branches;
    bool operator==(const RawCase&) const = default;
};

/// Validated per-unit case: powers / base_mva, angles in radians, taps
/// normalized, out-of-service devices removed, at most one generator per bus.
struct NetworkCase {
    std::string name;
    double base_mva = 100.0;
    std::vector<BusRecord> buses;
    std::vector<GenRecord> gens;
    std::vector<BranchRecord> branches;
    bool operator==(const NetworkCase&) const = default;

    [[nodiscard]] std::optional<std::size_t> bus_index(int id) const {
        for (std::size_t k = 0; k < buses.size(); ++k)
            if (buses[k].id == id) return k;
        return std::nullopt;
    }
};

class ParseError : public std::runtime_error {
public:
    ParseError(const std::string& what, int line)
        : std::runtime_error(line > 0 ? "line " + std::to_string(line) + ": " + what : what),
          line_(line) {}
    [[nodiscard]] int line() const noexcept { return line_; }

private:
    int line_;
};

/// Missing mandatory block or unreadable overall structure.
class StructureError : public std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Data that parses but violates a case invariant.
class ValidationError : public std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct PerUnitOptions {
    double default_v_min = 0.9;
    double default_v_max = 1.1;
    // When set, replaces every bus's bound regardless of the file.
    std::optional<double> override_v_min;
    std::optional<double> override_v_max;
};

namespace detail {

struct MatrixBlock {
    std::vector<std::vector<double>> rows;
    std::vector<int> lines;
};

inline std::string strip_comment(std::string_view line) {
    bool in_str = false;
    for (std::size_t k = 0; k < line.size(); ++k) {
        if (line[k] == '\'') in_str = !in_str;
        if (line[k] == '%' && !in_str) return std::string(line.substr(0, k));
    }
    return std::string(line);
}

inline double parse_number(const std::string& tok, int line) {
    std::string t = tok;
    std::transform(t.begin(), t.end(), t.begin(), [](unsigned char c) { return std::tolower(c); });
    if (t == "inf" || t == "+inf") return std::numeric_limits<double>::infinity();
    if (t == "-inf") return -std::numeric_limits<double>::infinity();
    try {
        std::size_t used = 0;
        double v = std::stod(tok, &used);
        if (used != tok.size()) throw std::invalid_argument(tok);
        return v;
    } catch (const std::exception&) {
        throw ParseError("invalid number '" + tok + "'", line);
    }
}

inline int as_id(double v, int line) {
    if (v != std::floor(v)) throw ParseError("expected integer id", line);
    return static_cast<int>(v);
}

inline void require_columns(const MatrixBlock& blk, std::size_t min_cols, const char* name) {
    if (blk.rows.empty()) return;
    const std::size_t width = blk.rows.front().size();
    for (std::size_t k = 0; k < blk.rows.size(); ++k) {
        const auto& row = blk.rows[k];
        if (row.size() < min_cols)
            throw ParseError(std::string(name) + " row has " + std::to_string(row.size()) +
                                 " columns, need at least " + std::to_string(min_cols),
                             blk.lines[k]);
        if (row.size() != width)
            throw ParseError(std::string(name) + " row has " + std::to_string(row.size()) +
                                 " columns, expected " + std::to_string(width),
                             blk.lines[k]);
    }
}

inline Status to_status(double v) { return v > 0 ? Status::on : Status::off; }

}  // namespace detail

/// Validate the structural invariants of a raw case (ids, references, slack).
inline void validate(const RawCase& raw) {
    if (!(raw.base_mva > 0) || !std::isfinite(raw.base_mva))
        throw ValidationError("baseMVA must be positive");
    std::set<int> ids;
    int slack_count = 0;
    for (const auto& b : raw.buses) {
        if (!ids.insert(b.id).second) throw ValidationError("duplicate bus id " + std::to_string(b.id));
        if (b.btype == BusType::SLACK) ++slack_count;
        if (b.btype != BusType::ISOLATED && !(b.v_mag_init > 0))
            throw ValidationError("bus " + std::to_string(b.id) + " has non-positive initial voltage");
        if (b.v_min > 0 && b.v_max > 0 && b.v_min > b.v_max)
            throw ValidationError("bus " + std::to_string(b.id) + " has v_min > v_max");
        if (b.v_min < 0) throw ValidationError("bus " + std::to_string(b.id) + " has negative v_min");
    }
    if (slack_count != 1)
        throw ValidationError("expected exactly one slack bus, found " + std::to_string(slack_count));
    for (const auto& g : raw.gens) {
        if (!ids.contains(g.bus)) throw ValidationError("generator references unknown bus " + std::to_string(g.bus));
        if (g.status == Status::on && !(g.v_set > 0))
            throw ValidationError("generator at bus " + std::to_string(g.bus) + " has non-positive v_set");
    }
    for (const auto& br : raw.branches) {
        if (!ids.contains(br.from_bus) || !ids.contains(br.to_bus))
            throw ValidationError("branch " + std::to_string(br.from_bus) + "-" + std::to_string(br.to_bus) +
                                  " references unknown bus");
        if (br.status == Status::on && br.r * br.r + br.x * br.x <= 0)
            throw ValidationError("zero-impedance branch " + std::to_string(br.from_bus) + "-" +
                                  std::to_string(br.to_bus));
    }
}

/// Parse the baseMVA/bus/gen/branch subset of a MATPOWER case M-file.
/// Other blocks are skipped; their names are appended to `warnings`.
inline RawCase parse_matpower(std::string_view text, std::vector<std::string>* warnings = nullptr) {
    RawCase raw;
    std::optional<double> base;
    std::map<std::string, detail::MatrixBlock> blocks;

    std::istringstream in{std::string(text)};
    std::string line;
    int line_no = 0;
    std::string open_block;   // matrix block currently being read
    bool skipping = false;    // inside an ignored block
    char close_char = ']';
    std::string pending;      // partial row spanning lines

    auto flush_row = [&](const std::string& row_text, int ln) {
        std::istringstream rs(row_text);
        std::vector<double> row;
        std::string tok;
        while (rs >> tok) row.push_back(detail::parse_number(tok, ln));
        if (row.empty()) return;
        blocks[open_block].rows.push_back(std::move(row));
        blocks[open_block].lines.push_back(ln);
    };

    while (std::getline(in, line)) {
        ++line_no;
        std::string code = detail::strip_comment(line);
        std::replace(code.begin(), code.end(), '\t', ' ');
        std::replace(code.begin(), code.end(), ',', ' ');

        if (skipping) {
            if (code.find(close_char) != std::string::npos) skipping = false;
            continue;
        }
        if (!open_block.empty()) {
            auto close = code.find(']');
            std::string body = close == std::string::npos ? code : code.substr(0, close);
            std::size_t start = 0;
            for (std::size_t semi; (semi = body.find(';', start)) != std::string::npos; start = semi + 1) {
                flush_row(body.substr(start, semi - start), line_no);
            }
            std::string rest = body.substr(start);
            if (rest.find_first_not_of(' ') != std::string::npos) flush_row(rest, line_no);
            if (close != std::string::npos) open_block.clear();
            continue;
        }

        if (raw.name.empty()) {
            auto fpos = code.find("function");
            if (fpos != std::string::npos) {
                auto eq = code.find('=', fpos);
                if (eq != std::string::npos) {
                    std::istringstream ns(code.substr(eq + 1));
                    ns >> raw.name;
                }
                continue;
            }
        }

        auto mpos = code.find("mpc.");
        if (mpos == std::string::npos) continue;
        auto eq = code.find('=', mpos);
        if (eq == std::string::npos) continue;
        std::string field = code.substr(mpos + 4, eq - mpos - 4);
        field.erase(std::remove(field.begin(), field.end(), ' '), field.end());
        std::string value = code.substr(eq + 1);

        if (field == "baseMVA") {
            auto semi = value.find(';');
            std::istringstream vs(value.substr(0, semi));
            std::string tok;
            vs >> tok;
            base = detail::parse_number(tok, line_no);
        } else if (field == "bus" || field == "gen" || field == "branch") {
            auto open = value.find('[');
            if (open == std::string::npos) throw ParseError("expected '[' after mpc." + field, line_no);
            open_block = field;
            blocks[field];
            std::string body = value.substr(open + 1);
            auto close = body.find(']');
            std::string inner = close == std::string::npos ? body : body.substr(0, close);
            std::size_t start = 0;
            for (std::size_t semi; (semi = inner.find(';', start)) != std::string::npos; start = semi + 1)
                flush_row(inner.substr(start, semi - start), line_no);
            std::string rest = inner.substr(start);
            if (rest.find_first_not_of(' ') != std::string::npos) flush_row(rest, line_no);
            if (close != std::string::npos) open_block.clear();
        } else {
            auto open_sq = value.find('[');
            auto open_cu = value.find('{');
            if (open_sq != std::string::npos || open_cu != std::string::npos) {
                close_char = (open_cu != std::string::npos && (open_sq == std::string::npos || open_cu < open_sq)) ? '}' : ']';
                std::string after = value.substr(std::min(open_sq, open_cu) + 1);
                skipping = after.find(close_char) == std::string::npos;
            }
            if (field != "version" && warnings) warnings->push_back("ignored block mpc." + field);
        }
    }
    if (!open_block.empty()) throw StructureError("unterminated mpc." + open_block + " block");
    if (!base) throw StructureError("missing mpc.baseMVA");
    for (const char* name : {"bus", "gen", "branch"})
        if (!blocks.contains(name)) throw StructureError(std::string("missing mpc.") + name + " block");

    raw.base_mva = *base;
    const auto& bus = blocks["bus"];
    const auto& gen = blocks["gen"];
    const auto& branch = blocks["branch"];
    detail::require_columns(bus, 13, "bus");
    detail::require_columns(gen, 10, "gen");
    detail::require_columns(branch, 11, "branch");

    for (std::size_t k = 0; k < bus.rows.size(); ++k) {
        const auto& r = bus.rows[k];
        const int ln = bus.lines[k];
        BusRecord b;
        b.id = detail::as_id(r[0], ln);
        const int t = detail::as_id(r[1], ln);
        if (t < 1 || t > 4) throw ParseError("unknown bus type " + std::to_string(t), ln);
        b.btype = static_cast<BusType>(t);
        b.p_demand = r[2];
        b.q_demand = r[3];
        b.g_shunt = r[4];
        b.b_shunt = r[5];
        b.v_mag_init = r[7];
        b.v_ang_init = r[8];
        b.base_kv = r[9];
        b.v_max = r[11];
        b.v_min = r[12];
        raw.buses.push_back(b);
    }
    for (std::size_t k = 0; k < gen.rows.size(); ++k) {
        const auto& r = gen.rows[k];
        GenRecord g;
        g.bus = detail::as_id(r[0], gen.lines[k]);
        g.p_set = r[1];
        g.q_init = r[2];
        g.q_max = r[3];
        g.q_min = r[4];
        g.v_set = r[5];
        g.status = detail::to_status(r[7]);
        raw.gens.push_back(g);
    }
    for (std::size_t k = 0; k < branch.rows.size(); ++k) {
        const auto& r = branch.rows[k];
        BranchRecord br;
        br.from_bus = detail::as_id(r[0], branch.lines[k]);
        br.to_bus = detail::as_id(r[1], branch.lines[k]);
        br.r = r[2];
        br.x = r[3];
        br.b_charging = r[4];
        br.tap = r[8];
        br.shift = r[9];
        br.status = detail::to_status(r[10]);
        raw.branches.push_back(br);
    }
    validate(raw);
    return raw;
}

inline std::string read_text_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open " + path);
    std::ostringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

/// Convert to per-unit, drop out-of-service devices and isolated buses,
/// aggregate generators per bus and fill missing voltage bounds.
inline NetworkCase to_per_unit(const RawCase& raw, const PerUnitOptions& opts = {}) {
    validate(raw);
    constexpr double deg = std::numbers::pi / 180.0;
    const double base = raw.base_mva;

    NetworkCase out;
    out.name = raw.name;
    out.base_mva = base;

    std::set<int> isolated;
    for (const auto& b : raw.buses)
        if (b.btype == BusType::ISOLATED) isolated.insert(b.id);

    // Aggregate in-service generators per bus, keeping first-seen bus order.
    std::vector<int> gen_order;
    std::map<int, GenRecord> agg;
    for (const auto& g : raw.gens) {
        if (g.status != Status::on || isolated.contains(g.bus)) continue;
        auto it = agg.find(g.bus);
        if (it == agg.end()) {
            GenRecord pu = g;
            pu.p_set /= base;
            pu.q_init /= base;
            pu.q_max /= base;
            pu.q_min /= base;
            agg.emplace(g.bus, pu);
            gen_order.push_back(g.bus);
            continue;
        }
        auto& a = it->second;
        if (std::abs(a.v_set - g.v_set) > 1e-6)
            throw ValidationError("conflicting generator voltage setpoints at bus " + std::to_string(g.bus));
        a.p_set += g.p_set / base;
        a.q_init += g.q_init / base;
        a.q_max += g.q_max / base;
        a.q_min += g.q_min / base;
    }

    for (const auto& b : raw.buses) {
        if (b.btype == BusType::ISOLATED) continue;
        BusRecord pu = b;
        pu.p_demand /= base;
        pu.q_demand /= base;
        pu.g_shunt /= base;
        pu.b_shunt /= base;
        pu.v_ang_init *= deg;
        if (pu.btype == BusType::PV && !agg.contains(b.id)) pu.btype = BusType::PQ;
        if (!(pu.v_min > 0)) pu.v_min = opts.default_v_min;
        if (!(pu.v_max > 0)) pu.v_max = opts.default_v_max;
        if (opts.override_v_min) pu.v_min = *opts.override_v_min;
        if (opts.override_v_max) pu.v_max = *opts.override_v_max;
        if (pu.v_min > pu.v_max) throw ValidationError("bus " + std::to_string(b.id) + " has v_min > v_max");
        out.buses.push_back(pu);
    }
    for (int bus : gen_order) out.gens.push_back(agg.at(bus));
    for (const auto& br : raw.branches) {
        if (br.status != Status::on) continue;
        if (isolated.contains(br.from_bus) || isolated.contains(br.to_bus)) continue;
        BranchRecord pu = br;
        if (pu.tap == 0.0) pu.tap = 1.0;
        pu.shift *= deg;
        out.branches.push_back(pu);
    }
    return out;
}

/// Multiply every bus demand by `factor`.
inline NetworkCase scale_load(const NetworkCase& c, double factor) {
    if (!std::isfinite(factor) || factor < 0)
        throw std::invalid_argument("load factor must be finite and non-negative");
    NetworkCase out = c;
    for (auto& b : out.buses) {
        b.p_demand *= factor;
        b.q_demand *= factor;
    }
    return out;
}

// ---------------------------------------------------------------------------
// Canonical JSON (per-unit values, angles in radians)

inline std::string to_string(BusType t) {
    switch (t) {
        case BusType::PQ: return "PQ";
        case BusType::PV: return "PV";
        case BusType::SLACK: return "SLACK";
        case BusType::ISOLATED: return "ISOLATED";
    }
    return "PQ";
}

inline BusType bus_type_from_string(const std::string& s) {
    if (s == "PQ") return BusType::PQ;
    if (s == "PV") return BusType::PV;
    if (s == "SLACK") return BusType::SLACK;
    if (s == "ISOLATED") return BusType::ISOLATED;
    throw ValidationError("unknown bus type '" + s + "'");
}

inline void to_json(nlohmann::json& j, const BusRecord& b) {
    j = {{"id", b.id},           {"btype", to_string(b.btype)}, {"p_demand", b.p_demand},
         {"q_demand", b.q_demand}, {"g_shunt", b.g_shunt},       {"b_shunt", b.b_shunt},
         {"v_mag_init", b.v_mag_init}, {"v_ang_init", b.v_ang_init}, {"base_kv", b.base_kv},
         {"v_max", b.v_max},     {"v_min", b.v_min}};
}
inline void from_json(const nlohmann::json& j, BusRecord& b) {
    b.id = j.at("id").get<int>();
    b.btype = bus_type_from_string(j.at("btype").get<std::string>());
    b.p_demand = j.at("p_demand").get<double>();
    b.q_demand = j.at("q_demand").get<double>();
    b.g_shunt = j.at("g_shunt").get<double>();
    b.b_shunt = j.at("b_shunt").get<double>();
    b.v_mag_init = j.at("v_mag_init").get<double>();
    b.v_ang_init = j.at("v_ang_init").get<double>();
    b.base_kv = j.at("base_kv").get<double>();
    b.v_max = j.at("v_max").get<double>();
    b.v_min = j.at("v_min").get<double>();
}
inline void to_json(nlohmann::json& j, const BranchRecord& b) {
    j = {{"from_bus", b.from_bus}, {"to_bus", b.to_bus}, {"r", b.r},         {"x", b.x},
         {"b_charging", b.b_charging}, {"tap", b.tap},  {"shift", b.shift},
         {"status", b.status == Status::on ? "on" : "off"}};
}
inline void from_json(const nlohmann::json& j, BranchRecord& b) {
    b.from_bus = j.at("from_bus").get<int>();
    b.to_bus = j.at("to_bus").get<int>();
    b.r = j.at("r").get<double>();
    b.x = j.at("x").get<double>();
    b.b_charging = j.at("b_charging").get<double>();
    b.tap = j.at("tap").get<double>();
    b.shift = j.at("shift").get<double>();
    b.status = j.at("status").get<std::string>() == "off" ? Status::off : Status::on;
}
namespace detail {
// JSON has no infinity; unlimited reactive limits travel as "inf" / "-inf".
inline nlohmann::json limit_to_json(double x) {
    if (std::isinf(x)) return x > 0 ? "inf" : "-inf";
    return x;
}
inline double limit_from_json(const nlohmann::json& j) {
    if (j.is_string()) {
        const auto s = j.get<std::string>();
        if (s == "inf") return std::numeric_limits<double>::infinity();
        if (s == "-inf") return -std::numeric_limits<double>::infinity();
        throw StructureError("malformed case JSON: bad limit '" + s + "'");
    }
    return j.get<double>();
}
}  // namespace detail

inline void to_json(nlohmann::json& j, const GenRecord& g) {
    j = {{"bus", g.bus},
         {"p_set", g.p_set},
         {"q_init", g.q_init},
         {"q_max", detail::limit_to_json(g.q_max)},
         {"q_min", detail::limit_to_json(g.q_min)},
         {"v_set", g.v_set},
         {"status", g.status == Status::on ? "on" : "off"}};
}
inline void from_json(const nlohmann::json& j, GenRecord& g) {
    g.bus = j.at("bus").get<int>();
    g.p_set = j.at("p_set").get<double>();
    g.q_init = j.at("q_init").get<double>();
    g.q_max = detail::limit_from_json(j.at("q_max"));
    g.q_min = detail::limit_from_json(j.at("q_min"));
    g.v_set = j.at("v_set").get<double>();
    g.status = j.at("status").get<std::string>() == "off" ? Status::off : Status::on;
}

inline nlohmann::json case_to_json(const NetworkCase& c) {
    return {{"name", c.name}, {"base_mva", c.base_mva}, {"buses", c.buses},
            {"branches", c.branches}, {"gens", c.gens}};
}

inline NetworkCase case_from_json(const nlohmann::json& j) {
    NetworkCase c;
    try {
        c.name = j.value("name", std::string{});
        c.base_mva = j.at("base_mva").get<double>();
        c.buses = j.at("buses").get<std::vector<BusRecord>>();
        c.branches = j.at("branches").get<std::vector<BranchRecord>>();
        c.gens = j.at("gens").get<std::vector<GenRecord>>();
    } catch (const nlohmann::json::exception& e) {
        throw StructureError(std::string("malformed case JSON: ") + e.what());
    }
    RawCase as_raw{c.name, c.base_mva, c.buses, c.gens, c.branches};
    validate(as_raw);
    std::set<int> gen_buses;
    for (const auto& g : c.gens)
        if (!gen_buses.insert(g.bus).second)
            throw ValidationError("per-unit case has several generators at bus " + std::to_string(g.bus));
    return c;
}

inline std::string write_case_json(const NetworkCase& c, int indent = 1) { return case_to_json(c).dump(indent); }
inline NetworkCase read_case_json(std::string_view text) {
    try {
        return case_from_json(nlohmann::json::parse(text));
    } catch (const nlohmann::json::parse_error& e) {
        throw StructureError(std::string("invalid JSON: ") + e.what());
    }
}

/// Load a case from disk. `format` is "matpower", "json", or "" to infer from the extension.
inline NetworkCase load_case(const std::string& path, std::string format = {},
                             const PerUnitOptions& opts = {}, std::vector<std::string>* warnings = nullptr) {
    const std::string text = read_text_file(path);
    if (format.empty()) format = path.ends_with(".json") ? "json" : "matpower";
    if (format == "json") {
        NetworkCase c = read_case_json(text);
        for (auto& b : c.buses) {
            if (opts.override_v_min) b.v_min = *opts.override_v_min;
            if (opts.override_v_max) b.v_max = *opts.override_v_max;
        }
        return c;
    }
    if (format != "matpower") throw std::invalid_argument("unknown case format '" + format + "'");
    return to_per_unit(parse_matpower(text, warnings), opts);
}

}  // namespace vcdiag
