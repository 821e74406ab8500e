#pragma once

// JSON case files.
//
//   { "version": 1, "n_buses": N, "units": {"omega": "rad_s" | "hz"},
//     "B": [N*N row-major], "G": [...], "M": [N], "D": [N], "P_m": [N],
//     "u_max": [N], "u_min": [N] (optional, defaults to -u_max) }
//
// With "hz", M and D are per Hz and are divided by 2π on load; they are
// multiplied back on save so a round trip reproduces the file.
//
// Admittance files (input to Kron reduction) share the dynamic fields and
// replace B/G with "n_generators", "n_loads", "Y_real", "Y_imag" over the
// full (N+L)×(N+L) matrix.

#include "lyapreg/error.hpp"
#include "lyapreg/grid_model.hpp"

#include <json.hpp>

#include <fstream>
#include <sstream>
#include <string>

namespace lyapreg {

inline constexpr int kSchemaVersion = 1;

using Json = nlohmann::json;

inline Json read_json_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) {
        throw ValidationError(path + ": cannot open file");
    }
    try {
        return Json::parse(in);
    } catch (const Json::parse_error& e) {
        throw ValidationError(path + ": " + e.what());
    }
}

inline std::string read_text_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw ValidationError(path + ": cannot open file");
    }
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

inline void write_text_file(const std::string& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw ValidationError(path + ": cannot open for writing");
    }
    out << text;
}

inline void write_json_file(const std::string& path, const Json& j) { write_text_file(path, j.dump(2) + "\n"); }

inline void check_version(const Json& j, const std::string& where) {
    if (!j.is_object() || !j.contains("version")) {
        throw ValidationError(where + "version: missing");
    }
    if (!j["version"].is_number_integer() || j["version"].get<int>() != kSchemaVersion) {
        throw ValidationError(where + "version: unsupported schema version " + j["version"].dump());
    }
}

namespace detail {

inline Vec number_array(const Json& j, const std::string& key, const std::string& where) {
    if (!j.contains(key)) {
        throw ValidationError(where + key + ": missing");
    }
    const Json& a = j[key];
    if (!a.is_array()) {
        throw ValidationError(where + key + ": expected an array");
    }
    Vec out;
    out.reserve(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        if (!a[i].is_number()) {
            throw ValidationError(where + key + "[" + std::to_string(i) + "]: expected a number");
        }
        out.push_back(a[i].get<double>());
    }
    return out;
}

inline std::size_t positive_int(const Json& j, const std::string& key, const std::string& where, bool allow_zero) {
    if (!j.contains(key) || !j[key].is_number_integer()) {
        throw ValidationError(where + key + ": expected an integer");
    }
    const auto v = j[key].get<long long>();
    if (v < 0 || (!allow_zero && v == 0)) {
        throw ValidationError(where + key + ": must be " + (allow_zero ? "nonnegative" : "positive"));
    }
    return static_cast<std::size_t>(v);
}

inline OmegaUnit parse_units(const Json& j, const std::string& where) {
    if (!j.contains("units")) {
        return OmegaUnit::rad_s;
    }
    const Json& u = j["units"];
    if (!u.is_object() || !u.contains("omega") || !u["omega"].is_string()) {
        throw ValidationError(where + "units.omega: expected \"rad_s\" or \"hz\"");
    }
    const auto s = u["omega"].get<std::string>();
    if (s == "rad_s") {
        return OmegaUnit::rad_s;
    }
    if (s == "hz") {
        return OmegaUnit::hz;
    }
    throw ValidationError(where + "units.omega: unknown unit \"" + s + "\"");
}

/// Dynamic fields shared by case and admittance files.
inline void parse_dynamics(const Json& j, std::size_t n, const std::string& where, NetworkCase& c) {
    c.omega_unit = parse_units(j, where);
    c.inertia = number_array(j, "M", where);
    c.damping = number_array(j, "D", where);
    c.mech_power = number_array(j, "P_m", where);
    c.u_max = number_array(j, "u_max", where);
    if (j.contains("u_min")) {
        c.u_min = number_array(j, "u_min", where);
    } else {
        c.u_min = c.u_max;
        for (double& x : c.u_min) {
            x = -x;
        }
    }
    for (const auto& [v, name] : {std::pair{&c.inertia, "M"}, std::pair{&c.damping, "D"}}) {
        if (v->size() != n) {
            throw ValidationError(where + name + ": expected " + std::to_string(n) + " entries, got " +
                                  std::to_string(v->size()));
        }
    }
    const double scale = c.omega_scale();
    for (std::size_t i = 0; i < n; ++i) {
        c.inertia[i] /= scale;
        c.damping[i] /= scale;
    }
}

inline void validate_qualified(const NetworkCase& c, const std::string& where) {
    try {
        c.validate();
    } catch (const ValidationError& e) {
        throw ValidationError(where + e.what());
    }
}

} // namespace detail

/// `where` prefixes error messages (typically "<path>: ").
inline NetworkCase case_from_json(const Json& j, const std::string& where = "") {
    check_version(j, where);
    NetworkCase c;
    c.n_buses = detail::positive_int(j, "n_buses", where, false);
    c.susceptance = detail::number_array(j, "B", where);
    c.conductance = detail::number_array(j, "G", where);
    detail::parse_dynamics(j, c.n_buses, where, c);
    detail::validate_qualified(c, where);
    return c;
}

inline NetworkCase load_case(const std::string& path) { return case_from_json(read_json_file(path), path + ": "); }

inline Json case_to_json(const NetworkCase& c) {
    const double scale = c.omega_scale();
    Vec m = c.inertia;
    Vec d = c.damping;
    for (std::size_t i = 0; i < c.n_buses; ++i) {
        m[i] *= scale;
        d[i] *= scale;
    }
    return Json{{"version", kSchemaVersion},
                {"n_buses", c.n_buses},
                {"units", {{"omega", c.omega_unit == OmegaUnit::hz ? "hz" : "rad_s"}}},
                {"B", c.susceptance},
                {"G", c.conductance},
                {"M", m},
                {"D", d},
                {"P_m", c.mech_power},
                {"u_max", c.u_max},
                {"u_min", c.u_min}};
}

struct AdmittanceCase {
    AdmittanceMatrix admittance;
    NetworkCase dynamics;  // everything except B/G
};

inline AdmittanceCase admittance_from_json(const Json& j, const std::string& where = "") {
    check_version(j, where);
    AdmittanceCase a;
    a.admittance.n_generators = detail::positive_int(j, "n_generators", where, false);
    a.admittance.n_loads = detail::positive_int(j, "n_loads", where, true);
    const Vec re = detail::number_array(j, "Y_real", where);
    const Vec im = detail::number_array(j, "Y_imag", where);
    const std::size_t total = a.admittance.dim();
    if (re.size() != total * total || im.size() != total * total) {
        throw ValidationError(where + "Y_real/Y_imag: expected " + std::to_string(total * total) + " entries");
    }
    a.admittance.y.resize(total * total);
    for (std::size_t k = 0; k < re.size(); ++k) {
        a.admittance.y[k] = {re[k], im[k]};
    }
    a.dynamics.n_buses = a.admittance.n_generators;
    detail::parse_dynamics(j, a.dynamics.n_buses, where, a.dynamics);
    return a;
}

/// Kron-reduces an admittance file into a validated NetworkCase.
inline NetworkCase reduce_case(const AdmittanceCase& a, const std::string& where = "") {
    NetworkCase c = a.dynamics;
    const LineMatrices lines = kron_reduce(a.admittance);
    c.susceptance = lines.susceptance;
    c.conductance = lines.conductance;
    detail::validate_qualified(c, where);
    return c;
}

inline Json equilibrium_to_json(const Equilibrium& eq) {
    return Json{{"version", kSchemaVersion},
                {"delta", eq.state.delta},
                {"omega", eq.state.omega},
                {"slack_adjustment", eq.slack_adjustment},
                {"residual_norm", eq.residual_norm},
                {"iterations", eq.iterations}};
}

} // namespace lyapreg
