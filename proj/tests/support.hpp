#pragma once

#include "lyapreg/grid_model.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <string>
#include <vector>

namespace testing_support {

using lyapreg::NetworkCase;
using lyapreg::Vec;

inline std::string data_path(const std::string& rel) { return std::string(LYAPREG_DATA_DIR) + "/" + rel; }

inline double rel_err(double a, double b, double floor = 1e-6) {
    return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

/// Central difference of f along coordinate i of x.
inline double central_diff(const std::function<double(const Vec&)>& f, Vec x, std::size_t i, double h = 1e-5) {
    const double x0 = x[i];
    x[i] = x0 + h;
    const double fp = f(x);
    x[i] = x0 - h;
    const double fm = f(x);
    return (fp - fm) / (2.0 * h);
}

inline Vec uniform_vec(std::mt19937_64& rng, std::size_t n, double lo, double hi) {
    std::uniform_real_distribution<double> d(lo, hi);
    Vec v(n);
    for (double& x : v) {
        x = d(rng);
    }
    return v;
}

/// Lossy synthetic three-bus network; mirrors data/cases/three_bus.json.
inline NetworkCase three_bus() {
    NetworkCase c;
    c.n_buses = 3;
    c.susceptance = {0.0, 2.0, 1.5, 2.0, 0.0, 1.8, 1.5, 1.8, 0.0};
    c.conductance = {0.0, 0.20, 0.15, 0.20, 0.0, 0.18, 0.15, 0.18, 0.0};
    c.inertia = {0.20, 0.25, 0.15};
    c.damping = {0.15, 0.20, 0.12};
    c.mech_power = {0.6, -0.2, -0.3};
    c.u_max = {2.0, 1.5, 1.5};
    c.u_min = {-2.0, -1.5, -1.5};
    return c;
}

/// Two buses, one line of susceptance b and conductance g.
inline NetworkCase two_bus(double b, double g, Vec p, Vec m = {1.0, 1.0}, Vec d = {0.0, 0.0}) {
    NetworkCase c;
    c.n_buses = 2;
    c.susceptance = {0.0, b, b, 0.0};
    c.conductance = {0.0, g, g, 0.0};
    c.inertia = std::move(m);
    c.damping = std::move(d);
    c.mech_power = std::move(p);
    c.u_max = {10.0, 10.0};
    c.u_min = {-10.0, -10.0};
    return c;
}

/// Single isolated bus.
inline NetworkCase one_bus(double m, double d, double p, double u_max = 100.0) {
    NetworkCase c;
    c.n_buses = 1;
    c.susceptance = {0.0};
    c.conductance = {0.0};
    c.inertia = {m};
    c.damping = {d};
    c.mech_power = {p};
    c.u_max = {u_max};
    c.u_min = {-u_max};
    return c;
}

} // namespace testing_support
