#pragma once

// =============================================================================
// Kron-reduced generator network and its swing dynamics
// =============================================================================
// Internal conventions: δ in rad, ω in rad/s, powers in p.u. Case files may
// declare ω in Hz, in which case M and D are converted on load (see
// case_file.hpp). Line flows are evaluated through a pair-incidence operator
// shared with the expression-graph path so the two agree bit-for-bit.
// =============================================================================

#include "lyapreg/error.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstddef>
#include <numbers>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace lyapreg {

using Vec = std::vector<double>;

enum class OmegaUnit { rad_s, hz };

/// Kron-reduced N-bus network. Matrices are row-major N×N.
struct NetworkCase {
    std::size_t n_buses = 0;
    Vec susceptance;  // B, symmetric, zero diagonal, nonneg
    Vec conductance;  // G, symmetric, zero diagonal, nonneg
    Vec inertia;      // M > 0, p.u.·s² (rad convention)
    Vec damping;      // D ≥ 0, p.u.·s (rad convention)
    Vec mech_power;   // P_m
    Vec u_max;        // ū ≥ 0
    Vec u_min;        // u̲ ≤ 0
    /// Unit used by the source file for ω-valued quantities (M, D, sampling boxes).
    OmegaUnit omega_unit = OmegaUnit::rad_s;

    [[nodiscard]] double B(std::size_t i, std::size_t j) const { return susceptance[i * n_buses + j]; }
    [[nodiscard]] double G(std::size_t i, std::size_t j) const { return conductance[i * n_buses + j]; }

    /// Multiplier taking an ω value in the file's unit to rad/s.
    [[nodiscard]] double omega_scale() const {
        return omega_unit == OmegaUnit::hz ? 2.0 * std::numbers::pi : 1.0;
    }

    /// Throws ValidationError naming the first offending entry, e.g. "M[3]".
    void validate() const {
        const std::size_t n = n_buses;
        if (n == 0) {
            throw ValidationError("n_buses: must be positive");
        }
        auto check_len = [n](const Vec& v, const char* name, std::size_t expected) {
            if (v.size() != expected) {
                throw ValidationError(std::string(name) + ": expected " + std::to_string(expected) +
                                      " entries, got " + std::to_string(v.size()));
            }
        };
        check_len(susceptance, "B", n * n);
        check_len(conductance, "G", n * n);
        check_len(inertia, "M", n);
        check_len(damping, "D", n);
        check_len(mech_power, "P_m", n);
        check_len(u_max, "u_max", n);
        check_len(u_min, "u_min", n);

        auto at = [](const char* name, std::size_t i) { return std::string(name) + "[" + std::to_string(i) + "]"; };
        auto at2 = [](const char* name, std::size_t i, std::size_t j) {
            return std::string(name) + "[" + std::to_string(i) + "][" + std::to_string(j) + "]";
        };
        for (const auto& [mat, name] : {std::pair{&susceptance, "B"}, std::pair{&conductance, "G"}}) {
            for (std::size_t i = 0; i < n; ++i) {
                for (std::size_t j = 0; j < n; ++j) {
                    const double x = (*mat)[i * n + j];
                    if (!std::isfinite(x)) {
                        throw ValidationError(at2(name, i, j) + ": not finite");
                    }
                    if (i == j && x != 0.0) {
                        throw ValidationError(at2(name, i, j) + ": diagonal must be zero");
                    }
                    if (x < 0.0) {
                        throw ValidationError(at2(name, i, j) + ": must be nonnegative");
                    }
                    const double y = (*mat)[j * n + i];
                    if (std::abs(x - y) > 1e-9 * std::max(1.0, std::abs(x))) {
                        throw ValidationError(at2(name, i, j) + ": matrix not symmetric");
                    }
                }
            }
        }
        for (std::size_t i = 0; i < n; ++i) {
            for (const auto& [v, name] : {std::pair{&inertia, "M"}, std::pair{&damping, "D"},
                                          std::pair{&mech_power, "P_m"}, std::pair{&u_max, "u_max"},
                                          std::pair{&u_min, "u_min"}}) {
                if (!std::isfinite((*v)[i])) {
                    throw ValidationError(at(name, i) + ": not finite");
                }
            }
            if (!(inertia[i] > 0.0)) {
                throw ValidationError(at("M", i) + ": must be positive");
            }
            if (damping[i] < 0.0) {
                throw ValidationError(at("D", i) + ": must be nonnegative");
            }
            if (u_max[i] < 0.0) {
                throw ValidationError(at("u_max", i) + ": must be nonnegative");
            }
            if (u_min[i] > 0.0) {
                throw ValidationError(at("u_min", i) + ": must be nonpositive");
            }
        }
    }
};

struct SystemState {
    Vec delta;  // rad
    Vec omega;  // rad/s

    [[nodiscard]] std::size_t size() const { return delta.size(); }

    static SystemState zeros(std::size_t n) { return {Vec(n, 0.0), Vec(n, 0.0)}; }
};

inline void validate_state(const NetworkCase& c, const SystemState& s) {
    if (s.delta.size() != c.n_buses || s.omega.size() != c.n_buses) {
        throw ValidationError("state: dimension " + std::to_string(s.delta.size()) + "/" +
                              std::to_string(s.omega.size()) + " does not match n_buses " +
                              std::to_string(c.n_buses));
    }
    for (std::size_t i = 0; i < c.n_buses; ++i) {
        if (!std::isfinite(s.delta[i]) || !std::isfinite(s.omega[i])) {
            throw ValidationError("state: non-finite entry at bus " + std::to_string(i));
        }
    }
}

struct Equilibrium {
    SystemState state;     // ω identically zero, δ[0] = 0
    Vec slack_adjustment;  // uniform correction added to P_m
    double residual_norm = 0.0;
    int iterations = 0;
};

/// Copy of `c` with the equilibrium's distributed-slack correction applied to P_m.
inline NetworkCase with_slack(const NetworkCase& c, const Equilibrium& eq) {
    NetworkCase out = c;
    for (std::size_t i = 0; i < c.n_buses; ++i) {
        out.mech_power[i] += eq.slack_adjustment[i];
    }
    return out;
}

// =============================================================================
// Line-flow operator
// =============================================================================

/// flows_i = Σ_j B_ij sin(δ_i − δ_j) + Σ_j G_ij cos(δ_i − δ_j), factored over
/// the line pairs p = (i, j), i < j, with B_ij or G_ij nonzero:
///   d = A·δ,  flows = SB·sin(d) + SG·cos(d)
/// A is P×N incidence (+1 at i, −1 at j); SB is N×P with ±B_p; SG is N×P with G_p.
struct FlowOperator {
    std::size_t n = 0;
    std::size_t n_pairs = 0;
    std::vector<std::pair<std::size_t, std::size_t>> pairs;
    Vec incidence;      // P×N
    Vec sin_weights;    // N×P
    Vec cos_weights;    // N×P

    explicit FlowOperator(const NetworkCase& c) : n(c.n_buses) {
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t j = i + 1; j < n; ++j) {
                if (c.B(i, j) != 0.0 || c.G(i, j) != 0.0) {
                    pairs.emplace_back(i, j);
                }
            }
        }
        n_pairs = pairs.size();
        incidence.assign(n_pairs * n, 0.0);
        sin_weights.assign(n * n_pairs, 0.0);
        cos_weights.assign(n * n_pairs, 0.0);
        for (std::size_t p = 0; p < n_pairs; ++p) {
            const auto [i, j] = pairs[p];
            incidence[p * n + i] = 1.0;
            incidence[p * n + j] = -1.0;
            sin_weights[i * n_pairs + p] = c.B(i, j);
            sin_weights[j * n_pairs + p] = -c.B(i, j);
            cos_weights[i * n_pairs + p] = c.G(i, j);
            cos_weights[j * n_pairs + p] = c.G(i, j);
        }
    }
};

namespace detail {

/// Row-major y = W·x with the same accumulation order as the graph's affine op.
inline void matvec(std::span<const double> w, std::size_t rows, std::size_t cols, std::span<const double> x,
                   std::span<double> y) {
    for (std::size_t r = 0; r < rows; ++r) {
        double acc = 0.0;
        const double* row = w.data() + r * cols;
        for (std::size_t c = 0; c < cols; ++c) {
            acc += row[c] * x[c];
        }
        y[r] = acc;
    }
}

} // namespace detail

/// Sine (susceptance) and cosine (conductance) parts of the line flows.
inline std::pair<Vec, Vec> line_flows(const FlowOperator& op, std::span<const double> delta) {
    Vec flow_b(op.n, 0.0);
    Vec flow_g(op.n, 0.0);
    if (op.n_pairs == 0) {
        return {flow_b, flow_g};
    }
    Vec d(op.n_pairs);
    detail::matvec(op.incidence, op.n_pairs, op.n, delta, d);
    Vec s(op.n_pairs);
    Vec co(op.n_pairs);
    for (std::size_t p = 0; p < op.n_pairs; ++p) {
        s[p] = std::sin(d[p]);
        co[p] = std::cos(d[p]);
    }
    detail::matvec(op.sin_weights, op.n, op.n_pairs, s, flow_b);
    detail::matvec(op.cos_weights, op.n, op.n_pairs, co, flow_g);
    return {flow_b, flow_g};
}

// =============================================================================
// Dynamics
// =============================================================================

struct StateDerivative {
    Vec delta_dot;
    Vec omega_dot;
};

/// Swing equation:  δ̇ = ω,
///   M_i ω̇_i = P_m,i − D_i ω_i − u_i − Σ_j B_ij sin(δ_i−δ_j) − Σ_j G_ij cos(δ_i−δ_j).
inline StateDerivative swing_rhs(const NetworkCase& c, const FlowOperator& op, const SystemState& s,
                                 std::span<const double> u) {
    validate_state(c, s);
    if (u.size() != c.n_buses) {
        throw ValidationError("swing_rhs: action dimension " + std::to_string(u.size()) +
                              " does not match n_buses " + std::to_string(c.n_buses));
    }
    for (std::size_t i = 0; i < u.size(); ++i) {
        if (!std::isfinite(u[i])) {
            throw ValidationError("swing_rhs: non-finite action at bus " + std::to_string(i));
        }
    }
    const auto [flow_b, flow_g] = line_flows(op, s.delta);
    StateDerivative out{s.omega, Vec(c.n_buses)};
    for (std::size_t i = 0; i < c.n_buses; ++i) {
        double acc = c.mech_power[i] - c.damping[i] * s.omega[i];
        acc = acc - u[i];
        if (op.n_pairs != 0) {
            acc = acc - flow_b[i];
            acc = acc - flow_g[i];
        }
        out.omega_dot[i] = acc / c.inertia[i];
    }
    return out;
}

inline StateDerivative swing_rhs(const NetworkCase& c, const SystemState& s, std::span<const double> u) {
    return swing_rhs(c, FlowOperator(c), s, u);
}

/// Forward Euler: δ ← δ + dt·ω, ω ← ω + dt·ω̇.
inline SystemState euler_step(const NetworkCase& c, const FlowOperator& op, const SystemState& s,
                              std::span<const double> u, double dt) {
    if (!(dt > 0.0)) {
        throw ValidationError("euler_step: dt must be positive");
    }
    const StateDerivative f = swing_rhs(c, op, s, u);
    SystemState next = s;
    for (std::size_t i = 0; i < c.n_buses; ++i) {
        next.delta[i] = s.delta[i] + dt * f.delta_dot[i];
        next.omega[i] = s.omega[i] + dt * f.omega_dot[i];
    }
    return next;
}

inline SystemState euler_step(const NetworkCase& c, const SystemState& s, std::span<const double> u, double dt) {
    return euler_step(c, FlowOperator(c), s, u, dt);
}

/// Classical RK4 with the action re-evaluated from ω at each stage.
/// Only for simulation fidelity checks; training differentiates the Euler map.
template <typename Policy>
SystemState rk4_step(const NetworkCase& c, const FlowOperator& op, const SystemState& s, Policy&& policy,
                     double dt) {
    if (!(dt > 0.0)) {
        throw ValidationError("rk4_step: dt must be positive");
    }
    const std::size_t n = c.n_buses;
    auto eval = [&](const SystemState& x) { return swing_rhs(c, op, x, policy(x.omega)); };
    auto shifted = [&](const StateDerivative& k, double h) {
        SystemState x = s;
        for (std::size_t i = 0; i < n; ++i) {
            x.delta[i] += h * k.delta_dot[i];
            x.omega[i] += h * k.omega_dot[i];
        }
        return x;
    };
    const StateDerivative k1 = eval(s);
    const StateDerivative k2 = eval(shifted(k1, 0.5 * dt));
    const StateDerivative k3 = eval(shifted(k2, 0.5 * dt));
    const StateDerivative k4 = eval(shifted(k3, dt));
    SystemState next = s;
    for (std::size_t i = 0; i < n; ++i) {
        next.delta[i] += dt / 6.0 *
                         (k1.delta_dot[i] + 2.0 * k2.delta_dot[i] + 2.0 * k3.delta_dot[i] + k4.delta_dot[i]);
        next.omega[i] += dt / 6.0 *
                         (k1.omega_dot[i] + 2.0 * k2.omega_dot[i] + 2.0 * k3.omega_dot[i] + k4.omega_dot[i]);
    }
    return next;
}

/// E = Σ ½M ω² − Σ_{i<j} B_ij cos(δ_i−δ_j) − Σ P_m,i δ_i.
/// Conserved by the continuous dynamics when G = 0, D = 0, u = 0.
inline double lossless_energy(const NetworkCase& c, const SystemState& s) {
    double kinetic = 0.0;
    double potential = 0.0;
    for (std::size_t i = 0; i < c.n_buses; ++i) {
        kinetic += 0.5 * c.inertia[i] * s.omega[i] * s.omega[i];
        potential -= c.mech_power[i] * s.delta[i];
        for (std::size_t j = i + 1; j < c.n_buses; ++j) {
            potential -= c.B(i, j) * std::cos(s.delta[i] - s.delta[j]);
        }
    }
    return kinetic + potential;
}

// =============================================================================
// Equilibrium (distributed slack, δ_1 pinned to 0)
// =============================================================================

struct EquilibriumOptions {
    double tol = 1e-10;
    int max_iter = 50;
};

inline Equilibrium solve_equilibrium(const NetworkCase& c, EquilibriumOptions opts = {}) {
    c.validate();
    if (!(opts.tol > 0.0)) {
        throw ValidationError("solve_equilibrium: tol must be positive");
    }
    const std::size_t n = c.n_buses;
    const FlowOperator op(c);
    Vec delta(n, 0.0);

    // r = F − mean(F), F = P_m − flows(δ). Returns (r, mean(F)).
    auto mismatch = [&](const Vec& d) {
        const auto [fb, fg] = line_flows(op, d);
        Vec f(n);
        double mean = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            f[i] = c.mech_power[i] - fb[i] - fg[i];
            mean += f[i];
        }
        mean /= static_cast<double>(n);
        for (double& x : f) {
            x -= mean;
        }
        return std::pair{f, mean};
    };
    auto max_abs = [](const Vec& v) {
        double m = 0.0;
        for (double x : v) {
            m = std::max(m, std::abs(x));
        }
        return m;
    };

    auto [r, slack] = mismatch(delta);
    double res = max_abs(r);
    int iter = 0;
    while (res > opts.tol) {
        if (iter >= opts.max_iter) {
            throw NumericError("solve_equilibrium: no convergence after " + std::to_string(iter) +
                               " iterations, residual " + std::to_string(res));
        }
        ++iter;
        // ∂F_i/∂δ_k, then subtract the column mean for the slack projection.
        Eigen::MatrixXd jac = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(n));
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t j = 0; j < n; ++j) {
                if (i == j) {
                    continue;
                }
                const double th = delta[i] - delta[j];
                const double dflow = c.B(i, j) * std::cos(th) - c.G(i, j) * std::sin(th);
                jac(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(i)) -= dflow;
                jac(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) += dflow;
            }
        }
        const Eigen::RowVectorXd col_mean = jac.colwise().mean();
        jac.rowwise() -= col_mean;
        const auto m = static_cast<Eigen::Index>(n - 1);
        const Eigen::MatrixXd reduced = jac.bottomRightCorner(m, m);
        Eigen::VectorXd rhs(m);
        for (Eigen::Index k = 0; k < m; ++k) {
            rhs(k) = -r[static_cast<std::size_t>(k) + 1];
        }
        Eigen::FullPivLU<Eigen::MatrixXd> lu(reduced);
        if (!lu.isInvertible()) {
            throw NumericError("solve_equilibrium: singular Jacobian at iteration " + std::to_string(iter));
        }
        const Eigen::VectorXd step = lu.solve(rhs);

        double alpha = 1.0;
        Vec trial(n);
        for (;;) {
            trial[0] = 0.0;
            for (std::size_t k = 1; k < n; ++k) {
                trial[k] = delta[k] + alpha * step(static_cast<Eigen::Index>(k) - 1);
            }
            auto [tr, ts] = mismatch(trial);
            const double tres = max_abs(tr);
            if (tres < res || alpha < 1e-6) {
                delta = trial;
                r = std::move(tr);
                slack = ts;
                res = tres;
                break;
            }
            alpha *= 0.5;
        }
    }

    Equilibrium eq;
    eq.state = {delta, Vec(n, 0.0)};
    eq.slack_adjustment.assign(n, -slack);
    eq.iterations = iter;
    // Residual as seen by the dynamics themselves.
    const NetworkCase adjusted = with_slack(c, eq);
    const StateDerivative f = swing_rhs(adjusted, op, eq.state, Vec(n, 0.0));
    eq.residual_norm = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        eq.residual_norm = std::max(eq.residual_norm, std::abs(f.omega_dot[i] * c.inertia[i]));
    }
    if (eq.residual_norm > opts.tol) {
        throw NumericError("solve_equilibrium: residual " + std::to_string(eq.residual_norm) +
                           " above tolerance after slack adjustment");
    }
    return eq;
}

/// A case balanced by its equilibrium's slack correction, with the flow
/// operator precomputed. Every downstream module works on this.
struct PowerSystem {
    NetworkCase network;  // slack-adjusted; `equilibrium` is an exact rest point
    FlowOperator flows;
    Equilibrium equilibrium;

    PowerSystem(const NetworkCase& raw, Equilibrium eq)
        : network(with_slack(raw, eq)), flows(network), equilibrium(std::move(eq)) {}

    static PowerSystem from_case(const NetworkCase& raw, EquilibriumOptions opts = {}) {
        return PowerSystem(raw, solve_equilibrium(raw, opts));
    }

    [[nodiscard]] std::size_t n() const { return network.n_buses; }
    [[nodiscard]] const SystemState& rest() const { return equilibrium.state; }
};

// =============================================================================
// Kron reduction
// =============================================================================

/// Full bus admittance matrix, generator buses first, then load buses.
struct AdmittanceMatrix {
    std::size_t n_generators = 0;
    std::size_t n_loads = 0;
    std::vector<std::complex<double>> y;  // (N+L)×(N+L), row-major

    [[nodiscard]] std::size_t dim() const { return n_generators + n_loads; }
};

/// Y_red = Y_gg − Y_gl · Y_ll⁻¹ · Y_lg (complex N×N, row-major).
inline std::vector<std::complex<double>> kron_reduce_admittance(const AdmittanceMatrix& a) {
    const std::size_t total = a.dim();
    if (a.n_generators == 0) {
        throw ValidationError("kron_reduce: at least one generator bus required");
    }
    if (a.y.size() != total * total) {
        throw ValidationError("kron_reduce: admittance has " + std::to_string(a.y.size()) + " entries, expected " +
                              std::to_string(total * total));
    }
    for (std::size_t i = 0; i < total; ++i) {
        for (std::size_t j = 0; j < total; ++j) {
            const auto x = a.y[i * total + j];
            if (!std::isfinite(x.real()) || !std::isfinite(x.imag())) {
                throw ValidationError("Y[" + std::to_string(i) + "][" + std::to_string(j) + "]: not finite");
            }
            if (std::abs(x - a.y[j * total + i]) > 1e-9 * std::max(1.0, std::abs(x))) {
                throw ValidationError("Y[" + std::to_string(i) + "][" + std::to_string(j) +
                                      "]: admittance matrix not symmetric");
            }
        }
    }
    using Mat = Eigen::Matrix<std::complex<double>, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
    const auto ti = static_cast<Eigen::Index>(total);
    const auto ng = static_cast<Eigen::Index>(a.n_generators);
    const auto nl = static_cast<Eigen::Index>(a.n_loads);
    const Eigen::Map<const Mat> y(a.y.data(), ti, ti);
    Mat red = y.topLeftCorner(ng, ng);
    if (nl > 0) {
        const Mat yll = y.bottomRightCorner(nl, nl);
        Eigen::FullPivLU<Mat> lu(yll);
        if (!lu.isInvertible()) {
            throw NumericError("kron_reduce: load-load block Y_ll (" + std::to_string(a.n_loads) + "x" +
                               std::to_string(a.n_loads) + ") is singular");
        }
        const Mat x = lu.solve(Mat(y.bottomLeftCorner(nl, ng)));
        red -= y.topRightCorner(ng, nl) * x;
    }
    return {red.data(), red.data() + red.size()};
}

struct LineMatrices {
    Vec susceptance;
    Vec conductance;
};

/// Reduced network as line matrices: off-diagonal magnitudes of Im/Re of
/// Y_red (nonneg line susceptance and conductance), zero diagonal,
/// symmetrised to remove round-off.
inline LineMatrices kron_reduce(const AdmittanceMatrix& a) {
    const auto red = kron_reduce_admittance(a);
    const std::size_t n = a.n_generators;
    LineMatrices out{Vec(n * n, 0.0), Vec(n * n, 0.0)};
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            if (i == j) {
                continue;
            }
            const auto avg = 0.5 * (red[i * n + j] + red[j * n + i]);
            out.susceptance[i * n + j] = std::abs(avg.imag());
            out.conductance[i * n + j] = std::abs(avg.real());
        }
    }
    return out;
}

} // namespace lyapreg
