#pragma once

// =============================================================================
// Per-bus monotone stacked-ReLU controller and the linear droop baseline
// =============================================================================
//   u_i(ω) = clip( Σ_j q_ij ReLU(ω + b_ij) + Σ_j z_ij ReLU(−ω + c_ij), u̲_i, ū_i )
// with prefix sums of q nonnegative, prefix sums of z nonpositive,
// b_i1 = c_i1 = 0 and b, c non-increasing. Constraints hold by construction:
//   q_ij = softplus(raw_q_ij)                      (prefix sums are sums of softplus)
//   z_ij = −softplus(raw_z_ij)
//   b_ij = −Σ_{2≤k≤j} softplus(raw_b_ik)           (raw_b_i1 is unused)
//   c_ij = −Σ_{2≤k≤j} softplus(raw_c_ik)
// Parameter vectors are bus-major: entry (i, j) lives at i·m + j.
// =============================================================================

#include "lyapreg/error.hpp"
#include "lyapreg/gradcore/checkpoint.hpp"
#include "lyapreg/gradcore/tape.hpp"
#include "lyapreg/grid_model.hpp"
#include "lyapreg/sampling.hpp"

#include <algorithm>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace lyapreg {

struct ControllerParams {
    std::size_t n_buses = 0;
    std::size_t hidden = 20;  // m
    Vec raw_q;
    Vec raw_z;
    Vec raw_b;
    Vec raw_c;
    Vec u_min;
    Vec u_max;

    [[nodiscard]] std::size_t size() const { return n_buses * hidden; }

    /// raw_q, raw_z, raw_b, raw_c concatenated (the optimizer's view).
    [[nodiscard]] Vec flat() const {
        Vec out;
        out.reserve(4 * size());
        for (const Vec* v : {&raw_q, &raw_z, &raw_b, &raw_c}) {
            out.insert(out.end(), v->begin(), v->end());
        }
        return out;
    }

    void set_flat(std::span<const double> x) {
        if (x.size() != 4 * size()) {
            throw ValidationError("ControllerParams::set_flat: size mismatch");
        }
        std::size_t k = 0;
        for (Vec* v : {&raw_q, &raw_z, &raw_b, &raw_c}) {
            std::copy(x.begin() + static_cast<std::ptrdiff_t>(k), x.begin() + static_cast<std::ptrdiff_t>(k + size()),
                      v->begin());
            k += size();
        }
    }

    void validate() const {
        for (const auto& [v, name] : {std::pair{&raw_q, "raw_q"}, std::pair{&raw_z, "raw_z"},
                                      std::pair{&raw_b, "raw_b"}, std::pair{&raw_c, "raw_c"}}) {
            if (v->size() != size()) {
                throw ValidationError(std::string("controller: ") + name + " has " + std::to_string(v->size()) +
                                      " entries, expected " + std::to_string(size()));
            }
        }
        if (u_min.size() != n_buses || u_max.size() != n_buses) {
            throw ValidationError("controller: bounds do not match n_buses");
        }
    }
};

struct ControllerInit {
    double slope_per_unit = 0.05;  // initial q_ij, −z_ij
    double threshold_step = 0.1;   // initial spacing of the ReLU kinks, rad/s
    double jitter = 0.1;           // uniform noise on raw values
};

/// Near-linear monotone start: slopes grow by `slope_per_unit` at each of m
/// kinks spaced `threshold_step` apart on both sides of ω = 0.
inline ControllerParams initialize_controller(const NetworkCase& c, std::size_t hidden, std::uint64_t seed,
                                              ControllerInit init = {}) {
    if (hidden == 0) {
        throw ValidationError("controller: hidden units must be positive");
    }
    ControllerParams p;
    p.n_buses = c.n_buses;
    p.hidden = hidden;
    p.u_min = c.u_min;
    p.u_max = c.u_max;
    auto rng = make_rng(seed, streams::init_weights);
    std::uniform_real_distribution<double> noise(-init.jitter, init.jitter);
    const double raw_slope = grad::softplus_inverse(init.slope_per_unit);
    const double raw_step = grad::softplus_inverse(init.threshold_step);
    for (Vec* v : {&p.raw_q, &p.raw_z}) {
        v->resize(p.size());
        for (double& x : *v) {
            x = raw_slope + noise(rng);
        }
    }
    for (Vec* v : {&p.raw_b, &p.raw_c}) {
        v->resize(p.size());
        for (double& x : *v) {
            x = raw_step + noise(rng);
        }
    }
    return p;
}

/// Constrained weights, bus-major like the raw parameters.
struct StackedReluWeights {
    std::size_t n_buses = 0;
    std::size_t hidden = 0;
    Vec q;
    Vec z;
    Vec b;
    Vec c;
};

inline StackedReluWeights materialize(const ControllerParams& p) {
    p.validate();
    const std::size_t m = p.hidden;
    StackedReluWeights w{p.n_buses, m, Vec(p.size()), Vec(p.size()), Vec(p.size()), Vec(p.size())};
    for (std::size_t i = 0; i < p.n_buses; ++i) {
        double acc_b = 0.0;
        double acc_c = 0.0;
        for (std::size_t j = 0; j < m; ++j) {
            const std::size_t k = i * m + j;
            w.q[k] = grad::softplus(p.raw_q[k]);
            w.z[k] = -grad::softplus(p.raw_z[k]);
            if (j > 0) {
                acc_b += grad::softplus(p.raw_b[k]);
                acc_c += grad::softplus(p.raw_c[k]);
            }
            w.b[k] = -acc_b;
            w.c[k] = -acc_c;
        }
    }
    return w;
}

/// Unclipped stacked-ReLU output for one bus.
inline double stacked_relu(const StackedReluWeights& w, std::size_t bus, double omega) {
    double acc = 0.0;
    for (std::size_t j = 0; j < w.hidden; ++j) {
        const std::size_t k = bus * w.hidden + j;
        const double pos = omega + w.b[k];
        const double neg = -omega + w.c[k];
        const double t = w.q[k] * (pos > 0.0 ? pos : 0.0) + w.z[k] * (neg > 0.0 ? neg : 0.0);
        acc += t;
    }
    return acc;
}

inline double evaluate(const StackedReluWeights& w, std::size_t bus, double omega, double u_lo, double u_hi) {
    return std::clamp(stacked_relu(w, bus, omega), u_lo, u_hi);
}

/// Actions for every bus from local frequencies.
inline Vec evaluate(const StackedReluWeights& w, std::span<const double> omega, std::span<const double> u_lo,
                    std::span<const double> u_hi) {
    Vec u(omega.size());
    for (std::size_t i = 0; i < omega.size(); ++i) {
        u[i] = evaluate(w, i, omega[i], u_lo[i], u_hi[i]);
    }
    return u;
}

// =============================================================================
// Linear droop baseline
// =============================================================================

struct DroopParams {
    Vec coefficients;  // l_i ≥ 0

    void validate(std::size_t n) const {
        if (coefficients.size() != n) {
            throw ValidationError("droop: expected " + std::to_string(n) + " coefficients, got " +
                                  std::to_string(coefficients.size()));
        }
        for (std::size_t i = 0; i < n; ++i) {
            if (!(coefficients[i] >= 0.0)) {
                throw ValidationError("droop: l[" + std::to_string(i) + "] must be nonnegative");
            }
        }
    }
};

inline Vec droop_action(const DroopParams& d, const NetworkCase& c, std::span<const double> omega) {
    Vec u(omega.size());
    for (std::size_t i = 0; i < omega.size(); ++i) {
        u[i] = std::clamp(d.coefficients[i] * omega[i], c.u_min[i], c.u_max[i]);
    }
    return u;
}

/// Warm start from a droop law: the first unit on each side carries the
/// droop slope l_i, the remaining units start as in initialize_controller().
inline ControllerParams initialize_from_droop(const NetworkCase& c, const DroopParams& d, std::size_t hidden,
                                              std::uint64_t seed, ControllerInit init = {}) {
    d.validate(c.n_buses);
    ControllerParams p = initialize_controller(c, hidden, seed, init);
    for (std::size_t i = 0; i < c.n_buses; ++i) {
        const double raw = grad::softplus_inverse(std::max(d.coefficients[i], 1e-6));
        p.raw_q[i * hidden] = raw;
        p.raw_z[i * hidden] = raw;
    }
    return p;
}

// =============================================================================
// Expression-graph views used by the rollout
// =============================================================================

/// Stacked-ReLU controller on a tape. With `trainable`, the raw parameters are
/// named leaves "raw_q", "raw_z", "raw_b", "raw_c"; otherwise constants.
class StackedReluGraph {
public:
    StackedReluGraph(grad::Tape& tape, const ControllerParams& p, bool trainable) : tape_(&tape) {
        p.validate();
        const std::size_t n = p.n_buses;
        const std::size_t m = p.hidden;
        const std::size_t nm = p.size();
        auto leaf = [&](const char* name, const Vec& v) {
            return trainable ? tape.parameter(name, v) : tape.constant(v);
        };
        raw_q_ = leaf("raw_q", p.raw_q);
        raw_z_ = leaf("raw_z", p.raw_z);
        raw_b_ = leaf("raw_b", p.raw_b);
        raw_c_ = leaf("raw_c", p.raw_c);

        // Block lower-triangular sum excluding the first unit of each bus.
        Vec cumulative(nm * nm, 0.0);
        Vec expand(nm * n, 0.0);
        Vec expand_neg(nm * n, 0.0);
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t j = 0; j < m; ++j) {
                const std::size_t r = i * m + j;
                for (std::size_t k = 1; k <= j; ++k) {
                    cumulative[r * nm + i * m + k] = 1.0;
                }
                expand[r * n + i] = 1.0;
                expand_neg[r * n + i] = -1.0;
            }
        }
        const grad::Var cum = tape.matrix(cumulative, nm, nm);
        expand_ = tape.matrix(expand, nm, n);
        expand_neg_ = tape.matrix(expand_neg, nm, n);

        q_ = grad::softplus(raw_q_);
        z_ = -grad::softplus(raw_z_);
        b_ = -grad::affine(cum, grad::softplus(raw_b_));
        c_ = -grad::affine(cum, grad::softplus(raw_c_));
        lo_ = tape.constant(p.u_min);
        hi_ = tape.constant(p.u_max);
    }

    grad::Var action(grad::Var omega) const {
        const grad::Var pos = grad::relu(grad::affine(expand_, omega, b_));
        const grad::Var neg = grad::relu(grad::affine(expand_neg_, omega, c_));
        const grad::Var per_unit = q_ * pos + z_ * neg;
        return grad::clip(grad::affine_transposed(expand_, per_unit), lo_, hi_);
    }

    [[nodiscard]] std::vector<grad::Var> raw_leaves() const { return {raw_q_, raw_z_, raw_b_, raw_c_}; }

    /// Gradient w.r.t. the flat raw vector after tape.propagate().
    [[nodiscard]] Vec flat_gradient() const {
        Vec g;
        for (const grad::Var& v : raw_leaves()) {
            const auto a = tape_->adjoint(v);
            g.insert(g.end(), a.begin(), a.end());
        }
        return g;
    }

private:
    grad::Tape* tape_;
    grad::Var raw_q_, raw_z_, raw_b_, raw_c_;
    grad::Var expand_, expand_neg_;
    grad::Var q_, z_, b_, c_;
    grad::Var lo_, hi_;
};

/// u = clip(l ⊙ ω). With `trainable`, l is the named leaf "droop".
class DroopGraph {
public:
    DroopGraph(grad::Tape& tape, const DroopParams& d, const NetworkCase& c, bool trainable) : tape_(&tape) {
        d.validate(c.n_buses);
        gain_ = trainable ? tape.parameter("droop", d.coefficients) : tape.constant(d.coefficients);
        lo_ = tape.constant(c.u_min);
        hi_ = tape.constant(c.u_max);
    }

    grad::Var action(grad::Var omega) const { return grad::clip(gain_ * omega, lo_, hi_); }

    [[nodiscard]] Vec flat_gradient() const {
        const auto a = tape_->adjoint(gain_);
        return {a.begin(), a.end()};
    }

private:
    grad::Tape* tape_;
    grad::Var gain_, lo_, hi_;
};

// =============================================================================
// Serialization
// =============================================================================

inline grad::Checkpoint controller_checkpoint(const ControllerParams& p, std::uint64_t seed, std::size_t episode) {
    grad::Checkpoint ck;
    ck.arch = {{"type", "stacked_relu"}, {"n_buses", p.n_buses}, {"m", p.hidden}};
    ck.parameters = {{"raw_q", p.raw_q}, {"raw_z", p.raw_z}, {"raw_b", p.raw_b}, {"raw_c", p.raw_c}};
    ck.rng_seed = seed;
    ck.episode = episode;
    ck.extra["bounds"] = {{"u_min", p.u_min}, {"u_max", p.u_max}};
    return ck;
}

inline ControllerParams controller_from_checkpoint(const grad::Checkpoint& ck) {
    if (ck.arch.value("type", "") != "stacked_relu") {
        throw ValidationError("checkpoint: not a stacked_relu controller");
    }
    ControllerParams p;
    p.n_buses = ck.arch.at("n_buses").get<std::size_t>();
    p.hidden = ck.arch.at("m").get<std::size_t>();
    p.raw_q = ck.at("raw_q");
    p.raw_z = ck.at("raw_z");
    p.raw_b = ck.at("raw_b");
    p.raw_c = ck.at("raw_c");
    if (!ck.extra.contains("bounds")) {
        throw ValidationError("checkpoint: controller bounds missing");
    }
    p.u_min = ck.extra["bounds"].at("u_min").get<Vec>();
    p.u_max = ck.extra["bounds"].at("u_max").get<Vec>();
    p.validate();
    return p;
}

inline Json droop_to_json(const DroopParams& d, double cost) {
    return Json{{"version", kSchemaVersion}, {"l", d.coefficients}, {"cost", cost}};
}

inline DroopParams droop_from_json(const Json& j, const std::string& where = "") {
    check_version(j, where);
    if (!j.contains("l") || !j["l"].is_array()) {
        throw ValidationError(where + "l: expected an array");
    }
    return DroopParams{j["l"].get<Vec>()};
}

} // namespace lyapreg
