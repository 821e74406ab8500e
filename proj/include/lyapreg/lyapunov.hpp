#pragma once

// =============================================================================
// Neural Lyapunov function V(δ, ω) and its training
// =============================================================================
// One hidden ELU layer:  V(x) = w2 · elu(W1 x + b1) + b2,  x = (δ, ω).
// The input gradient has the closed form  ∇V = W1ᵀ (w2 ⊙ elu'(W1 x + b1)),
// built from first-order graph ops so the Lie derivative stays differentiable
// in the weights without second-order autodiff.
// =============================================================================

#include "lyapreg/controller.hpp"
#include "lyapreg/error.hpp"
#include "lyapreg/gradcore/adam.hpp"
#include "lyapreg/gradcore/checkpoint.hpp"
#include "lyapreg/gradcore/tape.hpp"
#include "lyapreg/grid_model.hpp"
#include "lyapreg/sampling.hpp"

#include <cmath>
#include <cstdint>
#include <deque>
#include <functional>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

namespace lyapreg {

struct LyapunovNet {
    std::size_t input_dim = 0;  // 2N
    std::size_t hidden = 50;
    Vec w1;  // hidden × input_dim, row-major
    Vec b1;  // hidden
    Vec w2;  // hidden
    double b2 = 0.0;

    [[nodiscard]] std::size_t n_buses() const { return input_dim / 2; }
    [[nodiscard]] std::size_t parameter_count() const { return w1.size() + b1.size() + w2.size() + 1; }

    /// W1, b1, w2, b2 concatenated.
    [[nodiscard]] Vec flat() const {
        Vec out;
        out.reserve(parameter_count());
        out.insert(out.end(), w1.begin(), w1.end());
        out.insert(out.end(), b1.begin(), b1.end());
        out.insert(out.end(), w2.begin(), w2.end());
        out.push_back(b2);
        return out;
    }

    void set_flat(std::span<const double> x) {
        if (x.size() != parameter_count()) {
            throw ValidationError("LyapunovNet::set_flat: size mismatch");
        }
        auto it = x.begin();
        for (Vec* v : {&w1, &b1, &w2}) {
            std::copy(it, it + static_cast<std::ptrdiff_t>(v->size()), v->begin());
            it += static_cast<std::ptrdiff_t>(v->size());
        }
        b2 = *it;
    }

    void validate() const {
        if (input_dim == 0 || input_dim % 2 != 0 || hidden == 0) {
            throw ValidationError("LyapunovNet: bad architecture");
        }
        if (w1.size() != hidden * input_dim || b1.size() != hidden || w2.size() != hidden) {
            throw ValidationError("LyapunovNet: weight shapes do not match architecture");
        }
    }
};

/// Uniform in ±1/√fan_in per layer.
inline LyapunovNet initialize_lyapunov(std::size_t n_buses, std::size_t hidden, std::uint64_t seed) {
    LyapunovNet net;
    net.input_dim = 2 * n_buses;
    net.hidden = hidden;
    auto rng = make_rng(seed, streams::init_weights);
    const double a1 = 1.0 / std::sqrt(static_cast<double>(net.input_dim));
    const double a2 = 1.0 / std::sqrt(static_cast<double>(hidden));
    std::uniform_real_distribution<double> u1(-a1, a1);
    std::uniform_real_distribution<double> u2(-a2, a2);
    net.w1.resize(hidden * net.input_dim);
    net.b1.resize(hidden);
    net.w2.resize(hidden);
    for (double& x : net.w1) {
        x = u1(rng);
    }
    for (double& x : net.b1) {
        x = u1(rng);
    }
    for (double& x : net.w2) {
        x = u2(rng);
    }
    net.b2 = u2(rng);
    return net;
}

struct InputGradient {
    Vec d_delta;
    Vec d_omega;
};

struct LyapunovEval {
    double value = 0.0;
    InputGradient gradient;
};

/// Value and closed-form input gradient; same operation order as the graph path.
inline LyapunovEval evaluate(const LyapunovNet& net, const SystemState& s) {
    const std::size_t n = net.n_buses();
    if (s.delta.size() != n || s.omega.size() != n) {
        throw ValidationError("LyapunovNet: state dimension does not match network input");
    }
    const std::size_t d = net.input_dim;
    Vec x(d);
    std::copy(s.delta.begin(), s.delta.end(), x.begin());
    std::copy(s.omega.begin(), s.omega.end(), x.begin() + static_cast<std::ptrdiff_t>(n));

    Vec pre(net.hidden);
    for (std::size_t r = 0; r < net.hidden; ++r) {
        double acc = 0.0;
        for (std::size_t c = 0; c < d; ++c) {
            acc += net.w1[r * d + c] * x[c];
        }
        pre[r] = acc + net.b1[r];
    }
    double v = 0.0;
    Vec gh(net.hidden);
    for (std::size_t r = 0; r < net.hidden; ++r) {
        v += net.w2[r] * grad::elu(pre[r]);
        const double slope = std::exp(-(-pre[r] > 0.0 ? -pre[r] : 0.0));
        gh[r] = net.w2[r] * slope;
    }
    Vec g(d, 0.0);
    for (std::size_t r = 0; r < net.hidden; ++r) {
        for (std::size_t c = 0; c < d; ++c) {
            g[c] += net.w1[r * d + c] * gh[r];
        }
    }
    LyapunovEval out;
    out.value = v + net.b2;
    out.gradient.d_delta.assign(g.begin(), g.begin() + static_cast<std::ptrdiff_t>(n));
    out.gradient.d_omega.assign(g.begin() + static_cast<std::ptrdiff_t>(n), g.end());
    return out;
}

inline double value(const LyapunovNet& net, const SystemState& s) { return evaluate(net, s).value; }

inline InputGradient input_gradient(const LyapunovNet& net, const SystemState& s) {
    return evaluate(net, s).gradient;
}

/// ∇_f V = Σ_i ∂V/∂δ_i ω_i + ∂V/∂ω_i ω̇_i
inline double lie_derivative(const InputGradient& g, std::span<const double> omega, std::span<const double> omega_dot) {
    double a = 0.0;
    double b = 0.0;
    for (std::size_t i = 0; i < omega.size(); ++i) {
        a += g.d_delta[i] * omega[i];
    }
    for (std::size_t i = 0; i < omega.size(); ++i) {
        b += g.d_omega[i] * omega_dot[i];
    }
    return a + b;
}

inline double lie_derivative(const LyapunovNet& net, const PowerSystem& sys, const SystemState& s,
                             std::span<const double> u) {
    const StateDerivative f = swing_rhs(sys.network, sys.flows, s, u);
    return lie_derivative(input_gradient(net, s), s.omega, f.omega_dot);
}

// =============================================================================
// Graph view
// =============================================================================

/// The network on a tape: weights as named parameters ("W1", "b1", "w2",
/// "b2") when trainable, constants when frozen.
class LyapunovGraph {
public:
    struct Node {
        grad::Var value;
        grad::Var grad_delta;
        grad::Var grad_omega;
    };

    LyapunovGraph(grad::Tape& tape, const LyapunovNet& net, bool trainable) : tape_(&tape), n_(net.n_buses()) {
        net.validate();
        if (trainable) {
            w1_ = tape.parameter("W1", net.w1, net.hidden, net.input_dim);
            b1_ = tape.parameter("b1", net.b1);
            w2_ = tape.parameter("w2", net.w2);
            b2_ = tape.parameter("b2", std::span<const double>(&net.b2, 1));
        } else {
            w1_ = tape.matrix(net.w1, net.hidden, net.input_dim);
            b1_ = tape.constant(net.b1);
            w2_ = tape.constant(net.w2);
            b2_ = tape.constant(net.b2);
        }
    }

    [[nodiscard]] Node evaluate(grad::Var x) const {
        const grad::Var pre = grad::affine(w1_, x, b1_);
        const grad::Var v = grad::dot(w2_, grad::elu(pre)) + b2_;
        const grad::Var g = grad::affine_transposed(w1_, w2_ * grad::elu_derivative(pre));
        return {v, grad::slice(g, 0, n_), grad::slice(g, n_, n_)};
    }

    [[nodiscard]] Node evaluate(grad::Var delta, grad::Var omega) const {
        const grad::Var parts[] = {delta, omega};
        return evaluate(tape_->concat(parts));
    }

    [[nodiscard]] Node evaluate(const SystemState& s) const {
        Vec x = s.delta;
        x.insert(x.end(), s.omega.begin(), s.omega.end());
        return evaluate(tape_->constant(x));
    }

    static grad::Var lie_derivative(const Node& node, grad::Var omega, grad::Var omega_dot) {
        return grad::dot(node.grad_delta, omega) + grad::dot(node.grad_omega, omega_dot);
    }

    /// Gradient w.r.t. LyapunovNet::flat() after tape.propagate().
    [[nodiscard]] Vec flat_gradient() const {
        Vec g;
        for (const grad::Var& v : {w1_, b1_, w2_, b2_}) {
            const auto a = tape_->adjoint(v);
            g.insert(g.end(), a.begin(), a.end());
        }
        return g;
    }

private:
    grad::Tape* tape_;
    std::size_t n_;
    grad::Var w1_, b1_, w2_, b2_;
};

// =============================================================================
// Loss terms
// =============================================================================

/// One batch sample with its vector field already evaluated (droop fixed).
struct LieSample {
    SystemState state;
    Vec omega_dot;
    double distance = 0.0;  // ‖(δ, ω) − (δ*, ω*)‖₂
};

inline double state_distance(const SystemState& a, const SystemState& b) {
    double acc = 0.0;
    for (std::size_t i = 0; i < a.delta.size(); ++i) {
        acc += (a.delta[i] - b.delta[i]) * (a.delta[i] - b.delta[i]);
    }
    for (std::size_t i = 0; i < a.omega.size(); ++i) {
        acc += (a.omega[i] - b.omega[i]) * (a.omega[i] - b.omega[i]);
    }
    return std::sqrt(acc);
}

inline LieSample make_sample(const PowerSystem& sys, const DroopParams& droop, const SystemState& s) {
    const Vec u = droop_action(droop, sys.network, s.omega);
    const StateDerivative f = swing_rhs(sys.network, sys.flows, s, u);
    return {s, f.omega_dot, state_distance(s, sys.rest())};
}

/// Graph nodes for a batch: per-sample V and Lie derivative plus the
/// equilibrium's V and Lie derivative.
struct LyapunovBatchGraph {
    grad::Var v_eq;
    grad::Var lie_eq;
    std::vector<grad::Var> values;
    std::vector<grad::Var> lies;
};

inline LyapunovBatchGraph build_batch(grad::Tape& tape, const LyapunovGraph& g, const PowerSystem& sys,
                                      const DroopParams& droop, std::span<const LieSample> batch) {
    LyapunovBatchGraph out;
    const LieSample eq = make_sample(sys, droop, sys.rest());
    const auto node_eq = g.evaluate(eq.state);
    out.v_eq = node_eq.value;
    out.lie_eq = LyapunovGraph::lie_derivative(node_eq, tape.constant(eq.state.omega), tape.constant(eq.omega_dot));
    out.values.reserve(batch.size());
    out.lies.reserve(batch.size());
    for (const LieSample& s : batch) {
        const auto node = g.evaluate(s.state);
        out.values.push_back(node.value);
        out.lies.push_back(
            LyapunovGraph::lie_derivative(node, tape.constant(s.state.omega), tape.constant(s.omega_dot)));
    }
    return out;
}

/// l1 = (1/H) Σ_h tanh(∇_f V_h) · exp(−‖x_h − x*‖ / μ)
inline grad::Var l1_graph(grad::Tape& tape, const LyapunovBatchGraph& b, std::span<const LieSample> batch, double mu) {
    std::vector<grad::Var> terms;
    terms.reserve(batch.size());
    for (std::size_t h = 0; h < batch.size(); ++h) {
        terms.push_back(grad::tanh(b.lies[h]) * std::exp(-batch[h].distance / mu));
    }
    return tape.sum(terms) / static_cast<double>(batch.size());
}

/// l2 = (1/H) Σ_h ReLU(V(x*) − V(x_h))
inline grad::Var l2_graph(grad::Tape& tape, const LyapunovBatchGraph& b) {
    std::vector<grad::Var> terms;
    terms.reserve(b.values.size());
    for (const grad::Var& v : b.values) {
        terms.push_back(grad::relu(b.v_eq - v));
    }
    return tape.sum(terms) / static_cast<double>(b.values.size());
}

/// l3 = (∇_f V(x*))² + ReLU(∇_f V(x*))
inline grad::Var l3_graph(const LyapunovBatchGraph& b) { return b.lie_eq * b.lie_eq + grad::relu(b.lie_eq); }

inline double l1_term(double lie, double distance, double mu) { return std::tanh(lie) * std::exp(-distance / mu); }
inline double l3_term(double lie_eq) { return lie_eq * lie_eq + std::max(lie_eq, 0.0); }

inline double total_lyapunov_loss(double l1, double l2, double l3, double q1, double q2, double q3) {
    return q1 * l1 + q2 * l2 + q3 * l3;
}

inline double loss_l1(const LyapunovNet& net, const PowerSystem& sys, std::span<const SystemState> batch,
                      const DroopParams& droop, double mu) {
    if (batch.empty()) {
        throw ValidationError("loss_l1: empty batch");
    }
    std::vector<LieSample> samples;
    for (const SystemState& s : batch) {
        samples.push_back(make_sample(sys, droop, s));
    }
    grad::Tape tape;
    const LyapunovGraph g(tape, net, false);
    const auto b = build_batch(tape, g, sys, droop, samples);
    return l1_graph(tape, b, samples, mu).scalar();
}

inline double loss_l2(const LyapunovNet& net, const PowerSystem& sys, std::span<const SystemState> batch) {
    if (batch.empty()) {
        throw ValidationError("loss_l2: empty batch");
    }
    const double v_eq = value(net, sys.rest());
    double acc = 0.0;
    for (const SystemState& s : batch) {
        acc += std::max(v_eq - value(net, s), 0.0);
    }
    return acc / static_cast<double>(batch.size());
}

inline double loss_l3(const LyapunovNet& net, const PowerSystem& sys, const DroopParams& droop) {
    const SystemState& eq = sys.rest();
    return l3_term(lie_derivative(net, sys, eq, droop_action(droop, sys.network, eq.omega)));
}

// =============================================================================
// Condition check
// =============================================================================

struct ConditionReport {
    double rho = 0.0;
    std::size_t samples = 0;  // counted samples (outside the exclusion ball)
    std::vector<SystemState> violators;
    double worst_lie_derivative = -std::numeric_limits<double>::infinity();
    double v_at_equilibrium = 0.0;
};

inline constexpr double kEquilibriumExclusion = 1e-6;

/// A sample satisfies iff V(x) > V(x*) and ∇_f V(x) < 0 under `policy(ω)`.
/// `candidate(state)` returns the LyapunovEval of any candidate function.
template <typename Candidate, typename Policy>
ConditionReport check_candidate(Candidate&& candidate, const PowerSystem& sys, std::span<const SystemState> samples,
                                Policy&& policy, double exclusion = kEquilibriumExclusion) {
    ConditionReport r;
    r.v_at_equilibrium = candidate(sys.rest()).value;
    for (const SystemState& s : samples) {
        if (state_distance(s, sys.rest()) <= exclusion) {
            continue;
        }
        ++r.samples;
        const LyapunovEval e = candidate(s);
        const StateDerivative f = swing_rhs(sys.network, sys.flows, s, policy(s.omega));
        const double lie = lie_derivative(e.gradient, s.omega, f.omega_dot);
        r.worst_lie_derivative = std::max(r.worst_lie_derivative, lie);
        if (!(e.value > r.v_at_equilibrium && lie < 0.0)) {
            r.violators.push_back(s);
        }
    }
    r.rho = r.samples == 0 ? 1.0
                           : 1.0 - static_cast<double>(r.violators.size()) / static_cast<double>(r.samples);
    return r;
}

template <typename Policy>
ConditionReport check_conditions_with(const LyapunovNet& net, const PowerSystem& sys, std::span<const SystemState> samples,
                                      Policy&& policy, double exclusion = kEquilibriumExclusion) {
    return check_candidate([&](const SystemState& s) { return evaluate(net, s); }, sys, samples,
                           std::forward<Policy>(policy), exclusion);
}

inline ConditionReport check_conditions(const LyapunovNet& net, const PowerSystem& sys,
                                        std::span<const SystemState> samples, const DroopParams& droop,
                                        double exclusion = kEquilibriumExclusion) {
    return check_conditions_with(
        net, sys, samples, [&](std::span<const double> w) { return droop_action(droop, sys.network, w); }, exclusion);
}

// =============================================================================
// Training with active sampling
// =============================================================================

struct LyapunovTrainConfig {
    std::size_t hidden = 50;
    double mu = 50.0;
    double q1 = 10.0;
    double q2 = 5.0;
    double q3 = 100.0;
    std::size_t batch_size = 1000;  // H
    std::size_t episodes = 4000;    // I
    Interval delta_box{-20.0, 20.0};  // rad, offset from δ*
    Interval omega_box{-30.0, 30.0};  // case-file ω unit
    double resample_threshold = 0.95;
    grad::StepDecaySchedule lr{0.05, 0.9, 100};
    std::uint64_t rng_seed = 0;

    void validate() const {
        if (!(mu > 0.0) || !(q1 > 0.0) || !(q2 > 0.0) || !(q3 > 0.0) || batch_size == 0 || hidden == 0) {
            throw ValidationError("LyapunovTrainConfig: mu, q1..q3, batch_size and hidden must be positive");
        }
        if (!(resample_threshold > 0.0 && resample_threshold < 1.0)) {
            throw ValidationError("LyapunovTrainConfig: resample_threshold must lie in (0, 1)");
        }
        if (!(delta_box.lo < delta_box.hi) || !(omega_box.lo < omega_box.hi)) {
            throw ValidationError("LyapunovTrainConfig: empty sampling box");
        }
    }
};

struct LyapunovEpisodeLog {
    std::size_t episode = 0;
    double l1 = 0.0;
    double l2 = 0.0;
    double l3 = 0.0;
    double total = 0.0;
    double rho = 0.0;          // on the fresh samples, before the update
    std::size_t batch = 0;     // fresh + replayed violators
};

struct LyapunovTrainResult {
    LyapunovNet net;
    std::vector<LyapunovEpisodeLog> log;
};

using LyapunovProgress = std::function<void(const LyapunovEpisodeLog&)>;

/// Algorithm: per episode draw H states; once the previous episode's ρ
/// exceeds the threshold, replay the buffered violators; evaluate V and ∇_f V
/// under the fixed droop law; record ρ; Adam step on q1·l1 + q2·l2 + q3·l3.
/// The violator buffer keeps at most 2H states, newest first.
inline LyapunovTrainResult train_lyapunov(const PowerSystem& sys, const DroopParams& droop,
                                          const LyapunovTrainConfig& cfg, const LyapunovNet* init = nullptr,
                                          const LyapunovProgress& progress = {}) {
    cfg.validate();
    droop.validate(sys.n());
    LyapunovTrainResult result;
    result.net = init != nullptr ? *init : initialize_lyapunov(sys.n(), cfg.hidden, cfg.rng_seed);
    result.net.validate();
    if (result.net.n_buses() != sys.n()) {
        throw ValidationError("train_lyapunov: network input does not match case dimension");
    }

    const double scale = sys.network.omega_scale();
    const Interval omega_box{cfg.omega_box.lo * scale, cfg.omega_box.hi * scale};
    auto rng = make_rng(cfg.rng_seed, streams::lyapunov_batches);
    grad::Adam adam(result.net.parameter_count(), cfg.lr);
    Vec params = result.net.flat();
    std::deque<SystemState> buffer;
    const std::size_t buffer_cap = 2 * cfg.batch_size;
    double last_rho = 0.0;
    grad::Tape tape;

    for (std::size_t episode = 0; episode < cfg.episodes; ++episode) {
        std::vector<LieSample> batch;
        batch.reserve(cfg.batch_size + buffer.size());
        for (std::size_t h = 0; h < cfg.batch_size; ++h) {
            batch.push_back(make_sample(sys, droop, sample_state(rng, sys.rest(), cfg.delta_box, omega_box)));
        }
        if (last_rho > cfg.resample_threshold) {
            for (const SystemState& s : buffer) {
                batch.push_back(make_sample(sys, droop, s));
            }
        }

        tape.clear();
        const LyapunovGraph g(tape, result.net, true);
        const auto b = build_batch(tape, g, sys, droop, batch);
        const grad::Var l1 = l1_graph(tape, b, batch, cfg.mu);
        const grad::Var l2 = l2_graph(tape, b);
        const grad::Var l3 = l3_graph(b);
        const grad::Var total = l1 * cfg.q1 + l2 * cfg.q2 + l3 * cfg.q3;

        // Conditions on this batch (values are already evaluated on the tape).
        const double v_eq = b.v_eq.scalar();
        std::size_t counted = 0;
        std::size_t fresh_violations = 0;
        std::deque<SystemState> next_buffer;
        for (std::size_t h = 0; h < batch.size(); ++h) {
            if (batch[h].distance <= kEquilibriumExclusion) {
                continue;
            }
            const bool ok = b.values[h].scalar() > v_eq && b.lies[h].scalar() < 0.0;
            if (h < cfg.batch_size) {
                ++counted;
                fresh_violations += ok ? 0 : 1;
            }
            if (!ok) {
                next_buffer.push_front(batch[h].state);
            }
        }
        while (next_buffer.size() > buffer_cap) {
            next_buffer.pop_back();
        }
        buffer = std::move(next_buffer);
        const double rho =
            counted == 0 ? 1.0 : 1.0 - static_cast<double>(fresh_violations) / static_cast<double>(counted);

        LyapunovEpisodeLog entry{episode, l1.scalar(), l2.scalar(), l3.scalar(), total.scalar(), rho, batch.size()};
        if (!std::isfinite(entry.total)) {
            std::ostringstream msg;
            msg << "train_lyapunov: non-finite loss at episode " << episode << "; parameters:";
            for (double p : params) {
                msg << ' ' << p;
            }
            throw NumericError(msg.str());
        }
        tape.propagate(total);
        const Vec grads = g.flat_gradient();
        adam.step(params, grads);
        result.net.set_flat(params);
        last_rho = rho;
        result.log.push_back(entry);
        if (progress) {
            progress(entry);
        }
    }
    return result;
}

// =============================================================================
// Serialization
// =============================================================================

inline grad::Checkpoint lyapunov_checkpoint(const LyapunovNet& net, std::uint64_t seed, std::size_t episode) {
    grad::Checkpoint ck;
    ck.arch = {{"type", "lyapunov_mlp"}, {"input_dim", net.input_dim}, {"hidden", net.hidden}, {"activation", "elu"}};
    ck.parameters = {{"W1", net.w1}, {"b1", net.b1}, {"w2", net.w2}, {"b2", Vec{net.b2}}};
    ck.rng_seed = seed;
    ck.episode = episode;
    return ck;
}

inline LyapunovNet lyapunov_from_checkpoint(const grad::Checkpoint& ck) {
    if (ck.arch.value("type", "") != "lyapunov_mlp") {
        throw ValidationError("checkpoint: not a lyapunov_mlp network");
    }
    LyapunovNet net;
    net.input_dim = ck.arch.at("input_dim").get<std::size_t>();
    net.hidden = ck.arch.at("hidden").get<std::size_t>();
    net.w1 = ck.at("W1");
    net.b1 = ck.at("b1");
    net.w2 = ck.at("w2");
    const Vec& b2 = ck.at("b2");
    if (b2.size() != 1) {
        throw ValidationError("checkpoint: b2 must hold one value");
    }
    net.b2 = b2[0];
    net.validate();
    return net;
}

} // namespace lyapreg
