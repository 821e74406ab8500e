#pragma once

// =============================================================================
// Unrolled rollouts, the trajectory loss and controller training
// =============================================================================
// A rollout is a recurrent unroll of the Euler-discretised swing dynamics:
//   u(k) = policy(ω(k)),  x(k+1) = x(k) + dt·f(x(k), u(k)),  k = 0..K−1
// Per-stage outputs
//   Y¹(k) = ω(k)        k = 1..K      (ω(0) is given, not controllable)
//   Y²(k) = u(k−1)²     k = 1..K
//   Y³(k) = ReLU(∇_f V + β(V − V*)) / N  at (x(k−1), u(k−1))
// Loss:  Σ_i max_k |Y¹_i(k)| + γ/K Σ_k Σ_i Y²_i(k) + λ/K Σ_k Y³(k)
// The whole unroll lives on one tape, so gradients w.r.t. the controller's
// raw parameters come from a single backward pass (backpropagation through
// time).
// =============================================================================

#include "lyapreg/controller.hpp"
#include "lyapreg/error.hpp"
#include "lyapreg/gradcore/adam.hpp"
#include "lyapreg/gradcore/tape.hpp"
#include "lyapreg/grid_model.hpp"
#include "lyapreg/lyapunov.hpp"
#include "lyapreg/sampling.hpp"

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <string>
#include <vector>

namespace lyapreg {

struct RolloutConfig {
    double dt = 0.02;
    std::size_t stages = 100;     // K
    std::size_t batch_size = 32;  // H
    double gamma = 0.005;
    double lambda = 0.01;
    double beta = 0.005;
    Interval delta0_box{-1.0, 1.0};   // rad, offset from δ*
    Interval omega0_box{-0.5, 0.5};   // case-file ω unit
    std::size_t episodes = 400;
    grad::StepDecaySchedule lr{0.04, 0.7, 30};
    std::uint64_t rng_seed = 0;
    std::size_t hidden = 20;           // m
    std::size_t selection_size = 32;   // fixed states used for best-seen selection
    double blowup_threshold = 1e3;

    void validate() const {
        if (!(dt > 0.0) || stages == 0) {
            throw ValidationError("RolloutConfig: dt must be positive and stages at least 1");
        }
        if (gamma < 0.0 || lambda < 0.0 || beta < 0.0) {
            throw ValidationError("RolloutConfig: gamma, lambda and beta must be nonnegative");
        }
        if (batch_size == 0 || hidden == 0) {
            throw ValidationError("RolloutConfig: batch_size and hidden must be positive");
        }
    }

    /// Initial-state boxes in rad and rad/s.
    [[nodiscard]] Interval omega0_rad(const NetworkCase& c) const {
        return {omega0_box.lo * c.omega_scale(), omega0_box.hi * c.omega_scale()};
    }
};

struct TrajectoryRecord {
    std::vector<SystemState> states;  // K+1 (fewer if truncated)
    std::vector<Vec> actions;         // K × N
    std::vector<Vec> y1;              // K × N, ω(k) for k = 1..K
    std::vector<Vec> y2;              // K × N
    Vec y3;                           // K
    double nadir = 0.0;
    double effort = 0.0;       // already multiplied by γ/K
    double regularizer = 0.0;  // already multiplied by λ/K
    double loss = 0.0;
    bool truncated = false;

    [[nodiscard]] std::size_t stages() const { return actions.size(); }
};

/// Σ_i max_k |Y¹_i(k)| + γ/K Σ Y² + λ/K Σ Y³, K = number of recorded stages.
inline double trajectory_loss(const TrajectoryRecord& r, double gamma, double lambda) {
    const std::size_t k_count = r.y2.size();
    if (k_count == 0) {
        return 0.0;
    }
    const std::size_t n = r.y1.front().size();
    double nadir = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        double peak = std::abs(r.y1[0][i]);
        for (std::size_t k = 1; k < r.y1.size(); ++k) {
            peak = std::max(peak, std::abs(r.y1[k][i]));
        }
        nadir += peak;
    }
    double effort = 0.0;
    for (const Vec& row : r.y2) {
        for (double x : row) {
            effort += x;
        }
    }
    double reg = 0.0;
    for (double x : r.y3) {
        reg += x;
    }
    const double kk = static_cast<double>(k_count);
    return (nadir + effort * (gamma / kk)) + reg * (lambda / kk);
}

/// R = ReLU(∇_f V(x) + β (V(x) − V(x*))) for the action u at state x.
inline double lyapunov_regularizer(const LyapunovNet& net, const PowerSystem& sys, const SystemState& s,
                                   std::span<const double> u, double beta) {
    const LyapunovEval e = evaluate(net, s);
    const double v_eq = value(net, sys.rest());
    const StateDerivative f = swing_rhs(sys.network, sys.flows, s, u);
    const double lie = lie_derivative(e.gradient, s.omega, f.omega_dot);
    return std::max(lie + beta * (e.value - v_eq), 0.0);
}

// =============================================================================
// Graph unroll
// =============================================================================

/// Network constants placed on a tape once and shared by every trajectory.
class DynamicsGraph {
public:
    DynamicsGraph(grad::Tape& tape, const PowerSystem& sys, double dt) : n_(sys.n()), pairs_(sys.flows.n_pairs) {
        const NetworkCase& c = sys.network;
        mech_ = tape.constant(c.mech_power);
        damping_ = tape.constant(c.damping);
        inertia_ = tape.constant(c.inertia);
        dt_ = tape.constant(dt);
        if (pairs_ != 0) {
            incidence_ = tape.matrix(sys.flows.incidence, pairs_, n_);
            sin_w_ = tape.matrix(sys.flows.sin_weights, n_, pairs_);
            cos_w_ = tape.matrix(sys.flows.cos_weights, n_, pairs_);
        }
    }

    /// ω̇ in the same operation order as swing_rhs().
    [[nodiscard]] grad::Var omega_dot(grad::Var delta, grad::Var omega, grad::Var u) const {
        grad::Var acc = mech_ - damping_ * omega;
        acc = acc - u;
        if (pairs_ != 0) {
            const grad::Var d = grad::affine(incidence_, delta);
            acc = acc - grad::affine(sin_w_, grad::sin(d));
            acc = acc - grad::affine(cos_w_, grad::cos(d));
        }
        return acc / inertia_;
    }

    [[nodiscard]] grad::Var dt() const { return dt_; }

private:
    std::size_t n_;
    std::size_t pairs_;
    grad::Var mech_, damping_, inertia_, dt_;
    grad::Var incidence_, sin_w_, cos_w_;
};

/// Frozen Lyapunov network used as a per-stage penalty.
struct RegularizerGraph {
    const LyapunovGraph* net = nullptr;
    double v_eq = 0.0;
    double beta = 0.0;
};

struct TrajectoryNodes {
    std::vector<grad::Var> delta;  // K+1
    std::vector<grad::Var> omega;  // K+1
    std::vector<grad::Var> actions;
    std::vector<grad::Var> y2;
    std::vector<grad::Var> y3;
    grad::Var nadir;
    grad::Var effort;
    grad::Var regularizer;
    grad::Var loss;
    bool truncated = false;
};

namespace detail {

inline bool blown_up(grad::Var v, double threshold) {
    for (double x : v.value()) {
        if (!std::isfinite(x) || std::abs(x) > threshold) {
            return true;
        }
    }
    return false;
}

} // namespace detail

template <typename PolicyGraph>
TrajectoryNodes unroll(grad::Tape& tape, const DynamicsGraph& dyn, const PolicyGraph& policy,
                       const RegularizerGraph* reg, const RolloutConfig& cfg, const SystemState& initial) {
    const std::size_t n = initial.size();
    TrajectoryNodes t;
    t.delta.push_back(tape.constant(initial.delta));
    t.omega.push_back(tape.constant(initial.omega));
    for (std::size_t k = 0; k < cfg.stages; ++k) {
        const grad::Var delta = t.delta.back();
        const grad::Var omega = t.omega.back();
        const grad::Var u = policy.action(omega);
        const grad::Var wdot = dyn.omega_dot(delta, omega, u);
        t.actions.push_back(u);
        t.y2.push_back(u * u);
        if (reg != nullptr) {
            const auto node = reg->net->evaluate(delta, omega);
            const grad::Var lie = LyapunovGraph::lie_derivative(node, omega, wdot);
            const grad::Var r = grad::relu(lie + (node.value - reg->v_eq) * reg->beta);
            t.y3.push_back(r / static_cast<double>(n));
        }
        t.delta.push_back(delta + omega * dyn.dt());
        t.omega.push_back(omega + wdot * dyn.dt());
        if (detail::blown_up(t.delta.back(), cfg.blowup_threshold) ||
            detail::blown_up(t.omega.back(), cfg.blowup_threshold)) {
            t.truncated = true;
            break;
        }
    }
    std::vector<grad::Var> magnitudes;
    magnitudes.reserve(t.omega.size() - 1);
    for (std::size_t k = 1; k < t.omega.size(); ++k) {
        magnitudes.push_back(grad::abs(t.omega[k]));
    }
    const double k_count = static_cast<double>(t.actions.size());
    t.nadir = grad::sum(tape.max_over_axis(magnitudes));
    t.effort = tape.sum(t.y2) * (cfg.gamma / k_count);
    t.regularizer = reg != nullptr ? tape.sum(t.y3) * (cfg.lambda / k_count) : tape.constant(0.0);
    t.loss = (t.nadir + t.effort) + t.regularizer;
    return t;
}

inline TrajectoryRecord to_record(const TrajectoryNodes& t) {
    TrajectoryRecord r;
    for (std::size_t k = 0; k < t.delta.size(); ++k) {
        const auto d = t.delta[k].value();
        const auto w = t.omega[k].value();
        r.states.push_back({Vec(d.begin(), d.end()), Vec(w.begin(), w.end())});
        if (k > 0) {
            r.y1.emplace_back(w.begin(), w.end());
        }
    }
    for (std::size_t k = 0; k < t.actions.size(); ++k) {
        const auto u = t.actions[k].value();
        r.actions.emplace_back(u.begin(), u.end());
        const auto y = t.y2[k].value();
        r.y2.emplace_back(y.begin(), y.end());
        r.y3.push_back(t.y3.empty() ? 0.0 : t.y3[k].scalar());
    }
    r.nadir = t.nadir.scalar();
    r.effort = t.effort.scalar();
    r.regularizer = t.regularizer.scalar();
    r.loss = t.loss.scalar();
    r.truncated = t.truncated;
    return r;
}

/// Builds the (frozen) policy graph for a parameter type.
inline StackedReluGraph policy_graph(grad::Tape& tape, const PowerSystem&, const ControllerParams& p, bool trainable) {
    return StackedReluGraph(tape, p, trainable);
}
inline DroopGraph policy_graph(grad::Tape& tape, const PowerSystem& sys, const DroopParams& d, bool trainable) {
    return DroopGraph(tape, d, sys.network, trainable);
}

/// Single trajectory; Y³ is recorded only when `net` is given.
template <typename Policy>
TrajectoryRecord rollout(const PowerSystem& sys, const Policy& policy, const LyapunovNet* net, const RolloutConfig& cfg,
                         const SystemState& initial) {
    cfg.validate();
    validate_state(sys.network, initial);
    grad::Tape tape;
    const DynamicsGraph dyn(tape, sys, cfg.dt);
    const auto pg = policy_graph(tape, sys, policy, false);
    std::optional<LyapunovGraph> lg;
    RegularizerGraph reg;
    if (net != nullptr) {
        lg.emplace(tape, *net, false);
        reg = {&*lg, value(*net, sys.rest()), cfg.beta};
    }
    return to_record(unroll(tape, dyn, pg, net != nullptr ? &reg : nullptr, cfg, initial));
}

struct CostSummary {
    double nadir = 0.0;        // means over the set
    double effort = 0.0;
    double regularizer = 0.0;
    double loss = 0.0;         // includes λ·regularizer
    double cost = 0.0;         // nadir + effort, the objective without regularization
    double tail_peak = 0.0;    // mean over trajectories of max |ω| in the final 20% of stages
    std::size_t truncated = 0;
};

namespace detail {

inline double tail_peak(const TrajectoryNodes& t, std::size_t stages) {
    const std::size_t first = stages - stages / 5;  // k in (0.8K, K]
    double peak = 0.0;
    for (std::size_t k = std::max<std::size_t>(first + 1, 1); k < t.omega.size(); ++k) {
        for (double x : t.omega[k].value()) {
            peak = std::max(peak, std::abs(x));
        }
    }
    if (t.truncated) {
        peak = std::numeric_limits<double>::infinity();
    }
    return peak;
}

} // namespace detail

/// Mean loss components over a fixed set of initial states (forward only).
template <typename Policy>
CostSummary evaluate_policy(const PowerSystem& sys, const Policy& policy, const LyapunovNet* net,
                            const RolloutConfig& cfg, std::span<const SystemState> initial_states) {
    cfg.validate();
    grad::Tape tape;
    CostSummary s;
    for (const SystemState& x0 : initial_states) {
        tape.clear();
        const DynamicsGraph dyn(tape, sys, cfg.dt);
        const auto pg = policy_graph(tape, sys, policy, false);
        std::optional<LyapunovGraph> lg;
        RegularizerGraph reg;
        if (net != nullptr) {
            lg.emplace(tape, *net, false);
            reg = {&*lg, value(*net, sys.rest()), cfg.beta};
        }
        const TrajectoryNodes t = unroll(tape, dyn, pg, net != nullptr ? &reg : nullptr, cfg, x0);
        s.nadir += t.nadir.scalar();
        s.effort += t.effort.scalar();
        s.regularizer += t.regularizer.scalar();
        s.loss += t.loss.scalar();
        s.cost += t.nadir.scalar() + t.effort.scalar();
        s.tail_peak += detail::tail_peak(t, cfg.stages);
        s.truncated += t.truncated ? 1 : 0;
    }
    const double h = static_cast<double>(initial_states.size());
    s.nadir /= h;
    s.effort /= h;
    s.regularizer /= h;
    s.loss /= h;
    s.cost /= h;
    s.tail_peak /= h;
    return s;
}

inline std::vector<SystemState> draw_initial_states(const PowerSystem& sys, const RolloutConfig& cfg,
                                                    std::size_t count, std::uint64_t stream) {
    auto rng = make_rng(cfg.rng_seed, stream);
    return sample_states(rng, count, sys.rest(), cfg.delta0_box, cfg.omega0_rad(sys.network));
}

/// 100 seeded held-out states on a stream disjoint from training draws.
inline std::vector<SystemState> held_out_states(const PowerSystem& sys, const RolloutConfig& cfg,
                                                std::size_t count = 100) {
    return draw_initial_states(sys, cfg, count, streams::held_out);
}

// =============================================================================
// Controller training
// =============================================================================

struct ControllerEpisodeLog {
    std::size_t episode = 0;
    double mean_nadir = 0.0;
    double mean_effort = 0.0;
    double mean_regularizer = 0.0;
    double total = 0.0;
    double normalized_vs_droop = std::numeric_limits<double>::quiet_NaN();
    double selection_loss = 0.0;
};

struct ControllerTrainResult {
    ControllerParams params;  // best-seen on the selection set
    std::size_t best_episode = 0;
    double best_selection_loss = std::numeric_limits<double>::infinity();
    std::vector<ControllerEpisodeLog> log;
};

using ControllerProgress = std::function<void(const ControllerEpisodeLog&)>;

/// Per episode: draw H initial states, unroll K stages, mean the trajectory
/// loss over the batch, Adam step on the raw parameters. Parameters are
/// scored on a fixed selection set before each update and after the last
/// one; the best score wins. `net` enables the Lyapunov penalty; `droop`
/// only feeds the normalized column of the log.
inline ControllerTrainResult train_controller(const PowerSystem& sys, const ControllerParams& init,
                                              const LyapunovNet* net, const RolloutConfig& cfg,
                                              const DroopParams* droop = nullptr,
                                              const ControllerProgress& progress = {}) {
    cfg.validate();
    init.validate();
    if (init.n_buses != sys.n()) {
        throw ValidationError("train_controller: controller does not match case dimension");
    }
    if (net != nullptr && net->n_buses() != sys.n()) {
        throw ValidationError("train_controller: Lyapunov network does not match case dimension");
    }
    ControllerTrainResult result;
    ControllerParams params = init;
    Vec flat = params.flat();
    grad::Adam adam(flat.size(), cfg.lr);
    auto rng = make_rng(cfg.rng_seed, streams::controller_batches);
    const auto selection = draw_initial_states(sys, cfg, cfg.selection_size, streams::selection);
    const Interval omega_box = cfg.omega0_rad(sys.network);
    const double v_eq = net != nullptr ? value(*net, sys.rest()) : 0.0;

    auto consider = [&](std::size_t episode) {
        const double score = evaluate_policy(sys, params, net, cfg, selection).loss;
        if (score < result.best_selection_loss) {
            result.best_selection_loss = score;
            result.best_episode = episode;
            result.params = params;
        }
        return score;
    };

    grad::Tape tape;
    for (std::size_t episode = 0; episode < cfg.episodes; ++episode) {
        const double selection_loss = consider(episode);
        const auto batch = sample_states(rng, cfg.batch_size, sys.rest(), cfg.delta0_box, omega_box);

        tape.clear();
        const DynamicsGraph dyn(tape, sys, cfg.dt);
        const StackedReluGraph pg(tape, params, true);
        std::optional<LyapunovGraph> lg;
        RegularizerGraph reg;
        if (net != nullptr) {
            lg.emplace(tape, *net, false);
            reg = {&*lg, v_eq, cfg.beta};
        }
        std::vector<grad::Var> losses;
        ControllerEpisodeLog entry;
        entry.episode = episode;
        entry.selection_loss = selection_loss;
        for (const SystemState& x0 : batch) {
            const TrajectoryNodes t = unroll(tape, dyn, pg, net != nullptr ? &reg : nullptr, cfg, x0);
            losses.push_back(t.loss);
            entry.mean_nadir += t.nadir.scalar();
            entry.mean_effort += t.effort.scalar();
            entry.mean_regularizer += t.regularizer.scalar();
        }
        const double h = static_cast<double>(batch.size());
        const grad::Var total = tape.sum(losses) / h;
        entry.mean_nadir /= h;
        entry.mean_effort /= h;
        entry.mean_regularizer /= h;
        entry.total = total.scalar();
        if (!std::isfinite(entry.total)) {
            throw NumericError("train_controller: non-finite loss at episode " + std::to_string(episode));
        }
        if (droop != nullptr) {
            const CostSummary base = evaluate_policy(sys, *droop, nullptr, cfg, batch);
            entry.normalized_vs_droop = (entry.mean_nadir + entry.mean_effort) / base.cost;
        }
        tape.propagate(total);
        adam.step(flat, pg.flat_gradient());
        params.set_flat(flat);
        result.log.push_back(entry);
        if (progress) {
            progress(entry);
        }
    }
    consider(cfg.episodes);
    return result;
}

// =============================================================================
// Linear droop baseline fit
// =============================================================================

struct DroopFitOptions {
    std::size_t fit_size = 64;     // fixed initial states the cost is averaged over
    std::size_t max_iter = 200;
    double initial_step = 1.0;
    double min_step = 1e-8;
    double divergence_threshold = 100.0;  // |ω| in rad/s
};

struct DroopFitResult {
    DroopParams params;
    double cost = 0.0;
    std::size_t iterations = 0;
    std::vector<double> cost_history;
};

namespace detail {

struct DroopEvaluation {
    double cost = 0.0;
    Vec gradient;
    bool diverged = false;
};

inline DroopEvaluation droop_cost(const PowerSystem& sys, const DroopParams& d, const RolloutConfig& cfg,
                                  std::span<const SystemState> states, double divergence) {
    RolloutConfig plain = cfg;
    plain.lambda = 0.0;
    grad::Tape tape;
    const DynamicsGraph dyn(tape, sys, plain.dt);
    const DroopGraph pg(tape, d, sys.network, true);
    std::vector<grad::Var> losses;
    DroopEvaluation out;
    for (const SystemState& x0 : states) {
        const TrajectoryNodes t = unroll(tape, dyn, pg, nullptr, plain, x0);
        out.diverged = out.diverged || t.truncated;
        for (const grad::Var& w : t.omega) {
            out.diverged = out.diverged || blown_up(w, divergence);
        }
        losses.push_back(t.loss);
    }
    const grad::Var total = tape.sum(losses) / static_cast<double>(states.size());
    out.cost = total.scalar();
    out.diverged = out.diverged || !std::isfinite(out.cost);
    if (!out.diverged) {
        tape.propagate(total);
        out.gradient = pg.flat_gradient();
    }
    return out;
}

} // namespace detail

/// Droop cost (objective without regularization) averaged over the fit set.
inline double droop_cost(const PowerSystem& sys, const DroopParams& d, const RolloutConfig& cfg,
                         std::span<const SystemState> states) {
    return detail::droop_cost(sys, d, cfg, states, std::numeric_limits<double>::infinity()).cost;
}

inline std::vector<SystemState> droop_fit_states(const PowerSystem& sys, const RolloutConfig& cfg,
                                                 const DroopFitOptions& opts) {
    return draw_initial_states(sys, cfg, opts.fit_size, streams::droop_fit);
}

/// Projected gradient descent on l ≥ 0 with step halving on rejection.
inline DroopFitResult optimize_droop(const PowerSystem& sys, const RolloutConfig& cfg, DroopFitOptions opts = {},
                                     std::optional<DroopParams> start = std::nullopt,
                                     std::optional<std::vector<SystemState>> states = std::nullopt) {
    cfg.validate();
    const std::vector<SystemState> fit = states ? *states : droop_fit_states(sys, cfg, opts);
    DroopParams l = start ? *start : DroopParams{Vec(sys.n(), 0.0)};
    l.validate(sys.n());
    auto current = detail::droop_cost(sys, l, cfg, fit, opts.divergence_threshold);
    if (current.diverged) {
        throw NumericError("optimize_droop: starting coefficients diverge");
    }
    DroopFitResult result{l, current.cost, 0, {current.cost}};
    double step = opts.initial_step;
    for (std::size_t it = 0; it < opts.max_iter && step >= opts.min_step; ++it) {
        DroopParams trial = l;
        for (std::size_t i = 0; i < sys.n(); ++i) {
            trial.coefficients[i] = std::max(0.0, l.coefficients[i] - step * current.gradient[i]);
        }
        auto next = detail::droop_cost(sys, trial, cfg, fit, opts.divergence_threshold);
        ++result.iterations;
        if (next.diverged || !(next.cost < current.cost)) {
            step *= 0.5;
            continue;
        }
        l = trial;
        current = std::move(next);
        step *= 1.5;
        result.cost_history.push_back(current.cost);
        if (current.cost < result.cost) {
            result.cost = current.cost;
            result.params = l;
        }
    }
    return result;
}

} // namespace lyapreg
