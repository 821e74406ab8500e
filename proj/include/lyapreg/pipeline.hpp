#pragma once

// Run-level plumbing shared by the command line and the acceptance suite:
// configuration files, CSV logs, content hashes, run manifests, held-out
// comparison and figure-data exports.
//
// Config file (every key optional, unknown keys rejected):
//   { "version": 1,
//     "rollout":   { "dt", "stages", "batch_size", "gamma", "lambda", "beta",
//                    "delta0_box": [lo, hi], "omega0_box": [lo, hi], "episodes",
//                    "lr": {"initial", "base", "every"}, "hidden", "selection_size",
//                    "blowup_threshold" },
//     "lyapunov":  { "hidden", "mu", "q1", "q2", "q3", "batch_size", "episodes",
//                    "delta_box", "omega_box", "resample_threshold", "lr" },
//     "droop_fit": { "fit_size", "max_iter", "initial_step", "min_step",
//                    "divergence_threshold" },
//     "controller_init": "droop" | "generic" }

#include "lyapreg/case_file.hpp"
#include "lyapreg/controller.hpp"
#include "lyapreg/gradcore/checkpoint.hpp"
#include "lyapreg/lyapunov.hpp"
#include "lyapreg/policy_training.hpp"

#include <json.hpp>

#include <cinttypes>
#include <cstdio>
#include <cstdlib>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

namespace lyapreg {

// =============================================================================
// Configuration
// =============================================================================

enum class ControllerStart { droop, generic };

struct PipelineConfig {
    RolloutConfig rollout;
    LyapunovTrainConfig lyapunov;
    DroopFitOptions droop_fit;
    ControllerStart controller_init = ControllerStart::droop;

    void set_seed(std::uint64_t seed) {
        rollout.rng_seed = seed;
        lyapunov.rng_seed = seed;
    }

    /// Lyapunov training at H = 200, I = 1000.
    static PipelineConfig desk_scale() {
        PipelineConfig c;
        c.lyapunov.batch_size = 200;
        c.lyapunov.episodes = 1000;
        return c;
    }

    void validate() const {
        rollout.validate();
        lyapunov.validate();
        if (droop_fit.fit_size == 0 || !(droop_fit.initial_step > 0.0)) {
            throw ValidationError("droop_fit: fit_size and initial_step must be positive");
        }
    }
};

namespace detail {

/// Reads optional keys from an object and rejects the ones nobody asked for.
class ObjectReader {
public:
    ObjectReader(const Json& j, std::string where) : j_(j), where_(std::move(where)) {
        if (!j.is_object()) {
            throw ValidationError(where_ + ": expected an object");
        }
    }

    template <typename T>
    void get(const char* key, T& out) {
        seen_.insert(key);
        if (!j_.contains(key)) {
            return;
        }
        try {
            out = j_[key].get<T>();
        } catch (const Json::exception&) {
            throw ValidationError(where_ + "." + key + ": wrong type");
        }
    }

    void get(const char* key, Interval& out) {
        seen_.insert(key);
        if (!j_.contains(key)) {
            return;
        }
        const Json& v = j_[key];
        if (!v.is_array() || v.size() != 2 || !v[0].is_number() || !v[1].is_number()) {
            throw ValidationError(where_ + "." + key + ": expected [lo, hi]");
        }
        out = {v[0].get<double>(), v[1].get<double>()};
    }

    void get(const char* key, grad::StepDecaySchedule& out) {
        seen_.insert(key);
        if (!j_.contains(key)) {
            return;
        }
        ObjectReader r(j_[key], where_ + "." + key);
        r.get("initial", out.initial);
        r.get("base", out.base);
        r.get("every", out.every);
        r.finish();
    }

    void accept(const char* key) { seen_.insert(key); }

    void finish() const {
        for (const auto& [key, value] : j_.items()) {
            if (!seen_.contains(key)) {
                throw ValidationError(where_ + "." + key + ": unknown key");
            }
        }
    }

private:
    const Json& j_;
    std::string where_;
    std::set<std::string> seen_;
};

inline Json interval_json(Interval i) { return Json::array({i.lo, i.hi}); }
inline Json schedule_json(const grad::StepDecaySchedule& s) {
    return {{"initial", s.initial}, {"base", s.base}, {"every", s.every}};
}

} // namespace detail

inline Json config_to_json(const PipelineConfig& c) {
    const RolloutConfig& r = c.rollout;
    const LyapunovTrainConfig& l = c.lyapunov;
    const DroopFitOptions& d = c.droop_fit;
    return Json{
        {"version", kSchemaVersion},
        {"rollout",
         {{"dt", r.dt},
          {"stages", r.stages},
          {"batch_size", r.batch_size},
          {"gamma", r.gamma},
          {"lambda", r.lambda},
          {"beta", r.beta},
          {"delta0_box", detail::interval_json(r.delta0_box)},
          {"omega0_box", detail::interval_json(r.omega0_box)},
          {"episodes", r.episodes},
          {"lr", detail::schedule_json(r.lr)},
          {"rng_seed", r.rng_seed},
          {"hidden", r.hidden},
          {"selection_size", r.selection_size},
          {"blowup_threshold", r.blowup_threshold}}},
        {"lyapunov",
         {{"hidden", l.hidden},
          {"mu", l.mu},
          {"q1", l.q1},
          {"q2", l.q2},
          {"q3", l.q3},
          {"batch_size", l.batch_size},
          {"episodes", l.episodes},
          {"delta_box", detail::interval_json(l.delta_box)},
          {"omega_box", detail::interval_json(l.omega_box)},
          {"resample_threshold", l.resample_threshold},
          {"lr", detail::schedule_json(l.lr)},
          {"rng_seed", l.rng_seed}}},
        {"droop_fit",
         {{"fit_size", d.fit_size},
          {"max_iter", d.max_iter},
          {"initial_step", d.initial_step},
          {"min_step", d.min_step},
          {"divergence_threshold", d.divergence_threshold}}},
        {"controller_init", c.controller_init == ControllerStart::droop ? "droop" : "generic"}};
}

/// Overrides `base` with the keys present in `j`.
inline PipelineConfig config_from_json(const Json& j, const std::string& where = "config",
                                       PipelineConfig base = {}) {
    check_version(j, where + ": ");
    PipelineConfig c = base;
    detail::ObjectReader top(j, where);
    top.accept("version");
    if (j.contains("rollout")) {
        RolloutConfig& r = c.rollout;
        detail::ObjectReader o(j["rollout"], where + ".rollout");
        o.get("dt", r.dt);
        o.get("stages", r.stages);
        o.get("batch_size", r.batch_size);
        o.get("gamma", r.gamma);
        o.get("lambda", r.lambda);
        o.get("beta", r.beta);
        o.get("delta0_box", r.delta0_box);
        o.get("omega0_box", r.omega0_box);
        o.get("episodes", r.episodes);
        o.get("lr", r.lr);
        o.get("rng_seed", r.rng_seed);
        o.get("hidden", r.hidden);
        o.get("selection_size", r.selection_size);
        o.get("blowup_threshold", r.blowup_threshold);
        o.finish();
    }
    if (j.contains("lyapunov")) {
        LyapunovTrainConfig& l = c.lyapunov;
        detail::ObjectReader o(j["lyapunov"], where + ".lyapunov");
        o.get("hidden", l.hidden);
        o.get("mu", l.mu);
        o.get("q1", l.q1);
        o.get("q2", l.q2);
        o.get("q3", l.q3);
        o.get("batch_size", l.batch_size);
        o.get("episodes", l.episodes);
        o.get("delta_box", l.delta_box);
        o.get("omega_box", l.omega_box);
        o.get("resample_threshold", l.resample_threshold);
        o.get("lr", l.lr);
        o.get("rng_seed", l.rng_seed);
        o.finish();
    }
    if (j.contains("droop_fit")) {
        DroopFitOptions& d = c.droop_fit;
        detail::ObjectReader o(j["droop_fit"], where + ".droop_fit");
        o.get("fit_size", d.fit_size);
        o.get("max_iter", d.max_iter);
        o.get("initial_step", d.initial_step);
        o.get("min_step", d.min_step);
        o.get("divergence_threshold", d.divergence_threshold);
        o.finish();
    }
    std::string start = c.controller_init == ControllerStart::droop ? "droop" : "generic";
    top.get("controller_init", start);
    if (start == "droop") {
        c.controller_init = ControllerStart::droop;
    } else if (start == "generic") {
        c.controller_init = ControllerStart::generic;
    } else {
        throw ValidationError(where + ".controller_init: expected \"droop\" or \"generic\"");
    }
    for (const char* section : {"rollout", "lyapunov", "droop_fit"}) {
        top.accept(section);
    }
    top.finish();
    c.validate();
    return c;
}

// =============================================================================
// Text output
// =============================================================================

/// Shortest representation that reads back to the same double.
inline std::string format_double(double x) {
    char buf[32];
    for (int precision = 15; precision <= 17; ++precision) {
        std::snprintf(buf, sizeof buf, "%.*g", precision, x);
        if (std::strtod(buf, nullptr) == x) {
            break;
        }
    }
    return buf;
}

inline std::string lyapunov_log_csv(const std::vector<LyapunovEpisodeLog>& log) {
    std::ostringstream out;
    out << "episode,l1,l2,l3,total,rho\n";
    for (const auto& e : log) {
        out << e.episode << ',' << format_double(e.l1) << ',' << format_double(e.l2) << ',' << format_double(e.l3)
            << ',' << format_double(e.total) << ',' << format_double(e.rho) << '\n';
    }
    return out.str();
}

inline std::string controller_log_csv(const std::vector<ControllerEpisodeLog>& log) {
    std::ostringstream out;
    out << "episode,mean_nadir,mean_effort,mean_regularizer,total,normalized_vs_droop\n";
    for (const auto& e : log) {
        out << e.episode << ',' << format_double(e.mean_nadir) << ',' << format_double(e.mean_effort) << ','
            << format_double(e.mean_regularizer) << ',' << format_double(e.total) << ','
            << format_double(e.normalized_vs_droop) << '\n';
    }
    return out.str();
}

/// 64-bit FNV-1a, hex.
inline std::string content_hash(std::string_view bytes) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016" PRIx64, h);
    return buf;
}

// =============================================================================
// Run manifest
// =============================================================================

struct RunManifest {
    std::string command;            // e.g. "train lyapunov"
    std::vector<std::string> args;  // full argument vector after the program name
    std::string case_path;
    std::string case_hash;
    Json config = Json::object();
    std::uint64_t seed = 0;
    Json checkpoints = Json::object();  // role -> path
    Json outputs = Json::object();      // role -> path
    Json metrics = Json::object();
    double duration_s = 0.0;
};

inline Json manifest_to_json(const RunManifest& m) {
    return Json{{"version", kSchemaVersion}, {"command", m.command},     {"args", m.args},
                {"case", {{"path", m.case_path}, {"hash", m.case_hash}}},   {"config", m.config},
                {"seed", m.seed},           {"checkpoints", m.checkpoints}, {"outputs", m.outputs},
                {"metrics", m.metrics},     {"duration_s", m.duration_s}};
}

inline RunManifest manifest_from_json(const Json& j, const std::string& where = "") {
    check_version(j, where);
    RunManifest m;
    try {
        m.command = j.at("command").get<std::string>();
        m.args = j.at("args").get<std::vector<std::string>>();
        m.case_path = j.at("case").at("path").get<std::string>();
        m.case_hash = j.at("case").at("hash").get<std::string>();
        m.config = j.at("config");
        m.seed = j.at("seed").get<std::uint64_t>();
        m.checkpoints = j.at("checkpoints");
        m.outputs = j.at("outputs");
        m.metrics = j.at("metrics");
        m.duration_s = j.at("duration_s").get<double>();
    } catch (const Json::exception& e) {
        throw ValidationError(where + "manifest: " + e.what());
    }
    return m;
}

// =============================================================================
// Pipeline stages
// =============================================================================

/// Controller start for a given droop fit and seed.
inline ControllerParams controller_start(const PowerSystem& sys, const DroopParams& droop, const PipelineConfig& cfg) {
    return cfg.controller_init == ControllerStart::droop
               ? initialize_from_droop(sys.network, droop, cfg.rollout.hidden, cfg.rollout.rng_seed)
               : initialize_controller(sys.network, cfg.rollout.hidden, cfg.rollout.rng_seed);
}

/// Controller training with the Lyapunov penalty (`net` given) or without (λ forced to 0).
inline ControllerTrainResult run_controller_training(const PowerSystem& sys, const DroopParams& droop,
                                                     const LyapunovNet* net, const PipelineConfig& cfg,
                                                     const ControllerProgress& progress = {}) {
    RolloutConfig rc = cfg.rollout;
    if (net == nullptr) {
        rc.lambda = 0.0;
    }
    return train_controller(sys, controller_start(sys, droop, cfg), net, rc, &droop, progress);
}

struct Comparison {
    CostSummary droop;
    CostSummary rnn_lyap;
    CostSummary rnn_wo_lyap;

    [[nodiscard]] Json to_json() const {
        auto entry = [](const CostSummary& s) {
            return Json{{"cost", s.cost}, {"nadir", s.nadir}, {"effort", s.effort}, {"tail_peak", s.tail_peak},
                        {"truncated", s.truncated}};
        };
        return Json{{"version", kSchemaVersion},
                    {"droop", 1.0},
                    {"rnn_lyap", rnn_lyap.cost / droop.cost},
                    {"rnn_wo_lyap", rnn_wo_lyap.cost / droop.cost},
                    {"raw", {{"droop", entry(droop)}, {"rnn_lyap", entry(rnn_lyap)}, {"rnn_wo_lyap", entry(rnn_wo_lyap)}}}};
    }
};

/// Objective without regularization on the 100 held-out initial states.
inline Comparison compare_policies(const PowerSystem& sys, const DroopParams& droop, const ControllerParams& with_lyap,
                                   const ControllerParams& without_lyap, const RolloutConfig& cfg) {
    const auto held = held_out_states(sys, cfg);
    return {evaluate_policy(sys, droop, nullptr, cfg, held), evaluate_policy(sys, with_lyap, nullptr, cfg, held),
            evaluate_policy(sys, without_lyap, nullptr, cfg, held)};
}

// =============================================================================
// Figure data
// =============================================================================

inline constexpr std::size_t kSlicePoints = 61;
inline constexpr double kSliceHalfWidth = 6.0;

struct AxisSlice {
    std::size_t axis = 0;  // 0..N−1: δ_i, N..2N−1: ω_i
    Vec offsets;
    Vec values;
    Vec lie;
    std::size_t argmin = 0;
};

/// V and its Lie derivative under `droop` along one state coordinate, the
/// others held at the equilibrium. Offsets are rad or rad/s.
inline AxisSlice axis_slice(const PowerSystem& sys, const LyapunovNet& net, const DroopParams& droop, std::size_t axis,
                            std::size_t points = kSlicePoints, double half_width = kSliceHalfWidth) {
    const std::size_t n = sys.n();
    if (axis >= 2 * n || points < 2) {
        throw ValidationError("axis_slice: axis out of range");
    }
    AxisSlice s;
    s.axis = axis;
    for (std::size_t p = 0; p < points; ++p) {
        const double t = -half_width + 2.0 * half_width * static_cast<double>(p) / static_cast<double>(points - 1);
        SystemState x = sys.rest();
        (axis < n ? x.delta[axis] : x.omega[axis - n]) += t;
        const Vec u = droop_action(droop, sys.network, x.omega);
        s.offsets.push_back(t);
        s.values.push_back(value(net, x));
        s.lie.push_back(lie_derivative(net, sys, x, u));
        if (s.values.back() < s.values[s.argmin]) {
            s.argmin = p;
        }
    }
    return s;
}

struct SliceReport {
    std::vector<AxisSlice> slices;
    std::size_t center = 0;
    std::size_t off_center_minima = 0;
    std::size_t points = 0;          // slice points excluding the equilibrium cell
    std::size_t positive_lie = 0;    // of those, with ∇_f V > 0

    [[nodiscard]] double nonpositive_fraction() const {
        return points == 0 ? 1.0 : 1.0 - static_cast<double>(positive_lie) / static_cast<double>(points);
    }
};

inline SliceReport check_slices(const PowerSystem& sys, const LyapunovNet& net, const DroopParams& droop,
                                std::size_t points = kSlicePoints, double half_width = kSliceHalfWidth) {
    SliceReport r;
    r.center = points / 2;
    for (std::size_t axis = 0; axis < 2 * sys.n(); ++axis) {
        AxisSlice s = axis_slice(sys, net, droop, axis, points, half_width);
        r.off_center_minima += s.argmin == r.center ? 0 : 1;
        for (std::size_t p = 0; p < points; ++p) {
            if (p == r.center) {
                continue;
            }
            ++r.points;
            r.positive_lie += s.lie[p] > 0.0 ? 1 : 0;
        }
        r.slices.push_back(std::move(s));
    }
    return r;
}

inline std::string slices_csv(const SliceReport& r, std::size_t n) {
    std::ostringstream out;
    out << "axis,offset,V,lie\n";
    for (const AxisSlice& s : r.slices) {
        const std::string name = (s.axis < n ? "delta_" : "omega_") + std::to_string(s.axis % n);
        for (std::size_t p = 0; p < s.offsets.size(); ++p) {
            out << name << ',' << format_double(s.offsets[p]) << ',' << format_double(s.values[p]) << ','
                << format_double(s.lie[p]) << '\n';
        }
    }
    return out.str();
}

/// V and ∇_f V on a grid over (δ_bus, ω_bus), others at the equilibrium.
inline std::string surface_csv(const PowerSystem& sys, const LyapunovNet& net, const DroopParams& droop,
                               std::size_t bus, std::size_t points = kSlicePoints,
                               double half_width = kSliceHalfWidth) {
    if (bus >= sys.n()) {
        throw ValidationError("export-surface: bus " + std::to_string(bus) + " out of range");
    }
    std::ostringstream out;
    out << "delta,omega,V,lie\n";
    const auto at = [&](std::size_t p) {
        return -half_width + 2.0 * half_width * static_cast<double>(p) / static_cast<double>(points - 1);
    };
    for (std::size_t a = 0; a < points; ++a) {
        for (std::size_t b = 0; b < points; ++b) {
            SystemState x = sys.rest();
            x.delta[bus] += at(a);
            x.omega[bus] += at(b);
            const Vec u = droop_action(droop, sys.network, x.omega);
            out << format_double(x.delta[bus]) << ',' << format_double(x.omega[bus]) << ','
                << format_double(value(net, x)) << ',' << format_double(lie_derivative(net, sys, x, u)) << '\n';
        }
    }
    return out.str();
}

/// (t, ω_i, u_i) rows for k = 0..K−1 plus the final state with its action.
template <typename Policy>
std::string simulate_csv(const PowerSystem& sys, const Policy& policy, const RolloutConfig& cfg,
                         const SystemState& initial) {
    const TrajectoryRecord r = rollout(sys, policy, nullptr, cfg, initial);
    const std::size_t n = sys.n();
    std::ostringstream out;
    out << 't';
    for (std::size_t i = 0; i < n; ++i) {
        out << ",omega_" << i;
    }
    for (std::size_t i = 0; i < n; ++i) {
        out << ",u_" << i;
    }
    out << '\n';
    for (std::size_t k = 0; k < r.states.size(); ++k) {
        Vec u;
        if (k < r.actions.size()) {
            u = r.actions[k];
        } else {
            RolloutConfig one = cfg;
            one.stages = 1;
            u = rollout(sys, policy, nullptr, one, r.states[k]).actions.front();
        }
        out << format_double(static_cast<double>(k) * cfg.dt);
        for (double w : r.states[k].omega) {
            out << ',' << format_double(w);
        }
        for (double x : u) {
            out << ',' << format_double(x);
        }
        out << '\n';
    }
    return out.str();
}

} // namespace lyapreg
