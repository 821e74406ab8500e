#include "lyapreg/case_file.hpp"
#include "lyapreg/pipeline.hpp"

#include "../fd_cases.hpp"
#include "../oracles.hpp"
#include "../support.hpp"

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

using namespace lyapreg;
using namespace testing_support;
namespace fs = std::filesystem;

namespace {

constexpr std::size_t kSeeds = 5;

struct Verdict {
    bool pass = false;
    std::string detail;
};

std::string fmt(const char* f, double x) {
    char buf[64];
    std::snprintf(buf, sizeof buf, f, x);
    return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

PowerSystem load_system(const std::string& name) { return PowerSystem::from_case(load_case(data_path("cases/" + name))); }

// --- full pipeline ------------------------------------------------------------

struct PipelineRun {
    DroopParams droop;
    LyapunovNet net;
    ControllerParams with_lyap;
    ControllerParams without_lyap;
    Comparison comparison;
    ConditionReport fresh;
    double l3 = 0.0;
    SliceReport slices;
    std::map<std::string, std::string> files;
    double seconds = 0.0;
};

PipelineRun run_pipeline(const PowerSystem& sys, std::uint64_t seed) {
    const auto t0 = std::chrono::steady_clock::now();
    PipelineConfig cfg = PipelineConfig::desk_scale();
    cfg.set_seed(seed);
    cfg.validate();
    PipelineRun r;

    const DroopFitResult droop = optimize_droop(sys, cfg.rollout, cfg.droop_fit);
    r.droop = droop.params;
    r.files["droop.json"] = droop_to_json(droop.params, droop.cost).dump(2) + "\n";

    const LyapunovTrainResult lyap = train_lyapunov(sys, r.droop, cfg.lyapunov);
    r.net = lyap.net;
    r.files["lyapunov.json"] =
        grad::to_json(lyapunov_checkpoint(lyap.net, seed, cfg.lyapunov.episodes)).dump(2) + "\n";
    r.files["lyapunov_log.csv"] = lyapunov_log_csv(lyap.log);

    const ControllerTrainResult with = run_controller_training(sys, r.droop, &r.net, cfg);
    const ControllerTrainResult without = run_controller_training(sys, r.droop, nullptr, cfg);
    r.with_lyap = with.params;
    r.without_lyap = without.params;
    r.files["controller_lyap.json"] =
        grad::to_json(controller_checkpoint(with.params, seed, with.best_episode)).dump(2) + "\n";
    r.files["controller_lyap_log.csv"] = controller_log_csv(with.log);
    r.files["controller_wo_lyap.json"] =
        grad::to_json(controller_checkpoint(without.params, seed, without.best_episode)).dump(2) + "\n";
    r.files["controller_wo_lyap_log.csv"] = controller_log_csv(without.log);

    r.comparison = compare_policies(sys, r.droop, r.with_lyap, r.without_lyap, cfg.rollout);
    r.files["compare.json"] = r.comparison.to_json().dump(2) + "\n";

    auto rng = make_rng(seed, streams::fresh_check);
    const double scale = sys.network.omega_scale();
    const auto fresh = sample_states(rng, 10000, sys.rest(), cfg.lyapunov.delta_box,
                                     {cfg.lyapunov.omega_box.lo * scale, cfg.lyapunov.omega_box.hi * scale});
    r.fresh = check_conditions(r.net, sys, fresh, r.droop);
    r.l3 = loss_l3(r.net, sys, r.droop);
    r.slices = check_slices(sys, r.net, r.droop);
    r.files["slices.csv"] = slices_csv(r.slices, sys.n());
    r.seconds = seconds_since(t0);
    return r;
}

// --- criteria -----------------------------------------------------------------

Verdict gradients() {
    const auto t0 = std::chrono::steady_clock::now();
    std::mt19937_64 rng(20240601);
    double worst_primitive = 0.0;
    std::string worst_name;
    for (const PrimitiveCase& c : primitive_cases()) {
        const double e = worst_primitive_error(c, rng, 100);
        if (e >= worst_primitive) {
            worst_primitive = e;
            worst_name = c.name;
        }
    }

    // K = 100 unrolled loss with the Lyapunov penalty, directional derivatives.
    const PowerSystem sys = load_system("three_bus.json");
    RolloutConfig cfg;
    cfg.lambda = 0.5;
    const LyapunovNet net = initialize_lyapunov(sys.n(), 50, 2);
    double worst_e2e = 0.0;
    for (std::uint64_t probe = 0; probe < 100; ++probe) {
        cfg.rng_seed = probe;
        const ControllerParams p = initialize_controller(sys.network, cfg.hidden, probe);
        const SystemState x0 = draw_initial_states(sys, cfg, 1, streams::selection).front();
        std::mt19937_64 dir_rng(1000 + probe);
        const Vec dir = uniform_vec(dir_rng, p.flat().size(), -1.0, 1.0);

        grad::Tape tape;
        const DynamicsGraph dyn(tape, sys, cfg.dt);
        const StackedReluGraph pg(tape, p, true);
        const LyapunovGraph lg(tape, net, false);
        const RegularizerGraph reg{&lg, value(net, sys.rest()), cfg.beta};
        tape.propagate(unroll(tape, dyn, pg, &reg, cfg, x0).loss);
        const Vec g = pg.flat_gradient();
        double analytic = 0.0;
        for (std::size_t i = 0; i < g.size(); ++i) {
            analytic += g[i] * dir[i];
        }

        const auto f = [&](double t) {
            ControllerParams q = p;
            Vec flat = p.flat();
            for (std::size_t i = 0; i < flat.size(); ++i) {
                flat[i] += t * dir[i];
            }
            q.set_flat(flat);
            return rollout(sys, q, &net, cfg, x0).loss;
        };
        const double h = 1e-6;
        const double fd = (f(h) - f(-h)) / (2.0 * h);
        worst_e2e = std::max(worst_e2e, rel_err(analytic, fd));
    }
    const bool pass = worst_primitive <= 1e-4 && worst_e2e <= 1e-3;
    return {pass, "worst primitive rel err " + fmt("%.2e", worst_primitive) + " (" + worst_name + ", limit 1e-4), " +
                      "worst K=100 loss rel err " + fmt("%.2e", worst_e2e) + " (limit 1e-3), " +
                      fmt("%.1f s", seconds_since(t0))};
}

Verdict lyapunov_conditions(const PipelineRun& run) {
    const bool pass = run.fresh.rho >= 0.99 && run.l3 <= 1e-4;
    return {pass, "seed 1: rho " + fmt("%.4f", run.fresh.rho) + " on " + std::to_string(run.fresh.samples) +
                      " fresh samples (limit 0.99), l3 " + fmt("%.2e", run.l3) + " (limit 1e-4)"};
}

Verdict slice_shape(const std::vector<PipelineRun>& runs) {
    bool pass = true;
    std::string detail;
    for (std::size_t s = 0; s < runs.size(); ++s) {
        const SliceReport& r = runs[s].slices;
        pass = pass && r.off_center_minima == 0 && r.nonpositive_fraction() >= 0.99;
        detail += (s == 0 ? "" : "; ") + std::string("seed ") + std::to_string(s + 1) + ": " +
                  std::to_string(r.off_center_minima) + " off-center minima, nonpositive Lie " +
                  fmt("%.3f", r.nonpositive_fraction());
    }
    return {pass, detail};
}

Verdict controller_structure() {
    std::mt19937_64 rng(4);
    const NetworkCase c = load_case(data_path("cases/three_bus.json"));
    std::size_t violations = 0;
    for (int draw = 0; draw < 1000; ++draw) {
        ControllerParams p;
        p.n_buses = c.n_buses;
        p.hidden = 20;
        for (Vec* v : {&p.raw_q, &p.raw_z, &p.raw_b, &p.raw_c}) {
            *v = uniform_vec(rng, p.n_buses * p.hidden, -10.0, 10.0);
        }
        p.u_min = c.u_min;
        p.u_max = c.u_max;
        const StackedReluWeights w = materialize(p);
        for (std::size_t i = 0; i < p.n_buses; ++i) {
            double q_sum = 0.0;
            double z_sum = 0.0;
            for (std::size_t j = 0; j < p.hidden; ++j) {
                const std::size_t k = i * p.hidden + j;
                q_sum += w.q[k];
                z_sum += w.z[k];
                const bool ordered = j == 0 ? w.b[k] == 0.0 && w.c[k] == 0.0
                                            : w.b[k] <= w.b[k - 1] && w.c[k] <= w.c[k - 1];
                violations += q_sum >= 0.0 && z_sum <= 0.0 && ordered ? 0 : 1;
            }
            violations += evaluate(w, i, 0.0, p.u_min[i], p.u_max[i]) == 0.0 ? 0 : 1;
            double previous = -std::numeric_limits<double>::infinity();
            for (int g = 0; g <= 200; ++g) {
                const double u = evaluate(w, i, -10.0 + 0.1 * g, p.u_min[i], p.u_max[i]);
                violations += u >= previous ? 0 : 1;
                previous = u;
            }
        }
    }
    return {violations == 0, std::to_string(violations) + " violations over 1000 draws"};
}

Verdict policy_comparison(const std::vector<PipelineRun>& runs) {
    double lyap = 0.0;
    double wo = 0.0;
    double droop = 0.0;
    double tail_lyap = 0.0;
    double tail_wo = 0.0;
    double slowest = 0.0;
    for (const PipelineRun& r : runs) {
        lyap += r.comparison.rnn_lyap.cost / r.comparison.droop.cost;
        wo += r.comparison.rnn_wo_lyap.cost / r.comparison.droop.cost;
        droop += 1.0;
        tail_lyap += r.comparison.rnn_lyap.tail_peak;
        tail_wo += r.comparison.rnn_wo_lyap.tail_peak;
        slowest = std::max(slowest, r.seconds);
    }
    const double n = static_cast<double>(runs.size());
    lyap /= n;
    wo /= n;
    droop /= n;
    tail_lyap /= n;
    tail_wo /= n;
    const bool pass = lyap <= wo && lyap <= droop && tail_lyap <= tail_wo;
    return {pass, "mean normalized cost RNN-Lyap " + fmt("%.5f", lyap) + ", RNN-w/o-Lyap " + fmt("%.5f", wo) +
                      ", droop " + fmt("%.1f", droop) + "; mean tail peak " + fmt("%.3e", tail_lyap) + " vs " +
                      fmt("%.3e", tail_wo) + " rad/s; slowest seed " + fmt("%.1f s", slowest)};
}

Verdict physics() {
    // Energy drift, lossless and undamped.
    double worst_drift = 0.0;
    for (const char* name : {"three_bus.json", "ne39_reduced_10gen.json"}) {
        NetworkCase c = load_case(data_path(std::string("cases/") + name));
        std::fill(c.conductance.begin(), c.conductance.end(), 0.0);
        std::fill(c.damping.begin(), c.damping.end(), 0.0);
        const PowerSystem sys = PowerSystem::from_case(c);
        SystemState s = sys.rest();
        s.delta[1] += 0.3;
        s.omega[0] = 0.5;
        const double e0 = lossless_energy(sys.network, s);
        for (int k = 0; k < 1000; ++k) {
            s = euler_step(sys.network, sys.flows, s, Vec(c.n_buses, 0.0), 1e-3);
        }
        worst_drift = std::max(worst_drift, std::abs(lossless_energy(sys.network, s) - e0) / std::abs(e0));
    }

    // Kron reduction against the dense inverse.
    std::mt19937_64 rng(10);
    double worst_kron = 0.0;
    for (int trial = 0; trial < 100; ++trial) {
        const std::size_t gens = 1 + trial % 9;
        const std::size_t loads = 10 - gens;
        const AdmittanceMatrix a = from_lines(gens, loads, random_symmetric_lines(rng, 10, 0.5, 5.0),
                                              random_symmetric_lines(rng, 10, 0.0, 0.5), uniform_vec(rng, 10, 0.1, 1.0));
        const auto red = kron_reduce_admittance(a);
        const auto oracle = dense_kron_oracle(a);
        for (std::size_t k = 0; k < red.size(); ++k) {
            worst_kron = std::max(worst_kron, std::abs(red[k] - oracle[k]));
        }
    }

    // Equilibrium balance, evaluated term by term.
    double worst_residual = 0.0;
    for (const char* name : {"three_bus.json", "ne39_reduced_10gen.json"}) {
        const NetworkCase c = load_case(data_path(std::string("cases/") + name));
        const Equilibrium eq = solve_equilibrium(c);
        worst_residual = std::max(worst_residual, balance_residual(c, eq.state.delta, with_slack(c, eq).mech_power));
    }

    const bool pass = worst_drift <= 1e-3 && worst_kron <= 1e-9 && worst_residual <= 1e-8;
    return {pass, "energy drift " + fmt("%.2e", worst_drift) + " (limit 1e-3), Kron max abs err " +
                      fmt("%.2e", worst_kron) + " (limit 1e-9), equilibrium residual " + fmt("%.2e", worst_residual) +
                      " (limit 1e-8)"};
}

std::map<std::string, std::string> write_and_read(const PipelineRun& run, const fs::path& dir) {
    fs::remove_all(dir);
    fs::create_directories(dir);
    std::map<std::string, std::string> back;
    for (const auto& [name, text] : run.files) {
        write_text_file((dir / name).string(), text);
        back[name] = read_text_file((dir / name).string());
    }
    return back;
}

Verdict determinism(const PipelineRun& first, const PowerSystem& sys) {
    const PipelineRun second = run_pipeline(sys, 1);
    const fs::path root = fs::temp_directory_path() / "lyapreg_acceptance";
    const auto a = write_and_read(first, root / "a");
    const auto b = write_and_read(second, root / "b");
    std::size_t differing = 0;
    std::string names;
    for (const auto& [name, bytes] : a) {
        if (b.at(name) != bytes) {
            ++differing;
            names += " " + name;
        }
    }
    fs::remove_all(root);
    return {differing == 0, std::to_string(a.size() - differing) + "/" + std::to_string(a.size()) +
                                " checkpoints and logs byte-identical" + (differing == 0 ? "" : ", differ:" + names)};
}

} // namespace

int main() {
    try {
        const PowerSystem sys = load_system("three_bus.json");
        std::vector<PipelineRun> runs;
        for (std::uint64_t seed = 1; seed <= kSeeds; ++seed) {
            runs.push_back(run_pipeline(sys, seed));
            std::cout << "pipeline seed " << seed << " finished in " << fmt("%.1f s", runs.back().seconds) << std::endl;
        }

        const std::vector<Verdict> verdicts = {
            gradients(),
            lyapunov_conditions(runs.front()),
            slice_shape(runs),
            controller_structure(),
            policy_comparison(runs),
            physics(),
            determinism(runs.front(), sys),
        };
        bool all = true;
        for (std::size_t k = 0; k < verdicts.size(); ++k) {
            std::cout << "Criterion " << k + 1 << ": " << (verdicts[k].pass ? "PASS" : "FAIL") << "  "
                      << verdicts[k].detail << "\n";
            all = all && verdicts[k].pass;
        }
        return all ? 0 : 1;
    } catch (const std::exception& e) {
        std::cerr << "acceptance aborted: " << e.what() << "\n";
        return 2;
    }
}
