// lyapreg command line.
//
//   lyapreg case  validate|kron-reduce|equilibrium --case FILE
//   lyapreg train droop|lyapunov|controller        --case FILE [--seed N] [--config FILE]
//   lyapreg eval  simulate|compare|export-surface  --case FILE
//   lyapreg replay --manifest FILE
//
// Outputs go to --out-dir (default $LYAPREG_OUT_DIR, else ./runs). Every
// command writes manifest_<command>.json next to its outputs.
// Exit codes: 0 success, 1 unexpected failure, 2 validation, 3 numeric.

#include "lyapreg/case_file.hpp"
#include "lyapreg/pipeline.hpp"

#include <CLI11.hpp>

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <map>
#include <optional>
#include <string>

namespace fs = std::filesystem;
using namespace lyapreg;

namespace {

constexpr int kExitFailure = 1;
constexpr int kExitValidation = 2;
constexpr int kExitNumeric = 3;

struct Options {
    std::string group;
    std::string action;
    std::string case_path;
    std::string config_path;
    std::string out_dir;
    std::uint64_t seed = 1;
    std::optional<double> dt;
    std::optional<std::size_t> stages;
    std::string lyapunov;
    std::string droop;
    std::string controller;
    std::string controller_lyap;
    std::string controller_wo;
    bool no_regularizer = false;
    bool from_rest = false;
    std::size_t bus = 0;
    std::size_t state_index = 0;

    [[nodiscard]] std::string command() const { return group + " " + action; }
};

Json options_to_json(const Options& o) {
    Json j{{"group", o.group},
           {"action", o.action},
           {"case", o.case_path},
           {"config", o.config_path},
           {"out_dir", o.out_dir},
           {"seed", o.seed},
           {"lyapunov", o.lyapunov},
           {"droop", o.droop},
           {"controller", o.controller},
           {"controller_lyap", o.controller_lyap},
           {"controller_wo", o.controller_wo},
           {"no_regularizer", o.no_regularizer},
           {"from_rest", o.from_rest},
           {"bus", o.bus},
           {"state_index", o.state_index}};
    j["dt"] = o.dt ? Json(*o.dt) : Json(nullptr);
    j["stages"] = o.stages ? Json(*o.stages) : Json(nullptr);
    return j;
}

Options options_from_json(const Json& j) {
    Options o;
    try {
        o.group = j.at("group").get<std::string>();
        o.action = j.at("action").get<std::string>();
        o.case_path = j.at("case").get<std::string>();
        o.config_path = j.at("config").get<std::string>();
        o.out_dir = j.at("out_dir").get<std::string>();
        o.seed = j.at("seed").get<std::uint64_t>();
        o.lyapunov = j.at("lyapunov").get<std::string>();
        o.droop = j.at("droop").get<std::string>();
        o.controller = j.at("controller").get<std::string>();
        o.controller_lyap = j.at("controller_lyap").get<std::string>();
        o.controller_wo = j.at("controller_wo").get<std::string>();
        o.no_regularizer = j.at("no_regularizer").get<bool>();
        o.from_rest = j.at("from_rest").get<bool>();
        o.bus = j.at("bus").get<std::size_t>();
        o.state_index = j.at("state_index").get<std::size_t>();
        if (!j.at("dt").is_null()) {
            o.dt = j["dt"].get<double>();
        }
        if (!j.at("stages").is_null()) {
            o.stages = j["stages"].get<std::size_t>();
        }
    } catch (const Json::exception& e) {
        throw ValidationError(std::string("manifest options: ") + e.what());
    }
    return o;
}

std::string absolute(const std::string& p) { return p.empty() ? p : fs::absolute(p).lexically_normal().string(); }

std::string default_out_dir() {
    const char* env = std::getenv("LYAPREG_OUT_DIR");
    return env != nullptr && *env != '\0' ? env : "runs";
}

/// Fills defaults that depend on the output directory and makes paths absolute.
void resolve(Options& o) {
    o.out_dir = absolute(o.out_dir.empty() ? default_out_dir() : o.out_dir);
    const fs::path out(o.out_dir);
    auto or_default = [&](std::string& p, const char* file) { p = absolute(p.empty() ? (out / file).string() : p); };
    o.case_path = absolute(o.case_path);
    o.config_path = absolute(o.config_path);
    if (o.lyapunov.empty() && o.action == "export-surface") {
        o.lyapunov = (out / "lyapunov.json").string();
    }
    o.lyapunov = absolute(o.lyapunov);
    or_default(o.droop, "droop.json");
    or_default(o.controller_lyap, "controller_lyap.json");
    or_default(o.controller_wo, "controller_wo_lyap.json");
    o.controller = absolute(o.controller);
}

PipelineConfig build_config(const Options& o) {
    PipelineConfig cfg;
    if (!o.config_path.empty()) {
        cfg = config_from_json(read_json_file(o.config_path), o.config_path);
    }
    cfg.set_seed(o.seed);
    if (o.dt) {
        cfg.rollout.dt = *o.dt;
    }
    if (o.stages) {
        cfg.rollout.stages = *o.stages;
    }
    cfg.validate();
    return cfg;
}

void require_file(const std::string& path, const std::string& what, const std::string& hint) {
    if (!fs::exists(path)) {
        throw ValidationError(path + ": " + what + " not found; " + hint);
    }
}

void check_dimension(std::size_t got, const PowerSystem& sys, const std::string& path) {
    if (got != sys.n()) {
        throw ValidationError(path + ": checkpoint has " + std::to_string(got) + " buses, case has " +
                              std::to_string(sys.n()));
    }
}

DroopParams load_droop(const Options& o, const PowerSystem& sys) {
    require_file(o.droop, "droop coefficients", "run `lyapreg train droop` first or pass --droop");
    DroopParams d = droop_from_json(read_json_file(o.droop), o.droop + ": ");
    check_dimension(d.coefficients.size(), sys, o.droop);
    d.validate(sys.n());
    return d;
}

LyapunovNet load_lyapunov(const std::string& path, const PowerSystem& sys) {
    require_file(path, "Lyapunov checkpoint", "run `lyapreg train lyapunov` first");
    LyapunovNet net = lyapunov_from_checkpoint(grad::load_checkpoint(path));
    check_dimension(net.n_buses(), sys, path);
    return net;
}

ControllerParams load_controller(const std::string& path, const PowerSystem& sys) {
    require_file(path, "controller checkpoint", "run `lyapreg train controller` first");
    ControllerParams p = controller_from_checkpoint(grad::load_checkpoint(path));
    check_dimension(p.n_buses, sys, path);
    return p;
}

class Run {
public:
    Run(const Options& o, const PipelineConfig& cfg) : o_(o), cfg_(cfg) {
        manifest_.command = o.command();
        manifest_.case_path = o.case_path;
        manifest_.seed = o.seed;
        manifest_.config = config_to_json(cfg);
        fs::create_directories(o.out_dir);
    }

    [[nodiscard]] std::string path(const std::string& file) const { return (fs::path(o_.out_dir) / file).string(); }

    void emit(const std::string& role, const std::string& file, const std::string& text, bool checkpoint = false) {
        const std::string p = path(file);
        write_text_file(p, text);
        (checkpoint ? manifest_.checkpoints : manifest_.outputs)[role] = {{"path", p}, {"hash", content_hash(text)}};
        std::cout << "wrote " << p << "\n";
    }

    void emit_json(const std::string& role, const std::string& file, const Json& j, bool checkpoint = false) {
        emit(role, file, j.dump(2) + "\n", checkpoint);
    }

    void uses(const std::string& role, const std::string& p) {
        manifest_.checkpoints[role] = {{"path", p}, {"hash", content_hash(read_text_file(p))}};
    }

    RunManifest& manifest() { return manifest_; }
    const PipelineConfig& cfg() const { return cfg_; }

private:
    const Options& o_;
    const PipelineConfig& cfg_;
    RunManifest manifest_;
};

// --- case --------------------------------------------------------------------

void case_validate(Run& run, const NetworkCase& c) {
    run.manifest().metrics = {{"n_buses", c.n_buses}};
    std::cout << "valid case with " << c.n_buses << " buses\n";
}

void case_kron_reduce(Run& run, const Options& o) {
    const AdmittanceCase a = admittance_from_json(read_json_file(o.case_path), o.case_path + ": ");
    const NetworkCase c = reduce_case(a, o.case_path + ": ");
    run.emit_json("reduced_case", "case_reduced.json", case_to_json(c));
    run.manifest().metrics = {{"n_generators", a.admittance.n_generators}, {"n_loads", a.admittance.n_loads}};
}

void case_equilibrium(Run& run, const NetworkCase& c) {
    const Equilibrium eq = solve_equilibrium(c);
    run.emit_json("equilibrium", "equilibrium.json", equilibrium_to_json(eq));
    run.manifest().metrics = {{"residual_norm", eq.residual_norm}, {"iterations", eq.iterations},
                              {"slack_adjustment", eq.slack_adjustment}};
    std::cout << "equilibrium residual " << eq.residual_norm << " after " << eq.iterations << " iterations\n";
}

// --- train -------------------------------------------------------------------

void train_droop(Run& run, const PowerSystem& sys) {
    const DroopFitResult r = optimize_droop(sys, run.cfg().rollout, run.cfg().droop_fit);
    run.emit_json("droop", "droop.json", droop_to_json(r.params, r.cost), true);
    run.manifest().metrics = {{"cost", r.cost}, {"iterations", r.iterations}, {"l", r.params.coefficients}};
    std::cout << "droop cost " << r.cost << "\n";
}

void train_lyapunov_cmd(Run& run, const Options& o, const PowerSystem& sys) {
    const DroopParams droop = load_droop(o, sys);
    run.uses("droop", o.droop);
    const LyapunovTrainConfig& lc = run.cfg().lyapunov;
    const LyapunovTrainResult r = train_lyapunov(sys, droop, lc, nullptr, [&](const LyapunovEpisodeLog& e) {
        if (e.episode % 100 == 0) {
            std::cout << "episode " << e.episode << " loss " << e.total << " rho " << e.rho << "\n";
        }
    });
    run.emit_json("lyapunov", "lyapunov.json", grad::to_json(lyapunov_checkpoint(r.net, lc.rng_seed, lc.episodes)),
                  true);
    run.emit("lyapunov_log", "lyapunov_log.csv", lyapunov_log_csv(r.log));

    auto rng = make_rng(lc.rng_seed, streams::fresh_check);
    const double scale = sys.network.omega_scale();
    const auto fresh = sample_states(rng, 10000, sys.rest(), lc.delta_box,
                                     {lc.omega_box.lo * scale, lc.omega_box.hi * scale});
    const ConditionReport rep = check_conditions(r.net, sys, fresh, droop);
    const double l3 = loss_l3(r.net, sys, droop);
    run.manifest().metrics = {{"fresh_rho", rep.rho}, {"l3", l3}, {"final_total", r.log.empty() ? 0.0 : r.log.back().total}};
    std::cout << "fresh rho " << rep.rho << ", l3 " << l3 << "\n";
}

void train_controller_cmd(Run& run, const Options& o, const PowerSystem& sys) {
    if (o.lyapunov.empty() == !o.no_regularizer) {
        throw ValidationError(o.lyapunov.empty()
                                  ? "train controller: choose --lyapunov <checkpoint> or --no-regularizer"
                                  : "train controller: --lyapunov and --no-regularizer are mutually exclusive");
    }
    const DroopParams droop = load_droop(o, sys);
    run.uses("droop", o.droop);
    std::optional<LyapunovNet> net;
    if (!o.lyapunov.empty()) {
        net = load_lyapunov(o.lyapunov, sys);
        run.uses("lyapunov", o.lyapunov);
    }
    const ControllerTrainResult r =
        run_controller_training(sys, droop, net ? &*net : nullptr, run.cfg(), [](const ControllerEpisodeLog& e) {
            if (e.episode % 50 == 0) {
                std::cout << "episode " << e.episode << " loss " << e.total << " vs droop " << e.normalized_vs_droop
                          << "\n";
            }
        });
    const std::string tag = net ? "controller_lyap" : "controller_wo_lyap";
    run.emit_json(tag, tag + ".json",
                  grad::to_json(controller_checkpoint(r.params, run.cfg().rollout.rng_seed, r.best_episode)), true);
    run.emit(tag + "_log", tag + "_log.csv", controller_log_csv(r.log));
    run.manifest().metrics = {{"best_episode", r.best_episode}, {"best_selection_loss", r.best_selection_loss}};
    std::cout << "best selection loss " << r.best_selection_loss << " at episode " << r.best_episode << "\n";
}

// --- eval --------------------------------------------------------------------

void eval_simulate(Run& run, const Options& o, const PowerSystem& sys) {
    const RolloutConfig& rc = run.cfg().rollout;
    SystemState x0 = sys.rest();
    if (!o.from_rest) {
        const auto held = held_out_states(sys, rc);
        if (o.state_index >= held.size()) {
            throw ValidationError("--state-index must be below " + std::to_string(held.size()));
        }
        x0 = held[o.state_index];
    }
    std::string csv;
    TrajectoryRecord r;
    if (o.controller.empty()) {
        const DroopParams d = load_droop(o, sys);
        run.uses("droop", o.droop);
        csv = simulate_csv(sys, d, rc, x0);
        r = rollout(sys, d, nullptr, rc, x0);
    } else {
        const ControllerParams p = load_controller(o.controller, sys);
        run.uses("controller", o.controller);
        csv = simulate_csv(sys, p, rc, x0);
        r = rollout(sys, p, nullptr, rc, x0);
    }
    run.emit("trajectory", "simulate.csv", csv);
    run.manifest().metrics = {{"cost", r.nadir + r.effort}, {"truncated", r.truncated}};
}

void eval_compare(Run& run, const Options& o, const PowerSystem& sys) {
    const DroopParams d = load_droop(o, sys);
    const ControllerParams with_lyap = load_controller(o.controller_lyap, sys);
    const ControllerParams without = load_controller(o.controller_wo, sys);
    run.uses("droop", o.droop);
    run.uses("controller_lyap", o.controller_lyap);
    run.uses("controller_wo_lyap", o.controller_wo);
    const Json j = compare_policies(sys, d, with_lyap, without, run.cfg().rollout).to_json();
    run.emit_json("compare", "compare.json", j);
    run.manifest().metrics = {{"droop", 1.0}, {"rnn_lyap", j["rnn_lyap"]}, {"rnn_wo_lyap", j["rnn_wo_lyap"]}};
    std::cout << "normalized cost: droop 1, rnn_lyap " << j["rnn_lyap"] << ", rnn_wo_lyap " << j["rnn_wo_lyap"]
              << "\n";
}

void eval_export_surface(Run& run, const Options& o, const PowerSystem& sys) {
    const std::string& ckpt = o.lyapunov;
    const LyapunovNet net = load_lyapunov(ckpt, sys);
    const DroopParams d = load_droop(o, sys);
    run.uses("lyapunov", ckpt);
    run.uses("droop", o.droop);
    run.emit("surface", "surface_bus" + std::to_string(o.bus) + ".csv", surface_csv(sys, net, d, o.bus));
    const SliceReport slices = check_slices(sys, net, d);
    run.emit("slices", "slices.csv", slices_csv(slices, sys.n()));
    run.manifest().metrics = {{"off_center_minima", slices.off_center_minima},
                              {"nonpositive_lie_fraction", slices.nonpositive_fraction()}};
    std::cout << "slice minima off the equilibrium: " << slices.off_center_minima << ", nonpositive Lie fraction "
              << slices.nonpositive_fraction() << "\n";
}

// --- dispatch ----------------------------------------------------------------

std::string manifest_file(const Options& o) {
    std::string name = "manifest_" + o.group + "_" + o.action;
    if (o.group == "train" && o.action == "controller") {
        name += o.no_regularizer ? "_wo_lyap" : "_lyap";
    }
    for (char& ch : name) {
        ch = ch == '-' ? '_' : ch;
    }
    return name + ".json";
}

RunManifest execute(const Options& o, const PipelineConfig& cfg, const std::vector<std::string>& args) {
    const auto start = std::chrono::steady_clock::now();
    if (o.case_path.empty()) {
        throw ValidationError("--case is required");
    }
    Run run(o, cfg);
    run.manifest().args = args;
    run.manifest().case_hash = content_hash(read_text_file(o.case_path));

    if (o.group == "case" && o.action == "kron-reduce") {
        case_kron_reduce(run, o);
    } else {
        const NetworkCase c = load_case(o.case_path);
        if (o.group == "case") {
            o.action == "validate" ? case_validate(run, c) : case_equilibrium(run, c);
        } else {
            const PowerSystem sys = PowerSystem::from_case(c);
            if (o.action == "droop") {
                train_droop(run, sys);
            } else if (o.action == "lyapunov") {
                train_lyapunov_cmd(run, o, sys);
            } else if (o.action == "controller") {
                train_controller_cmd(run, o, sys);
            } else if (o.action == "simulate") {
                eval_simulate(run, o, sys);
            } else if (o.action == "compare") {
                eval_compare(run, o, sys);
            } else {
                eval_export_surface(run, o, sys);
            }
        }
    }

    RunManifest& m = run.manifest();
    m.config["options"] = options_to_json(o);
    m.duration_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    write_json_file(run.path(manifest_file(o)), manifest_to_json(m));
    return m;
}

/// Re-runs a manifest's command and checks metrics and output hashes.
int replay(const std::string& manifest_path, const std::string& out_dir) {
    const RunManifest m = manifest_from_json(read_json_file(manifest_path), manifest_path + ": ");
    if (!m.config.contains("options")) {
        throw ValidationError(manifest_path + ": config.options missing");
    }
    Options o = options_from_json(m.config["options"]);
    if (!out_dir.empty()) {
        o.out_dir = absolute(out_dir);
    }
    const std::string hash = content_hash(read_text_file(o.case_path));
    if (hash != m.case_hash) {
        throw ValidationError(o.case_path + ": case file changed since the recorded run (hash " + hash + ", recorded " +
                              m.case_hash + ")");
    }
    Json snapshot = m.config;
    snapshot.erase("options");
    const PipelineConfig cfg = config_from_json(snapshot, manifest_path + ": config");
    const RunManifest again = execute(o, cfg, m.args);

    bool same = again.metrics == m.metrics;
    if (!same) {
        std::cerr << "metrics differ:\n  recorded " << m.metrics.dump() << "\n  replayed " << again.metrics.dump()
                  << "\n";
    }
    for (const Json* group : {&m.outputs, &m.checkpoints}) {
        const Json& replayed = group == &m.outputs ? again.outputs : again.checkpoints;
        for (const auto& [role, entry] : group->items()) {
            if (!replayed.contains(role) || replayed[role]["hash"] != entry["hash"]) {
                std::cerr << "output '" << role << "' differs from the recorded run\n";
                same = false;
            }
        }
    }
    if (!same) {
        throw NumericError("replay of " + manifest_path + " did not reproduce the recorded outputs");
    }
    std::cout << "replay reproduced " << m.command << "\n";
    return 0;
}

void add_common(CLI::App* sub, Options& o) {
    sub->add_option("--case", o.case_path, "Case JSON file")->required();
    sub->add_option("--config", o.config_path, "Config JSON overriding the defaults");
    sub->add_option("--seed", o.seed, "Run seed")->capture_default_str();
    sub->add_option("--out-dir", o.out_dir, "Output directory (default $LYAPREG_OUT_DIR or ./runs)");
    sub->add_option("--dt", o.dt, "Integration step in seconds");
    sub->add_option("--stages", o.stages, "Unrolled stages K");
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Lyapunov-regularized frequency control"};
    app.require_subcommand(1);
    Options o;
    std::string manifest_path;

    struct Leaf {
        const char* group;
        const char* action;
        const char* help;
    };
    const Leaf leaves[] = {
        {"case", "validate", "Validate a case file"},
        {"case", "kron-reduce", "Kron-reduce an admittance file to case_reduced.json"},
        {"case", "equilibrium", "Solve the distributed-slack equilibrium"},
        {"train", "droop", "Fit the linear droop baseline"},
        {"train", "lyapunov", "Learn the neural Lyapunov function"},
        {"train", "controller", "Train the stacked-ReLU controller"},
        {"eval", "simulate", "Simulate one trajectory to simulate.csv"},
        {"eval", "compare", "Held-out costs normalized by droop"},
        {"eval", "export-surface", "V and Lie derivative grids for one bus"},
    };
    std::map<std::string, CLI::App*> groups;
    for (const char* g : {"case", "train", "eval"}) {
        groups[g] = app.add_subcommand(g, std::string(g) + " commands");
        groups[g]->require_subcommand(1);
    }
    for (const Leaf& leaf : leaves) {
        CLI::App* sub = groups[leaf.group]->add_subcommand(leaf.action, leaf.help);
        add_common(sub, o);
        sub->callback([&o, leaf] {
            o.group = leaf.group;
            o.action = leaf.action;
        });
        const std::string name = std::string(leaf.group) + " " + leaf.action;
        if (name == "train lyapunov" || name == "train controller" || name == "eval simulate" ||
            name == "eval compare" || name == "eval export-surface") {
            sub->add_option("--droop", o.droop, "Droop coefficients (default <out-dir>/droop.json)");
        }
        if (name == "train controller" || name == "eval export-surface") {
            sub->add_option("--lyapunov", o.lyapunov, "Lyapunov checkpoint");
        }
        if (name == "train controller") {
            sub->add_flag("--no-regularizer", o.no_regularizer, "Train without the Lyapunov penalty");
        }
        if (name == "eval simulate") {
            sub->add_option("--controller", o.controller, "Controller checkpoint (default: droop law)");
            sub->add_flag("--from-rest", o.from_rest, "Start at the equilibrium");
            sub->add_option("--state-index", o.state_index, "Held-out initial state index");
        }
        if (name == "eval compare") {
            sub->add_option("--controller-lyap", o.controller_lyap, "Regularized controller checkpoint");
            sub->add_option("--controller-wo", o.controller_wo, "Unregularized controller checkpoint");
        }
        if (name == "eval export-surface") {
            sub->add_option("--bus", o.bus, "Bus whose (delta, omega) plane is exported");
        }
    }
    CLI::App* rep = app.add_subcommand("replay", "Re-run a manifest and verify its outputs");
    rep->add_option("--manifest", manifest_path, "Manifest JSON")->required();
    rep->add_option("--out-dir", o.out_dir, "Write the replayed outputs here instead");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : kExitValidation;
    }

    try {
        if (rep->parsed()) {
            return replay(manifest_path, o.out_dir);
        }
        resolve(o);
        const PipelineConfig cfg = build_config(o);
        execute(o, cfg, std::vector<std::string>(argv + 1, argv + argc));
        return 0;
    } catch (const ValidationError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitValidation;
    } catch (const NumericError& e) {
        std::cerr << "numeric failure: " << e.what() << "\n";
        return kExitNumeric;
    } catch (const Json::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitValidation;
    } catch (const std::exception& e) {
        std::cerr << "failure: " << e.what() << "\n";
        return kExitFailure;
    }
}
