#pragma once

// Checkpoint: {version, arch, parameters: {name: flat array}, rng_seed, episode}.
// Doubles are written in shortest round-trip form, so save/load is bit-exact.

#include "lyapreg/case_file.hpp"
#include "lyapreg/error.hpp"

#include <json.hpp>

#include <cstdint>
#include <map>
#include <string>
#include <vector>

namespace lyapreg::grad {

struct Checkpoint {
    Json arch = Json::object();
    std::map<std::string, std::vector<double>> parameters;
    std::uint64_t rng_seed = 0;
    std::size_t episode = 0;
    Json extra = Json::object();  // module-specific fields (bounds, metrics)

    [[nodiscard]] const std::vector<double>& at(const std::string& name) const {
        auto it = parameters.find(name);
        if (it == parameters.end()) {
            throw ValidationError("checkpoint: missing parameter '" + name + "'");
        }
        return it->second;
    }
};

inline Json to_json(const Checkpoint& c) {
    Json params = Json::object();
    for (const auto& [name, values] : c.parameters) {
        params[name] = values;
    }
    Json j{{"version", kSchemaVersion},
           {"arch", c.arch},
           {"parameters", params},
           {"rng_seed", c.rng_seed},
           {"episode", c.episode}};
    for (const auto& [key, value] : c.extra.items()) {
        j[key] = value;
    }
    return j;
}

inline Checkpoint checkpoint_from_json(const Json& j, const std::string& where = "") {
    check_version(j, where);
    for (const char* key : {"arch", "parameters", "rng_seed", "episode"}) {
        if (!j.contains(key)) {
            throw ValidationError(where + key + ": missing");
        }
    }
    Checkpoint c;
    c.arch = j["arch"];
    c.rng_seed = j["rng_seed"].get<std::uint64_t>();
    c.episode = j["episode"].get<std::size_t>();
    for (const auto& [name, values] : j["parameters"].items()) {
        if (!values.is_array()) {
            throw ValidationError(where + "parameters." + name + ": expected an array");
        }
        c.parameters[name] = values.get<std::vector<double>>();
    }
    for (const auto& [key, value] : j.items()) {
        if (key != "version" && key != "arch" && key != "parameters" && key != "rng_seed" && key != "episode") {
            c.extra[key] = value;
        }
    }
    return c;
}

inline void save_checkpoint(const std::string& path, const Checkpoint& c) { write_json_file(path, to_json(c)); }

inline Checkpoint load_checkpoint(const std::string& path) {
    return checkpoint_from_json(read_json_file(path), path + ": ");
}

} // namespace lyapreg::grad
