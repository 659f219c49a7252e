#pragma once

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "widthscale/errors.hpp"
#include "widthscale/netcore.hpp"
#include "widthscale/scaling.hpp"

namespace widthscale {

enum class BatchMode : std::uint8_t { Full, Sized };
enum class ModelVariant : std::uint8_t { Standard, Icmf };
enum class DatasetKind : std::uint8_t { Synthetic, Cifar2 };

struct BatchConfig {
    BatchMode mode = BatchMode::Full;
    int size = 0;               // used when mode == Sized
    bool independent = false;   // independent draws for the a- and w-batches
};

struct DatasetConfig {
    DatasetKind kind = DatasetKind::Synthetic;
    // synthetic
    int d_x = 20;
    int n_train = 1024;
    int n_test = 2000;
    double mu = 1.5;
    std::uint64_t seed = 0x5eed;
    // cifar2
    std::string dir;
};

// Experiment configuration; mirrors the JSON schema of the config files.
struct RunConfig {
    ScalingExponents scaling = ScalingExponents::ntk();
    Anchors anchors;
    std::vector<int> widths = {128, 256, 512, 1024, 2048, 4096};
    std::vector<std::uint64_t> seeds = {0, 1, 2, 3, 4, 5, 6, 7, 8, 9};
    long steps = 2000;
    BatchConfig batch;
    DatasetConfig dataset;
    double alpha = 0.2;
    ModelVariant variant = ModelVariant::Standard;
    std::vector<long> cadence;  // empty = log-spaced 1-2-5 decades plus final
    std::string out = "out";
    int probes = 10;
    // limit-simulation extras (limit / kl commands)
    std::vector<std::string> limits = {"ntk", "mf", "icmf"};
    int size = 4096;  // particle count N / MC sample count M

    ActivationConfig act() const { return {alpha}; }

    void validate() const {
        anchors.validate();
        act().validate();
        if (steps < 0) throw ConfigError("steps must be >= 0");
        if (widths.empty()) throw ConfigError("widths must be non-empty");
        for (std::size_t i = 1; i < widths.size(); ++i) {
            if (widths[i] <= widths[i - 1]) throw ConfigError("widths must be sorted ascending");
        }
        for (int w : widths) {
            if (w < 1) throw ConfigError("widths must be >= 1");
        }
        if (seeds.empty()) throw ConfigError("seeds must be non-empty");
        for (std::size_t i = 0; i < seeds.size(); ++i) {
            for (std::size_t j = i + 1; j < seeds.size(); ++j) {
                if (seeds[i] == seeds[j]) throw ConfigError("seeds must be distinct");
            }
        }
        if (batch.mode == BatchMode::Sized && batch.size < 1) {
            throw ConfigError("batch.size must be >= 1 in sized mode");
        }
        if (probes < 1) throw ConfigError("probes must be >= 1");
        if (size < 1) throw ConfigError("size must be >= 1");
    }
};

// Metric steps: {0,1,2,5,10,20,50,...} up to `steps`, plus the final step.
inline std::vector<long> log_cadence(long steps) {
    std::vector<long> out = {0};
    long base = 1;
    while (true) {
        for (long m : {1L, 2L, 5L}) {
            const long k = base * m;
            if (k > steps) {
                if (out.back() != steps) out.push_back(steps);
                return out;
            }
            out.push_back(k);
        }
        base *= 10;
    }
}

inline std::vector<long> effective_cadence(const RunConfig& cfg) {
    if (cfg.cadence.empty()) return log_cadence(cfg.steps);
    std::vector<long> out = cfg.cadence;
    for (long k : out) {
        if (k < 0 || k > cfg.steps) throw ConfigError("cadence step out of range");
    }
    return out;
}

namespace detail {

template <typename T>
T get_or(const nlohmann::json& j, const char* key, T fallback) {
    if (!j.contains(key)) return fallback;
    return j.at(key).get<T>();
}

}  // namespace detail

inline RunConfig config_from_json(const nlohmann::json& j) {
    RunConfig cfg;
    static const std::vector<std::string> known = {
        "scaling", "anchors", "widths", "seeds",  "steps", "batch", "dataset",
        "alpha",   "variant", "cadence", "out",   "probes", "limits", "size"};
    for (auto it = j.begin(); it != j.end(); ++it) {
        if (std::find(known.begin(), known.end(), it.key()) == known.end()) {
            throw ConfigError("unknown config key: " + it.key());
        }
    }
    if (j.contains("scaling")) {
        const auto& s = j.at("scaling");
        cfg.scaling.q_sigma = detail::get_or(s, "q_sigma", cfg.scaling.q_sigma);
        cfg.scaling.q_tilde_a = detail::get_or(s, "q_tilde_a", cfg.scaling.q_tilde_a);
        cfg.scaling.q_tilde_w = detail::get_or(s, "q_tilde_w", cfg.scaling.q_tilde_w);
    }
    if (j.contains("anchors")) {
        const auto& a = j.at("anchors");
        cfg.anchors.d_star = detail::get_or(a, "d_star", cfg.anchors.d_star);
        cfg.anchors.sigma_star = detail::get_or(a, "sigma_star", cfg.anchors.sigma_star);
        cfg.anchors.eta_hat_a_star = detail::get_or(a, "eta_hat_a_star", cfg.anchors.eta_hat_a_star);
        cfg.anchors.eta_hat_w_star = detail::get_or(a, "eta_hat_w_star", cfg.anchors.eta_hat_w_star);
    }
    cfg.widths = detail::get_or(j, "widths", cfg.widths);
    cfg.seeds = detail::get_or(j, "seeds", cfg.seeds);
    cfg.steps = detail::get_or(j, "steps", cfg.steps);
    if (j.contains("batch")) {
        const auto& b = j.at("batch");
        const std::string mode = detail::get_or<std::string>(b, "mode", "full");
        if (mode == "full") {
            cfg.batch.mode = BatchMode::Full;
        } else if (mode == "size") {
            cfg.batch.mode = BatchMode::Sized;
        } else {
            throw ConfigError("batch.mode must be 'full' or 'size'");
        }
        cfg.batch.size = detail::get_or(b, "size", cfg.batch.size);
        cfg.batch.independent = detail::get_or(b, "independent", cfg.batch.independent);
    }
    if (j.contains("dataset")) {
        const auto& d = j.at("dataset");
        const std::string kind = detail::get_or<std::string>(d, "kind", "synthetic");
        if (kind == "synthetic") {
            cfg.dataset.kind = DatasetKind::Synthetic;
        } else if (kind == "cifar2") {
            cfg.dataset.kind = DatasetKind::Cifar2;
        } else {
            throw ConfigError("dataset.kind must be 'synthetic' or 'cifar2'");
        }
        cfg.dataset.d_x = detail::get_or(d, "d_x", cfg.dataset.d_x);
        cfg.dataset.n_train = detail::get_or(d, "n_train", cfg.dataset.n_train);
        cfg.dataset.n_test = detail::get_or(d, "n_test", cfg.dataset.n_test);
        cfg.dataset.mu = detail::get_or(d, "mu", cfg.dataset.mu);
        cfg.dataset.seed = detail::get_or(d, "seed", cfg.dataset.seed);
        cfg.dataset.dir = detail::get_or(d, "dir", cfg.dataset.dir);
    }
    cfg.alpha = detail::get_or(j, "alpha", cfg.alpha);
    if (j.contains("variant")) {
        const std::string v = j.at("variant").get<std::string>();
        if (v == "standard") {
            cfg.variant = ModelVariant::Standard;
        } else if (v == "icmf") {
            cfg.variant = ModelVariant::Icmf;
        } else {
            throw ConfigError("variant must be 'standard' or 'icmf'");
        }
    }
    cfg.cadence = detail::get_or(j, "cadence", cfg.cadence);
    cfg.out = detail::get_or(j, "out", cfg.out);
    cfg.probes = detail::get_or(j, "probes", cfg.probes);
    cfg.limits = detail::get_or(j, "limits", cfg.limits);
    cfg.size = detail::get_or(j, "size", cfg.size);
    cfg.validate();
    return cfg;
}

inline nlohmann::json config_to_json(const RunConfig& cfg) {
    nlohmann::json j;
    j["scaling"] = {{"q_sigma", cfg.scaling.q_sigma},
                    {"q_tilde_a", cfg.scaling.q_tilde_a},
                    {"q_tilde_w", cfg.scaling.q_tilde_w}};
    j["anchors"] = {{"d_star", cfg.anchors.d_star},
                    {"sigma_star", cfg.anchors.sigma_star},
                    {"eta_hat_a_star", cfg.anchors.eta_hat_a_star},
                    {"eta_hat_w_star", cfg.anchors.eta_hat_w_star}};
    j["widths"] = cfg.widths;
    j["seeds"] = cfg.seeds;
    j["steps"] = cfg.steps;
    j["batch"] = {{"mode", cfg.batch.mode == BatchMode::Full ? "full" : "size"},
                  {"size", cfg.batch.size},
                  {"independent", cfg.batch.independent}};
    nlohmann::json d;
    d["kind"] = cfg.dataset.kind == DatasetKind::Synthetic ? "synthetic" : "cifar2";
    d["d_x"] = cfg.dataset.d_x;
    d["n_train"] = cfg.dataset.n_train;
    d["n_test"] = cfg.dataset.n_test;
    d["mu"] = cfg.dataset.mu;
    d["seed"] = cfg.dataset.seed;
    d["dir"] = cfg.dataset.dir;
    j["dataset"] = d;
    j["alpha"] = cfg.alpha;
    j["variant"] = cfg.variant == ModelVariant::Standard ? "standard" : "icmf";
    j["cadence"] = cfg.cadence;
    j["out"] = cfg.out;
    j["probes"] = cfg.probes;
    j["limits"] = cfg.limits;
    j["size"] = cfg.size;
    return j;
}

inline RunConfig load_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open config " + path);
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(path + ": " + e.what());
    }
    return config_from_json(j);
}

// Applies one `--override key=value` with dotted key paths; the value is
// parsed as JSON, falling back to a plain string.
inline void apply_override(nlohmann::json& j, const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos) {
        throw ConfigError("override must look like key=value: " + assignment);
    }
    const std::string path = assignment.substr(0, eq);
    const std::string raw = assignment.substr(eq + 1);
    nlohmann::json value;
    try {
        value = nlohmann::json::parse(raw);
    } catch (const nlohmann::json::exception&) {
        value = raw;  // bare string
    }
    nlohmann::json* node = &j;
    std::size_t pos = 0;
    while (true) {
        const auto dotp = path.find('.', pos);
        const std::string key = path.substr(pos, dotp == std::string::npos ? dotp : dotp - pos);
        if (key.empty()) throw ConfigError("bad override key path: " + path);
        if (dotp == std::string::npos) {
            (*node)[key] = value;
            return;
        }
        node = &(*node)[key];
        pos = dotp + 1;
    }
}

}  // namespace widthscale
