#pragma once

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "widthscale/config.hpp"
#include "widthscale/harness.hpp"
#include "widthscale/parallel.hpp"

namespace widthscale {

// Exit-code contract: scientific outcomes are data, not process failures.
//   0 ok | 2 scaling outside the stability band (classify) | 3 config fault |
//   4 IO fault | 1 anything else.
inline constexpr int kExitOk = 0;
inline constexpr int kExitUnstable = 2;
inline constexpr int kExitConfig = 3;
inline constexpr int kExitIo = 4;

namespace cli {

struct CommonOpts {
    std::string config_path;
    std::vector<std::string> overrides;
    int jobs = 0;  // 0 = hardware concurrency
    std::string out;
    std::optional<std::uint64_t> seed;
};

inline RunConfig resolve_config(const CommonOpts& o) {
    nlohmann::json j = nlohmann::json::object();
    if (!o.config_path.empty()) {
        std::ifstream in(o.config_path);
        if (!in) throw IoError("cannot open config " + o.config_path);
        try {
            in >> j;
        } catch (const nlohmann::json::exception& e) {
            throw ConfigError(o.config_path + ": " + e.what());
        }
    }
    for (const auto& ov : o.overrides) apply_override(j, ov);
    RunConfig cfg = config_from_json(j);
    if (!o.out.empty()) {
        cfg.out = o.out;
    } else if (const char* env = std::getenv("WIDTHSCALE_OUT"); env && cfg.out == "out") {
        cfg.out = env;
    }
    if (o.seed) cfg.seeds = {*o.seed};
    cfg.validate();
    return cfg;
}

inline int effective_jobs(const CommonOpts& o) {
    return o.jobs > 0 ? o.jobs : default_jobs();
}

inline void ensure_out_dir(const RunConfig& cfg) {
    std::error_code ec;
    std::filesystem::create_directories(cfg.out, ec);
    if (ec) throw IoError("cannot create output dir " + cfg.out + ": " + ec.message());
}

inline void write_config_sidecar(const RunConfig& cfg) {
    std::ofstream out(std::filesystem::path(cfg.out) / "config.json", std::ios::binary);
    if (!out) throw IoError("cannot write config sidecar in " + cfg.out);
    out << config_to_json(cfg).dump(2) << "\n";
}

inline void add_common(CLI::App* cmd, CommonOpts& o) {
    cmd->add_option("--config", o.config_path, "JSON config file");
    cmd->add_option("--override", o.overrides,
                    "config override key=value (dotted key paths, repeatable)");
    cmd->add_option("--jobs", o.jobs, "parallel cells (default: core count)");
    cmd->add_option("--out", o.out, "output directory");
    cmd->add_option_function<std::uint64_t>(
        "--seed", [&o](const std::uint64_t& s) { o.seed = s; },
        "replace the seed list with this single seed");
}

inline int cmd_classify(double q_sigma, double q_tilde, double tol) {
    const auto exps = ScalingExponents::symmetric(q_sigma, q_tilde);
    const ConditionValues cv = condition_values(exps);
    std::printf("scaling: q_sigma=%g q_tilde=%g\n", q_sigma, q_tilde);
    std::printf("condition values: s1=%g s2=%g s3=%g s4=%g\n", cv.s1, cv.s2, cv.s3, cv.s4);
    if (!is_dynamically_stable(exps, tol)) {
        std::printf("stable: no (outside dynamical stability band q_sigma+q_tilde in [-1/2, 0])\n");
        return kExitUnstable;
    }
    std::printf("stable: yes\n");
    const RegionId region = classify_region(exps, tol);
    const GradientRegime gr = gradient_regime(region);
    std::printf("region: %s\n", std::string(region_name(region)).c_str());
    std::printf("kernels: %s\n", gr.kernel_mode == KernelMode::Constant ? "constant" : "evolving");
    std::printf("init logits: %s\n",
                gr.init_logit_mode == InitLogitMode::Gaussian ? "gaussian" : "zero");
    auto grad_name = [](GradMode g) {
        switch (g) {
            case GradMode::HalfY: return "half-y";
            case GradMode::Sigmoid: return "sigmoid";
            case GradMode::Sign: return "sign";
        }
        return "?";
    };
    std::printf("init gradient: %s\n", grad_name(gr.init_grad_mode));
    std::printf("late gradient: %s\n", grad_name(gr.late_grad_mode));

    const SignPattern p = sign_pattern(cv, tol);
    std::string sat;
    std::string vio;
    const int signs[4] = {p.s1, p.s2, p.s3, p.s4};
    for (int i = 0; i < 4; ++i) {
        std::string& dst = signs[i] == 0 ? sat : vio;
        if (!dst.empty()) dst += ",";
        dst += std::to_string(i + 1);
    }
    std::printf("satisfies properties %s; violates %s\n", sat.empty() ? "none" : sat.c_str(),
                vio.empty() ? "none" : vio.c_str());
    return kExitOk;
}

inline int cmd_train(const CommonOpts& o) {
    const RunConfig cfg = resolve_config(o);
    ensure_out_dir(cfg);
    const PreparedData data = prepare_data(cfg);
    const std::size_t n_cells = cfg.widths.size() * cfg.seeds.size();
    std::vector<RunRecord> cells(n_cells);
    parallel_for(n_cells, effective_jobs(o), [&](std::size_t ci) {
        const int width = cfg.widths[ci / cfg.seeds.size()];
        cells[ci] = train_run(cfg, data, width, static_cast<int>(ci % cfg.seeds.size()));
    });
    RunRecord all;
    for (auto& c : cells) all.append(std::move(c));
    all.sort_rows();
    write_csv((std::filesystem::path(cfg.out) / "metrics.csv").string(), all);
    write_config_sidecar(cfg);
    double final_acc = 0.0;
    int n = 0;
    for (const auto& r : all.rows) {
        if (r.metric == "test_acc" && r.step == cfg.steps) {
            final_acc += r.value;
            ++n;
        }
    }
    std::printf("train: %zu cells, %zu rows, mean final test_acc %.4f -> %s/metrics.csv\n",
                n_cells, all.rows.size(), n ? final_acc / n : 0.0, cfg.out.c_str());
    return kExitOk;
}

inline int cmd_sweep(const CommonOpts& o) {
    const RunConfig cfg = resolve_config(o);
    ensure_out_dir(cfg);
    const SweepResult res = width_sweep(cfg, effective_jobs(o));
    write_csv((std::filesystem::path(cfg.out) / "metrics.csv").string(), res.records);
    write_fits_csv((std::filesystem::path(cfg.out) / "fits.csv").string(), res.fits);
    write_config_sidecar(cfg);
    std::string fitline;
    for (const auto& f : res.fits) {
        if (f.name.rfind("init_", 0) == 0) {
            fitline += " " + f.name + "=" + format_g17(f.fit.slope).substr(0, 8);
        }
    }
    std::printf("sweep: %zu rows, fits:%s -> %s\n", res.records.rows.size(), fitline.c_str(),
                cfg.out.c_str());
    return kExitOk;
}

inline int cmd_limit(const CommonOpts& o) {
    const RunConfig cfg = resolve_config(o);
    ensure_out_dir(cfg);
    const PreparedData data = prepare_data(cfg);
    const auto tracked = tracked_for(data);
    std::vector<LimitKind> kinds;
    for (const auto& name : cfg.limits) kinds.push_back(limit_kind_by_name(name));
    const std::size_t n_cells = kinds.size() * cfg.seeds.size();
    std::vector<RunRecord> cells(n_cells);
    parallel_for(n_cells, effective_jobs(o), [&](std::size_t ci) {
        const auto& kind = kinds[ci / cfg.seeds.size()];
        cells[ci] = limit_run(cfg, data, tracked, kind, static_cast<int>(ci % cfg.seeds.size()));
    });
    RunRecord all;
    for (auto& c : cells) all.append(std::move(c));
    all.sort_rows();
    write_csv((std::filesystem::path(cfg.out) / "metrics.csv").string(), all);
    write_config_sidecar(cfg);
    std::printf("limit: %zu cells (%zu kinds x %zu seeds), %zu rows -> %s/metrics.csv\n", n_cells,
                kinds.size(), cfg.seeds.size(), all.rows.size(), cfg.out.c_str());
    return kExitOk;
}

inline int cmd_probe(const CommonOpts& o, const std::string& scaling_name, int atlas_grid) {
    RunConfig cfg = resolve_config(o);
    if (!scaling_name.empty()) {
        if (scaling_name == "ntk") {
            cfg.scaling = ScalingExponents::ntk();
        } else if (scaling_name == "mf") {
            cfg.scaling = ScalingExponents::mf();
        } else if (scaling_name == "sym-default") {
            cfg.scaling = ScalingExponents::sym_default();
        } else if (scaling_name == "default") {
            cfg.scaling = ScalingExponents::default_scaling();
        } else {
            throw ConfigError("unknown --scaling " + scaling_name
                              + " (expected ntk|mf|sym-default|default)");
        }
    }
    ensure_out_dir(cfg);
    if (atlas_grid > 0) {
        if (atlas_grid < 2) throw ConfigError("--atlas needs a grid of at least 2");
        // region atlas over the (q_sigma, q_tilde) plane
        std::ofstream out(std::filesystem::path(cfg.out) / "atlas.csv", std::ios::binary);
        if (!out) throw IoError("cannot write atlas.csv in " + cfg.out);
        out << "q_sigma,q_tilde,region\n";
        for (int i = 0; i < atlas_grid; ++i) {
            for (int j = 0; j < atlas_grid; ++j) {
                const double qs = -2.0 + 3.0 * i / (atlas_grid - 1.0);
                const double qt = -2.0 + 4.0 * j / (atlas_grid - 1.0);
                const auto e = ScalingExponents::symmetric(qs, qt);
                std::string name = "unstable";
                if (is_dynamically_stable(e, kExponentTol)) {
                    name = std::string(region_name(classify_region(e)));
                }
                out << format_g17(qs) << ',' << format_g17(qt) << ',' << name << '\n';
            }
        }
        std::printf("probe: region atlas %dx%d -> %s/atlas.csv\n", atlas_grid, atlas_grid,
                    cfg.out.c_str());
        return kExitOk;
    }
    const InitProbeResult res = init_exponent_probe(cfg, effective_jobs(o));
    std::vector<NamedFit> fits = {res.abs_logit, res.kernel_a, res.kernel_w, res.dk_ratio_aw};
    write_fits_csv((std::filesystem::path(cfg.out) / "fits.csv").string(), fits);
    write_config_sidecar(cfg);
    std::printf("probe: f0 slope %.3f+-%.3f, K_a slope %.3f+-%.3f, K_w slope %.3f+-%.3f, "
                "dK'/K slope %.3f+-%.3f -> %s/fits.csv\n",
                res.abs_logit.fit.slope, res.abs_logit.fit.stderr_slope, res.kernel_a.fit.slope,
                res.kernel_a.fit.stderr_slope, res.kernel_w.fit.slope,
                res.kernel_w.fit.stderr_slope, res.dk_ratio_aw.fit.slope,
                res.dk_ratio_aw.fit.stderr_slope, cfg.out.c_str());
    return kExitOk;
}

inline int cmd_kl(const CommonOpts& o) {
    const RunConfig cfg = resolve_config(o);
    ensure_out_dir(cfg);
    const KlExperimentResult res = kl_experiment(cfg, effective_jobs(o));
    write_kl_csv((std::filesystem::path(cfg.out) / "kl.csv").string(), res.series);
    write_csv((std::filesystem::path(cfg.out) / "metrics.csv").string(), res.records);
    write_config_sidecar(cfg);
    std::string line;
    for (const auto& name : cfg.limits) {
        double last = 0.0;
        for (const auto& r : res.series) {
            if (r.limit_kind == name && r.step == cfg.steps) last = r.kl;
        }
        line += " " + name + "=" + format_g17(last).substr(0, 8);
    }
    std::printf("kl: final divergences%s -> %s/kl.csv\n", line.c_str(), cfg.out.c_str());
    return kExitOk;
}

inline int cmd_ingest_check(const std::string& dir) {
    auto [train, test] = load_cifar2(dir);
    int pos = 0;
    for (const auto& p : train.points) pos += p.y == 1 ? 1 : 0;
    std::printf("ingest-check: %s\n", dir.c_str());
    std::printf("train: %zu records (%d with y=+1, %zu with y=-1)\n", train.points.size(), pos,
                train.points.size() - pos);
    pos = 0;
    for (const auto& p : test.points) pos += p.y == 1 ? 1 : 0;
    std::printf("test: %zu records (%d with y=+1, %zu with y=-1)\n", test.points.size(), pos,
                test.points.size() - pos);
    std::printf("record size: %d bytes (1 label + %d pixels)\n", cifar::kRecordBytes,
                cifar::kPixels);
    return kExitOk;
}

}  // namespace cli

inline int run_cli(int argc, const char* const* argv) {
    CLI::App app{"widthscale: infinite-width scaling laboratory for one-hidden-layer classifiers"};
    app.require_subcommand(1);

    // classify
    auto* classify = app.add_subcommand("classify", "classify a scaling into its limit region");
    double q_sigma = 0.0;
    double q_tilde = 0.0;
    double tol = kExponentTol;
    classify->add_option("--q-sigma", q_sigma, "exponent of sigma in width")->required();
    classify->add_option("--q-tilde", q_tilde, "common exponent of the hatted learning rates")
        ->required();
    classify->add_option("--tol", tol, "zero-classification tolerance");

    cli::CommonOpts train_o;
    auto* train = app.add_subcommand("train", "train finite-width cells and record metrics");
    cli::add_common(train, train_o);

    cli::CommonOpts sweep_o;
    auto* sweep = app.add_subcommand("sweep", "width sweep with exponent fits");
    cli::add_common(sweep, sweep_o);

    cli::CommonOpts limit_o;
    auto* limit = app.add_subcommand("limit", "simulate infinite-width limit dynamics");
    cli::add_common(limit, limit_o);

    cli::CommonOpts probe_o;
    std::string probe_scaling;
    int atlas_grid = 0;
    auto* probe = app.add_subcommand("probe", "initialization exponent probes / region atlas");
    cli::add_common(probe, probe_o);
    probe->add_option("--scaling", probe_scaling, "named scaling: ntk|mf|sym-default|default");
    probe->add_option("--atlas", atlas_grid, "emit a region atlas over an NxN exponent grid");

    cli::CommonOpts kl_o;
    auto* kl = app.add_subcommand("kl", "KL divergence of limit logits vs the reference model");
    cli::add_common(kl, kl_o);

    std::string ingest_dir;
    auto* ingest = app.add_subcommand("ingest-check", "validate a CIFAR-10 binary directory");
    ingest->add_option("--dir", ingest_dir, "directory with data_batch_*.bin / test_batch.bin")
        ->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e);
    }

    try {
        if (classify->parsed()) return cli::cmd_classify(q_sigma, q_tilde, tol);
        if (train->parsed()) return cli::cmd_train(train_o);
        if (sweep->parsed()) return cli::cmd_sweep(sweep_o);
        if (limit->parsed()) return cli::cmd_limit(limit_o);
        if (probe->parsed()) return cli::cmd_probe(probe_o, probe_scaling, atlas_grid);
        if (kl->parsed()) return cli::cmd_kl(kl_o);
        if (ingest->parsed()) return cli::cmd_ingest_check(ingest_dir);
    } catch (const ConfigError& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return kExitConfig;
    } catch (const IngestError& e) {
        std::fprintf(stderr, "ingest error: %s\n", e.what());
        return kExitIo;
    } catch (const CorruptRecord& e) {
        std::fprintf(stderr, "ingest error: %s\n", e.what());
        return kExitIo;
    } catch (const IoError& e) {
        std::fprintf(stderr, "io error: %s\n", e.what());
        return kExitIo;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return kExitOk;
}

inline int run_cli(const std::vector<std::string>& args) {
    std::vector<const char*> argv;
    argv.push_back("widthscale");
    for (const auto& a : args) argv.push_back(a.c_str());
    return run_cli(static_cast<int>(argv.size()), argv.data());
}

}  // namespace widthscale
