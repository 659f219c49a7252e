#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "widthscale/config.hpp"
#include "widthscale/datasets.hpp"
#include "widthscale/errors.hpp"
#include "widthscale/kernels.hpp"
#include "widthscale/limits.hpp"
#include "widthscale/netcore.hpp"
#include "widthscale/parallel.hpp"
#include "widthscale/records.hpp"
#include "widthscale/rng.hpp"
#include "widthscale/scaling.hpp"
#include "widthscale/stats.hpp"

namespace widthscale {

namespace seedtag {
inline constexpr std::uint64_t kInit = 0x1217;
inline constexpr std::uint64_t kBatch = 0xBA7C4;
inline constexpr std::uint64_t kLimit = 0x11317;
}  // namespace seedtag

struct PreparedData {
    Dataset train;
    Dataset test;
    std::vector<std::vector<double>> probe_x;  // first `probes` test inputs
};

inline PreparedData prepare_data(const RunConfig& cfg) {
    PreparedData d;
    if (cfg.dataset.kind == DatasetKind::Synthetic) {
        auto [train, test] = synth_dataset(cfg.dataset.d_x, cfg.dataset.n_train,
                                           cfg.dataset.n_test, cfg.dataset.mu, cfg.dataset.seed);
        d.train = std::move(train);
        d.test = std::move(test);
    } else {
        auto [train, test] = load_cifar2(cfg.dataset.dir);
        d.train = std::move(train);
        d.test = std::move(test);
    }
    const int np = std::min<int>(cfg.probes, static_cast<int>(d.test.points.size()));
    for (int i = 0; i < np; ++i) d.probe_x.push_back(d.test.points[i].x);
    return d;
}

// Index batches per step. Derived from the base seed only (not the width), so
// finite-width and limit runs with the same base seed see identical batches
// and divergence metrics isolate the width effect.
struct BatchSchedule {
    BatchConfig bc;
    std::uint64_t base_seed = 0;
    int n_train = 0;

    void batches(long step, std::vector<int>& a_idx, std::vector<int>& w_idx) const {
        if (bc.mode == BatchMode::Full) {
            a_idx.resize(n_train);
            for (int i = 0; i < n_train; ++i) a_idx[i] = i;
            w_idx = a_idx;
            return;
        }
        Rng rng(substream_seed(substream_seed(base_seed, seedtag::kBatch),
                               static_cast<std::uint64_t>(step)));
        a_idx.resize(bc.size);
        for (auto& i : a_idx) i = static_cast<int>(rng.next_u64() % n_train);
        if (bc.independent) {
            w_idx.resize(bc.size);
            for (auto& i : w_idx) i = static_cast<int>(rng.next_u64() % n_train);
        } else {
            w_idx = a_idx;
        }
    }
};

namespace detail {

inline std::vector<DataPoint> gather_points(const Dataset& ds, const std::vector<int>& idx) {
    std::vector<DataPoint> out(idx.size());
    for (std::size_t i = 0; i < idx.size(); ++i) out[i] = ds.points[idx[i]];
    return out;
}

struct LossAccuracy {
    double loss = 0.0;
    double accuracy = 0.0;
};

inline LossAccuracy loss_accuracy(std::span<const double> logits,
                                  std::span<const DataPoint> pts) {
    LossAccuracy out;
    for (std::size_t i = 0; i < pts.size(); ++i) {
        out.loss += loss_value(pts[i].y, logits[i]);
        if (logits[i] * static_cast<double>(pts[i].y) > 0.0) out.accuracy += 1.0;
    }
    out.loss /= static_cast<double>(pts.size());
    out.accuracy /= static_cast<double>(pts.size());
    return out;
}

// eta-weighted normalized-kernel Gram over the probe set.
inline std::vector<double> probe_gram(const KernelContext& ctx,
                                      std::span<const std::vector<double>> probes) {
    const int n = static_cast<int>(probes.size());
    std::vector<double> g(static_cast<std::size_t>(n) * n, 0.0);
    for (int i = 0; i < n; ++i) {
        for (int j = i; j < n; ++j) {
            auto [ka, kw] = normalized_kernels(ctx, probes[i], probes[j]);
            const double v = ctx.anchors.eta_hat_a_star * ka + ctx.anchors.eta_hat_w_star * kw;
            g[static_cast<std::size_t>(i) * n + j] = v;
            g[static_cast<std::size_t>(j) * n + i] = v;
        }
    }
    return g;
}

inline double frob_rel_drift(const std::vector<double>& g, const std::vector<double>& g0) {
    double num = 0.0;
    double den = 0.0;
    for (std::size_t i = 0; i < g.size(); ++i) {
        num += (g[i] - g0[i]) * (g[i] - g0[i]);
        den += g0[i] * g0[i];
    }
    return den > 0.0 ? std::sqrt(num / den) : 0.0;
}

}  // namespace detail

// Trains one finite-width cell (standard or IC-MF variant) and records the
// cadence metrics. Diverging logits mark the run instead of failing it.
inline RunRecord train_run(const RunConfig& cfg, const PreparedData& data, int width,
                           int seed_index) {
    cfg.validate();
    const std::uint64_t base_seed = cfg.seeds.at(seed_index);
    const std::uint64_t run_seed = run_stream_seed(base_seed, static_cast<std::uint64_t>(width),
                                                   static_cast<std::uint64_t>(seed_index));
    const ActivationConfig act = cfg.act();
    const bool icmf = cfg.variant == ModelVariant::Icmf;
    const std::string run_id =
        (icmf ? std::string("icmf") : std::string("train")) + "-w" + std::to_string(width);

    const Hyperparams hp = hyperparams_at(cfg.scaling, cfg.anchors, width);
    Params params = init_params(width, data.train.input_dim,
                                substream_seed(run_seed, seedtag::kInit));
    std::optional<InitSnapshot> snap;
    IcmfCoefficients icoef{};
    std::vector<double> bias_train;
    std::vector<double> bias_test;
    std::vector<double> bias_probe;
    if (icmf) {
        snap.emplace(params);
        icoef = icmf_coefficients(cfg.anchors.sigma_star, cfg.anchors.d_star, width);
        // frozen init features: f_icmf = forward(params, sigma_live) + c * s0(x)
        auto init_logits = [&](std::span<const DataPoint> pts) {
            std::vector<double> s0 = forward_batch(snap->params(), 1.0, pts, act);
            for (auto& v : s0) v *= icoef.init;
            return s0;
        };
        bias_train = init_logits(data.train.all());
        bias_test = init_logits(data.test.all());
        bias_probe.resize(data.probe_x.size());
        for (std::size_t i = 0; i < data.probe_x.size(); ++i) {
            bias_probe[i] = icoef.init * forward(snap->params(), 1.0, data.probe_x[i], act);
        }
    }
    // For the IC-MF variant hp.sigma equals the live coefficient sigma*(d/d*)^-1
    // whenever cfg.scaling is the MF scaling (the variant's defining setup).

    const BatchSchedule sched{cfg.batch, base_seed, static_cast<int>(data.train.points.size())};
    const std::vector<long> cadence = effective_cadence(cfg);

    RunRecord rec;
    std::vector<double> gram0;
    const bool symmetric = cfg.scaling.is_symmetric();

    auto logits_with_bias = [&](std::span<const DataPoint> pts,
                                const std::vector<double>& bias) {
        std::vector<double> f = forward_batch(params, hp.sigma, pts, act);
        if (icmf) {
            for (std::size_t i = 0; i < f.size(); ++i) f[i] += bias[i];
        }
        return f;
    };

    auto record_metrics = [&](long k) -> bool {
        const std::vector<double> f_train = logits_with_bias(data.train.all(), bias_train);
        const std::vector<double> f_test = logits_with_bias(data.test.all(), bias_test);
        bool finite = true;
        for (double v : f_train) finite = finite && std::isfinite(v);
        for (double v : f_test) finite = finite && std::isfinite(v);
        if (!finite) {
            rec.add(run_id, width, base_seed, k, "diverged", 1.0);
            return false;
        }
        const auto tr = detail::loss_accuracy(f_train, data.train.all());
        const auto te = detail::loss_accuracy(f_test, data.test.all());
        rec.add(run_id, width, base_seed, k, "train_loss", tr.loss);
        rec.add(run_id, width, base_seed, k, "test_loss", te.loss);
        rec.add(run_id, width, base_seed, k, "test_acc", te.accuracy);

        const KernelContext ctx = make_kernel_context(params, cfg.scaling, cfg.anchors, act);
        double mean_abs = 0.0;
        double ratio = 0.0;
        for (std::size_t i = 0; i < data.probe_x.size(); ++i) {
            double f = forward(params, hp.sigma, data.probe_x[i], act);
            if (icmf) f += bias_probe[i];
            rec.add(run_id, width, base_seed, k, "probe_logit_" + std::to_string(i), f);
            mean_abs += std::fabs(f);
            const double diag = cfg.anchors.eta_hat_a_star * kernel_a(ctx, data.probe_x[i], data.probe_x[i])
                                + cfg.anchors.eta_hat_w_star * kernel_w(ctx, data.probe_x[i], data.probe_x[i]);
            ratio += std::fabs(f / diag);
        }
        mean_abs /= static_cast<double>(data.probe_x.size());
        ratio /= static_cast<double>(data.probe_x.size());
        rec.add(run_id, width, base_seed, k, "mean_abs_logit", mean_abs);
        rec.add(run_id, width, base_seed, k, "logit_kernel_ratio", ratio);
        rec.add(run_id, width, base_seed, k, "kernel_diag",
                kernel_diag_summary(ctx, data.probe_x));
        if (symmetric) {
            std::vector<double> gram = detail::probe_gram(ctx, data.probe_x);
            if (gram0.empty()) gram0 = gram;  // baseline = first recorded step
            rec.add(run_id, width, base_seed, k, "kernel_drift",
                    detail::frob_rel_drift(gram, gram0));
        }
        if (k == 0) {
            // initialization-scale metrics for the exponent probes
            const GradSample gs_w = make_grad_sample(ctx, data.train.points[0].x,
                                                     data.train.points[0].y);
            double ka_abs = 0.0;
            double kw_abs = 0.0;
            double dk_abs = 0.0;
            double ratio_aw = 0.0;
            int n_pairs = 0;
            for (std::size_t i = 0; i < data.probe_x.size(); ++i) {
                for (std::size_t j = i + 1; j < data.probe_x.size(); ++j) {
                    const double ka = kernel_a(ctx, data.probe_x[i], data.probe_x[j]);
                    const double kw = kernel_w(ctx, data.probe_x[i], data.probe_x[j]);
                    const double dk = delta_k_aw_prime(ctx, gs_w, data.probe_x[i], data.probe_x[j]);
                    ka_abs += std::fabs(ka);
                    kw_abs += std::fabs(kw);
                    dk_abs += std::fabs(dk);
                    ratio_aw += std::fabs(dk / ka);
                    ++n_pairs;
                }
            }
            if (n_pairs > 0) {
                rec.add(run_id, width, base_seed, k, "init_kernel_a_abs", ka_abs / n_pairs);
                rec.add(run_id, width, base_seed, k, "init_kernel_w_abs", kw_abs / n_pairs);
                rec.add(run_id, width, base_seed, k, "init_dk_aw_abs", dk_abs / n_pairs);
                rec.add(run_id, width, base_seed, k, "init_dk_ratio_aw", ratio_aw / n_pairs);
            }
        }
        return true;
    };

    std::vector<int> a_idx;
    std::vector<int> w_idx;
    std::size_t cad_pos = 0;
    for (long k = 0; k <= cfg.steps; ++k) {
        const bool due = cad_pos < cadence.size() && cadence[cad_pos] == k;
        if (due) {
            ++cad_pos;
            if (!record_metrics(k)) return rec;
        }
        if (k == cfg.steps) break;
        sched.batches(k, a_idx, w_idx);
        const std::vector<DataPoint> ba = detail::gather_points(data.train, a_idx);
        const std::vector<DataPoint> bw_store =
            (cfg.batch.mode == BatchMode::Full || !cfg.batch.independent)
                ? std::vector<DataPoint>{}
                : detail::gather_points(data.train, w_idx);
        std::span<const DataPoint> span_a{ba.data(), ba.size()};
        std::span<const DataPoint> span_w =
            bw_store.empty() ? span_a : std::span<const DataPoint>{bw_store.data(), bw_store.size()};
        if (icmf) {
            std::vector<double> bias_a(a_idx.size());
            for (std::size_t i = 0; i < a_idx.size(); ++i) bias_a[i] = bias_train[a_idx[i]];
            std::vector<double> bias_w;
            if (!bw_store.empty()) {
                bias_w.resize(w_idx.size());
                for (std::size_t i = 0; i < w_idx.size(); ++i) bias_w[i] = bias_train[w_idx[i]];
            }
            params = sgd_step_biased(params, hp, span_a, span_w, act, bias_a,
                                     bias_w.empty() ? bias_a : bias_w);
        } else {
            params = sgd_step(params, hp, span_a, span_w, act);
        }
    }
    return rec;
}

inline RunRecord train_run(const RunConfig& cfg, int width, int seed_index) {
    const PreparedData data = prepare_data(cfg);
    return train_run(cfg, data, width, seed_index);
}

// ---------------------------------------------------------------------------
// limit runs
// ---------------------------------------------------------------------------

struct LimitKind {
    std::string name;
    RegionId region;
    LimitVariant variant;
};

inline LimitKind limit_kind_by_name(const std::string& name) {
    if (name == "ntk") return {name, RegionId::Ntk, LimitVariant::Plain};
    if (name == "mf") return {name, RegionId::Mf, LimitVariant::Plain};
    if (name == "icmf") return {name, RegionId::Mf, LimitVariant::Icmf};
    if (name == "sym_default") return {name, RegionId::SymDefault, LimitVariant::Plain};
    if (name == "default") return {name, RegionId::SymDefault, LimitVariant::DefaultInit};
    throw ConfigError("unknown limit kind: " + name
                      + " (expected ntk|mf|icmf|sym_default|default)");
}

// Simulates one infinite-width limit trajectory over the tracked set
// (train points then probe points) and records probe logits per cadence.
inline RunRecord limit_run(const RunConfig& cfg, const PreparedData& data,
                           const std::shared_ptr<const TrackedInputs>& tracked,
                           const LimitKind& kind, int seed_index, bool antithetic = false) {
    const std::uint64_t base_seed = cfg.seeds.at(seed_index);
    const std::uint64_t run_seed =
        run_stream_seed(base_seed, 0, static_cast<std::uint64_t>(seed_index));
    const ActivationConfig act = cfg.act();
    const std::string run_id = "limit-" + kind.name;
    const int n_train = static_cast<int>(data.train.points.size());

    LimitState st = build_limit(kind.region, kind.variant, tracked, cfg.size,
                                substream_seed(run_seed, seedtag::kLimit), cfg.anchors, act,
                                antithetic);

    const BatchSchedule sched{cfg.batch, base_seed, n_train};
    const std::vector<long> cadence = effective_cadence(cfg);

    RunRecord rec;
    auto record_metrics = [&](long k) {
        double mean_abs = 0.0;
        for (std::size_t i = 0; i < data.probe_x.size(); ++i) {
            const double f = st.logit(n_train + static_cast<int>(i));
            rec.add(run_id, 0, base_seed, k, "probe_logit_" + std::to_string(i), f);
            mean_abs += std::fabs(f);
        }
        rec.add(run_id, 0, base_seed, k, "mean_abs_logit",
                mean_abs / static_cast<double>(data.probe_x.size()));
    };

    std::vector<int> a_idx;
    std::vector<int> w_idx;
    std::vector<LabeledIndex> batch_a;
    std::vector<LabeledIndex> batch_w;
    std::size_t cad_pos = 0;
    for (long k = 0; k <= cfg.steps; ++k) {
        if (cad_pos < cadence.size() && cadence[cad_pos] == k) {
            ++cad_pos;
            record_metrics(k);
        }
        if (k == cfg.steps) break;
        sched.batches(k, a_idx, w_idx);
        batch_a.resize(a_idx.size());
        for (std::size_t i = 0; i < a_idx.size(); ++i) {
            batch_a[i] = {a_idx[i], data.train.points[a_idx[i]].y};
        }
        batch_w.resize(w_idx.size());
        for (std::size_t i = 0; i < w_idx.size(); ++i) {
            batch_w[i] = {w_idx[i], data.train.points[w_idx[i]].y};
        }
        st = limit_step(std::move(st), cfg.anchors, batch_a, batch_w, act);
    }
    if (kind.variant == LimitVariant::Icmf) {
        rec.add(run_id, 0, base_seed, cfg.steps, "icmf_bound_ok", st.icmf_bound_ok ? 1.0 : 0.0);
    }
    return rec;
}

inline std::shared_ptr<const TrackedInputs> tracked_for(const PreparedData& data) {
    std::vector<DataPoint> all = data.train.points;
    for (const auto& x : data.probe_x) all.push_back({x, 1});
    return std::make_shared<const TrackedInputs>(
        make_tracked_inputs(std::span<const DataPoint>{all.data(), all.size()}));
}

// ---------------------------------------------------------------------------
// sweeps and fits
// ---------------------------------------------------------------------------

struct NamedFit {
    std::string name;
    ExponentFit fit;
};

struct SweepResult {
    RunRecord records;
    std::vector<NamedFit> fits;
};

namespace detail {

// mean of |metric| over seeds (and probe indices for probe_logit) per width
inline std::map<int, double> metric_width_means(const RunRecord& rec, const std::string& prefix,
                                                long step) {
    std::map<int, double> sums;
    std::map<int, int> counts;
    for (const auto& r : rec.rows) {
        if (r.step != step) continue;
        if (r.metric.rfind(prefix, 0) != 0) continue;
        sums[r.width] += std::fabs(r.value);
        counts[r.width] += 1;
    }
    std::map<int, double> out;
    for (auto& [w, s] : sums) out[w] = s / counts[w];
    return out;
}

inline std::optional<NamedFit> fit_from_means(const std::string& name,
                                              const std::map<int, double>& means) {
    if (means.size() < 3) return std::nullopt;
    std::vector<double> ws;
    std::vector<double> vs;
    for (auto& [w, v] : means) {
        if (!(v > 0.0)) return std::nullopt;
        ws.push_back(static_cast<double>(w));
        vs.push_back(v);
    }
    return NamedFit{name, estimate_exponent(ws, vs)};
}

}  // namespace detail

// Runs train_run across widths x seeds (cells in parallel), then fits the
// width-scaling exponents of the recorded initialization and logit metrics.
inline SweepResult width_sweep(const RunConfig& cfg, int jobs = 1) {
    cfg.validate();
    const PreparedData data = prepare_data(cfg);
    const std::size_t n_cells = cfg.widths.size() * cfg.seeds.size();
    std::vector<RunRecord> cells(n_cells);
    parallel_for(n_cells, jobs, [&](std::size_t ci) {
        const int width = cfg.widths[ci / cfg.seeds.size()];
        const int seed_index = static_cast<int>(ci % cfg.seeds.size());
        cells[ci] = train_run(cfg, data, width, seed_index);
    });
    SweepResult result;
    for (auto& c : cells) result.records.append(std::move(c));
    result.records.sort_rows();

    auto add_fit = [&](const std::string& name, const std::string& prefix, long step) {
        if (auto f = detail::fit_from_means(
                name, detail::metric_width_means(result.records, prefix, step))) {
            result.fits.push_back(*f);
        }
    };
    add_fit("init_abs_logit", "probe_logit_", 0);
    add_fit("init_kernel_a", "init_kernel_a_abs", 0);
    add_fit("init_kernel_w", "init_kernel_w_abs", 0);
    add_fit("init_dk_ratio_aw", "init_dk_ratio_aw", 0);
    for (long k : effective_cadence(cfg)) {
        if (k == 0) continue;
        add_fit("logit_scale_step_" + std::to_string(k), "mean_abs_logit", k);
    }
    return result;
}

// ---------------------------------------------------------------------------
// initialization-only exponent probe (no training)
// ---------------------------------------------------------------------------

struct InitProbeResult {
    NamedFit abs_logit;      // E|f^(0)|           ~ d^{q_sigma + 1/2}
    NamedFit kernel_a;       // E|K_a^(0)|         ~ d^{1 + q_tilde_a + 2 q_sigma}
    NamedFit kernel_w;       // E|K_w^(0)|         ~ d^{1 + q_tilde_w + 2 q_sigma}
    NamedFit dk_ratio_aw;    // E|dK'_aw / K_a|    (kernel-evolution probe)
};

inline InitProbeResult init_exponent_probe(const RunConfig& cfg, int jobs = 1) {
    cfg.validate();
    const PreparedData data = prepare_data(cfg);
    const ActivationConfig act = cfg.act();
    const std::size_t n_cells = cfg.widths.size() * cfg.seeds.size();
    struct CellStats {
        double f_abs = 0.0, ka = 0.0, kw = 0.0, ratio = 0.0;
    };
    std::vector<CellStats> stats(n_cells);
    parallel_for(n_cells, jobs, [&](std::size_t ci) {
        const int width = cfg.widths[ci / cfg.seeds.size()];
        const int seed_index = static_cast<int>(ci % cfg.seeds.size());
        const std::uint64_t base_seed = cfg.seeds[seed_index];
        const std::uint64_t run_seed = run_stream_seed(
            base_seed, static_cast<std::uint64_t>(width), static_cast<std::uint64_t>(seed_index));
        const Params params = init_params(width, data.train.input_dim,
                                          substream_seed(run_seed, seedtag::kInit));
        const KernelContext ctx = make_kernel_context(params, cfg.scaling, cfg.anchors, act);
        const GradSample gs_w =
            make_grad_sample(ctx, data.train.points[0].x, data.train.points[0].y);
        CellStats cs;
        int nf = 0;
        int np = 0;
        for (std::size_t i = 0; i < data.probe_x.size(); ++i) {
            cs.f_abs += std::fabs(forward(params, ctx.hyper.sigma, data.probe_x[i], act));
            ++nf;
            for (std::size_t j = i + 1; j < data.probe_x.size(); ++j) {
                const double ka = kernel_a(ctx, data.probe_x[i], data.probe_x[j]);
                const double kw = kernel_w(ctx, data.probe_x[i], data.probe_x[j]);
                const double dk = delta_k_aw_prime(ctx, gs_w, data.probe_x[i], data.probe_x[j]);
                cs.ka += std::fabs(ka);
                cs.kw += std::fabs(kw);
                cs.ratio += std::fabs(dk / ka);
                ++np;
            }
        }
        cs.f_abs /= nf;
        cs.ka /= np;
        cs.kw /= np;
        cs.ratio /= np;
        stats[ci] = cs;
    });

    auto fit_of = [&](auto member, const std::string& name) {
        std::vector<double> ws;
        std::vector<double> vs;
        for (std::size_t wi = 0; wi < cfg.widths.size(); ++wi) {
            double acc = 0.0;
            for (std::size_t si = 0; si < cfg.seeds.size(); ++si) {
                acc += stats[wi * cfg.seeds.size() + si].*member;
            }
            ws.push_back(static_cast<double>(cfg.widths[wi]));
            vs.push_back(acc / static_cast<double>(cfg.seeds.size()));
        }
        return NamedFit{name, estimate_exponent(ws, vs)};
    };
    InitProbeResult out{fit_of(&CellStats::f_abs, "init_abs_logit"),
                        fit_of(&CellStats::ka, "init_kernel_a"),
                        fit_of(&CellStats::kw, "init_kernel_w"),
                        fit_of(&CellStats::ratio, "init_dk_ratio_aw")};
    return out;
}

// ---------------------------------------------------------------------------
// KL-divergence experiment (limit models vs the finite reference model)
// ---------------------------------------------------------------------------

struct KlSeriesRow {
    std::string limit_kind;
    long step = 0;
    double kl = 0.0;
    bool variance_floored = false;
};

struct KlExperimentResult {
    std::vector<KlSeriesRow> series;
    RunRecord records;  // reference + limit probe logits
};

// For each configured limit kind, runs the limit simulator across seeds and
// compares gaussian fits of its probe logits against the width-d* reference
// model, per cadence step.
inline KlExperimentResult kl_experiment(const RunConfig& cfg, int jobs = 1) {
    cfg.validate();
    const PreparedData data = prepare_data(cfg);
    const auto tracked = tracked_for(data);
    const std::vector<long> cadence = effective_cadence(cfg);
    const std::size_t n_seeds = cfg.seeds.size();

    RunConfig ref_cfg = cfg;
    ref_cfg.widths = {cfg.anchors.d_star};
    ref_cfg.variant = ModelVariant::Standard;

    std::vector<LimitKind> kinds;
    for (const auto& name : cfg.limits) kinds.push_back(limit_kind_by_name(name));

    // cells: [0, n_seeds) reference, then kinds x seeds
    const std::size_t n_cells = n_seeds * (1 + kinds.size());
    std::vector<RunRecord> cells(n_cells);
    parallel_for(n_cells, jobs, [&](std::size_t ci) {
        if (ci < n_seeds) {
            cells[ci] = train_run(ref_cfg, data, cfg.anchors.d_star, static_cast<int>(ci));
        } else {
            const std::size_t k = (ci - n_seeds) / n_seeds;
            const int seed_index = static_cast<int>((ci - n_seeds) % n_seeds);
            cells[ci] = limit_run(cfg, data, tracked, kinds[k], seed_index);
        }
    });

    KlExperimentResult out;
    // logits[run][step][probe][seed]: gather from the cells
    const std::size_t n_probes = data.probe_x.size();
    auto gather = [&](std::size_t cell0, long step) {
        std::vector<std::vector<double>> m(n_probes, std::vector<double>(n_seeds, 0.0));
        for (std::size_t si = 0; si < n_seeds; ++si) {
            const RunRecord& rec = cells[cell0 + si];
            for (const auto& r : rec.rows) {
                if (r.step != step) continue;
                if (r.metric.rfind("probe_logit_", 0) != 0) continue;
                const int p = std::stoi(r.metric.substr(12));
                m[p][si] = r.value;
            }
        }
        return m;
    };

    for (std::size_t k = 0; k < kinds.size(); ++k) {
        for (long step : cadence) {
            const auto ref = gather(0, step);
            const auto lim = gather(n_seeds * (1 + k), step);
            KlSeriesRow row;
            row.limit_kind = kinds[k].name;
            row.step = step;
            row.kl = logits_kl(lim, ref, &row.variance_floored);
            out.series.push_back(row);
        }
    }
    for (auto& c : cells) out.records.append(std::move(c));
    out.records.sort_rows();
    return out;
}

inline void write_kl_csv(const std::string& path, const std::vector<KlSeriesRow>& series) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open " + path + " for writing");
    out << "limit_kind,step,kl\n";
    for (const auto& r : series) {
        out << r.limit_kind << ',' << r.step << ',' << format_g17(r.kl) << '\n';
    }
}

inline void write_fits_csv(const std::string& path, const std::vector<NamedFit>& fits) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open " + path + " for writing");
    out << "fit,slope,stderr,intercept,n_points\n";
    for (const auto& f : fits) {
        out << f.name << ',' << format_g17(f.fit.slope) << ',' << format_g17(f.fit.stderr_slope)
            << ',' << format_g17(f.fit.intercept) << ',' << f.fit.n_points << '\n';
    }
}

}  // namespace widthscale
