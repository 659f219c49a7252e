#include <doctest.h>

#include <cstdio>
#include <filesystem>
#include <set>

#include "widthscale/harness.hpp"

using namespace widthscale;

namespace {

RunConfig tiny_config() {
    RunConfig cfg;
    cfg.scaling = ScalingExponents::ntk();
    cfg.widths = {16, 32};
    cfg.seeds = {0, 1};
    cfg.steps = 6;
    cfg.dataset.d_x = 4;
    cfg.dataset.n_train = 24;
    cfg.dataset.n_test = 16;
    cfg.probes = 4;
    cfg.size = 64;
    return cfg;
}

}  // namespace

TEST_CASE("log cadence is 1-2-5 spaced plus the final step") {
    CHECK(log_cadence(2000)
          == std::vector<long>{0, 1, 2, 5, 10, 20, 50, 100, 200, 500, 1000, 2000});
    CHECK(log_cadence(7) == std::vector<long>{0, 1, 2, 5, 7});
    CHECK(log_cadence(0) == std::vector<long>{0});
    CHECK(log_cadence(1) == std::vector<long>{0, 1});
}

TEST_CASE("config json round trip and validation") {
    RunConfig cfg = tiny_config();
    cfg.batch.mode = BatchMode::Sized;
    cfg.batch.size = 8;
    cfg.batch.independent = true;
    cfg.variant = ModelVariant::Icmf;
    cfg.scaling = ScalingExponents::mf();
    const RunConfig back = config_from_json(config_to_json(cfg));
    CHECK(back.scaling.q_sigma == cfg.scaling.q_sigma);
    CHECK(back.widths == cfg.widths);
    CHECK(back.seeds == cfg.seeds);
    CHECK(back.batch.size == 8);
    CHECK(back.batch.independent);
    CHECK(back.variant == ModelVariant::Icmf);
    CHECK(back.dataset.n_train == cfg.dataset.n_train);

    SUBCASE("unknown keys are rejected") {
        nlohmann::json j = config_to_json(cfg);
        j["typo_key"] = 1;
        CHECK_THROWS_AS(config_from_json(j), ConfigError);
    }
    SUBCASE("unsorted widths are rejected") {
        nlohmann::json j = config_to_json(cfg);
        j["widths"] = {64, 32};
        CHECK_THROWS_AS(config_from_json(j), ConfigError);
    }
    SUBCASE("duplicate seeds are rejected") {
        nlohmann::json j = config_to_json(cfg);
        j["seeds"] = {1, 1};
        CHECK_THROWS_AS(config_from_json(j), ConfigError);
    }
    SUBCASE("overrides with dotted paths") {
        nlohmann::json j = config_to_json(cfg);
        apply_override(j, "scaling.q_sigma=-1.0");
        apply_override(j, "widths=[16]");
        apply_override(j, "dataset.kind=synthetic");
        apply_override(j, "batch.independent=false");
        const RunConfig r = config_from_json(j);
        CHECK(r.scaling.q_sigma == -1.0);
        CHECK(r.widths == std::vector<int>{16});
        CHECK_FALSE(r.batch.independent);
        CHECK_THROWS_AS(apply_override(j, "no_equals_sign"), ConfigError);
    }
}

TEST_CASE("batch schedule") {
    SUBCASE("full batch is the identity on both sides") {
        BatchSchedule s{{BatchMode::Full, 0, false}, 7, 5};
        std::vector<int> a;
        std::vector<int> w;
        s.batches(3, a, w);
        CHECK(a == std::vector<int>{0, 1, 2, 3, 4});
        CHECK(w == a);
    }
    SUBCASE("sized batches are deterministic and width independent") {
        BatchSchedule s{{BatchMode::Sized, 4, false}, 7, 100};
        std::vector<int> a1;
        std::vector<int> w1;
        s.batches(5, a1, w1);
        std::vector<int> a2;
        std::vector<int> w2;
        s.batches(5, a2, w2);
        CHECK(a1 == a2);
        CHECK(w1 == a1);  // coupled
        std::vector<int> a3;
        std::vector<int> w3;
        s.batches(6, a3, w3);
        CHECK(a1 != a3);  // new draw each step
    }
    SUBCASE("independent mode draws a separate w-batch") {
        BatchSchedule s{{BatchMode::Sized, 6, true}, 7, 100};
        std::vector<int> a;
        std::vector<int> w;
        s.batches(0, a, w);
        CHECK(a != w);
    }
}

TEST_CASE("train_run determinism and cadence") {
    const RunConfig cfg = tiny_config();
    const PreparedData data = prepare_data(cfg);
    const RunRecord r1 = train_run(cfg, data, 16, 0);
    const RunRecord r2 = train_run(cfg, data, 16, 0);
    REQUIRE(r1.rows.size() == r2.rows.size());
    for (std::size_t i = 0; i < r1.rows.size(); ++i) CHECK(r1.rows[i] == r2.rows[i]);

    // unique (run_id, width, seed, step, metric) keys
    std::set<std::string> keys;
    for (const auto& r : r1.rows) {
        keys.insert(r.run_id + "|" + std::to_string(r.width) + "|" + std::to_string(r.seed) + "|"
                    + std::to_string(r.step) + "|" + r.metric);
    }
    CHECK(keys.size() == r1.rows.size());

    // recorded steps follow the cadence
    std::set<long> steps;
    for (const auto& r : r1.rows) steps.insert(r.step);
    CHECK(steps == std::set<long>{0, 1, 2, 5, 6});
}

TEST_CASE("train_run with steps=0 emits only step-0 metrics") {
    RunConfig cfg = tiny_config();
    cfg.steps = 0;
    const PreparedData data = prepare_data(cfg);
    const RunRecord rec = train_run(cfg, data, 16, 0);
    CHECK(!rec.rows.empty());
    for (const auto& r : rec.rows) CHECK(r.step == 0);
}

TEST_CASE("a short reference run learns") {
    RunConfig cfg;
    cfg.scaling = ScalingExponents::ntk();
    cfg.widths = {128};
    cfg.seeds = {0};
    cfg.steps = 200;
    cfg.dataset.d_x = 20;
    cfg.dataset.n_train = 256;
    cfg.dataset.n_test = 128;
    cfg.probes = 8;
    const PreparedData data = prepare_data(cfg);
    const RunRecord rec = train_run(cfg, data, 128, 0);
    double loss0 = -1.0;
    double loss_end = -1.0;
    double acc_end = 0.0;
    for (const auto& r : rec.rows) {
        if (r.metric == "train_loss" && r.step == 0) loss0 = r.value;
        if (r.metric == "train_loss" && r.step == cfg.steps) loss_end = r.value;
        if (r.metric == "test_acc" && r.step == cfg.steps) acc_end = r.value;
    }
    REQUIRE(loss0 > 0.0);
    CHECK(loss_end < loss0);
    CHECK(acc_end > 0.8);  // mu = 1.5 blobs are easy
}

TEST_CASE("unstable scalings mark the run as diverged instead of failing") {
    RunConfig cfg = tiny_config();
    cfg.scaling = ScalingExponents::symmetric(1.5, 1.5);  // far outside the band
    cfg.widths = {512};
    cfg.steps = 60;
    cfg.anchors.eta_hat_a_star = 200.0;
    cfg.anchors.eta_hat_w_star = 200.0;
    const PreparedData data = prepare_data(cfg);
    const RunRecord rec = train_run(cfg, data, 512, 0);
    bool diverged = false;
    for (const auto& r : rec.rows) diverged = diverged || r.metric == "diverged";
    CHECK(diverged);
}

TEST_CASE("csv persistence round trip") {
    const RunConfig cfg = tiny_config();
    const PreparedData data = prepare_data(cfg);
    RunRecord rec = train_run(cfg, data, 16, 0);
    rec.add("edge", 1, 2, 3, "tiny", 1.0 / 3.0);
    rec.add("edge", 1, 2, 3, "big", 1.23456789012345678e300);
    rec.add("edge", 1, 2, 3, "neg", -7.00000000000000067e-13);
    rec.sort_rows();
    const auto path = std::filesystem::temp_directory_path() / "widthscale_roundtrip.csv";
    write_csv(path.string(), rec);
    const RunRecord back = read_csv(path.string());
    REQUIRE(back.rows.size() == rec.rows.size());
    for (std::size_t i = 0; i < rec.rows.size(); ++i) CHECK(back.rows[i] == rec.rows[i]);
}

TEST_CASE("width sweep produces sorted records and fits") {
    RunConfig cfg = tiny_config();
    cfg.widths = {16, 32, 64};
    cfg.steps = 3;
    const SweepResult res = width_sweep(cfg, 2);
    REQUIRE(!res.records.rows.empty());
    // sorted by key
    for (std::size_t i = 1; i < res.records.rows.size(); ++i) {
        const auto& a = res.records.rows[i - 1];
        const auto& b = res.records.rows[i];
        CHECK(std::tie(a.run_id, a.width, a.seed, a.step, a.metric)
              <= std::tie(b.run_id, b.width, b.seed, b.step, b.metric));
    }
    std::set<std::string> names;
    for (const auto& f : res.fits) names.insert(f.name);
    CHECK(names.count("init_abs_logit") == 1);
    CHECK(names.count("init_kernel_a") == 1);
    CHECK(names.count("init_dk_ratio_aw") == 1);
    CHECK(names.count("logit_scale_step_2") == 1);
}

TEST_CASE("sweep cells are identical no matter how many jobs run them") {
    RunConfig cfg = tiny_config();
    cfg.steps = 4;
    const SweepResult serial = width_sweep(cfg, 1);
    const SweepResult threaded = width_sweep(cfg, 4);
    REQUIRE(serial.records.rows.size() == threaded.records.rows.size());
    for (std::size_t i = 0; i < serial.records.rows.size(); ++i) {
        CHECK(serial.records.rows[i] == threaded.records.rows[i]);
    }
}

TEST_CASE("limit runs record probe logits on the cadence") {
    RunConfig cfg = tiny_config();
    cfg.steps = 4;
    cfg.size = 32;
    const PreparedData data = prepare_data(cfg);
    const auto tracked = tracked_for(data);
    for (const char* name : {"ntk", "mf", "icmf", "sym_default", "default"}) {
        const RunRecord rec =
            limit_run(cfg, data, tracked, limit_kind_by_name(name), 0);
        int probe_rows = 0;
        for (const auto& r : rec.rows) {
            if (r.metric.rfind("probe_logit_", 0) == 0) ++probe_rows;
            CHECK(r.width == 0);
        }
        CHECK(probe_rows == cfg.probes * 4);  // cadence {0,1,2,4}
    }
    CHECK_THROWS_AS(limit_kind_by_name("bogus"), ConfigError);
}

TEST_CASE("kl experiment smoke: MF starts far from the reference, NTK close") {
    RunConfig cfg;
    cfg.scaling = ScalingExponents::ntk();
    cfg.widths = {128};
    cfg.seeds = {0, 1, 2, 3, 4, 5, 6, 7};
    cfg.steps = 2;
    cfg.dataset.d_x = 6;
    cfg.dataset.n_train = 32;
    cfg.dataset.n_test = 16;
    cfg.probes = 5;
    cfg.size = 1024;
    cfg.limits = {"ntk", "mf"};
    const KlExperimentResult res = kl_experiment(cfg, 2);
    double kl_ntk0 = -1.0;
    double kl_mf0 = -1.0;
    for (const auto& r : res.series) {
        if (r.step == 0 && r.limit_kind == "ntk") kl_ntk0 = r.kl;
        if (r.step == 0 && r.limit_kind == "mf") kl_mf0 = r.kl;
    }
    REQUIRE(kl_ntk0 >= 0.0);
    REQUIRE(kl_mf0 >= 0.0);
    CHECK(kl_mf0 > kl_ntk0);
    // one row per (kind, cadence step)
    CHECK(res.series.size() == 2 * effective_cadence(cfg).size());
}
