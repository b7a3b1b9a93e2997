#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "fedmem/config.hpp"
#include "fedmem/errors.hpp"
#include "fedmem/harness.hpp"

using namespace fedmem;
namespace fs = std::filesystem;

namespace {

// A deliberately tiny but complete experiment description; tests override
// individual lines by string surgery.
const char* kBaseConfig = R"(
[experiment]
scenario = compare
seed = 7
out = OUTDIR

[data]
num_classes = 4
samples_per_class = 120
feature_dim = 6
mean_scale = 1.5
noise_sigma = 1.0
partitioner = dirichlet
alpha = 1.0
clients = 4
split = 0.6,0.2,0.2

[fed]
rounds = 6
participation = 1.0
local_epochs = 1
batch_size = 16
lr = 0.2
lr_schedule = 4:0.1

[model]
hidden = 16,8

[personalize]
k = 5
sigma = 1.0
lambda_grid = 0,0.5,1.0

[baselines]
local_epochs = 10
finetune_epochs = 1
)";

ExperimentConfig tiny_config(const std::string& out_dir, const std::string& extra = "") {
    std::string text = std::string(kBaseConfig) + extra;
    const auto pos = text.find("OUTDIR");
    text.replace(pos, 6, out_dir);
    return parse_experiment_config(ConfigFile::parse_string(text, "tiny.cfg"));
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    REQUIRE(in.good());
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

fs::path fresh_dir(const std::string& name) {
    fs::path dir = fs::temp_directory_path() / name;
    fs::remove_all(dir);
    return dir;
}

} // namespace

TEST_CASE("config file parsing") {
    ConfigFile f = ConfigFile::parse_string("[a]\nx = 1\n# comment\ny = 2.5\n[b]\nz = hi\n", "t");
    CHECK(f.get_int("a", "x") == 1);
    CHECK(f.get_double("a", "y") == 2.5);
    CHECK(f.get_string("b", "z") == "hi");
    CHECK(f.get_int("a", "missing", 9) == 9);

    SUBCASE("errors carry file and line information") {
        try {
            (void)f.get_int("b", "z");
            FAIL("expected ConfigError");
        } catch (const ConfigError& e) {
            CHECK(std::string(e.what()).find("t:6") != std::string::npos);
        }

        try {
            (void)ConfigFile::parse_string("x = 1\n", "t2");
            FAIL("expected ConfigError");
        } catch (const ConfigError& e) {
            CHECK(std::string(e.what()).find("t2:1") != std::string::npos);
        }
    }

    SUBCASE("duplicate keys are rejected") {
        CHECK_THROWS_AS(ConfigFile::parse_string("[a]\nx=1\nx=2\n"), ConfigError);
    }

    SUBCASE("schedules and lists") {
        ConfigFile g = ConfigFile::parse_string("[s]\nsched = 10:0.1, 20:0.5\nlist = 1,2,3\n");
        auto sched = g.get_lr_schedule("s", "sched");
        REQUIRE(sched.size() == 2);
        CHECK(sched[0].round == 10);
        CHECK(sched[0].factor == 0.1);
        CHECK(g.get_int_list("s", "list") == std::vector<int>{1, 2, 3});
    }
}

TEST_CASE("experiment config validation names the missing pieces") {
    SUBCASE("missing section") {
        const char* text = "[experiment]\nscenario = compare\n";
        try {
            (void)parse_experiment_config(ConfigFile::parse_string(text, "c"));
            FAIL("expected ConfigError");
        } catch (const ConfigError& e) {
            CHECK(std::string(e.what()).find("[data]") != std::string::npos);
        }
    }

    SUBCASE("missing key inside a present section") {
        const char* text =
            "[experiment]\nscenario = compare\n[data]\nnum_classes = 2\n[fed]\nrounds = 1\n"
            "lr = 0.1\n[model]\nhidden = 4\n[personalize]\n";
        try {
            (void)parse_experiment_config(ConfigFile::parse_string(text, "c"));
            FAIL("expected ConfigError");
        } catch (const ConfigError& e) {
            CHECK(std::string(e.what()).find("[data]") != std::string::npos);
            CHECK(std::string(e.what()).find("samples_per_class") != std::string::npos);
        }
    }

    SUBCASE("scenario-specific section is required") {
        std::string text(kBaseConfig);
        text.replace(text.find("scenario = compare"), 18, "scenario = drif");
        // Unknown scenario noticed first.
        CHECK_THROWS_AS(parse_experiment_config(ConfigFile::parse_string(text)), ConfigError);

        std::string drift(kBaseConfig);
        drift.replace(drift.find("scenario = compare"), 18, "scenario = drift  ");
        try {
            (void)parse_experiment_config(ConfigFile::parse_string(drift, "d"));
            FAIL("expected ConfigError");
        } catch (const ConfigError& e) {
            CHECK(std::string(e.what()).find("[drift]") != std::string::npos);
        }
    }
}

TEST_CASE("metrics arithmetic") {
    SUBCASE("single client") {
        std::vector<std::pair<std::size_t, double>> rows{{10, 0.8}};
        MetricsReport r = metrics(rows);
        CHECK(r.weighted_avg == 0.8);
        CHECK(r.bottom_decile == 0.8);
        CHECK(r.unweighted_avg == 0.8);
    }

    SUBCASE("weighted average with n = (1, 3)") {
        std::vector<std::pair<std::size_t, double>> rows{{1, 0.5}, {3, 0.9}};
        MetricsReport r = metrics(rows);
        CHECK(r.weighted_avg == doctest::Approx(0.8).epsilon(1e-12));
        CHECK(r.unweighted_avg == doctest::Approx(0.7).epsilon(1e-12));
    }

    SUBCASE("bottom decile is the second-worst of twenty") {
        std::vector<std::pair<std::size_t, double>> rows;
        for (int i = 0; i < 20; ++i) {
            rows.emplace_back(1, 0.5 + 0.01 * i); // ascending 0.5 .. 0.69
        }
        MetricsReport r = metrics(rows);
        CHECK(r.bottom_decile == doctest::Approx(0.51).epsilon(1e-12));
    }

    SUBCASE("decile rank clamps to the worst below ten clients") {
        std::vector<std::pair<std::size_t, double>> rows{{1, 0.9}, {1, 0.3}, {1, 0.6}};
        MetricsReport r = metrics(rows);
        CHECK(r.bottom_decile == 0.3);
    }

    SUBCASE("bounds sanity") {
        std::vector<std::pair<std::size_t, double>> rows{{5, 0.2}, {1, 0.9}, {2, 0.5}};
        MetricsReport r = metrics(rows);
        CHECK(r.bottom_decile <= 0.9);
        CHECK(r.bottom_decile >= 0.2);
    }
}

TEST_CASE("compare scenario on an IID toy keeps methods within noise") {
    auto dir = fresh_dir("fedmem_iid_toy");
    ExperimentConfig cfg = tiny_config(dir.string());
    cfg.data.num_clients = 2;
    cfg.data.alpha = 1e6;
    cfg.data.mean_scale = 3.0; // easy task: every method should do well
    cfg.fed.rounds = 12;
    cfg.baselines.local_epochs = 30;

    CompareResult r = scenario_compare(cfg);
    REQUIRE(r.methods.size() == 4);
    double lo = 1.0, hi = 0.0;
    for (const auto& m : r.methods) {
        lo = std::min(lo, m.report.weighted_avg);
        hi = std::max(hi, m.report.weighted_avg);
    }
    // Documented expectation: on an IID, well-separated 2-client toy, all
    // four methods solve the task to within a few points of each other.
    CHECK(hi - lo < 0.1);
    CHECK(lo > 0.8);
}

TEST_CASE("compare scenario reports per-client tuning rows") {
    auto dir = fresh_dir("fedmem_compare_rows");
    ExperimentConfig cfg = tiny_config(dir.string());
    CompareResult r = scenario_compare(cfg);
    REQUIRE(r.lambda_report.size() == 4);
    for (const auto& row : r.lambda_report) {
        CHECK(row.lambda_star >= 0.0);
        CHECK(row.lambda_star <= 1.0);
        CHECK(row.val_acc >= row.val_acc_global); // grid-search dominance
        CHECK(row.val_acc >= row.val_acc_knn);
        CHECK(row.n_m > 0);
    }
}

TEST_CASE("run_experiment writes byte-identical outputs on rerun") {
    auto dir_a = fresh_dir("fedmem_det_a");
    auto dir_b = fresh_dir("fedmem_det_b");

    ExperimentConfig cfg_a = tiny_config(dir_a.string());
    ExperimentConfig cfg_b = tiny_config(dir_b.string());
    REQUIRE(run_experiment(cfg_a) == 0);
    REQUIRE(run_experiment(cfg_b) == 0);

    for (const char* file : {"metrics.csv", "rounds.csv", "lambda_report.csv"}) {
        CHECK(slurp(dir_a / file) == slurp(dir_b / file));
    }

    // Headers are present and stable.
    std::string metrics_text = slurp(dir_a / "metrics.csv");
    CHECK(metrics_text.rfind("method,group,eval_split,weighted_avg,bottom_decile,unweighted_avg",
                             0) == 0);
    std::string manifest = slurp(dir_a / "manifest.txt");
    CHECK(manifest.find("status=ok") != std::string::npos);
    CHECK(manifest.find("experiment.scenario=compare") != std::string::npos);

    fs::remove_all(dir_a);
    fs::remove_all(dir_b);
}

TEST_CASE("seed override changes results, out override relocates them") {
    auto dir_a = fresh_dir("fedmem_seed_a");
    auto dir_b = fresh_dir("fedmem_seed_b");
    ExperimentConfig cfg = tiny_config(dir_a.string());
    apply_overrides(cfg, 12345, dir_b.string());
    CHECK(cfg.master_seed == 12345);
    CHECK(cfg.out_dir == dir_b.string());
    REQUIRE(run_experiment(cfg) == 0);
    CHECK(fs::exists(dir_b / "metrics.csv"));
    CHECK(!fs::exists(dir_a / "metrics.csv"));

    ExperimentConfig base = tiny_config(dir_a.string());
    REQUIRE(run_experiment(base) == 0);
    CHECK(slurp(dir_a / "metrics.csv") != slurp(dir_b / "metrics.csv"));
    fs::remove_all(dir_a);
    fs::remove_all(dir_b);
}

TEST_CASE("unseen scenario reports both groups and splits") {
    auto dir = fresh_dir("fedmem_unseen");
    ExperimentConfig cfg = tiny_config(dir.string(), "\n[unseen]\ntrain_fraction = 0.75\n");
    cfg.scenario = Scenario::unseen;
    cfg.data.num_clients = 4;

    UnseenResult r = scenario_unseen(cfg);
    CHECK(r.train_ids.size() == 3);
    CHECK(r.new_ids.size() == 1);
    REQUIRE(r.methods.size() == 8); // {fedavg, knn_per} x {train, new} x {test, train}
    bool saw_new_test = false;
    for (const auto& m : r.methods) {
        if (m.group == "new" && m.eval_split == "test" && m.method == "knn_per") {
            saw_new_test = true;
        }
    }
    CHECK(saw_new_test);
    CHECK(r.lambda_report.size() == 4); // every client is tuned
}

TEST_CASE("drift scenario switches evaluation sets exactly at t0") {
    auto dir = fresh_dir("fedmem_drift");
    ExperimentConfig cfg = tiny_config(
        dir.string(), "\n[drift]\nt0 = 2\nhorizon = 5\npolicies = fixed,fifo,concatenate\n");
    cfg.scenario = Scenario::drift;
    cfg.data.samples_per_class = 160;
    cfg.drift_t0 = 2;
    cfg.drift_horizon = 5;
    cfg.drift_policies = {EvictionPolicy::fixed, EvictionPolicy::fifo,
                          EvictionPolicy::concatenate};

    DriftResult r = scenario_drift(cfg);
    REQUIRE(r.timeline.size() == 3 * 5);
    for (const auto& point : r.timeline) {
        CHECK(point.after_shift == (point.t >= 2));
        CHECK(point.avg_accuracy >= 0.0);
        CHECK(point.avg_accuracy <= 1.0);
    }

    // The CSV carries the provenance column and flips exactly at t0.
    REQUIRE(run_experiment(cfg) == 0);
    std::ifstream in(dir / "timeline.csv");
    REQUIRE(in.good());
    std::string line;
    std::getline(in, line);
    CHECK(line == "t,policy,avg_accuracy,eval_dist");
    while (std::getline(in, line)) {
        std::stringstream row(line);
        std::string t_str, policy, acc, dist;
        std::getline(row, t_str, ',');
        std::getline(row, policy, ',');
        std::getline(row, acc, ',');
        std::getline(row, dist, ',');
        CHECK(dist == (std::stoi(t_str) >= 2 ? "after" : "before"));
    }
    fs::remove_all(dir);
}

TEST_CASE("an identical-shift drift run has a flat timeline") {
    auto dir = fresh_dir("fedmem_drift_flat");
    ExperimentConfig cfg = tiny_config(dir.string());
    cfg.scenario = Scenario::drift;
    cfg.data.samples_per_class = 200;
    cfg.drift_t0 = 3;
    cfg.drift_horizon = 7;
    cfg.drift_identical_shift = true;
    cfg.drift_policies = {EvictionPolicy::fixed, EvictionPolicy::concatenate};

    DriftResult r = scenario_drift(cfg);
    std::map<EvictionPolicy, std::vector<double>> by;
    for (const auto& p : r.timeline) by[p.policy].push_back(p.avg_accuracy);

    // Fixed policy: same store, same evaluation set -> a constant line.
    const auto& fixed = by[EvictionPolicy::fixed];
    for (double acc : fixed) CHECK(acc == fixed.front());

    // Concatenate: the t0 step is just another batch; no shift-sized jump.
    const auto& concat = by[EvictionPolicy::concatenate];
    CHECK(std::abs(concat[3] - concat[2]) < 0.05);
}

TEST_CASE("remaining scenarios produce their documented shapes") {
    SUBCASE("capacity sweep") {
        auto dir = fresh_dir("fedmem_capacity");
        ExperimentConfig cfg = tiny_config(dir.string());
        cfg.scenario = Scenario::capacity_sweep;
        cfg.capacity_grid = {0.5, 1.0};
        cfg.alpha_grid = {0.3, 1e6};
        cfg.data.num_clients = 5;
        CapacityResult r = scenario_capacity(cfg);
        REQUIRE(r.rows.size() == 4);
        CHECK(r.rows[0].alpha == 0.3);
        CHECK(r.rows[0].capacity == 0.5);
        CHECK(r.rows[3].alpha == 1e6);
        CHECK(r.rows[3].capacity == 1.0);
    }

    SUBCASE("kernel sweep") {
        auto dir = fresh_dir("fedmem_kernel");
        ExperimentConfig cfg = tiny_config(dir.string());
        cfg.scenario = Scenario::kernel_sweep;
        cfg.k_grid = {1, 5};
        cfg.sigma_grid = {0.1, 10.0};
        KernelResult r = scenario_kernel(cfg);
        REQUIRE(r.rows.size() == 4);
        CHECK(r.rows[0].param == "k");
        CHECK(r.rows[2].param == "sigma");
    }

    SUBCASE("quality sweep accuracy climbs with training") {
        auto dir = fresh_dir("fedmem_quality");
        ExperimentConfig cfg = tiny_config(dir.string());
        cfg.scenario = Scenario::quality_sweep;
        cfg.checkpoints = {0, 8};
        cfg.central_lr = 0.2;
        cfg.central_batch = 16;
        QualityResult r = scenario_quality(cfg);
        REQUIRE(r.rows.size() == 2);
        CHECK(r.rows[0].checkpoint == 0);
        CHECK(r.rows[1].checkpoint == 8);
        CHECK(r.rows[1].global_test_acc > r.rows[0].global_test_acc);
    }

    SUBCASE("hw split keeps total memory constant") {
        auto dir = fresh_dir("fedmem_hw");
        ExperimentConfig cfg = tiny_config(dir.string());
        cfg.scenario = Scenario::hw_split;
        cfg.data.num_clients = 8;
        cfg.delta_c_grid = {0.0, 0.25};
        cfg.train_fraction = 0.5;
        HwSplitResult r = scenario_hw_split(cfg);
        REQUIRE(r.rows.size() == 2);
        CHECK(r.weak_ids.size() == 2);
        CHECK(r.strong_ids.size() == 2);
        for (const auto& row : r.rows) {
            CHECK(row.avg_acc >= 0.0);
            CHECK(row.avg_acc <= 1.0);
        }
    }
}

TEST_CASE("export-scenario writes the client files") {
    auto dir = fresh_dir("fedmem_export_cli");
    ExperimentConfig cfg = tiny_config(dir.string());
    auto written = run_export_scenario(cfg);
    CHECK(written.size() == 5); // 4 clients + manifest
    CHECK(fs::exists(dir / "client_0000.bin"));
    CHECK(fs::exists(dir / "manifest.txt"));
    std::string manifest = slurp(dir / "manifest.txt");
    CHECK(manifest.find("alpha=1") != std::string::npos);
    CHECK(manifest.find("clients=4") != std::string::npos);
    fs::remove_all(dir);
}
