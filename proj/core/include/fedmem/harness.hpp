#ifndef FEDMEM_HARNESS_HPP
#define FEDMEM_HARNESS_HPP

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "fedmem/config.hpp"
#include "fedmem/data.hpp"
#include "fedmem/federation.hpp"
#include "fedmem/personalize.hpp"

namespace fedmem {

/// Accuracy summary across clients. The weighted average uses weights
/// n_m / sum(n_m); the bottom decile is the accuracy at rank ceil(M/10)
/// from the worst (rank 1 when M < 10), a fairness metric.
struct MetricsReport {
    std::vector<double> per_client;   // client-id order
    std::vector<std::size_t> weights; // n_m
    double weighted_avg = 0.0;
    double unweighted_avg = 0.0;
    double bottom_decile = 0.0;
};

MetricsReport metrics(std::span<const std::pair<std::size_t, double>> per_client);

/// One method's metrics in one evaluation context.
struct MethodMetrics {
    std::string method;     // local | fedavg | fedavg_plus | knn_per
    std::string group;      // all | train | new
    std::string eval_split; // test | train
    MetricsReport report;
};

/// Per-client tuning outcome. The lambda-endpoint validation accuracies are
/// carried for analysis but only the five spec columns reach the CSV.
struct ClientTuneRow {
    int client_id = 0;
    std::size_t n_m = 0;
    double lambda_star = 0.0;
    double val_acc = 0.0;
    double test_acc = 0.0;
    double val_acc_global = 0.0; // lambda = 0
    double val_acc_knn = 0.0;    // lambda = 1
};

struct CompareResult {
    std::vector<MethodMetrics> methods;
    std::vector<ClientTuneRow> lambda_report;
    std::vector<RoundLog> rounds;
    double initial_loss = 0.0;
};

struct UnseenResult {
    std::vector<MethodMetrics> methods;
    std::vector<ClientTuneRow> lambda_report;
    std::vector<RoundLog> rounds;
    std::vector<int> train_ids;
    std::vector<int> new_ids;
};

struct CapacityRow {
    double alpha = 0.0;
    double capacity = 0.0;
    MetricsReport report;
};

struct CapacityResult {
    std::vector<CapacityRow> rows;
    std::vector<std::pair<double, std::vector<RoundLog>>> rounds_per_alpha;
};

struct KernelRow {
    std::string param; // "k" | "sigma"
    double value = 0.0;
    MetricsReport report;
};

struct KernelResult {
    std::vector<KernelRow> rows;
    std::vector<RoundLog> rounds;
};

struct QualityRow {
    int checkpoint = 0; // centralized training epochs completed
    double global_test_acc = 0.0;
    double knn_only_acc = 0.0; // lambda = 1
    double tuned_acc = 0.0;
};

struct QualityResult {
    std::vector<QualityRow> rows;
};

struct HwRow {
    double delta_c = 0.0;
    double avg_acc = 0.0;
    double weak_avg = 0.0;
    double strong_avg = 0.0;
};

struct HwSplitResult {
    std::vector<HwRow> rows;
    std::vector<RoundLog> rounds;
    std::vector<int> weak_ids;
    std::vector<int> strong_ids;
};

struct DriftPoint {
    int t = 0;
    EvictionPolicy policy = EvictionPolicy::fixed;
    double avg_accuracy = 0.0; // unweighted mean across clients
    bool after_shift = false;  // which distribution the evaluation used
};

struct DriftResult {
    std::vector<DriftPoint> timeline;
    std::vector<RoundLog> rounds;
    std::vector<ClientTuneRow> lambda_report;
};

// Scenario runners. Each is a pure function of (config, master seed): the
// same config re-run produces identical results, file outputs included.
CompareResult scenario_compare(const ExperimentConfig& cfg);
UnseenResult scenario_unseen(const ExperimentConfig& cfg);
CapacityResult scenario_capacity(const ExperimentConfig& cfg);
KernelResult scenario_kernel(const ExperimentConfig& cfg);
QualityResult scenario_quality(const ExperimentConfig& cfg);
HwSplitResult scenario_hw_split(const ExperimentConfig& cfg);
DriftResult scenario_drift(const ExperimentConfig& cfg);

/// Runs the configured scenario end to end and writes metrics.csv,
/// rounds.csv, lambda_report.csv, timeline.csv (drift only), and
/// manifest.txt into cfg.out_dir. Returns a process exit code; on a
/// runtime failure the manifest flags status=failed with the error.
int run_experiment(const ExperimentConfig& cfg);

/// Applies CLI overrides. A new master seed re-derives every dependent
/// sub-seed.
void apply_overrides(ExperimentConfig& cfg, std::optional<std::uint64_t> seed,
                     std::optional<std::string> out_dir);

/// Builds the pool + partition + splits described by cfg.data and writes
/// the per-client binary scenario directory (see export_scenario).
std::vector<std::string> run_export_scenario(const ExperimentConfig& cfg);

/// Resolved-config echo used for manifest.txt; deterministic key order.
std::map<std::string, std::string> manifest_entries(const ExperimentConfig& cfg);

/// Layer chain for the configured MLP on a given task shape.
std::vector<LayerSpec> layers_from(const ModelConfig& model, int feature_dim, int num_classes);

/// Representation layer index after applying the "last hidden layer"
/// default.
int resolve_repr_layer(const ModelConfig& model, std::size_t num_layers);

} // namespace fedmem

#endif
