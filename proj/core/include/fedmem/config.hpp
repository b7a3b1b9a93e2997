#ifndef FEDMEM_CONFIG_HPP
#define FEDMEM_CONFIG_HPP

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "fedmem/data.hpp"
#include "fedmem/datastore.hpp"
#include "fedmem/federation.hpp"
#include "fedmem/personalize.hpp"

namespace fedmem {

/// Flat sectioned text config: `key = value` lines under `[section]`
/// headers, `#` or `;` comment lines, blank lines ignored. Values keep
/// everything after the first `=`, trimmed. Every value remembers its line
/// number so validation errors can point at the offending line.
class ConfigFile {
public:
    struct Value {
        std::string text;
        int line = 0;
    };

    static ConfigFile parse_file(const std::string& path);
    static ConfigFile parse_string(const std::string& text, std::string name = "<string>");

    const std::string& name() const { return name_; }
    bool has_section(const std::string& section) const;
    bool has(const std::string& section, const std::string& key) const;
    const Value* find(const std::string& section, const std::string& key) const;

    // Typed getters; missing keys or unparsable values raise ConfigError
    // with a "file:line:" prefix where a line is known.
    std::string get_string(const std::string& section, const std::string& key) const;
    std::string get_string(const std::string& section, const std::string& key,
                           const std::string& fallback) const;
    double get_double(const std::string& section, const std::string& key) const;
    double get_double(const std::string& section, const std::string& key, double fallback) const;
    int get_int(const std::string& section, const std::string& key) const;
    int get_int(const std::string& section, const std::string& key, int fallback) const;
    std::uint64_t get_u64(const std::string& section, const std::string& key,
                          std::uint64_t fallback) const;
    bool get_bool(const std::string& section, const std::string& key, bool fallback) const;
    std::vector<double> get_double_list(const std::string& section, const std::string& key) const;
    std::vector<int> get_int_list(const std::string& section, const std::string& key) const;
    /// "round:factor" pairs separated by commas.
    std::vector<LrDrop> get_lr_schedule(const std::string& section, const std::string& key) const;

    /// All sections and keys in deterministic (sorted) order.
    const std::map<std::string, std::map<std::string, Value>>& sections() const {
        return sections_;
    }

private:
    [[noreturn]] void fail(const std::string& section, const std::string& key,
                           const std::string& message) const;

    std::string name_;
    std::map<std::string, std::map<std::string, Value>> sections_;
};

enum class Scenario {
    compare,
    unseen,
    capacity_sweep,
    kernel_sweep,
    quality_sweep,
    hw_split,
    drift,
};

std::string to_string(Scenario s);
Scenario scenario_from_string(const std::string& name, const std::string& where);

enum class PartitionerKind { dirichlet, pachinko };

struct DataConfig {
    int num_classes = 10;
    int num_coarse = 0; // 0 or 1: flat pool
    int samples_per_class = 100;
    int feature_dim = 16;
    double mean_scale = 3.0;
    double noise_sigma = 1.0;
    PartitionerKind partitioner = PartitionerKind::dirichlet;
    double alpha = 0.3;
    double beta = 10.0;
    int num_clients = 10;
    SplitRatios split;
};

struct ModelConfig {
    std::vector<int> hidden; // hidden layer widths; output layer is implied
    int repr_layer = -1;     // -1: last hidden layer
};

struct PersonalizeConfig {
    KernelConfig kernel;
    std::vector<double> lambda_grid = {0.0, 0.1, 0.3, 0.5, 0.7, 0.9, 1.0};
    bool datastore_from_train_val = false; // rebuild datastore from train+val after tuning
};

struct BaselineConfig {
    int local_epochs = 50;
    int finetune_epochs = 1;
    double finetune_lr = -1.0; // < 0: use the final scheduled federation lr
};

struct ExperimentConfig {
    Scenario scenario = Scenario::compare;
    std::uint64_t master_seed = 0;
    std::string out_dir = "out";

    DataConfig data;
    FedConfig fed;
    ModelConfig model;
    PersonalizeConfig personalize;
    BaselineConfig baselines;

    // unseen / capacity_sweep / hw_split
    double train_fraction = 0.8;

    // capacity_sweep
    std::vector<double> capacity_grid;
    std::vector<double> alpha_grid;

    // kernel_sweep
    std::vector<int> k_grid;
    std::vector<double> sigma_grid;

    // quality_sweep: centralized-training epoch counts at which to snapshot
    std::vector<int> checkpoints;
    double central_lr = 0.1;
    int central_batch = 32;

    // hw_split
    std::vector<double> delta_c_grid;

    // drift
    int drift_t0 = 0;
    int drift_horizon = 0;
    std::vector<EvictionPolicy> drift_policies;
    bool drift_identical_shift = false;
};

/// Parses and validates the whole experiment description. Throws
/// ConfigError naming the missing section/key (with the config file line
/// where one exists).
ExperimentConfig parse_experiment_config(const ConfigFile& file);

} // namespace fedmem

#endif
