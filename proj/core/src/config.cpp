#include "fedmem/config.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <fstream>
#include <sstream>

#include "fedmem/errors.hpp"
#include "fedmem/rng.hpp"

namespace fedmem {

namespace {

std::string trim(const std::string& s) {
    std::size_t b = 0, e = s.size();
    while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
    while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
    return s.substr(b, e - b);
}

std::vector<std::string> split_list(const std::string& text) {
    std::vector<std::string> items;
    std::string current;
    std::stringstream ss(text);
    while (std::getline(ss, current, ',')) {
        current = trim(current);
        if (!current.empty()) items.push_back(current);
    }
    return items;
}

double parse_double(const std::string& text, const std::string& where) {
    try {
        std::size_t used = 0;
        double v = std::stod(text, &used);
        if (used != text.size()) throw std::invalid_argument("trailing characters");
        return v;
    } catch (const std::exception&) {
        throw ConfigError(where + ": \"" + text + "\" is not a number");
    }
}

long long parse_int(const std::string& text, const std::string& where) {
    long long v = 0;
    auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
    if (ec != std::errc() || ptr != text.data() + text.size()) {
        throw ConfigError(where + ": \"" + text + "\" is not an integer");
    }
    return v;
}

} // namespace

ConfigFile ConfigFile::parse_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file " + path);
    std::stringstream buffer;
    buffer << in.rdbuf();
    return parse_string(buffer.str(), path);
}

ConfigFile ConfigFile::parse_string(const std::string& text, std::string name) {
    ConfigFile file;
    file.name_ = std::move(name);

    std::istringstream in(text);
    std::string raw;
    std::string section;
    int line_no = 0;
    while (std::getline(in, raw)) {
        ++line_no;
        std::string line = trim(raw);
        if (line.empty() || line[0] == '#' || line[0] == ';') continue;
        if (line.front() == '[') {
            if (line.back() != ']') {
                throw ConfigError(file.name_ + ":" + std::to_string(line_no) +
                                  ": unterminated section header");
            }
            section = trim(line.substr(1, line.size() - 2));
            if (section.empty()) {
                throw ConfigError(file.name_ + ":" + std::to_string(line_no) +
                                  ": empty section name");
            }
            file.sections_[section]; // a section may legitimately stay empty
            continue;
        }
        const auto eq = line.find('=');
        if (eq == std::string::npos) {
            throw ConfigError(file.name_ + ":" + std::to_string(line_no) +
                              ": expected `key = value`");
        }
        if (section.empty()) {
            throw ConfigError(file.name_ + ":" + std::to_string(line_no) +
                              ": key outside any [section]");
        }
        std::string key = trim(line.substr(0, eq));
        std::string value = trim(line.substr(eq + 1));
        if (key.empty()) {
            throw ConfigError(file.name_ + ":" + std::to_string(line_no) + ": empty key");
        }
        auto [it, inserted] = file.sections_[section].emplace(key, Value{value, line_no});
        if (!inserted) {
            throw ConfigError(file.name_ + ":" + std::to_string(line_no) + ": duplicate key \"" +
                              key + "\" in [" + section + "] (first at line " +
                              std::to_string(it->second.line) + ")");
        }
    }
    return file;
}

bool ConfigFile::has_section(const std::string& section) const {
    return sections_.count(section) > 0;
}

bool ConfigFile::has(const std::string& section, const std::string& key) const {
    return find(section, key) != nullptr;
}

const ConfigFile::Value* ConfigFile::find(const std::string& section,
                                          const std::string& key) const {
    auto sit = sections_.find(section);
    if (sit == sections_.end()) return nullptr;
    auto kit = sit->second.find(key);
    if (kit == sit->second.end()) return nullptr;
    return &kit->second;
}

void ConfigFile::fail(const std::string& section, const std::string& key,
                      const std::string& message) const {
    const Value* v = find(section, key);
    if (v != nullptr) {
        throw ConfigError(name_ + ":" + std::to_string(v->line) + ": [" + section + "] " + key +
                          ": " + message);
    }
    throw ConfigError(name_ + ": [" + section + "] " + message);
}

std::string ConfigFile::get_string(const std::string& section, const std::string& key) const {
    const Value* v = find(section, key);
    if (v == nullptr) fail(section, key, "missing required key \"" + key + "\"");
    return v->text;
}

std::string ConfigFile::get_string(const std::string& section, const std::string& key,
                                   const std::string& fallback) const {
    const Value* v = find(section, key);
    return v == nullptr ? fallback : v->text;
}

double ConfigFile::get_double(const std::string& section, const std::string& key) const {
    const Value* v = find(section, key);
    if (v == nullptr) fail(section, key, "missing required key \"" + key + "\"");
    return parse_double(v->text, name_ + ":" + std::to_string(v->line) + ": " + key);
}

double ConfigFile::get_double(const std::string& section, const std::string& key,
                              double fallback) const {
    const Value* v = find(section, key);
    if (v == nullptr) return fallback;
    return parse_double(v->text, name_ + ":" + std::to_string(v->line) + ": " + key);
}

int ConfigFile::get_int(const std::string& section, const std::string& key) const {
    const Value* v = find(section, key);
    if (v == nullptr) fail(section, key, "missing required key \"" + key + "\"");
    return static_cast<int>(parse_int(v->text, name_ + ":" + std::to_string(v->line) + ": " + key));
}

int ConfigFile::get_int(const std::string& section, const std::string& key, int fallback) const {
    const Value* v = find(section, key);
    if (v == nullptr) return fallback;
    return static_cast<int>(parse_int(v->text, name_ + ":" + std::to_string(v->line) + ": " + key));
}

std::uint64_t ConfigFile::get_u64(const std::string& section, const std::string& key,
                                  std::uint64_t fallback) const {
    const Value* v = find(section, key);
    if (v == nullptr) return fallback;
    const std::string where = name_ + ":" + std::to_string(v->line) + ": " + key;
    std::uint64_t out = 0;
    auto [ptr, ec] = std::from_chars(v->text.data(), v->text.data() + v->text.size(), out);
    if (ec != std::errc() || ptr != v->text.data() + v->text.size()) {
        throw ConfigError(where + ": \"" + v->text + "\" is not an unsigned integer");
    }
    return out;
}

bool ConfigFile::get_bool(const std::string& section, const std::string& key,
                          bool fallback) const {
    const Value* v = find(section, key);
    if (v == nullptr) return fallback;
    std::string t = v->text;
    std::transform(t.begin(), t.end(), t.begin(),
                   [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    if (t == "true" || t == "yes" || t == "1" || t == "on") return true;
    if (t == "false" || t == "no" || t == "0" || t == "off") return false;
    throw ConfigError(name_ + ":" + std::to_string(v->line) + ": " + key + ": \"" + v->text +
                      "\" is not a boolean");
}

std::vector<double> ConfigFile::get_double_list(const std::string& section,
                                                const std::string& key) const {
    const Value* v = find(section, key);
    if (v == nullptr) fail(section, key, "missing required key \"" + key + "\"");
    const std::string where = name_ + ":" + std::to_string(v->line) + ": " + key;
    std::vector<double> out;
    for (const auto& item : split_list(v->text)) out.push_back(parse_double(item, where));
    if (out.empty()) throw ConfigError(where + ": empty list");
    return out;
}

std::vector<int> ConfigFile::get_int_list(const std::string& section,
                                          const std::string& key) const {
    const Value* v = find(section, key);
    if (v == nullptr) fail(section, key, "missing required key \"" + key + "\"");
    const std::string where = name_ + ":" + std::to_string(v->line) + ": " + key;
    std::vector<int> out;
    for (const auto& item : split_list(v->text)) {
        out.push_back(static_cast<int>(parse_int(item, where)));
    }
    if (out.empty()) throw ConfigError(where + ": empty list");
    return out;
}

std::vector<LrDrop> ConfigFile::get_lr_schedule(const std::string& section,
                                                const std::string& key) const {
    const Value* v = find(section, key);
    if (v == nullptr || trim(v->text).empty()) return {};
    const std::string where = name_ + ":" + std::to_string(v->line) + ": " + key;
    std::vector<LrDrop> out;
    for (const auto& item : split_list(v->text)) {
        const auto colon = item.find(':');
        if (colon == std::string::npos) {
            throw ConfigError(where + ": expected round:factor pairs, got \"" + item + "\"");
        }
        LrDrop drop;
        drop.round = static_cast<int>(parse_int(trim(item.substr(0, colon)), where));
        drop.factor = parse_double(trim(item.substr(colon + 1)), where);
        out.push_back(drop);
    }
    return out;
}

std::string to_string(Scenario s) {
    switch (s) {
        case Scenario::compare: return "compare";
        case Scenario::unseen: return "unseen";
        case Scenario::capacity_sweep: return "capacity_sweep";
        case Scenario::kernel_sweep: return "kernel_sweep";
        case Scenario::quality_sweep: return "quality_sweep";
        case Scenario::hw_split: return "hw_split";
        case Scenario::drift: return "drift";
    }
    return "unknown";
}

Scenario scenario_from_string(const std::string& name, const std::string& where) {
    if (name == "compare") return Scenario::compare;
    if (name == "unseen") return Scenario::unseen;
    if (name == "capacity_sweep") return Scenario::capacity_sweep;
    if (name == "kernel_sweep") return Scenario::kernel_sweep;
    if (name == "quality_sweep") return Scenario::quality_sweep;
    if (name == "hw_split") return Scenario::hw_split;
    if (name == "drift") return Scenario::drift;
    throw ConfigError(where + ": unknown scenario \"" + name +
                      "\" (expected compare, unseen, capacity_sweep, kernel_sweep, "
                      "quality_sweep, hw_split, or drift)");
}

namespace {

void require_section(const ConfigFile& file, const std::string& section, Scenario scenario) {
    if (!file.has_section(section)) {
        throw ConfigError(file.name() + ": missing required section [" + section +
                          "] for scenario \"" + to_string(scenario) + "\"");
    }
}

DataConfig parse_data(const ConfigFile& file) {
    DataConfig data;
    data.num_classes = file.get_int("data", "num_classes");
    data.num_coarse = file.get_int("data", "num_coarse", 0);
    data.samples_per_class = file.get_int("data", "samples_per_class");
    data.feature_dim = file.get_int("data", "feature_dim");
    data.mean_scale = file.get_double("data", "mean_scale", 3.0);
    data.noise_sigma = file.get_double("data", "noise_sigma", 1.0);
    data.num_clients = file.get_int("data", "clients");
    data.alpha = file.get_double("data", "alpha", 0.3);
    data.beta = file.get_double("data", "beta", 10.0);

    const std::string kind = file.get_string("data", "partitioner", "dirichlet");
    if (kind == "dirichlet") {
        data.partitioner = PartitionerKind::dirichlet;
    } else if (kind == "pachinko") {
        data.partitioner = PartitionerKind::pachinko;
    } else {
        const auto* v = file.find("data", "partitioner");
        throw ConfigError(file.name() + ":" + std::to_string(v->line) +
                          ": unknown partitioner \"" + kind +
                          "\" (expected dirichlet or pachinko)");
    }

    if (file.has("data", "split")) {
        auto ratios = file.get_double_list("data", "split");
        if (ratios.size() != 3) {
            const auto* v = file.find("data", "split");
            throw ConfigError(file.name() + ":" + std::to_string(v->line) +
                              ": split needs exactly three ratios train,val,test");
        }
        data.split = SplitRatios{ratios[0], ratios[1], ratios[2]};
    }
    return data;
}

FedConfig parse_fed(const ConfigFile& file, std::uint64_t master_seed) {
    FedConfig fed;
    fed.rounds = file.get_int("fed", "rounds");
    fed.participation = file.get_double("fed", "participation", 1.0);
    fed.local_epochs = file.get_int("fed", "local_epochs", 1);
    fed.batch_size = file.get_int("fed", "batch_size", 32);
    fed.lr = file.get_double("fed", "lr");
    fed.lr_schedule = file.get_lr_schedule("fed", "lr_schedule");
    fed.seed = derive_seed(master_seed, {seed_tag::federation});
    return fed;
}

ModelConfig parse_model(const ConfigFile& file) {
    ModelConfig model;
    model.hidden = file.get_int_list("model", "hidden");
    model.repr_layer = file.get_int("model", "repr_layer", -1);
    for (int h : model.hidden) {
        if (h <= 0) throw ConfigError(file.name() + ": [model] hidden widths must be positive");
    }
    return model;
}

PersonalizeConfig parse_personalize(const ConfigFile& file) {
    PersonalizeConfig p;
    p.kernel.k = file.get_int("personalize", "k", 10);
    p.kernel.sigma = file.get_double("personalize", "sigma", 1.0);
    if (file.has("personalize", "lambda_grid")) {
        p.lambda_grid = file.get_double_list("personalize", "lambda_grid");
    }
    p.datastore_from_train_val = file.get_bool("personalize", "datastore_from_train_val", false);
    return p;
}

BaselineConfig parse_baselines(const ConfigFile& file) {
    BaselineConfig b;
    b.local_epochs = file.get_int("baselines", "local_epochs", 50);
    b.finetune_epochs = file.get_int("baselines", "finetune_epochs", 1);
    b.finetune_lr = file.get_double("baselines", "finetune_lr", -1.0);
    return b;
}

} // namespace

ExperimentConfig parse_experiment_config(const ConfigFile& file) {
    ExperimentConfig cfg;

    require_section(file, "experiment", cfg.scenario);
    cfg.scenario = scenario_from_string(file.get_string("experiment", "scenario"),
                                        file.name());
    cfg.master_seed = file.get_u64("experiment", "seed", 0);
    cfg.out_dir = file.get_string("experiment", "out", "out");

    for (const char* section : {"data", "fed", "model", "personalize"}) {
        require_section(file, section, cfg.scenario);
    }
    cfg.data = parse_data(file);
    cfg.fed = parse_fed(file, cfg.master_seed);
    cfg.model = parse_model(file);
    cfg.personalize = parse_personalize(file);
    cfg.baselines = parse_baselines(file);

    switch (cfg.scenario) {
        case Scenario::compare:
            break;
        case Scenario::unseen:
            require_section(file, "unseen", cfg.scenario);
            cfg.train_fraction = file.get_double("unseen", "train_fraction", 0.8);
            break;
        case Scenario::capacity_sweep:
            require_section(file, "capacity_sweep", cfg.scenario);
            cfg.capacity_grid = file.get_double_list("capacity_sweep", "capacities");
            cfg.alpha_grid = file.has("capacity_sweep", "alphas")
                                 ? file.get_double_list("capacity_sweep", "alphas")
                                 : std::vector<double>{cfg.data.alpha};
            cfg.train_fraction = file.get_double("capacity_sweep", "train_fraction", 0.8);
            for (double c : cfg.capacity_grid) {
                if (!(c > 0.0) || c > 1.0) {
                    throw ConfigError(file.name() +
                                      ": [capacity_sweep] capacities must lie in (0, 1]");
                }
            }
            break;
        case Scenario::kernel_sweep:
            require_section(file, "kernel_sweep", cfg.scenario);
            cfg.k_grid = file.get_int_list("kernel_sweep", "k_grid");
            cfg.sigma_grid = file.get_double_list("kernel_sweep", "sigma_grid");
            break;
        case Scenario::quality_sweep:
            require_section(file, "quality_sweep", cfg.scenario);
            cfg.checkpoints = file.get_int_list("quality_sweep", "checkpoints");
            cfg.central_lr = file.get_double("quality_sweep", "lr", cfg.fed.lr);
            cfg.central_batch = file.get_int("quality_sweep", "batch_size", cfg.fed.batch_size);
            std::sort(cfg.checkpoints.begin(), cfg.checkpoints.end());
            if (cfg.checkpoints.front() < 0) {
                throw ConfigError(file.name() + ": [quality_sweep] checkpoints must be >= 0");
            }
            break;
        case Scenario::hw_split:
            require_section(file, "hw_split", cfg.scenario);
            cfg.delta_c_grid = file.get_double_list("hw_split", "delta_c");
            cfg.train_fraction = file.get_double("hw_split", "train_fraction", 0.8);
            for (double d : cfg.delta_c_grid) {
                if (d < 0.0 || d >= 0.5) {
                    throw ConfigError(file.name() + ": [hw_split] delta_c must lie in [0, 0.5)");
                }
            }
            break;
        case Scenario::drift: {
            require_section(file, "drift", cfg.scenario);
            cfg.drift_t0 = file.get_int("drift", "t0");
            cfg.drift_horizon = file.get_int("drift", "horizon");
            cfg.drift_identical_shift = file.get_bool("drift", "identical_shift", false);
            if (cfg.drift_t0 < 1 || cfg.drift_horizon <= cfg.drift_t0) {
                throw ConfigError(file.name() + ": [drift] requires 0 < t0 < horizon");
            }
            const std::string policies = file.get_string("drift", "policies", "fixed,fifo,concatenate");
            std::stringstream ss(policies);
            std::string item;
            while (std::getline(ss, item, ',')) {
                item = trim(item);
                if (item.empty()) continue;
                if (item == "fixed") {
                    cfg.drift_policies.push_back(EvictionPolicy::fixed);
                } else if (item == "fifo") {
                    cfg.drift_policies.push_back(EvictionPolicy::fifo);
                } else if (item == "concatenate") {
                    cfg.drift_policies.push_back(EvictionPolicy::concatenate);
                } else {
                    throw ConfigError(file.name() + ": [drift] unknown policy \"" + item +
                                      "\" (expected fixed, fifo, concatenate)");
                }
            }
            if (cfg.drift_policies.empty()) {
                throw ConfigError(file.name() + ": [drift] no policies given");
            }
            break;
        }
    }
    return cfg;
}

} // namespace fedmem
