#include "fedmem/harness.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "csv.hpp"
#include "fedmem/datastore.hpp"
#include "fedmem/errors.hpp"
#include "fedmem/rng.hpp"

namespace fedmem {

namespace {

namespace fs = std::filesystem;

LabeledPool build_pool(const ExperimentConfig& cfg) {
    return make_synthetic_pool(cfg.data.num_classes, cfg.data.num_coarse,
                               cfg.data.samples_per_class, cfg.data.feature_dim,
                               derive_seed(cfg.master_seed, {seed_tag::pool}),
                               cfg.data.mean_scale, cfg.data.noise_sigma);
}

Partition build_partition(const ExperimentConfig& cfg, const LabeledPool& pool, double alpha,
                          std::uint64_t salt) {
    const std::uint64_t seed = derive_seed(cfg.master_seed, {seed_tag::partition, salt});
    if (cfg.data.partitioner == PartitionerKind::pachinko) {
        return pachinko_partition(pool, cfg.data.num_clients, alpha, cfg.data.beta, seed);
    }
    return dirichlet_partition(pool, cfg.data.num_clients, alpha, seed);
}

std::vector<ClientDataset> build_all_clients(const ExperimentConfig& cfg, const LabeledPool& pool,
                                             double alpha, std::uint64_t salt = 0) {
    Partition part = build_partition(cfg, pool, alpha, salt);
    return build_clients(pool, part, cfg.data.split,
                         derive_seed(cfg.master_seed, {seed_tag::split, salt}));
}

double final_schedule_lr(const FedConfig& fed) {
    double lr = fed.lr;
    for (const auto& drop : fed.lr_schedule) {
        if (drop.round < fed.rounds) lr *= drop.factor;
    }
    return lr;
}

double finetune_lr(const ExperimentConfig& cfg) {
    return cfg.baselines.finetune_lr < 0.0 ? final_schedule_lr(cfg.fed)
                                           : cfg.baselines.finetune_lr;
}

/// Tiny clients (>= 3 samples) are legal, but a client whose split left no
/// validation or test samples cannot be tuned or scored; surface that with
/// the client id instead of a bare empty-input error mid-scenario.
void check_evaluable(const ClientDataset& client) {
    if (client.train.empty() || client.val.empty() || client.test.empty()) {
        throw ConfigError("client " + std::to_string(client.client_id) +
                          " has an empty split (train/val/test = " +
                          std::to_string(client.train.size()) + "/" +
                          std::to_string(client.val.size()) + "/" +
                          std::to_string(client.test.size()) +
                          "); raise samples_per_class or alpha");
    }
}

void check_evaluable(const std::vector<ClientDataset>& clients) {
    for (const auto& c : clients) check_evaluable(c);
}

/// Datastore built from a client's material plus the tuned mixing weight.
struct TunedClient {
    Datastore store;
    TuneResult tuned;
    double val_acc_global = 0.0;
    double val_acc_knn = 0.0;
};

TunedClient tune_client(const Model& global, const ClientDataset& client,
                        const PersonalizeConfig& pcfg, double capacity_fraction,
                        std::uint64_t seed) {
    TunedClient out;
    // Tuning always validates against a store that does not contain the
    // validation points themselves.
    Datastore tune_store = build_datastore(global, client.train, capacity_fraction, seed);
    out.tuned = tune_lambda(global, tune_store, pcfg.kernel, client.val, pcfg.lambda_grid);
    out.val_acc_global =
        PersonalizedPredictor(global, tune_store, pcfg.kernel, 0.0).evaluate(client.val);
    out.val_acc_knn =
        PersonalizedPredictor(global, tune_store, pcfg.kernel, 1.0).evaluate(client.val);

    if (pcfg.datastore_from_train_val) {
        std::vector<Sample> both = client.train;
        both.insert(both.end(), client.val.begin(), client.val.end());
        out.store = build_datastore(global, both, capacity_fraction, derive_seed(seed, {1}));
    } else {
        out.store = std::move(tune_store);
    }
    return out;
}

std::vector<std::pair<std::size_t, double>> with_weights(const std::vector<ClientDataset>& clients,
                                                         const std::vector<double>& accs) {
    std::vector<std::pair<std::size_t, double>> rows;
    rows.reserve(accs.size());
    for (std::size_t m = 0; m < accs.size(); ++m) rows.emplace_back(clients[m].size(), accs[m]);
    return rows;
}

struct GlobalSetup {
    LabeledPool pool;
    std::vector<ClientDataset> clients;
    std::vector<LayerSpec> spec;
    int repr_layer = 0;
    FedResult fed;
};

GlobalSetup train_global(const ExperimentConfig& cfg) {
    GlobalSetup setup;
    setup.pool = build_pool(cfg);
    setup.clients = build_all_clients(cfg, setup.pool, cfg.data.alpha);
    check_evaluable(setup.clients);
    setup.spec = layers_from(cfg.model, cfg.data.feature_dim, cfg.data.num_classes);
    setup.repr_layer = resolve_repr_layer(cfg.model, setup.spec.size());
    Model init = init_model(setup.spec, setup.repr_layer,
                            derive_seed(cfg.master_seed, {seed_tag::model_init}));
    setup.fed = run_fedavg(setup.clients, init, cfg.fed);
    return setup;
}

/// Deterministic 80/20-style client split for unseen-client scenarios.
void split_population(const ExperimentConfig& cfg, int num_clients, std::vector<int>& train_ids,
                      std::vector<int>& new_ids) {
    if (num_clients < 2) throw ConfigError("unseen-client scenarios need at least two clients");
    std::vector<int> ids(static_cast<std::size_t>(num_clients));
    for (int i = 0; i < num_clients; ++i) ids[static_cast<std::size_t>(i)] = i;
    Rng rng(derive_seed(cfg.master_seed, {seed_tag::unseen_split}));
    rng.shuffle(ids);
    auto n_train = static_cast<std::size_t>(
        std::lround(cfg.train_fraction * static_cast<double>(num_clients)));
    n_train = std::clamp<std::size_t>(n_train, 1, static_cast<std::size_t>(num_clients) - 1);
    train_ids.assign(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(n_train));
    new_ids.assign(ids.begin() + static_cast<std::ptrdiff_t>(n_train), ids.end());
    std::sort(train_ids.begin(), train_ids.end());
    std::sort(new_ids.begin(), new_ids.end());
}

std::vector<KeyLabel> embed_batch(const Model& model, std::span<const Sample> samples) {
    std::vector<KeyLabel> out;
    out.reserve(samples.size());
    for (const auto& s : samples) {
        out.push_back(KeyLabel{forward(model, s.features).repr, s.label});
    }
    return out;
}

std::string policy_name(EvictionPolicy p) {
    switch (p) {
        case EvictionPolicy::fixed: return "fixed";
        case EvictionPolicy::fifo: return "fifo";
        case EvictionPolicy::concatenate: return "concatenate";
    }
    return "unknown";
}

void write_metrics_header_row(csv::Writer& w, const MethodMetrics& m) {
    w.row(m.method, m.group, m.eval_split, m.report.weighted_avg, m.report.bottom_decile,
          m.report.unweighted_avg);
}

void write_lambda_report(const fs::path& dir, const std::vector<ClientTuneRow>& rows) {
    csv::Writer w((dir / "lambda_report.csv").string(),
                  {"client_id", "n_m", "lambda_star", "val_acc", "test_acc"});
    for (const auto& r : rows) w.row(r.client_id, r.n_m, r.lambda_star, r.val_acc, r.test_acc);
}

void write_rounds(const fs::path& dir, const std::vector<RoundLog>& rounds) {
    csv::Writer w((dir / "rounds.csv").string(), {"round", "participant_count", "global_loss"});
    for (const auto& r : rounds) {
        w.row(r.round, r.participants.size(), r.global_loss);
    }
}

void write_manifest(const fs::path& dir, const std::map<std::string, std::string>& entries) {
    std::ofstream out(dir / "manifest.txt");
    if (!out) throw ConfigError("cannot open manifest.txt for writing");
    for (const auto& [k, v] : entries) out << k << "=" << v << "\n";
}

} // namespace

std::vector<LayerSpec> layers_from(const ModelConfig& model, int feature_dim, int num_classes) {
    std::vector<LayerSpec> spec;
    int in = feature_dim;
    for (int h : model.hidden) {
        spec.push_back(LayerSpec{in, h, Activation::relu});
        in = h;
    }
    spec.push_back(LayerSpec{in, num_classes, Activation::identity});
    return spec;
}

int resolve_repr_layer(const ModelConfig& model, std::size_t num_layers) {
    if (model.repr_layer >= 0) return model.repr_layer;
    return num_layers >= 2 ? static_cast<int>(num_layers) - 2 : 0;
}

MetricsReport metrics(std::span<const std::pair<std::size_t, double>> per_client) {
    if (per_client.empty()) throw ConfigError("metrics: need at least one client");
    MetricsReport report;
    report.per_client.reserve(per_client.size());
    report.weights.reserve(per_client.size());

    std::size_t total = 0;
    double weighted = 0.0, unweighted = 0.0;
    for (const auto& [n_m, acc] : per_client) {
        report.per_client.push_back(acc);
        report.weights.push_back(n_m);
        total += n_m;
        unweighted += acc;
    }
    for (const auto& [n_m, acc] : per_client) {
        weighted += static_cast<double>(n_m) / static_cast<double>(total) * acc;
    }
    report.weighted_avg = weighted;
    report.unweighted_avg = unweighted / static_cast<double>(per_client.size());

    std::vector<double> sorted = report.per_client;
    std::sort(sorted.begin(), sorted.end());
    const auto m = sorted.size();
    const std::size_t rank = std::max<std::size_t>(1, (m + 9) / 10); // ceil(M/10), clamped to 1
    report.bottom_decile = sorted[rank - 1];
    return report;
}

CompareResult scenario_compare(const ExperimentConfig& cfg) {
    GlobalSetup setup = train_global(cfg);
    const Model& global = setup.fed.model;
    const double ft_lr = finetune_lr(cfg);

    std::vector<double> acc_local, acc_fedavg, acc_plus, acc_knn;
    CompareResult result;
    for (const auto& client : setup.clients) {
        const auto m = static_cast<std::uint64_t>(client.client_id);

        Model local = train_local(client, setup.spec, setup.repr_layer,
                                  cfg.baselines.local_epochs, cfg.fed.lr, cfg.fed.batch_size,
                                  derive_seed(cfg.master_seed, {seed_tag::baseline_local, m}));
        acc_local.push_back(model_accuracy(local, client.test));

        acc_fedavg.push_back(model_accuracy(global, client.test));

        Model plus = fine_tune(global, client, cfg.baselines.finetune_epochs, ft_lr,
                               cfg.fed.batch_size,
                               derive_seed(cfg.master_seed, {seed_tag::baseline_finetune, m}));
        acc_plus.push_back(model_accuracy(plus, client.test));

        TunedClient tuned = tune_client(global, client, cfg.personalize, 1.0,
                                        derive_seed(cfg.master_seed, {seed_tag::datastore, m}));
        PersonalizedPredictor predictor(global, tuned.store, cfg.personalize.kernel,
                                        tuned.tuned.lambda);
        const double test_acc = predictor.evaluate(client.test);
        acc_knn.push_back(test_acc);
        result.lambda_report.push_back(ClientTuneRow{client.client_id, client.size(),
                                                     tuned.tuned.lambda, tuned.tuned.val_accuracy,
                                                     test_acc, tuned.val_acc_global,
                                                     tuned.val_acc_knn});
    }

    result.methods.push_back(
        MethodMetrics{"local", "all", "test", metrics(with_weights(setup.clients, acc_local))});
    result.methods.push_back(
        MethodMetrics{"fedavg", "all", "test", metrics(with_weights(setup.clients, acc_fedavg))});
    result.methods.push_back(MethodMetrics{"fedavg_plus", "all", "test",
                                           metrics(with_weights(setup.clients, acc_plus))});
    result.methods.push_back(
        MethodMetrics{"knn_per", "all", "test", metrics(with_weights(setup.clients, acc_knn))});
    result.rounds = std::move(setup.fed.rounds);
    result.initial_loss = setup.fed.initial_loss;
    return result;
}

UnseenResult scenario_unseen(const ExperimentConfig& cfg) {
    LabeledPool pool = build_pool(cfg);
    std::vector<ClientDataset> clients = build_all_clients(cfg, pool, cfg.data.alpha);
    check_evaluable(clients);
    auto spec = layers_from(cfg.model, cfg.data.feature_dim, cfg.data.num_classes);
    const int repr_layer = resolve_repr_layer(cfg.model, spec.size());

    UnseenResult result;
    split_population(cfg, cfg.data.num_clients, result.train_ids, result.new_ids);

    std::vector<ClientDataset> train_clients;
    train_clients.reserve(result.train_ids.size());
    for (int id : result.train_ids) train_clients.push_back(clients[static_cast<std::size_t>(id)]);
    std::vector<ClientDataset> new_clients;
    new_clients.reserve(result.new_ids.size());
    for (int id : result.new_ids) new_clients.push_back(clients[static_cast<std::size_t>(id)]);

    Model init =
        init_model(spec, repr_layer, derive_seed(cfg.master_seed, {seed_tag::model_init}));
    FedResult fed = run_fedavg(train_clients, init, cfg.fed);
    const Model& global = fed.model;

    auto evaluate_group = [&](const std::vector<ClientDataset>& group, const std::string& name) {
        std::vector<double> fed_test, knn_test, fed_train, knn_train;
        for (const auto& client : group) {
            const auto m = static_cast<std::uint64_t>(client.client_id);
            TunedClient tuned = tune_client(global, client, cfg.personalize, 1.0,
                                            derive_seed(cfg.master_seed, {seed_tag::datastore, m}));
            PersonalizedPredictor predictor(global, tuned.store, cfg.personalize.kernel,
                                            tuned.tuned.lambda);
            const double test_acc = predictor.evaluate(client.test);
            fed_test.push_back(model_accuracy(global, client.test));
            knn_test.push_back(test_acc);
            fed_train.push_back(model_accuracy(global, client.train));
            knn_train.push_back(predictor.evaluate(client.train));
            result.lambda_report.push_back(
                ClientTuneRow{client.client_id, client.size(), tuned.tuned.lambda,
                              tuned.tuned.val_accuracy, test_acc, tuned.val_acc_global,
                              tuned.val_acc_knn});
        }
        result.methods.push_back(
            MethodMetrics{"fedavg", name, "test", metrics(with_weights(group, fed_test))});
        result.methods.push_back(
            MethodMetrics{"knn_per", name, "test", metrics(with_weights(group, knn_test))});
        result.methods.push_back(
            MethodMetrics{"fedavg", name, "train", metrics(with_weights(group, fed_train))});
        result.methods.push_back(
            MethodMetrics{"knn_per", name, "train", metrics(with_weights(group, knn_train))});
    };

    evaluate_group(train_clients, "train");
    evaluate_group(new_clients, "new");
    result.rounds = std::move(fed.rounds);
    return result;
}

CapacityResult scenario_capacity(const ExperimentConfig& cfg) {
    LabeledPool pool = build_pool(cfg);
    auto spec = layers_from(cfg.model, cfg.data.feature_dim, cfg.data.num_classes);
    const int repr_layer = resolve_repr_layer(cfg.model, spec.size());

    CapacityResult result;
    for (std::size_t ai = 0; ai < cfg.alpha_grid.size(); ++ai) {
        const double alpha = cfg.alpha_grid[ai];
        std::vector<ClientDataset> clients =
            build_all_clients(cfg, pool, alpha, static_cast<std::uint64_t>(ai));
        check_evaluable(clients);

        std::vector<int> train_ids, new_ids;
        split_population(cfg, cfg.data.num_clients, train_ids, new_ids);
        std::vector<ClientDataset> train_clients, new_clients;
        for (int id : train_ids) train_clients.push_back(clients[static_cast<std::size_t>(id)]);
        for (int id : new_ids) new_clients.push_back(clients[static_cast<std::size_t>(id)]);

        Model init =
            init_model(spec, repr_layer, derive_seed(cfg.master_seed, {seed_tag::model_init}));
        FedResult fed = run_fedavg(train_clients, init, cfg.fed);

        for (std::size_t ci = 0; ci < cfg.capacity_grid.size(); ++ci) {
            const double capacity = cfg.capacity_grid[ci];
            std::vector<double> accs;
            for (const auto& client : new_clients) {
                const auto m = static_cast<std::uint64_t>(client.client_id);
                TunedClient tuned = tune_client(
                    fed.model, client, cfg.personalize, capacity,
                    derive_seed(cfg.master_seed,
                                {seed_tag::capacity, static_cast<std::uint64_t>(ai),
                                 static_cast<std::uint64_t>(ci), m}));
                PersonalizedPredictor predictor(fed.model, tuned.store, cfg.personalize.kernel,
                                                tuned.tuned.lambda);
                accs.push_back(predictor.evaluate(client.test));
            }
            result.rows.push_back(
                CapacityRow{alpha, capacity, metrics(with_weights(new_clients, accs))});
        }
        result.rounds_per_alpha.emplace_back(alpha, std::move(fed.rounds));
    }
    return result;
}

KernelResult scenario_kernel(const ExperimentConfig& cfg) {
    GlobalSetup setup = train_global(cfg);
    const Model& global = setup.fed.model;

    KernelResult result;
    auto evaluate_kernel = [&](KernelConfig kernel, const std::string& param, double value) {
        PersonalizeConfig pcfg = cfg.personalize;
        pcfg.kernel = kernel;
        std::vector<double> accs;
        for (const auto& client : setup.clients) {
            const auto m = static_cast<std::uint64_t>(client.client_id);
            TunedClient tuned = tune_client(global, client, pcfg, 1.0,
                                            derive_seed(cfg.master_seed, {seed_tag::datastore, m}));
            PersonalizedPredictor predictor(global, tuned.store, pcfg.kernel, tuned.tuned.lambda);
            accs.push_back(predictor.evaluate(client.test));
        }
        result.rows.push_back(KernelRow{param, value, metrics(with_weights(setup.clients, accs))});
    };

    for (int k : cfg.k_grid) {
        evaluate_kernel(KernelConfig{k, cfg.personalize.kernel.sigma}, "k",
                        static_cast<double>(k));
    }
    for (double sigma : cfg.sigma_grid) {
        evaluate_kernel(KernelConfig{cfg.personalize.kernel.k, sigma}, "sigma", sigma);
    }
    result.rounds = std::move(setup.fed.rounds);
    return result;
}

QualityResult scenario_quality(const ExperimentConfig& cfg) {
    LabeledPool pool = build_pool(cfg);
    std::vector<ClientDataset> clients = build_all_clients(cfg, pool, cfg.data.alpha);
    check_evaluable(clients);
    auto spec = layers_from(cfg.model, cfg.data.feature_dim, cfg.data.num_classes);
    const int repr_layer = resolve_repr_layer(cfg.model, spec.size());

    std::vector<Sample> pooled;
    for (const auto& client : clients) {
        pooled.insert(pooled.end(), client.train.begin(), client.train.end());
    }

    Model model =
        init_model(spec, repr_layer, derive_seed(cfg.master_seed, {seed_tag::model_init}));

    QualityResult result;
    int trained_epochs = 0;
    for (int checkpoint : cfg.checkpoints) {
        const int to_run = checkpoint - trained_epochs;
        if (to_run > 0) {
            model = local_update(model, pooled, to_run, cfg.central_lr, cfg.central_batch,
                                 derive_seed(cfg.master_seed, {seed_tag::centralized,
                                                               static_cast<std::uint64_t>(
                                                                   trained_epochs)}));
            trained_epochs = checkpoint;
        }

        std::vector<double> global_accs, knn_only, tuned_accs;
        for (const auto& client : clients) {
            const auto m = static_cast<std::uint64_t>(client.client_id);
            global_accs.push_back(model_accuracy(model, client.test));
            TunedClient tuned =
                tune_client(model, client, cfg.personalize, 1.0,
                            derive_seed(cfg.master_seed,
                                        {seed_tag::datastore,
                                         static_cast<std::uint64_t>(checkpoint), m}));
            PersonalizedPredictor knn_pred(model, tuned.store, cfg.personalize.kernel, 1.0);
            knn_only.push_back(knn_pred.evaluate(client.test));
            PersonalizedPredictor tuned_pred(model, tuned.store, cfg.personalize.kernel,
                                             tuned.tuned.lambda);
            tuned_accs.push_back(tuned_pred.evaluate(client.test));
        }
        result.rows.push_back(QualityRow{
            checkpoint, metrics(with_weights(clients, global_accs)).weighted_avg,
            metrics(with_weights(clients, knn_only)).weighted_avg,
            metrics(with_weights(clients, tuned_accs)).weighted_avg});
    }
    return result;
}

HwSplitResult scenario_hw_split(const ExperimentConfig& cfg) {
    LabeledPool pool = build_pool(cfg);
    std::vector<ClientDataset> clients = build_all_clients(cfg, pool, cfg.data.alpha);
    check_evaluable(clients);
    auto spec = layers_from(cfg.model, cfg.data.feature_dim, cfg.data.num_classes);
    const int repr_layer = resolve_repr_layer(cfg.model, spec.size());

    HwSplitResult result;
    std::vector<int> train_ids, new_ids;
    split_population(cfg, cfg.data.num_clients, train_ids, new_ids);
    if (new_ids.size() < 2) throw ConfigError("hw_split needs at least two unseen clients");

    std::vector<ClientDataset> train_clients, new_clients;
    for (int id : train_ids) train_clients.push_back(clients[static_cast<std::size_t>(id)]);
    for (int id : new_ids) new_clients.push_back(clients[static_cast<std::size_t>(id)]);

    Model init =
        init_model(spec, repr_layer, derive_seed(cfg.master_seed, {seed_tag::model_init}));
    FedResult fed = run_fedavg(train_clients, init, cfg.fed);

    // Half of the new clients are "weak", half "strong"; total datastore
    // memory across the system stays constant as delta_c varies.
    {
        std::vector<int> shuffled = new_ids;
        Rng rng(derive_seed(cfg.master_seed, {seed_tag::hw_split}));
        rng.shuffle(shuffled);
        const std::size_t half = shuffled.size() / 2;
        result.weak_ids.assign(shuffled.begin(), shuffled.begin() + static_cast<std::ptrdiff_t>(half));
        result.strong_ids.assign(shuffled.begin() + static_cast<std::ptrdiff_t>(half),
                                 shuffled.end());
        std::sort(result.weak_ids.begin(), result.weak_ids.end());
        std::sort(result.strong_ids.begin(), result.strong_ids.end());
    }

    for (std::size_t di = 0; di < cfg.delta_c_grid.size(); ++di) {
        const double delta_c = cfg.delta_c_grid[di];
        std::vector<std::pair<std::size_t, double>> all_rows, weak_rows, strong_rows;
        for (const auto& client : new_clients) {
            const bool weak = std::binary_search(result.weak_ids.begin(), result.weak_ids.end(),
                                                 client.client_id);
            const double fraction = weak ? 0.5 - delta_c : 0.5 + delta_c;
            const auto m = static_cast<std::uint64_t>(client.client_id);
            TunedClient tuned = tune_client(
                fed.model, client, cfg.personalize, std::min(1.0, std::max(fraction, 1e-9)),
                derive_seed(cfg.master_seed,
                            {seed_tag::hw_split, static_cast<std::uint64_t>(di), m}));
            PersonalizedPredictor predictor(fed.model, tuned.store, cfg.personalize.kernel,
                                            tuned.tuned.lambda);
            const double acc = predictor.evaluate(client.test);
            all_rows.emplace_back(client.size(), acc);
            (weak ? weak_rows : strong_rows).emplace_back(client.size(), acc);
        }
        result.rows.push_back(HwRow{delta_c, metrics(all_rows).weighted_avg,
                                    weak_rows.empty() ? 0.0 : metrics(weak_rows).weighted_avg,
                                    strong_rows.empty() ? 0.0
                                                        : metrics(strong_rows).weighted_avg});
    }
    result.rounds = std::move(fed.rounds);
    return result;
}

DriftResult scenario_drift(const ExperimentConfig& cfg) {
    LabeledPool pool = build_pool(cfg);
    DriftScenario scenario = make_drift_scenario(
        pool, cfg.data.num_clients, cfg.data.alpha, cfg.drift_t0, cfg.drift_horizon,
        cfg.data.split, derive_seed(cfg.master_seed, {seed_tag::partition}),
        cfg.drift_identical_shift);

    auto spec = layers_from(cfg.model, cfg.data.feature_dim, cfg.data.num_classes);
    const int repr_layer = resolve_repr_layer(cfg.model, spec.size());

    // The global model is trained once, on the pre-shift datasets; the
    // timeline only ever updates datastores (the point of the method).
    std::vector<ClientDataset> before;
    before.reserve(scenario.clients.size());
    for (const auto& c : scenario.clients) {
        check_evaluable(c.before);
        check_evaluable(c.after);
        before.push_back(c.before);
    }

    Model init =
        init_model(spec, repr_layer, derive_seed(cfg.master_seed, {seed_tag::model_init}));
    FedResult fed = run_fedavg(before, init, cfg.fed);
    const Model& global = fed.model;

    DriftResult result;
    result.rounds = std::move(fed.rounds);

    // Per-client lambda is tuned once on the pre-shift validation split
    // against the initial datastore, then held fixed across the timeline.
    std::vector<double> lambdas(scenario.clients.size(), 0.0);
    for (std::size_t m = 0; m < scenario.clients.size(); ++m) {
        const auto& client = scenario.clients[m];
        Datastore store(global.repr_dim());
        for (auto& item : embed_batch(global, client.datastore_seed)) {
            store.append(std::move(item.key), item.label);
        }
        TuneResult tuned = tune_lambda(global, store, cfg.personalize.kernel, client.before.val,
                                       cfg.personalize.lambda_grid);
        lambdas[m] = tuned.lambda;
        PersonalizedPredictor predictor(global, store, cfg.personalize.kernel, tuned.lambda);
        result.lambda_report.push_back(ClientTuneRow{
            client.before.client_id, client.before.size(), tuned.lambda, tuned.val_accuracy,
            predictor.evaluate(client.before.test),
            PersonalizedPredictor(global, store, cfg.personalize.kernel, 0.0)
                .evaluate(client.before.val),
            PersonalizedPredictor(global, store, cfg.personalize.kernel, 1.0)
                .evaluate(client.before.val)});
    }

    for (EvictionPolicy policy : cfg.drift_policies) {
        // Fresh stores per policy; updates mutate them along the timeline.
        std::vector<Datastore> stores;
        stores.reserve(scenario.clients.size());
        for (const auto& client : scenario.clients) {
            Datastore store(global.repr_dim());
            for (auto& item : embed_batch(global, client.datastore_seed)) {
                store.append(std::move(item.key), item.label);
            }
            if (policy == EvictionPolicy::fifo) {
                store.set_policy(policy, store.size());
            } else {
                store.set_policy(policy, std::nullopt);
            }
            stores.push_back(std::move(store));
        }

        for (int t = 0; t < scenario.horizon; ++t) {
            const bool after_shift = t >= scenario.t0;
            double acc_sum = 0.0;
            for (std::size_t m = 0; m < scenario.clients.size(); ++m) {
                const auto& client = scenario.clients[m];
                auto batch = embed_batch(global, client.batches[static_cast<std::size_t>(t)]);
                stores[m].update(batch);
                const auto& eval_set = after_shift ? client.after.test : client.before.test;
                PersonalizedPredictor predictor(global, stores[m], cfg.personalize.kernel,
                                                lambdas[m]);
                acc_sum += predictor.evaluate(eval_set);
            }
            result.timeline.push_back(DriftPoint{
                t, policy, acc_sum / static_cast<double>(scenario.clients.size()), after_shift});
        }
    }
    return result;
}

void apply_overrides(ExperimentConfig& cfg, std::optional<std::uint64_t> seed,
                     std::optional<std::string> out_dir) {
    if (seed) {
        cfg.master_seed = *seed;
        cfg.fed.seed = derive_seed(*seed, {seed_tag::federation});
    }
    if (out_dir) cfg.out_dir = *out_dir;
}

std::vector<std::string> run_export_scenario(const ExperimentConfig& cfg) {
    LabeledPool pool = build_pool(cfg);
    std::vector<ClientDataset> clients = build_all_clients(cfg, pool, cfg.data.alpha);
    std::map<std::string, std::string> manifest;
    manifest["alpha"] = csv::format(cfg.data.alpha);
    manifest["beta"] = csv::format(cfg.data.beta);
    manifest["clients"] = csv::format(cfg.data.num_clients);
    manifest["master_seed"] = std::to_string(cfg.master_seed);
    manifest["partitioner"] =
        cfg.data.partitioner == PartitionerKind::pachinko ? "pachinko" : "dirichlet";
    manifest["split.train"] = csv::format(cfg.data.split.train);
    manifest["split.val"] = csv::format(cfg.data.split.val);
    manifest["split.test"] = csv::format(cfg.data.split.test);
    manifest["num_classes"] = csv::format(cfg.data.num_classes);
    manifest["feature_dim"] = csv::format(cfg.data.feature_dim);
    return export_scenario(clients, cfg.data.num_classes, cfg.out_dir, manifest);
}

std::map<std::string, std::string> manifest_entries(const ExperimentConfig& cfg) {
    std::map<std::string, std::string> m;
    m["experiment.scenario"] = to_string(cfg.scenario);
    m["experiment.seed"] = std::to_string(cfg.master_seed);
    m["experiment.out"] = cfg.out_dir;

    m["data.num_classes"] = csv::format(cfg.data.num_classes);
    m["data.num_coarse"] = csv::format(cfg.data.num_coarse);
    m["data.samples_per_class"] = csv::format(cfg.data.samples_per_class);
    m["data.feature_dim"] = csv::format(cfg.data.feature_dim);
    m["data.mean_scale"] = csv::format(cfg.data.mean_scale);
    m["data.noise_sigma"] = csv::format(cfg.data.noise_sigma);
    m["data.partitioner"] =
        cfg.data.partitioner == PartitionerKind::pachinko ? "pachinko" : "dirichlet";
    m["data.alpha"] = csv::format(cfg.data.alpha);
    m["data.beta"] = csv::format(cfg.data.beta);
    m["data.clients"] = csv::format(cfg.data.num_clients);
    m["data.split"] = csv::format(cfg.data.split.train) + "," + csv::format(cfg.data.split.val) +
                      "," + csv::format(cfg.data.split.test);

    m["fed.rounds"] = csv::format(cfg.fed.rounds);
    m["fed.participation"] = csv::format(cfg.fed.participation);
    m["fed.local_epochs"] = csv::format(cfg.fed.local_epochs);
    m["fed.batch_size"] = csv::format(cfg.fed.batch_size);
    m["fed.lr"] = csv::format(cfg.fed.lr);
    {
        std::string sched;
        for (const auto& d : cfg.fed.lr_schedule) {
            if (!sched.empty()) sched += ",";
            sched += csv::format(d.round) + ":" + csv::format(d.factor);
        }
        m["fed.lr_schedule"] = sched;
    }

    {
        std::string hidden;
        for (int h : cfg.model.hidden) {
            if (!hidden.empty()) hidden += ",";
            hidden += csv::format(h);
        }
        m["model.hidden"] = hidden;
        m["model.repr_layer"] = csv::format(cfg.model.repr_layer);
    }

    m["personalize.k"] = csv::format(cfg.personalize.kernel.k);
    m["personalize.sigma"] = csv::format(cfg.personalize.kernel.sigma);
    {
        std::string grid;
        for (double g : cfg.personalize.lambda_grid) {
            if (!grid.empty()) grid += ",";
            grid += csv::format(g);
        }
        m["personalize.lambda_grid"] = grid;
    }
    m["personalize.datastore_from_train_val"] =
        cfg.personalize.datastore_from_train_val ? "true" : "false";

    m["baselines.local_epochs"] = csv::format(cfg.baselines.local_epochs);
    m["baselines.finetune_epochs"] = csv::format(cfg.baselines.finetune_epochs);
    m["baselines.finetune_lr"] = csv::format(finetune_lr(cfg));

    switch (cfg.scenario) {
        case Scenario::compare: break;
        case Scenario::unseen:
            m["unseen.train_fraction"] = csv::format(cfg.train_fraction);
            break;
        case Scenario::capacity_sweep: {
            std::string caps, alphas;
            for (double c : cfg.capacity_grid) {
                if (!caps.empty()) caps += ",";
                caps += csv::format(c);
            }
            for (double a : cfg.alpha_grid) {
                if (!alphas.empty()) alphas += ",";
                alphas += csv::format(a);
            }
            m["capacity_sweep.capacities"] = caps;
            m["capacity_sweep.alphas"] = alphas;
            m["capacity_sweep.train_fraction"] = csv::format(cfg.train_fraction);
            break;
        }
        case Scenario::kernel_sweep: {
            std::string ks, sigmas;
            for (int k : cfg.k_grid) {
                if (!ks.empty()) ks += ",";
                ks += csv::format(k);
            }
            for (double s : cfg.sigma_grid) {
                if (!sigmas.empty()) sigmas += ",";
                sigmas += csv::format(s);
            }
            m["kernel_sweep.k_grid"] = ks;
            m["kernel_sweep.sigma_grid"] = sigmas;
            break;
        }
        case Scenario::quality_sweep: {
            std::string cps;
            for (int c : cfg.checkpoints) {
                if (!cps.empty()) cps += ",";
                cps += csv::format(c);
            }
            m["quality_sweep.checkpoints"] = cps;
            m["quality_sweep.lr"] = csv::format(cfg.central_lr);
            m["quality_sweep.batch_size"] = csv::format(cfg.central_batch);
            break;
        }
        case Scenario::hw_split: {
            std::string dcs;
            for (double d : cfg.delta_c_grid) {
                if (!dcs.empty()) dcs += ",";
                dcs += csv::format(d);
            }
            m["hw_split.delta_c"] = dcs;
            m["hw_split.train_fraction"] = csv::format(cfg.train_fraction);
            break;
        }
        case Scenario::drift:
            m["drift.t0"] = csv::format(cfg.drift_t0);
            m["drift.horizon"] = csv::format(cfg.drift_horizon);
            {
                std::string ps;
                for (auto p : cfg.drift_policies) {
                    if (!ps.empty()) ps += ",";
                    ps += policy_name(p);
                }
                m["drift.policies"] = ps;
            }
            m["drift.identical_shift"] = cfg.drift_identical_shift ? "true" : "false";
            // Evaluation rule: the timeline tests on the pre-shift test
            // split for t < t0 and the post-shift one for t >= t0.
            m["drift.eval_rule"] = "pre_shift_test_before_t0_post_shift_test_from_t0";
            break;
    }
    return m;
}

int run_experiment(const ExperimentConfig& cfg) {
    const fs::path dir(cfg.out_dir);
    fs::create_directories(dir);
    auto manifest = manifest_entries(cfg);

    try {
        switch (cfg.scenario) {
            case Scenario::compare: {
                CompareResult r = scenario_compare(cfg);
                csv::Writer w((dir / "metrics.csv").string(),
                              {"method", "group", "eval_split", "weighted_avg", "bottom_decile",
                               "unweighted_avg"});
                for (const auto& mm : r.methods) write_metrics_header_row(w, mm);
                write_rounds(dir, r.rounds);
                write_lambda_report(dir, r.lambda_report);
                break;
            }
            case Scenario::unseen: {
                UnseenResult r = scenario_unseen(cfg);
                csv::Writer w((dir / "metrics.csv").string(),
                              {"method", "group", "eval_split", "weighted_avg", "bottom_decile",
                               "unweighted_avg"});
                for (const auto& mm : r.methods) write_metrics_header_row(w, mm);
                write_rounds(dir, r.rounds);
                write_lambda_report(dir, r.lambda_report);
                break;
            }
            case Scenario::capacity_sweep: {
                CapacityResult r = scenario_capacity(cfg);
                csv::Writer w((dir / "metrics.csv").string(),
                              {"alpha", "capacity", "weighted_avg", "bottom_decile",
                               "unweighted_avg"});
                for (const auto& row : r.rows) {
                    w.row(row.alpha, row.capacity, row.report.weighted_avg,
                          row.report.bottom_decile, row.report.unweighted_avg);
                }
                csv::Writer rw((dir / "rounds.csv").string(),
                               {"alpha", "round", "participant_count", "global_loss"});
                for (const auto& [alpha, rounds] : r.rounds_per_alpha) {
                    for (const auto& rl : rounds) {
                        rw.row(alpha, rl.round, rl.participants.size(), rl.global_loss);
                    }
                }
                break;
            }
            case Scenario::kernel_sweep: {
                KernelResult r = scenario_kernel(cfg);
                csv::Writer w((dir / "metrics.csv").string(),
                              {"param", "value", "weighted_avg", "bottom_decile",
                               "unweighted_avg"});
                for (const auto& row : r.rows) {
                    w.row(row.param, row.value, row.report.weighted_avg,
                          row.report.bottom_decile, row.report.unweighted_avg);
                }
                write_rounds(dir, r.rounds);
                break;
            }
            case Scenario::quality_sweep: {
                QualityResult r = scenario_quality(cfg);
                csv::Writer w((dir / "metrics.csv").string(),
                              {"checkpoint", "global_test_acc", "knn_only_acc", "tuned_acc"});
                for (const auto& row : r.rows) {
                    w.row(row.checkpoint, row.global_test_acc, row.knn_only_acc, row.tuned_acc);
                }
                break;
            }
            case Scenario::hw_split: {
                HwSplitResult r = scenario_hw_split(cfg);
                csv::Writer w((dir / "metrics.csv").string(),
                              {"delta_c", "avg_accuracy", "weak_avg", "strong_avg"});
                for (const auto& row : r.rows) {
                    w.row(row.delta_c, row.avg_acc, row.weak_avg, row.strong_avg);
                }
                write_rounds(dir, r.rounds);
                break;
            }
            case Scenario::drift: {
                DriftResult r = scenario_drift(cfg);
                csv::Writer w((dir / "timeline.csv").string(),
                              {"t", "policy", "avg_accuracy", "eval_dist"});
                for (const auto& p : r.timeline) {
                    w.row(p.t, policy_name(p.policy), p.avg_accuracy,
                          p.after_shift ? "after" : "before");
                }
                write_rounds(dir, r.rounds);
                write_lambda_report(dir, r.lambda_report);
                break;
            }
        }
    } catch (const Error& e) {
        manifest["status"] = "failed";
        manifest["error"] = e.what();
        write_manifest(dir, manifest);
        std::cerr << "fedmem: " << e.what() << "\n";
        return 1;
    }

    manifest["status"] = "ok";
    write_manifest(dir, manifest);
    return 0;
}

} // namespace fedmem
