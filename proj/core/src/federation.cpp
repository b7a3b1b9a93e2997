#include "fedmem/federation.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "fedmem/errors.hpp"
#include "fedmem/rng.hpp"

namespace fedmem {

namespace {

int participant_count(double q, int num_clients) {
    // ceil with a nudge so q * M landing on an integer is not rounded up
    // by binary representation noise (0.1 * 20 -> 2.0000...4).
    int count = static_cast<int>(std::ceil(q * static_cast<double>(num_clients) - 1e-9));
    return std::clamp(count, 1, num_clients);
}

double weighted_train_loss(const Model& model, const std::vector<ClientDataset>& clients,
                           const std::vector<std::size_t>& weights, std::size_t total_weight) {
    double loss = 0.0;
    for (std::size_t m = 0; m < clients.size(); ++m) {
        if (clients[m].train.empty()) continue;
        loss += static_cast<double>(weights[m]) / static_cast<double>(total_weight) *
                mean_loss(model, clients[m].train);
    }
    return loss;
}

} // namespace

Model local_update(const Model& model, std::span<const Sample> train, int epochs, double lr,
                   int batch_size, std::uint64_t seed) {
    if (train.empty()) throw InputError("local_update: empty training set");
    if (epochs < 0) throw ConfigError("epochs must be >= 0");
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (lr < 0.0) throw ConfigError("learning rate must be non-negative");

    Model current = model;
    Rng rng(seed);
    std::vector<std::size_t> order(train.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

    std::vector<Sample> batch;
    batch.reserve(static_cast<std::size_t>(batch_size));
    for (int e = 0; e < epochs; ++e) {
        rng.shuffle(order);
        for (std::size_t start = 0; start < order.size();
             start += static_cast<std::size_t>(batch_size)) {
            const std::size_t end =
                std::min(order.size(), start + static_cast<std::size_t>(batch_size));
            batch.clear();
            for (std::size_t i = start; i < end; ++i) batch.push_back(train[order[i]]);
            LossGrad lg = loss_and_grad(current, batch);
            sgd_step_inplace(current, lg.grad, lr);
        }
    }
    return current;
}

Model aggregate(const Model& global, std::span<const ClientUpdate> updates,
                std::span<const std::size_t> client_weights) {
    std::size_t total = 0;
    for (std::size_t w : client_weights) {
        if (w == 0) throw ConfigError("client weights must be positive");
        total += w;
    }
    if (total == 0) throw ConfigError("aggregate: no clients");

    Model next = global;
    if (updates.empty()) return next; // S_t empty: w' = w exactly

    std::size_t participant_weight = 0;
    for (const auto& u : updates) {
        if (u.model == nullptr) throw ConfigError("aggregate: null client update");
        if (u.client_id < 0 || static_cast<std::size_t>(u.client_id) >= client_weights.size()) {
            throw ConfigError("aggregate: participant id " + std::to_string(u.client_id) +
                              " outside the client population");
        }
        if (u.model->layers != global.layers) {
            throw ConfigError("aggregate: client model layout does not match the global model");
        }
        participant_weight += client_weights[static_cast<std::size_t>(u.client_id)];
    }

    // Single full-weight participant: the formula reduces to w' = w_m; take
    // it verbatim so single-client federation matches centralized SGD
    // bit for bit.
    if (updates.size() == 1 && participant_weight == total) {
        next.params = updates.front().model->params;
        return next;
    }

    const double n = static_cast<double>(total);
    for (const auto& u : updates) {
        const double coef = static_cast<double>(client_weights[static_cast<std::size_t>(u.client_id)]) / n;
        const auto& up = u.model->params;
        for (std::size_t i = 0; i < next.params.size(); ++i) {
            next.params[i] += coef * (up[i] - global.params[i]);
        }
    }
    return next;
}

FedResult run_fedavg(const std::vector<ClientDataset>& clients, const Model& init,
                     const FedConfig& cfg) {
    if (clients.empty()) throw ConfigError("run_fedavg: no clients");
    if (cfg.participation <= 0.0 || cfg.participation > 1.0) {
        throw ConfigError("participation must be in (0, 1]");
    }
    for (const auto& d : cfg.lr_schedule) {
        if (!(d.factor > 0.0)) throw ConfigError("lr schedule factors must be positive");
    }

    const int num_clients = static_cast<int>(clients.size());
    std::vector<std::size_t> weights(clients.size());
    std::size_t total_weight = 0;
    for (std::size_t m = 0; m < clients.size(); ++m) {
        weights[m] = clients[m].size();
        total_weight += weights[m];
    }

    FedResult result;
    result.model = init;
    result.initial_loss = weighted_train_loss(init, clients, weights, total_weight);
    result.rounds.reserve(static_cast<std::size_t>(cfg.rounds));

    double lr = cfg.lr;
    const int count = participant_count(cfg.participation, num_clients);
    std::vector<Model> updated(static_cast<std::size_t>(count));

    for (int round = 0; round < cfg.rounds; ++round) {
        for (const auto& drop : cfg.lr_schedule) {
            if (drop.round == round) lr *= drop.factor;
        }

        Rng sampler(derive_seed(cfg.seed, {seed_tag::client_selection,
                                           static_cast<std::uint64_t>(round)}));
        auto picks = sampler.sample_without_replacement(static_cast<std::size_t>(num_clients),
                                                        static_cast<std::size_t>(count));
        std::vector<int> participants(picks.begin(), picks.end());
        std::sort(participants.begin(), participants.end());

        std::vector<ClientUpdate> updates;
        updates.reserve(participants.size());
        for (std::size_t i = 0; i < participants.size(); ++i) {
            const int m = participants[i];
            updated[i] = local_update(
                result.model, clients[static_cast<std::size_t>(m)].train, cfg.local_epochs, lr,
                cfg.batch_size,
                derive_seed(cfg.seed, {seed_tag::local_update, static_cast<std::uint64_t>(round),
                                       static_cast<std::uint64_t>(m)}));
            updates.push_back(ClientUpdate{m, &updated[i]});
        }

        result.model = aggregate(result.model, updates, weights);
        result.rounds.push_back(RoundLog{
            round, std::move(participants),
            weighted_train_loss(result.model, clients, weights, total_weight)});
    }
    return result;
}

Model fine_tune(const Model& global, const ClientDataset& client, int epochs, double lr,
                int batch_size, std::uint64_t seed) {
    return local_update(global, client.train, epochs, lr, batch_size, seed);
}

Model train_local(const ClientDataset& client, std::vector<LayerSpec> spec, int repr_layer,
                  int epochs, double lr, int batch_size, std::uint64_t seed) {
    Model model = init_model(std::move(spec), repr_layer, derive_seed(seed, {seed_tag::model_init}));
    return local_update(model, client.train, epochs, lr, batch_size,
                        derive_seed(seed, {seed_tag::local_update}));
}

} // namespace fedmem
