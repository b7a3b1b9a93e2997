#ifndef FEDMEM_FEDERATION_HPP
#define FEDMEM_FEDERATION_HPP

#include <cstdint>
#include <span>
#include <vector>

#include "fedmem/data.hpp"
#include "fedmem/nn.hpp"

namespace fedmem {

struct LrDrop {
    int round = 0;
    double factor = 1.0;
};

struct FedConfig {
    int rounds = 0;
    double participation = 1.0; // q in (0, 1]
    int local_epochs = 1;
    int batch_size = 32;
    double lr = 0.1;
    std::vector<LrDrop> lr_schedule; // multiplied in at the given round
    std::uint64_t seed = 0;
};

struct RoundLog {
    int round = 0;
    std::vector<int> participants;
    double global_loss = 0.0; // n_m/n-weighted train loss of the aggregated model
};

/// One participant's locally updated model, keyed by client id.
struct ClientUpdate {
    int client_id = 0;
    const Model* model = nullptr;
};

/// E epochs of mini-batch SGD from the given model; a fresh seeded shuffle
/// per epoch, contiguous batches, the final partial batch included.
Model local_update(const Model& model, std::span<const Sample> train, int epochs, double lr,
                   int batch_size, std::uint64_t seed);

/// Partial-participation aggregation in which non-participants implicitly
/// contribute the current global parameters, i.e.
///   w' = sum_{m not in S} (n_m/n) w + sum_{m in S} (n_m/n) w_m
/// with n the full-population total. Computed in delta form
/// w + sum_{m in S} (n_m/n)(w_m - w), which is algebraically identical and
/// keeps the no-participant and identical-update cases bit-exact.
Model aggregate(const Model& global, std::span<const ClientUpdate> updates,
                std::span<const std::size_t> client_weights);

struct FedResult {
    Model model;
    std::vector<RoundLog> rounds;
    double initial_loss = 0.0;
};

/// Simulated FedAvg: per round, ceil(q*M) clients sampled uniformly without
/// replacement, local updates, weighted aggregation, then the lr schedule.
/// Sub-seeds derive from (seed, round) and (seed, round, client), so the
/// result is independent of client execution order.
FedResult run_fedavg(const std::vector<ClientDataset>& clients, const Model& init,
                     const FedConfig& cfg);

/// FedAvg+ baseline: a few epochs of SGD on the client's train split,
/// starting from the global model.
Model fine_tune(const Model& global, const ClientDataset& client, int epochs, double lr,
                int batch_size, std::uint64_t seed);

/// Local baseline: fresh init trained on the client's train split only.
Model train_local(const ClientDataset& client, std::vector<LayerSpec> spec, int repr_layer,
                  int epochs, double lr, int batch_size, std::uint64_t seed);

} // namespace fedmem

#endif
