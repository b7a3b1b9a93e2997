#ifndef FEDMEM_DATA_HPP
#define FEDMEM_DATA_HPP

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "fedmem/sample.hpp"

namespace fedmem {

/// A labeled sample pool, optionally with a two-level (coarse/fine) label
/// structure for the pachinko partitioner.
struct LabeledPool {
    std::vector<Sample> samples;
    int num_classes = 0;
    /// coarse_of[fine_label] = coarse label; empty when the pool is flat.
    std::vector<int> coarse_of;

    bool has_coarse() const { return !coarse_of.empty(); }
    int num_coarse() const;
    int feature_dim() const;
};

/// Assignment of every pool sample to exactly one client.
struct Partition {
    std::vector<int> assignment; // sample index -> client id
    int num_clients = 0;
    double alpha = 0.0;
    std::uint64_t seed = 0;

    /// Pool sample indices per client, ascending within each client.
    std::vector<std::vector<std::size_t>> by_client() const;
};

struct SplitRatios {
    double train = 0.6;
    double val = 0.2;
    double test = 0.2;
};

/// One client's local dataset with its train/val/test split.
struct ClientDataset {
    int client_id = 0;
    std::vector<Sample> train;
    std::vector<Sample> val;
    std::vector<Sample> test;

    std::size_t size() const { return train.size() + val.size() + test.size(); }
};

struct DriftClient {
    ClientDataset before; // drawn from the pre-shift distribution
    ClientDataset after;  // drawn from the post-shift distribution
    std::vector<Sample> datastore_seed;       // initial datastore material
    std::vector<std::vector<Sample>> batches; // one batch per time step, size T
};

struct DriftScenario {
    int t0 = 0;
    int horizon = 0; // T
    std::vector<DriftClient> clients;
};

/// Integer allocation of `total` items proportional to non-negative weights,
/// by largest remainder. Quotas within 1e-9 of an integer are treated as
/// exact; remainder ties go to the lower index. Guarantees the counts sum to
/// `total`.
std::vector<std::size_t> largest_remainder_counts(std::span<const double> weights,
                                                  std::size_t total);

/// Seeded Gaussian-blob classification pool. Class means are drawn from
/// N(0, mean_scale^2 I); samples are mean + noise_sigma * N(0, I). With
/// num_coarse > 1, fine labels are grouped into contiguous coarse blocks
/// (num_classes must be divisible by num_coarse). mean_scale controls how
/// separable the task is.
LabeledPool make_synthetic_pool(int num_classes, int num_coarse, int samples_per_class,
                                int feature_dim, std::uint64_t seed, double mean_scale = 3.0,
                                double noise_sigma = 1.0);

/// Label-skew partition: for each label y, p_y ~ Dir(alpha * 1_M) and the
/// class's instances are allocated to clients in proportions p_y with
/// largest-remainder rounding. Per-label sub-streams are derived from the
/// seed, so the result does not depend on evaluation order.
Partition dirichlet_partition(const LabeledPool& pool, int num_clients, double alpha,
                              std::uint64_t seed);

/// Two-level partition: per client a coarse mixture ~ Dir(alpha) and, per
/// coarse label, a fine mixture ~ Dir(beta); clients then draw samples by a
/// two-level multinomial without replacement. Exhausted fine classes (and
/// coarse classes with nothing left) are renormalized out of the mixtures.
Partition pachinko_partition(const LabeledPool& pool, int num_clients, double alpha, double beta,
                             std::uint64_t seed);

/// Seeded shuffle followed by a contiguous largest-remainder split.
/// Fewer than 3 samples is a degenerate client and is rejected.
ClientDataset split_client(int client_id, std::vector<Sample> samples, SplitRatios ratios,
                           std::uint64_t seed);

/// Convenience: split every client of a partition; per-client split seeds
/// are derived from `seed`.
std::vector<ClientDataset> build_clients(const LabeledPool& pool, const Partition& partition,
                                         SplitRatios ratios, std::uint64_t seed);

/// Two independent Dirichlet partitions define each client's pre-shift
/// dataset S and post-shift dataset S' (swapped if needed so |S| <= |S'|).
/// Half of S.train seeds the initial datastore; the rest arrives as t0
/// equal batches, and S'.train arrives as T - t0 batches after the shift.
/// With identical_shift, the second draw reuses the first draw's seeds so
/// S' == S and the shift is a no-op.
DriftScenario make_drift_scenario(const LabeledPool& pool, int num_clients, double alpha, int t0,
                                  int horizon, SplitRatios ratios, std::uint64_t seed,
                                  bool identical_shift = false);

/// Writes one binary file per client (header: u32 client id, train/val/test
/// counts, feature dim, num classes; then per sample u32 label + f32
/// features, train/val/test blocks in order, little-endian) plus a
/// key=value manifest. Returns the list of file names written.
std::vector<std::string> export_scenario(const std::vector<ClientDataset>& clients,
                                         int num_classes, const std::string& out_dir,
                                         const std::map<std::string, std::string>& manifest);

} // namespace fedmem

#endif
