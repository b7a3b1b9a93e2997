#ifndef FEDMEM_DATASTORE_HPP
#define FEDMEM_DATASTORE_HPP

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "fedmem/nn.hpp"
#include "fedmem/sample.hpp"

namespace fedmem {

/// One stored (embedding, label) pair. insert_seq is a monotone counter
/// assigned at insertion and used as the deterministic distance tie-break.
struct Entry {
    std::vector<double> key;
    int label = 0;
    std::uint64_t insert_seq = 0;
};

/// What happens to stored entries when a new batch arrives.
enum class EvictionPolicy : std::uint8_t {
    fixed = 0,       // ignore new batches entirely
    fifo = 1,        // append, then evict oldest down to capacity
    concatenate = 2, // append without bound
};

/// An (embedding, label) pair not yet assigned an insertion sequence.
struct KeyLabel {
    std::vector<double> key;
    int label = 0;
};

/// A neighbor returned by knn_query: scaled distance plus enough entry
/// identity to reproduce the ordering.
struct Neighbor {
    double distance = 0.0; // ||query - key||_2 / sigma
    int label = 0;
    std::uint64_t insert_seq = 0;
    std::size_t entry_index = 0; // position in the store at query time
};

/// Neighbors sorted by ascending distance, ties by lower insert_seq.
using Neighborhood = std::vector<Neighbor>;

/// Ordered key-value store of (embedding, label) entries with optional
/// capacity control. Concurrent read-only queries are safe; updates
/// require exclusive access.
class Datastore {
public:
    Datastore() = default;
    explicit Datastore(int dim, EvictionPolicy policy = EvictionPolicy::fixed,
                       std::optional<std::size_t> capacity = std::nullopt);

    int dim() const { return dim_; }
    std::size_t size() const { return entries_.size(); }
    bool empty() const { return entries_.empty(); }
    EvictionPolicy policy() const { return policy_; }
    std::optional<std::size_t> capacity() const { return capacity_; }
    const std::vector<Entry>& entries() const { return entries_; }

    /// Changes the eviction behavior; fifo requires a capacity.
    void set_policy(EvictionPolicy policy, std::optional<std::size_t> capacity);

    /// Unconditional append with the next insertion sequence number.
    void append(std::vector<double> key, int label);

    /// Policy-aware batch update (Appendix drift strategies): fixed ignores
    /// the batch, concatenate appends, fifo appends then evicts the lowest
    /// insert_seq entries until the size is back within capacity.
    void update(std::span<const KeyLabel> batch);

    /// Re-inserts an entry with its original sequence number; used by
    /// deserialization. Future appends continue above the highest seq seen.
    void restore_entry(Entry entry);

private:
    int dim_ = 0;
    EvictionPolicy policy_ = EvictionPolicy::fixed;
    std::optional<std::size_t> capacity_;
    std::vector<Entry> entries_;
    std::uint64_t next_seq_ = 0;
};

/// Embeds each sample through the model's representation layer and keeps a
/// seeded uniform subsample of ceil(capacity_fraction * n) entries, in
/// original sample order.
Datastore build_datastore(const Model& model, std::span<const Sample> samples,
                          double capacity_fraction, std::uint64_t seed);

/// Exact k-nearest-neighbor query under sigma-scaled Euclidean distance.
/// Returns min(k, |store|) neighbors sorted ascending; ties broken by lower
/// insert_seq. The ordering is computed on unscaled distances, so sigma
/// rescales reported distances without ever perturbing the ranking.
Neighborhood knn_query(const Datastore& store, std::span<const double> query, int k, double sigma);

/// ProtoNN-style compressed datastore: an orthonormal projection to p'
/// dimensions plus per-class centroid prototypes in the projected space.
struct PrototypeStore {
    std::vector<std::vector<double>> projection; // p' rows, each of length p
    std::vector<KeyLabel> prototypes;            // keys live in projected space

    std::size_t proj_dim() const { return projection.size(); }
    std::vector<double> project(std::span<const double> x) const;
};

/// PCA via seeded power iteration gives the projection; prototypes are
/// per-class k-means centroids in projected space, with per-class budgets
/// proportional to class counts (largest remainder). When a class budget
/// reaches its class size, the projected points themselves are used.
PrototypeStore compress(const Datastore& store, int num_prototypes, int proj_dim,
                        std::uint64_t seed);

/// Queries a compressed store with a raw p-dimensional key; the query is
/// projected before the scan. Neighbor insert_seq is the prototype index.
Neighborhood knn_query(const PrototypeStore& store, std::span<const double> query, int k,
                       double sigma);

/// Versioned little-endian binary: magic "FMDS", u32 version, u32 p, u64
/// count, u8 policy, u64 capacity (0 = unset), then per entry u64
/// insert_seq, u32 label, p x f32 key.
std::vector<std::uint8_t> save_datastore(const Datastore& store);
Datastore load_datastore(std::span<const std::uint8_t> bytes);

} // namespace fedmem

#endif
