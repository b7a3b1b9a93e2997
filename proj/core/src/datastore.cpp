#include "fedmem/datastore.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "fedmem/data.hpp"
#include "fedmem/errors.hpp"
#include "fedmem/rng.hpp"
#include "wire.hpp"

namespace fedmem {

namespace {

constexpr std::uint32_t kStoreMagic = 0x53444D46u; // "FMDS" little-endian
constexpr std::uint32_t kStoreVersion = 1;

double squared_distance(std::span<const double> a, std::span<const double> b) {
    double acc = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double d = a[i] - b[i];
        acc += d * d;
    }
    return acc;
}

struct Candidate {
    double sq_dist;
    std::uint64_t insert_seq;
    std::size_t index;
    int label;

    friend bool operator<(const Candidate& a, const Candidate& b) {
        if (a.sq_dist != b.sq_dist) return a.sq_dist < b.sq_dist;
        return a.insert_seq < b.insert_seq;
    }
};

Neighborhood select_neighbors(std::vector<Candidate> candidates, int k, double sigma) {
    const std::size_t kk = std::min(static_cast<std::size_t>(k), candidates.size());
    std::partial_sort(candidates.begin(), candidates.begin() + static_cast<std::ptrdiff_t>(kk),
                      candidates.end());
    Neighborhood out;
    out.reserve(kk);
    for (std::size_t i = 0; i < kk; ++i) {
        const auto& c = candidates[i];
        out.push_back(Neighbor{std::sqrt(c.sq_dist) / sigma, c.label, c.insert_seq, c.index});
    }
    return out;
}

void check_query(int store_dim, std::size_t query_dim, int k, double sigma) {
    if (k < 1) throw ConfigError("k must be >= 1");
    if (!(sigma > 0.0)) throw ConfigError("sigma must be positive");
    if (static_cast<int>(query_dim) != store_dim) {
        throw InputError("query has dimension " + std::to_string(query_dim) +
                         ", store holds dimension " + std::to_string(store_dim));
    }
}

/// Top eigenvectors of the covariance of `points` by power iteration with
/// Gram-Schmidt deflation. Always returns an orthonormal set, even for
/// zero-variance directions (the seeded start vector survives).
std::vector<std::vector<double>> principal_directions(const std::vector<const Entry*>& points,
                                                      std::size_t dim, int count, Rng& rng) {
    std::vector<double> mean(dim, 0.0);
    for (const auto* e : points) {
        for (std::size_t d = 0; d < dim; ++d) mean[d] += e->key[d];
    }
    for (auto& v : mean) v /= static_cast<double>(points.size());

    // Explicit covariance; representation dims are small at desk scale.
    std::vector<double> cov(dim * dim, 0.0);
    for (const auto* e : points) {
        for (std::size_t i = 0; i < dim; ++i) {
            const double xi = e->key[i] - mean[i];
            for (std::size_t j = i; j < dim; ++j) {
                cov[i * dim + j] += xi * (e->key[j] - mean[j]);
            }
        }
    }
    for (std::size_t i = 0; i < dim; ++i) {
        for (std::size_t j = i; j < dim; ++j) {
            cov[i * dim + j] /= static_cast<double>(points.size());
            cov[j * dim + i] = cov[i * dim + j];
        }
    }

    auto orthogonalize = [](std::vector<double>& v,
                            const std::vector<std::vector<double>>& basis) {
        for (const auto& b : basis) {
            double dot = 0.0;
            for (std::size_t i = 0; i < v.size(); ++i) dot += v[i] * b[i];
            for (std::size_t i = 0; i < v.size(); ++i) v[i] -= dot * b[i];
        }
    };
    auto norm = [](const std::vector<double>& v) {
        double acc = 0.0;
        for (double x : v) acc += x * x;
        return std::sqrt(acc);
    };

    std::vector<std::vector<double>> basis;
    std::vector<double> next(dim);
    for (int c = 0; c < count; ++c) {
        std::vector<double> v(dim);
        for (auto& x : v) x = rng.normal();
        orthogonalize(v, basis);
        double n = norm(v);
        if (n < 1e-12) {
            // Degenerate draw; retry deterministically from the stream.
            for (auto& x : v) x = rng.normal();
            orthogonalize(v, basis);
            n = norm(v);
        }
        for (auto& x : v) x /= n;

        for (int iter = 0; iter < 100; ++iter) {
            for (std::size_t i = 0; i < dim; ++i) {
                double acc = 0.0;
                for (std::size_t j = 0; j < dim; ++j) acc += cov[i * dim + j] * v[j];
                next[i] = acc;
            }
            orthogonalize(next, basis);
            const double n2 = norm(next);
            if (n2 < 1e-12) break; // no variance left; keep the current unit vector
            double drift = 0.0;
            for (std::size_t i = 0; i < dim; ++i) {
                const double scaled = next[i] / n2;
                drift = std::max(drift, std::abs(scaled - v[i]));
                v[i] = scaled;
            }
            if (drift < 1e-12) break;
        }
        basis.push_back(v);
    }
    return basis;
}

/// Lloyd's algorithm with deterministic k-means++ seeding. Returns exactly
/// k centroids (k <= points.size() is enforced by the caller).
std::vector<std::vector<double>> kmeans(const std::vector<std::vector<double>>& points,
                                        std::size_t k, Rng& rng) {
    const std::size_t dim = points.front().size();
    std::vector<std::vector<double>> centroids;
    centroids.reserve(k);

    // k-means++ seeding.
    centroids.push_back(points[rng.uniform_below(points.size())]);
    std::vector<double> best_sq(points.size());
    while (centroids.size() < k) {
        double total = 0.0;
        for (std::size_t i = 0; i < points.size(); ++i) {
            double best = squared_distance(points[i], centroids.front());
            for (std::size_t c = 1; c < centroids.size(); ++c) {
                best = std::min(best, squared_distance(points[i], centroids[c]));
            }
            best_sq[i] = best;
            total += best;
        }
        std::size_t chosen;
        if (total <= 0.0) {
            chosen = rng.uniform_below(points.size()); // all points coincide
        } else {
            double u = rng.uniform() * total;
            double acc = 0.0;
            chosen = points.size() - 1;
            for (std::size_t i = 0; i < points.size(); ++i) {
                acc += best_sq[i];
                if (u < acc) {
                    chosen = i;
                    break;
                }
            }
        }
        centroids.push_back(points[chosen]);
    }

    std::vector<std::size_t> assign(points.size(), 0);
    for (int iter = 0; iter < 50; ++iter) {
        bool changed = false;
        for (std::size_t i = 0; i < points.size(); ++i) {
            std::size_t best_c = 0;
            double best = squared_distance(points[i], centroids[0]);
            for (std::size_t c = 1; c < k; ++c) {
                const double d = squared_distance(points[i], centroids[c]);
                if (d < best) {
                    best = d;
                    best_c = c;
                }
            }
            if (assign[i] != best_c) {
                assign[i] = best_c;
                changed = true;
            }
        }
        if (!changed && iter > 0) break;

        std::vector<std::vector<double>> sums(k, std::vector<double>(dim, 0.0));
        std::vector<std::size_t> counts(k, 0);
        for (std::size_t i = 0; i < points.size(); ++i) {
            counts[assign[i]] += 1;
            for (std::size_t d = 0; d < dim; ++d) sums[assign[i]][d] += points[i][d];
        }
        for (std::size_t c = 0; c < k; ++c) {
            if (counts[c] == 0) {
                // Re-seed an empty cluster at the point farthest from its centroid.
                std::size_t far = 0;
                double far_d = -1.0;
                for (std::size_t i = 0; i < points.size(); ++i) {
                    const double d = squared_distance(points[i], centroids[assign[i]]);
                    if (d > far_d) {
                        far_d = d;
                        far = i;
                    }
                }
                centroids[c] = points[far];
                continue;
            }
            for (std::size_t d = 0; d < dim; ++d) {
                centroids[c][d] = sums[c][d] / static_cast<double>(counts[c]);
            }
        }
    }
    return centroids;
}

} // namespace

Datastore::Datastore(int dim, EvictionPolicy policy, std::optional<std::size_t> capacity)
    : dim_(dim), policy_(policy), capacity_(capacity) {
    if (dim <= 0) throw ConfigError("datastore dimension must be positive");
    if (policy == EvictionPolicy::fifo && !capacity) {
        throw ConfigError("fifo policy requires a capacity");
    }
    if (capacity && *capacity == 0) throw ConfigError("capacity must be positive when set");
}

void Datastore::set_policy(EvictionPolicy policy, std::optional<std::size_t> capacity) {
    if (policy == EvictionPolicy::fifo && !capacity) {
        throw ConfigError("fifo policy requires a capacity");
    }
    if (capacity && *capacity == 0) throw ConfigError("capacity must be positive when set");
    policy_ = policy;
    capacity_ = capacity;
}

void Datastore::append(std::vector<double> key, int label) {
    if (static_cast<int>(key.size()) != dim_) {
        throw InputError("key dimension " + std::to_string(key.size()) +
                         " does not match store dimension " + std::to_string(dim_));
    }
    entries_.push_back(Entry{std::move(key), label, next_seq_++});
}

void Datastore::update(std::span<const KeyLabel> batch) {
    if (policy_ == EvictionPolicy::fixed) return;
    if (policy_ == EvictionPolicy::fifo && !capacity_) {
        throw ConfigError("fifo policy requires a capacity");
    }
    for (const auto& item : batch) append(item.key, item.label);
    if (policy_ == EvictionPolicy::fifo && entries_.size() > *capacity_) {
        // Entries are appended in seq order, so the oldest are a prefix.
        const std::size_t excess = entries_.size() - *capacity_;
        entries_.erase(entries_.begin(), entries_.begin() + static_cast<std::ptrdiff_t>(excess));
    }
}

void Datastore::restore_entry(Entry entry) {
    if (static_cast<int>(entry.key.size()) != dim_) {
        throw InputError("restored key dimension does not match store dimension");
    }
    next_seq_ = std::max(next_seq_, entry.insert_seq + 1);
    entries_.push_back(std::move(entry));
}

Datastore build_datastore(const Model& model, std::span<const Sample> samples,
                          double capacity_fraction, std::uint64_t seed) {
    if (samples.empty()) throw InputError("build_datastore: no samples");
    if (!(capacity_fraction > 0.0) || capacity_fraction > 1.0) {
        throw ConfigError("capacity_fraction must be in (0, 1]");
    }

    const std::size_t n = samples.size();
    const auto keep =
        static_cast<std::size_t>(std::ceil(capacity_fraction * static_cast<double>(n) - 1e-9));
    std::vector<std::size_t> chosen;
    if (keep >= n) {
        chosen.resize(n);
        for (std::size_t i = 0; i < n; ++i) chosen[i] = i;
    } else {
        Rng rng(seed);
        chosen = rng.sample_without_replacement(n, std::max<std::size_t>(keep, 1));
        std::sort(chosen.begin(), chosen.end()); // insert_seq preserves sample order
    }

    Datastore store(model.repr_dim());
    for (std::size_t idx : chosen) {
        store.append(forward(model, samples[idx].features).repr, samples[idx].label);
    }
    return store;
}

Neighborhood knn_query(const Datastore& store, std::span<const double> query, int k,
                       double sigma) {
    check_query(store.dim(), query.size(), k, sigma);
    if (store.empty()) throw EmptyStoreError("knn_query on an empty datastore");

    std::vector<Candidate> candidates;
    candidates.reserve(store.size());
    for (std::size_t i = 0; i < store.entries().size(); ++i) {
        const Entry& e = store.entries()[i];
        candidates.push_back(Candidate{squared_distance(query, e.key), e.insert_seq, i, e.label});
    }
    return select_neighbors(std::move(candidates), k, sigma);
}

std::vector<double> PrototypeStore::project(std::span<const double> x) const {
    std::vector<double> out(projection.size(), 0.0);
    for (std::size_t r = 0; r < projection.size(); ++r) {
        double acc = 0.0;
        for (std::size_t i = 0; i < projection[r].size(); ++i) acc += projection[r][i] * x[i];
        out[r] = acc;
    }
    return out;
}

PrototypeStore compress(const Datastore& store, int num_prototypes, int proj_dim,
                        std::uint64_t seed) {
    if (store.empty()) throw InputError("compress: empty datastore");
    if (num_prototypes < 1 || static_cast<std::size_t>(num_prototypes) > store.size()) {
        throw ConfigError("num_prototypes must be in [1, store size]");
    }
    if (proj_dim < 1 || proj_dim > store.dim()) {
        throw ConfigError("projection dimension must be in [1, p]");
    }

    Rng rng(seed);
    const auto dim = static_cast<std::size_t>(store.dim());

    std::vector<const Entry*> all;
    all.reserve(store.size());
    int max_label = 0;
    for (const auto& e : store.entries()) {
        all.push_back(&e);
        max_label = std::max(max_label, e.label);
    }

    PrototypeStore out;
    out.projection = principal_directions(all, dim, proj_dim, rng);

    // Class budgets proportional to class counts.
    std::vector<std::vector<const Entry*>> by_class(static_cast<std::size_t>(max_label) + 1);
    for (const auto* e : all) by_class[static_cast<std::size_t>(e->label)].push_back(e);
    std::vector<double> class_weights(by_class.size());
    for (std::size_t c = 0; c < by_class.size(); ++c) {
        class_weights[c] = static_cast<double>(by_class[c].size());
    }
    auto budgets =
        largest_remainder_counts(class_weights, static_cast<std::size_t>(num_prototypes));

    for (std::size_t c = 0; c < by_class.size(); ++c) {
        if (budgets[c] == 0 || by_class[c].empty()) continue;
        std::vector<std::vector<double>> projected;
        projected.reserve(by_class[c].size());
        for (const auto* e : by_class[c]) projected.push_back(out.project(e->key));
        std::vector<std::vector<double>> centroids;
        if (budgets[c] >= projected.size()) {
            centroids = projected; // every point is its own prototype
        } else {
            centroids = kmeans(projected, budgets[c], rng);
        }
        for (auto& centroid : centroids) {
            out.prototypes.push_back(KeyLabel{std::move(centroid), static_cast<int>(c)});
        }
    }
    return out;
}

Neighborhood knn_query(const PrototypeStore& store, std::span<const double> query, int k,
                       double sigma) {
    if (k < 1) throw ConfigError("k must be >= 1");
    if (!(sigma > 0.0)) throw ConfigError("sigma must be positive");
    if (store.prototypes.empty()) throw EmptyStoreError("knn_query on an empty prototype store");
    if (store.projection.front().size() != query.size()) {
        throw InputError("query dimension does not match the projection input dimension");
    }

    const std::vector<double> q = store.project(query);
    std::vector<Candidate> candidates;
    candidates.reserve(store.prototypes.size());
    for (std::size_t i = 0; i < store.prototypes.size(); ++i) {
        const auto& p = store.prototypes[i];
        candidates.push_back(
            Candidate{squared_distance(q, p.key), static_cast<std::uint64_t>(i), i, p.label});
    }
    return select_neighbors(std::move(candidates), k, sigma);
}

std::vector<std::uint8_t> save_datastore(const Datastore& store) {
    std::vector<std::uint8_t> out;
    out.reserve(32 + store.size() * (12 + static_cast<std::size_t>(store.dim()) * 4));
    wire::put_u32(out, kStoreMagic);
    wire::put_u32(out, kStoreVersion);
    wire::put_u32(out, static_cast<std::uint32_t>(store.dim()));
    wire::put_u64(out, store.size());
    wire::put_u8(out, static_cast<std::uint8_t>(store.policy()));
    wire::put_u64(out, store.capacity().value_or(0));
    for (const auto& e : store.entries()) {
        wire::put_u64(out, e.insert_seq);
        wire::put_u32(out, static_cast<std::uint32_t>(e.label));
        for (double v : e.key) wire::put_f32(out, static_cast<float>(v));
    }
    return out;
}

Datastore load_datastore(std::span<const std::uint8_t> bytes) {
    wire::Reader r(bytes);
    if (r.u32() != kStoreMagic) throw FormatError("bad datastore magic, expected \"FMDS\"");
    const std::uint32_t version = r.u32();
    if (version != kStoreVersion) {
        throw FormatError("unsupported datastore format version " + std::to_string(version));
    }
    const auto dim = static_cast<int>(r.u32());
    const std::uint64_t count = r.u64();
    const std::uint8_t policy_code = r.u8();
    if (policy_code > static_cast<std::uint8_t>(EvictionPolicy::concatenate)) {
        throw FormatError("unknown eviction policy code " + std::to_string(policy_code));
    }
    const std::uint64_t capacity = r.u64();
    if (dim <= 0) throw FormatError("datastore dimension must be positive");

    Datastore store(dim);
    for (std::uint64_t i = 0; i < count; ++i) {
        const std::uint64_t seq = r.u64();
        const auto label = static_cast<int>(r.u32());
        std::vector<double> key(static_cast<std::size_t>(dim));
        for (auto& v : key) v = static_cast<double>(r.f32());
        store.restore_entry(Entry{std::move(key), label, seq});
    }
    if (!r.exhausted()) throw FormatError("trailing bytes after datastore payload");
    store.set_policy(static_cast<EvictionPolicy>(policy_code),
                     capacity == 0 ? std::nullopt : std::optional<std::size_t>(capacity));
    return store;
}

} // namespace fedmem
