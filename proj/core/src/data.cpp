#include "fedmem/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "fedmem/errors.hpp"
#include "fedmem/rng.hpp"
#include "wire.hpp"

namespace fedmem {

namespace {

// Quota values this close to an integer are treated as exact, so ratios
// like 0.6 * 5 land on 3 despite binary rounding.
constexpr double kQuotaEps = 1e-9;

std::vector<std::vector<std::size_t>> indices_by_label(const LabeledPool& pool) {
    std::vector<std::vector<std::size_t>> by_label(static_cast<std::size_t>(pool.num_classes));
    for (std::size_t i = 0; i < pool.samples.size(); ++i) {
        by_label[static_cast<std::size_t>(pool.samples[i].label)].push_back(i);
    }
    return by_label;
}

int draw_categorical(Rng& rng, std::span<const double> weights) {
    double total = 0.0;
    for (double w : weights) total += w;
    double u = rng.uniform() * total;
    double acc = 0.0;
    for (std::size_t i = 0; i < weights.size(); ++i) {
        acc += weights[i];
        if (u < acc) return static_cast<int>(i);
    }
    // Hit only through rounding; return the last positive-weight index.
    for (std::size_t i = weights.size(); i-- > 0;) {
        if (weights[i] > 0.0) return static_cast<int>(i);
    }
    return static_cast<int>(weights.size()) - 1;
}

/// Chop `samples` into `parts` contiguous near-equal batches.
std::vector<std::vector<Sample>> chop_into_batches(std::span<const Sample> samples, int parts) {
    std::vector<double> equal(static_cast<std::size_t>(parts), 1.0);
    auto counts = largest_remainder_counts(equal, samples.size());
    std::vector<std::vector<Sample>> batches(static_cast<std::size_t>(parts));
    std::size_t pos = 0;
    for (std::size_t b = 0; b < batches.size(); ++b) {
        batches[b].assign(samples.begin() + static_cast<std::ptrdiff_t>(pos),
                          samples.begin() + static_cast<std::ptrdiff_t>(pos + counts[b]));
        pos += counts[b];
    }
    return batches;
}

} // namespace

int LabeledPool::num_coarse() const {
    if (coarse_of.empty()) return 0;
    return 1 + *std::max_element(coarse_of.begin(), coarse_of.end());
}

int LabeledPool::feature_dim() const {
    return samples.empty() ? 0 : static_cast<int>(samples.front().features.size());
}

std::vector<std::vector<std::size_t>> Partition::by_client() const {
    std::vector<std::vector<std::size_t>> out(static_cast<std::size_t>(num_clients));
    for (std::size_t i = 0; i < assignment.size(); ++i) {
        out[static_cast<std::size_t>(assignment[i])].push_back(i);
    }
    return out;
}

std::vector<std::size_t> largest_remainder_counts(std::span<const double> weights,
                                                  std::size_t total) {
    if (weights.empty()) throw ConfigError("largest_remainder_counts: no weights");
    double wsum = 0.0;
    for (double w : weights) {
        if (w < 0.0 || !std::isfinite(w)) throw ConfigError("weights must be finite and >= 0");
        wsum += w;
    }
    if (wsum <= 0.0) throw ConfigError("weights must not all be zero");

    std::vector<std::size_t> counts(weights.size(), 0);
    std::vector<std::pair<double, std::size_t>> remainders; // (-frac, index) for stable sort
    remainders.reserve(weights.size());
    std::size_t assigned = 0;
    for (std::size_t i = 0; i < weights.size(); ++i) {
        double quota = weights[i] / wsum * static_cast<double>(total);
        double nearest = std::round(quota);
        if (std::abs(quota - nearest) < kQuotaEps) quota = nearest;
        double fl = std::floor(quota);
        counts[i] = static_cast<std::size_t>(fl);
        assigned += counts[i];
        remainders.emplace_back(-(quota - fl), i);
    }
    std::stable_sort(remainders.begin(), remainders.end(),
                     [](const auto& a, const auto& b) { return a.first < b.first; });
    std::size_t leftover = total - assigned;
    for (std::size_t r = 0; leftover > 0; r = (r + 1) % remainders.size(), --leftover) {
        counts[remainders[r].second] += 1;
    }
    return counts;
}

LabeledPool make_synthetic_pool(int num_classes, int num_coarse, int samples_per_class,
                                int feature_dim, std::uint64_t seed, double mean_scale,
                                double noise_sigma) {
    if (num_classes <= 0 || samples_per_class <= 0 || feature_dim <= 0) {
        throw ConfigError("pool counts and feature_dim must be positive");
    }
    if (num_coarse < 0 || (num_coarse > 0 && num_classes % num_coarse != 0)) {
        throw ConfigError("num_classes must be divisible by num_coarse");
    }
    if (noise_sigma < 0.0) throw ConfigError("noise_sigma must be >= 0");

    LabeledPool pool;
    pool.num_classes = num_classes;
    if (num_coarse >= 1) {
        const int block = num_classes / num_coarse;
        pool.coarse_of.resize(static_cast<std::size_t>(num_classes));
        for (int y = 0; y < num_classes; ++y) pool.coarse_of[static_cast<std::size_t>(y)] = y / block;
    }

    pool.samples.reserve(static_cast<std::size_t>(num_classes) * samples_per_class);
    for (int y = 0; y < num_classes; ++y) {
        Rng rng(derive_seed(seed, {static_cast<std::uint64_t>(y)}));
        std::vector<double> mean(static_cast<std::size_t>(feature_dim));
        for (auto& v : mean) v = mean_scale * rng.normal();
        for (int s = 0; s < samples_per_class; ++s) {
            Sample sample;
            sample.label = y;
            sample.features.resize(static_cast<std::size_t>(feature_dim));
            for (std::size_t d = 0; d < sample.features.size(); ++d) {
                sample.features[d] = mean[d] + noise_sigma * rng.normal();
            }
            pool.samples.push_back(std::move(sample));
        }
    }
    return pool;
}

Partition dirichlet_partition(const LabeledPool& pool, int num_clients, double alpha,
                              std::uint64_t seed) {
    if (num_clients < 1) throw ConfigError("need at least one client");
    if (!(alpha > 0.0)) throw ConfigError("alpha must be positive");

    Partition part;
    part.num_clients = num_clients;
    part.alpha = alpha;
    part.seed = seed;
    part.assignment.assign(pool.samples.size(), -1);

    auto by_label = indices_by_label(pool);
    for (int y = 0; y < pool.num_classes; ++y) {
        auto& members = by_label[static_cast<std::size_t>(y)];
        if (members.empty()) continue;
        Rng rng(derive_seed(seed, {static_cast<std::uint64_t>(y)}));
        auto proportions = rng.dirichlet(static_cast<std::size_t>(num_clients), alpha);
        auto counts = largest_remainder_counts(proportions, members.size());
        rng.shuffle(members);
        std::size_t pos = 0;
        for (int m = 0; m < num_clients; ++m) {
            for (std::size_t c = 0; c < counts[static_cast<std::size_t>(m)]; ++c) {
                part.assignment[members[pos++]] = m;
            }
        }
    }
    return part;
}

Partition pachinko_partition(const LabeledPool& pool, int num_clients, double alpha, double beta,
                             std::uint64_t seed) {
    if (!pool.has_coarse()) {
        throw ConfigError("pachinko_partition requires a pool with coarse labels");
    }
    if (num_clients < 1) throw ConfigError("need at least one client");
    if (!(alpha > 0.0) || !(beta > 0.0)) throw ConfigError("alpha and beta must be positive");

    const int num_fine = pool.num_classes;
    const int num_coarse = pool.num_coarse();

    std::vector<std::vector<int>> fines_of_coarse(static_cast<std::size_t>(num_coarse));
    for (int f = 0; f < num_fine; ++f) {
        fines_of_coarse[static_cast<std::size_t>(pool.coarse_of[static_cast<std::size_t>(f)])]
            .push_back(f);
    }

    // Remaining instances per fine label, drawn from the back of a
    // per-label shuffled stack.
    auto stacks = indices_by_label(pool);
    {
        Rng shuffler(derive_seed(seed, {0, 0}));
        for (auto& s : stacks) shuffler.shuffle(s);
    }
    std::vector<std::size_t> remaining_fine(static_cast<std::size_t>(num_fine));
    std::vector<std::size_t> remaining_coarse(static_cast<std::size_t>(num_coarse), 0);
    for (int f = 0; f < num_fine; ++f) {
        remaining_fine[static_cast<std::size_t>(f)] = stacks[static_cast<std::size_t>(f)].size();
        remaining_coarse[static_cast<std::size_t>(pool.coarse_of[static_cast<std::size_t>(f)])] +=
            stacks[static_cast<std::size_t>(f)].size();
    }

    std::vector<double> equal(static_cast<std::size_t>(num_clients), 1.0);
    auto quotas = largest_remainder_counts(equal, pool.samples.size());

    Partition part;
    part.num_clients = num_clients;
    part.alpha = alpha;
    part.seed = seed;
    part.assignment.assign(pool.samples.size(), -1);

    std::vector<double> coarse_weights(static_cast<std::size_t>(num_coarse));
    for (int m = 0; m < num_clients; ++m) {
        Rng rng(derive_seed(seed, {1, static_cast<std::uint64_t>(m)}));
        auto coarse_mix = rng.dirichlet(static_cast<std::size_t>(num_coarse), alpha);
        std::vector<std::vector<double>> fine_mix(static_cast<std::size_t>(num_coarse));
        for (int c = 0; c < num_coarse; ++c) {
            fine_mix[static_cast<std::size_t>(c)] =
                rng.dirichlet(fines_of_coarse[static_cast<std::size_t>(c)].size(), beta);
        }

        for (std::size_t q = 0; q < quotas[static_cast<std::size_t>(m)]; ++q) {
            // Coarse level, with empty coarse classes masked out.
            for (int c = 0; c < num_coarse; ++c) {
                coarse_weights[static_cast<std::size_t>(c)] =
                    remaining_coarse[static_cast<std::size_t>(c)] > 0
                        ? coarse_mix[static_cast<std::size_t>(c)]
                        : 0.0;
            }
            int c = draw_categorical(rng, coarse_weights);

            // Fine level within the chosen coarse class.
            const auto& fines = fines_of_coarse[static_cast<std::size_t>(c)];
            std::vector<double> fine_weights(fines.size());
            for (std::size_t i = 0; i < fines.size(); ++i) {
                fine_weights[i] = remaining_fine[static_cast<std::size_t>(fines[i])] > 0
                                      ? fine_mix[static_cast<std::size_t>(c)][i]
                                      : 0.0;
            }
            int fi = draw_categorical(rng, fine_weights);
            int f = fines[static_cast<std::size_t>(fi)];

            auto& stack = stacks[static_cast<std::size_t>(f)];
            std::size_t sample_idx = stack.back();
            stack.pop_back();
            remaining_fine[static_cast<std::size_t>(f)] -= 1;
            remaining_coarse[static_cast<std::size_t>(c)] -= 1;
            part.assignment[sample_idx] = m;
        }
    }
    return part;
}

ClientDataset split_client(int client_id, std::vector<Sample> samples, SplitRatios ratios,
                           std::uint64_t seed) {
    const double rsum = ratios.train + ratios.val + ratios.test;
    if (std::abs(rsum - 1.0) > 1e-9) throw ConfigError("split ratios must sum to 1");
    if (ratios.train < 0.0 || ratios.val < 0.0 || ratios.test < 0.0) {
        throw ConfigError("split ratios must be non-negative");
    }
    if (samples.size() < 3) {
        throw ConfigError("client " + std::to_string(client_id) + " has only " +
                          std::to_string(samples.size()) +
                          " samples; fewer than 3 is a degenerate client");
    }

    Rng rng(seed);
    rng.shuffle(samples);
    const double weights[3] = {ratios.train, ratios.val, ratios.test};
    auto counts = largest_remainder_counts(std::span<const double>(weights, 3), samples.size());

    ClientDataset ds;
    ds.client_id = client_id;
    auto it = samples.begin();
    ds.train.assign(it, it + static_cast<std::ptrdiff_t>(counts[0]));
    it += static_cast<std::ptrdiff_t>(counts[0]);
    ds.val.assign(it, it + static_cast<std::ptrdiff_t>(counts[1]));
    it += static_cast<std::ptrdiff_t>(counts[1]);
    ds.test.assign(it, it + static_cast<std::ptrdiff_t>(counts[2]));
    return ds;
}

std::vector<ClientDataset> build_clients(const LabeledPool& pool, const Partition& partition,
                                         SplitRatios ratios, std::uint64_t seed) {
    std::vector<ClientDataset> clients;
    clients.reserve(static_cast<std::size_t>(partition.num_clients));
    auto per_client = partition.by_client();
    for (int m = 0; m < partition.num_clients; ++m) {
        std::vector<Sample> samples;
        samples.reserve(per_client[static_cast<std::size_t>(m)].size());
        for (std::size_t idx : per_client[static_cast<std::size_t>(m)]) {
            samples.push_back(pool.samples[idx]);
        }
        clients.push_back(split_client(m, std::move(samples), ratios,
                                       derive_seed(seed, {static_cast<std::uint64_t>(m)})));
    }
    return clients;
}

DriftScenario make_drift_scenario(const LabeledPool& pool, int num_clients, double alpha, int t0,
                                  int horizon, SplitRatios ratios, std::uint64_t seed,
                                  bool identical_shift) {
    if (t0 < 1 || horizon <= t0) throw ConfigError("drift schedule requires 0 < t0 < T");

    const std::uint64_t seed_a = derive_seed(seed, {seed_tag::drift_before});
    const std::uint64_t seed_b =
        identical_shift ? seed_a : derive_seed(seed, {seed_tag::drift_after});
    Partition part_a = dirichlet_partition(pool, num_clients, alpha, seed_a);
    Partition part_b = dirichlet_partition(pool, num_clients, alpha, seed_b);

    auto members_a = part_a.by_client();
    auto members_b = part_b.by_client();

    DriftScenario scenario;
    scenario.t0 = t0;
    scenario.horizon = horizon;
    scenario.clients.resize(static_cast<std::size_t>(num_clients));

    for (int m = 0; m < num_clients; ++m) {
        auto idx_a = members_a[static_cast<std::size_t>(m)];
        auto idx_b = members_b[static_cast<std::size_t>(m)];
        // Convention: the pre-shift dataset is never the larger of the two.
        if (idx_a.size() > idx_b.size()) std::swap(idx_a, idx_b);

        auto materialize = [&](const std::vector<std::size_t>& idx) {
            std::vector<Sample> s;
            s.reserve(idx.size());
            for (std::size_t i : idx) s.push_back(pool.samples[i]);
            return s;
        };

        DriftClient& client = scenario.clients[static_cast<std::size_t>(m)];
        // Under identical_shift the second draw replays the first one,
        // split included, so S'_m == S_m exactly.
        const std::uint64_t split_tag_b = identical_shift ? 0x511Full : 0x512Full;
        client.before = split_client(m, materialize(idx_a), ratios,
                                     derive_seed(seed_a, {0x511Full, static_cast<std::uint64_t>(m)}));
        client.after = split_client(m, materialize(idx_b), ratios,
                                    derive_seed(seed_b, {split_tag_b, static_cast<std::uint64_t>(m)}));

        const auto& pre_train = client.before.train;
        const std::size_t n_store = (pre_train.size() + 1) / 2;
        client.datastore_seed.assign(pre_train.begin(),
                                     pre_train.begin() + static_cast<std::ptrdiff_t>(n_store));
        std::vector<Sample> stream_pre(pre_train.begin() + static_cast<std::ptrdiff_t>(n_store),
                                       pre_train.end());

        if (stream_pre.size() < static_cast<std::size_t>(t0)) {
            throw ConfigError("client " + std::to_string(m) + " has " +
                              std::to_string(stream_pre.size()) +
                              " pre-shift stream samples for t0=" + std::to_string(t0) +
                              " batches");
        }
        if (client.after.train.size() < static_cast<std::size_t>(horizon - t0)) {
            throw ConfigError("client " + std::to_string(m) + " has " +
                              std::to_string(client.after.train.size()) +
                              " post-shift samples for " + std::to_string(horizon - t0) +
                              " batches");
        }

        client.batches = chop_into_batches(stream_pre, t0);
        auto post = chop_into_batches(client.after.train, horizon - t0);
        client.batches.insert(client.batches.end(), std::make_move_iterator(post.begin()),
                              std::make_move_iterator(post.end()));
    }
    return scenario;
}

std::vector<std::string> export_scenario(const std::vector<ClientDataset>& clients,
                                         int num_classes, const std::string& out_dir,
                                         const std::map<std::string, std::string>& manifest) {
    namespace fs = std::filesystem;
    fs::create_directories(out_dir);

    std::vector<std::string> written;
    for (const auto& client : clients) {
        std::vector<std::uint8_t> bytes;
        int dim = 0;
        for (const auto* block : {&client.train, &client.val, &client.test}) {
            if (!block->empty()) {
                dim = static_cast<int>(block->front().features.size());
                break;
            }
        }
        wire::put_u32(bytes, static_cast<std::uint32_t>(client.client_id));
        wire::put_u32(bytes, static_cast<std::uint32_t>(client.train.size()));
        wire::put_u32(bytes, static_cast<std::uint32_t>(client.val.size()));
        wire::put_u32(bytes, static_cast<std::uint32_t>(client.test.size()));
        wire::put_u32(bytes, static_cast<std::uint32_t>(dim));
        wire::put_u32(bytes, static_cast<std::uint32_t>(num_classes));
        auto put_block = [&](const std::vector<Sample>& block) {
            for (const auto& s : block) {
                wire::put_u32(bytes, static_cast<std::uint32_t>(s.label));
                for (double f : s.features) wire::put_f32(bytes, static_cast<float>(f));
            }
        };
        put_block(client.train);
        put_block(client.val);
        put_block(client.test);

        char name[32];
        std::snprintf(name, sizeof name, "client_%04d.bin", client.client_id);
        fs::path path = fs::path(out_dir) / name;
        std::ofstream out(path, std::ios::binary);
        if (!out) throw ConfigError("cannot open " + path.string() + " for writing");
        out.write(reinterpret_cast<const char*>(bytes.data()),
                  static_cast<std::streamsize>(bytes.size()));
        written.push_back(name);
    }

    fs::path mpath = fs::path(out_dir) / "manifest.txt";
    std::ofstream mout(mpath);
    if (!mout) throw ConfigError("cannot open " + mpath.string() + " for writing");
    for (const auto& [key, value] : manifest) mout << key << "=" << value << "\n";
    written.push_back("manifest.txt");
    return written;
}

} // namespace fedmem
