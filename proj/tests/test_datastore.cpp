#include <doctest.h>

#include <cmath>
#include <vector>

#include "fedmem/datastore.hpp"
#include "fedmem/errors.hpp"
#include "fedmem/rng.hpp"
#include "support/oracles.hpp"

using namespace fedmem;

namespace {

Datastore random_store(int n, int dim, int classes, std::uint64_t seed,
                       double duplicate_prob = 0.0) {
    Rng rng(seed);
    Datastore store(dim);
    std::vector<std::vector<double>> keys;
    for (int i = 0; i < n; ++i) {
        std::vector<double> key(static_cast<std::size_t>(dim));
        if (!keys.empty() && rng.uniform() < duplicate_prob) {
            key = keys[rng.uniform_below(keys.size())]; // forces distance ties
        } else {
            // Draw at f32 granularity so serialized keys round-trip exactly.
            for (auto& v : key) v = static_cast<double>(static_cast<float>(rng.normal()));
        }
        keys.push_back(key);
        store.append(key, static_cast<int>(rng.uniform_below(static_cast<std::uint64_t>(classes))));
    }
    return store;
}

std::vector<double> random_query(int dim, std::uint64_t seed) {
    Rng rng(seed);
    std::vector<double> q(static_cast<std::size_t>(dim));
    for (auto& v : q) v = rng.normal();
    return q;
}

Model identity_embedder(int dim) {
    // Single identity layer: the representation is the raw feature vector.
    Model m = init_model({{dim, dim, Activation::identity}}, 0, 1);
    std::fill(m.params.begin(), m.params.end(), 0.0);
    for (int i = 0; i < dim; ++i) {
        m.params[static_cast<std::size_t>(i * dim + i)] = 1.0;
    }
    return m;
}

} // namespace

TEST_CASE("build_datastore sizes and keys") {
    const int dim = 6;
    Model embedder = identity_embedder(dim);
    Rng rng(5);
    std::vector<Sample> samples(10);
    for (auto& s : samples) {
        s.features.resize(dim);
        for (auto& f : s.features) f = rng.normal();
        s.label = static_cast<int>(rng.uniform_below(3));
    }

    Datastore full = build_datastore(embedder, samples, 1.0, 9);
    CHECK(full.size() == samples.size());
    CHECK(full.dim() == dim);

    Datastore half = build_datastore(embedder, samples, 0.5, 9);
    CHECK(half.size() == 5);
    for (const auto& e : half.entries()) CHECK(e.key.size() == dim);

    // insert_seq preserves sample order: labels must appear in a
    // subsequence of the original order. With an identity embedder, keys
    // equal features, so we can match them up.
    std::size_t cursor = 0;
    for (const auto& e : half.entries()) {
        while (cursor < samples.size() && samples[cursor].features != e.key) ++cursor;
        REQUIRE(cursor < samples.size());
        CHECK(samples[cursor].label == e.label);
        ++cursor;
    }

    CHECK_THROWS_AS(build_datastore(embedder, std::vector<Sample>{}, 1.0, 1), InputError);
    CHECK_THROWS_AS(build_datastore(embedder, samples, 0.0, 1), ConfigError);
    CHECK_THROWS_AS(build_datastore(embedder, samples, 1.5, 1), ConfigError);
}

TEST_CASE("build_datastore keys match an oracle recomputation") {
    std::vector<LayerSpec> spec{{4, 5, Activation::relu}, {5, 3, Activation::identity}};
    Model model = init_model(spec, 0, 17);
    Rng rng(23);
    std::vector<Sample> samples(8);
    for (auto& s : samples) {
        s.features.resize(4);
        for (auto& f : s.features) f = rng.normal();
        s.label = static_cast<int>(rng.uniform_below(3));
    }
    Datastore store = build_datastore(model, samples, 1.0, 0);
    REQUIRE(store.size() == samples.size());
    for (std::size_t i = 0; i < samples.size(); ++i) {
        auto acts = oracle::naive_forward(model, samples[i].features);
        const auto& expected = acts[static_cast<std::size_t>(model.repr_layer)];
        for (std::size_t d = 0; d < expected.size(); ++d) {
            CHECK(store.entries()[i].key[d] == doctest::Approx(expected[d]).epsilon(1e-12));
        }
    }
}

TEST_CASE("knn_query geometry") {
    Datastore store(2);
    store.append({0.0, 0.0}, 0); // label A
    store.append({1.0, 0.0}, 1); // label B

    auto hood = knn_query(store, std::vector<double>{0.1, 0.0}, 1, 2.0);
    REQUIRE(hood.size() == 1);
    CHECK(hood[0].label == 0);
    CHECK(hood[0].distance == doctest::Approx(0.1 / 2.0).epsilon(1e-12));

    SUBCASE("k larger than the store clamps") {
        auto all = knn_query(store, std::vector<double>{0.1, 0.0}, 10, 1.0);
        REQUIRE(all.size() == 2);
        CHECK(all[0].label == 0);
        CHECK(all[1].label == 1);
        CHECK(all[0].distance <= all[1].distance);
    }

    SUBCASE("empty store raises its own error type") {
        Datastore empty(2);
        CHECK_THROWS_AS(knn_query(empty, std::vector<double>{0.0, 0.0}, 1, 1.0),
                        EmptyStoreError);
    }

    SUBCASE("bad arguments") {
        CHECK_THROWS_AS(knn_query(store, std::vector<double>{0.0, 0.0}, 0, 1.0), ConfigError);
        CHECK_THROWS_AS(knn_query(store, std::vector<double>{0.0, 0.0}, 1, 0.0), ConfigError);
        CHECK_THROWS_AS(knn_query(store, std::vector<double>{0.0}, 1, 1.0), InputError);
    }
}

TEST_CASE("knn_query matches the brute-force oracle, ties included") {
    Rng seeds(101);
    for (int trial = 0; trial < 60; ++trial) {
        const int n = 1 + static_cast<int>(seeds.uniform_below(200));
        const int dim = 1 + static_cast<int>(seeds.uniform_below(16));
        const int k = 1 + static_cast<int>(seeds.uniform_below(12));
        Datastore store = random_store(n, dim, 4, seeds.next_u64(), /*duplicate_prob=*/0.3);
        auto query = random_query(dim, seeds.next_u64());

        auto got = knn_query(store, query, k, 1.0);
        auto expected = oracle::brute_knn(store, query, k, 1.0);
        REQUIRE(got.size() == expected.size());
        for (std::size_t i = 0; i < got.size(); ++i) {
            CHECK(got[i].entry_index == expected[i].entry_index);
            CHECK(got[i].insert_seq == expected[i].insert_seq);
            CHECK(got[i].label == expected[i].label);
            CHECK(got[i].distance == expected[i].distance);
        }
    }
}

TEST_CASE("neighbor distances are non-decreasing") {
    Datastore store = random_store(120, 5, 3, 999, 0.2);
    auto query = random_query(5, 1000);
    auto hood = knn_query(store, query, 20, 0.7);
    for (std::size_t i = 1; i < hood.size(); ++i) {
        CHECK(hood[i - 1].distance <= hood[i].distance);
    }
}

TEST_CASE("sigma only rescales distances, never the ranking") {
    Datastore store = random_store(80, 4, 3, 555, 0.25);
    auto query = random_query(4, 556);
    auto base = knn_query(store, query, 15, 1.0);
    for (double sigma : {0.1, 2.0, 1000.0}) {
        auto scaled = knn_query(store, query, 15, sigma);
        REQUIRE(scaled.size() == base.size());
        for (std::size_t i = 0; i < base.size(); ++i) {
            CHECK(scaled[i].entry_index == base[i].entry_index);
            CHECK(scaled[i].distance == doctest::Approx(base[i].distance / sigma).epsilon(1e-12));
        }
    }
}

TEST_CASE("update honors the eviction policy") {
    auto key = [](double v) { return std::vector<double>{v}; };

    SUBCASE("fixed ignores batches") {
        Datastore store(1, EvictionPolicy::fixed);
        store.append(key(1.0), 0);
        std::vector<KeyLabel> batch{{key(2.0), 1}};
        store.update(batch);
        CHECK(store.size() == 1);
        CHECK(store.entries()[0].key[0] == 1.0);
    }

    SUBCASE("fifo evicts the oldest down to capacity") {
        Datastore store(1, EvictionPolicy::fifo, 3);
        store.append(key(1.0), 0); // a
        store.append(key(2.0), 0); // b
        store.append(key(3.0), 0); // c
        std::vector<KeyLabel> batch{{key(4.0), 1}, {key(5.0), 1}};
        store.update(batch); // [a b c d e] -> [c d e]
        REQUIRE(store.size() == 3);
        CHECK(store.entries()[0].key[0] == 3.0);
        CHECK(store.entries()[1].key[0] == 4.0);
        CHECK(store.entries()[2].key[0] == 5.0);
        CHECK(store.entries()[0].insert_seq == 2);
        CHECK(store.entries()[2].insert_seq == 4);
    }

    SUBCASE("concatenate grows by the batch size") {
        Datastore store(1, EvictionPolicy::concatenate);
        store.append(key(1.0), 0);
        std::vector<KeyLabel> batch{{key(2.0), 1}, {key(3.0), 0}, {key(4.0), 1}};
        store.update(batch);
        CHECK(store.size() == 4);
    }

    SUBCASE("fifo without capacity is rejected") {
        CHECK_THROWS_AS(Datastore(1, EvictionPolicy::fifo), ConfigError);
        Datastore store(1);
        CHECK_THROWS_AS(store.set_policy(EvictionPolicy::fifo, std::nullopt), ConfigError);
    }
}

TEST_CASE("fifo keeps exactly the newest entries across update sequences") {
    Rng rng(77);
    Datastore store(2, EvictionPolicy::fifo, 10);
    std::uint64_t issued = 0;
    for (int round = 0; round < 8; ++round) {
        std::vector<KeyLabel> batch(1 + rng.uniform_below(7));
        for (auto& item : batch) {
            item.key = {rng.normal(), rng.normal()};
            item.label = static_cast<int>(rng.uniform_below(3));
            ++issued;
        }
        store.update(batch);
        CHECK(store.size() <= 10);
        // Survivors are exactly the highest insert_seq values issued so far.
        const std::size_t expect = std::min<std::uint64_t>(issued, 10);
        REQUIRE(store.size() == expect);
        for (std::size_t i = 0; i < store.size(); ++i) {
            CHECK(store.entries()[i].insert_seq == issued - expect + i);
        }
    }
}

TEST_CASE("compress with full budget reproduces exact retrieval") {
    Datastore store = random_store(40, 6, 3, 313);
    PrototypeStore proto = compress(store, 40, 6, 99);
    CHECK(proto.prototypes.size() == 40);

    // A full-rank orthonormal projection preserves distances, so neighbor
    // identities must match (generic data: no ties).
    for (int trial = 0; trial < 10; ++trial) {
        auto query = random_query(6, 400 + static_cast<std::uint64_t>(trial));
        auto raw = knn_query(store, query, 5, 1.0);
        auto compressed = knn_query(proto, query, 5, 1.0);
        REQUIRE(raw.size() == compressed.size());
        for (std::size_t i = 0; i < raw.size(); ++i) {
            CHECK(raw[i].distance == doctest::Approx(compressed[i].distance).epsilon(1e-6));
            CHECK(store.entries()[raw[i].entry_index].label == compressed[i].label);
        }
    }
}

TEST_CASE("one prototype per class lands on the class mean") {
    Datastore store(2);
    // Two tight, distant blobs.
    Rng rng(11);
    std::vector<double> mean0{-10.0, 0.0}, mean1{10.0, 5.0};
    for (int i = 0; i < 30; ++i) {
        store.append({mean0[0] + 0.01 * rng.normal(), mean0[1] + 0.01 * rng.normal()}, 0);
        store.append({mean1[0] + 0.01 * rng.normal(), mean1[1] + 0.01 * rng.normal()}, 1);
    }
    PrototypeStore proto = compress(store, 2, 2, 5);
    REQUIRE(proto.prototypes.size() == 2);

    // Compare in projected space against projected true means.
    for (const auto& p : proto.prototypes) {
        auto target = proto.project(p.label == 0 ? mean0 : mean1);
        for (std::size_t d = 0; d < target.size(); ++d) {
            CHECK(std::abs(p.key[d] - target[d]) < 0.05);
        }
    }
}

TEST_CASE("rank-one data projects losslessly to one dimension") {
    Datastore store(3);
    Rng rng(21);
    const std::vector<double> direction{1.0 / 3.0, 2.0 / 3.0, 2.0 / 3.0}; // unit vector
    for (int i = 0; i < 50; ++i) {
        const double t = rng.normal();
        store.append({t * direction[0], t * direction[1], t * direction[2]}, 0);
    }
    PrototypeStore proto = compress(store, 10, 1, 31);
    REQUIRE(proto.projection.size() == 1);

    // Reconstruction through the single component is exact for data that
    // varies along one line through the origin (the mean lies on it too).
    for (const auto& e : store.entries()) {
        auto z = proto.project(e.key);
        for (std::size_t d = 0; d < 3; ++d) {
            CHECK(std::abs(z[0] * proto.projection[0][d] - e.key[d]) < 1e-9);
        }
    }
}

TEST_CASE("compress respects the prototype budget") {
    Rng rng(41);
    for (int trial = 0; trial < 10; ++trial) {
        const int n = 20 + static_cast<int>(rng.uniform_below(60));
        Datastore store = random_store(n, 4, 5, rng.next_u64());
        const int budget = 1 + static_cast<int>(rng.uniform_below(static_cast<std::uint64_t>(n)));
        PrototypeStore proto = compress(store, budget, 3, rng.next_u64());
        CHECK(proto.prototypes.size() <= static_cast<std::size_t>(budget));
        CHECK(!proto.prototypes.empty());
    }
    Datastore store = random_store(10, 4, 2, 1);
    CHECK_THROWS_AS(compress(store, 0, 2, 1), ConfigError);
    CHECK_THROWS_AS(compress(store, 11, 2, 1), ConfigError);
    CHECK_THROWS_AS(compress(store, 5, 0, 1), ConfigError);
    CHECK_THROWS_AS(compress(store, 5, 5, 1), ConfigError);
}

TEST_CASE("datastore serialization round-trips") {
    Datastore store = random_store(25, 3, 4, 515);
    store.set_policy(EvictionPolicy::fifo, 40);
    auto bytes = save_datastore(store);

    Datastore loaded = load_datastore(bytes);
    CHECK(loaded.dim() == store.dim());
    CHECK(loaded.size() == store.size());
    CHECK(loaded.policy() == store.policy());
    CHECK(loaded.capacity() == store.capacity());
    for (std::size_t i = 0; i < store.size(); ++i) {
        CHECK(loaded.entries()[i].key == store.entries()[i].key); // keys are f32-exact
        CHECK(loaded.entries()[i].label == store.entries()[i].label);
        CHECK(loaded.entries()[i].insert_seq == store.entries()[i].insert_seq);
    }
    CHECK(save_datastore(loaded) == bytes);

    SUBCASE("appends continue above the restored sequence numbers") {
        loaded.append({1.0, 2.0, 3.0}, 1);
        CHECK(loaded.entries().back().insert_seq == 25);
    }

    SUBCASE("empty store round-trips") {
        Datastore empty(7);
        Datastore back = load_datastore(save_datastore(empty));
        CHECK(back.dim() == 7);
        CHECK(back.empty());
        CHECK(!back.capacity().has_value());
    }

    SUBCASE("corruption is detected") {
        auto bad_magic = bytes;
        bad_magic[1] ^= 0x40;
        CHECK_THROWS_AS(load_datastore(bad_magic), FormatError);

        auto truncated = bytes;
        truncated.resize(truncated.size() - 1);
        CHECK_THROWS_AS(load_datastore(truncated), FormatError);

        auto trailing = bytes;
        trailing.push_back(0);
        CHECK_THROWS_AS(load_datastore(trailing), FormatError);
    }
}
