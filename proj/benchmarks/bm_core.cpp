// Microbenchmarks for the hot paths: forward/backward passes, exact kNN
// retrieval, datastore construction, aggregation, and prototype
// compression. Run with --benchmark_filter=... to narrow.

#include <benchmark/benchmark.h>

#include <vector>

#include "fedmem/datastore.hpp"
#include "fedmem/federation.hpp"
#include "fedmem/nn.hpp"
#include "fedmem/personalize.hpp"
#include "fedmem/rng.hpp"

using namespace fedmem;

namespace {

Model make_model(int dim, int classes) {
    return init_model({{dim, 64, Activation::relu},
                       {64, 32, Activation::relu},
                       {32, classes, Activation::identity}},
                      1, 7);
}

std::vector<Sample> make_samples(int n, int dim, int classes, std::uint64_t seed) {
    Rng rng(seed);
    std::vector<Sample> out(static_cast<std::size_t>(n));
    for (auto& s : out) {
        s.features.resize(static_cast<std::size_t>(dim));
        for (auto& f : s.features) f = rng.normal();
        s.label = static_cast<int>(rng.uniform_below(static_cast<std::uint64_t>(classes)));
    }
    return out;
}

Datastore make_store(int n, int dim, std::uint64_t seed) {
    Rng rng(seed);
    Datastore store(dim);
    for (int i = 0; i < n; ++i) {
        std::vector<double> key(static_cast<std::size_t>(dim));
        for (auto& v : key) v = rng.normal();
        store.append(std::move(key), static_cast<int>(rng.uniform_below(10)));
    }
    return store;
}

void BM_Forward(benchmark::State& state) {
    Model m = make_model(16, 10);
    auto samples = make_samples(1, 16, 10, 3);
    for (auto _ : state) {
        benchmark::DoNotOptimize(forward(m, samples[0].features));
    }
}
BENCHMARK(BM_Forward);

void BM_LossAndGrad(benchmark::State& state) {
    Model m = make_model(16, 10);
    auto batch = make_samples(static_cast<int>(state.range(0)), 16, 10, 5);
    for (auto _ : state) {
        benchmark::DoNotOptimize(loss_and_grad(m, batch));
    }
}
BENCHMARK(BM_LossAndGrad)->Arg(1)->Arg(32);

void BM_LocalEpoch(benchmark::State& state) {
    Model m = make_model(16, 10);
    auto train = make_samples(200, 16, 10, 9);
    for (auto _ : state) {
        benchmark::DoNotOptimize(local_update(m, train, 1, 0.1, 32, 11));
    }
}
BENCHMARK(BM_LocalEpoch);

void BM_KnnQuery(benchmark::State& state) {
    const int n = static_cast<int>(state.range(0));
    Datastore store = make_store(n, 32, 13);
    Rng rng(14);
    std::vector<double> query(32);
    for (auto& v : query) v = rng.normal();
    for (auto _ : state) {
        benchmark::DoNotOptimize(knn_query(store, query, 10, 1.0));
    }
    state.SetItemsProcessed(state.iterations() * n);
}
BENCHMARK(BM_KnnQuery)->Arg(100)->Arg(1000)->Arg(10000);

void BM_BuildDatastore(benchmark::State& state) {
    Model m = make_model(16, 10);
    auto samples = make_samples(200, 16, 10, 15);
    for (auto _ : state) {
        benchmark::DoNotOptimize(build_datastore(m, samples, 1.0, 17));
    }
}
BENCHMARK(BM_BuildDatastore);

void BM_Aggregate(benchmark::State& state) {
    Model global = make_model(16, 10);
    const int clients = static_cast<int>(state.range(0));
    std::vector<Model> updated(static_cast<std::size_t>(clients), global);
    std::vector<ClientUpdate> updates;
    std::vector<std::size_t> weights;
    for (int i = 0; i < clients; ++i) {
        updates.push_back({i, &updated[static_cast<std::size_t>(i)]});
        weights.push_back(100 + static_cast<std::size_t>(i));
    }
    for (auto _ : state) {
        benchmark::DoNotOptimize(aggregate(global, updates, weights));
    }
}
BENCHMARK(BM_Aggregate)->Arg(10)->Arg(100);

void BM_Compress(benchmark::State& state) {
    Datastore store = make_store(500, 32, 19);
    for (auto _ : state) {
        benchmark::DoNotOptimize(compress(store, 50, 8, 21));
    }
}
BENCHMARK(BM_Compress);

void BM_Predict(benchmark::State& state) {
    Model m = make_model(16, 10);
    auto samples = make_samples(200, 16, 10, 23);
    Datastore store = build_datastore(m, samples, 1.0, 25);
    PersonalizedPredictor pred(m, store, KernelConfig{10, 1.0}, 0.5);
    auto query = make_samples(1, 16, 10, 27);
    for (auto _ : state) {
        benchmark::DoNotOptimize(pred.predict(query[0].features));
    }
}
BENCHMARK(BM_Predict);

} // namespace

BENCHMARK_MAIN();
