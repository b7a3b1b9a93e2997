#ifndef FEDMEM_RNG_HPP
#define FEDMEM_RNG_HPP

#include <cstdint>
#include <initializer_list>
#include <vector>

namespace fedmem {

/// splitmix64 output function; the workhorse behind seed derivation.
constexpr std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ull;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
    return x ^ (x >> 31);
}

/// Hierarchical seed derivation: master -> (scenario, module, client, round, ...)
/// sub-seeds. Each path element is mixed in sequence, so
/// derive_seed(s, {a, b}) != derive_seed(s, {b, a}) and sub-streams taken for
/// different paths are statistically independent. Results do not depend on
/// the order in which sibling streams are consumed, which keeps parallel
/// per-client execution reproducible.
constexpr std::uint64_t derive_seed(std::uint64_t base,
                                    std::initializer_list<std::uint64_t> path) {
    std::uint64_t s = splitmix64(base);
    for (std::uint64_t p : path) {
        s = splitmix64(s ^ splitmix64(p + 0x632BE59BD9B4E019ull));
    }
    return s;
}

/// Well-known stream tags used by the harness when deriving sub-seeds from
/// the master seed. Keeping them centralized makes runs replayable from the
/// manifest alone.
namespace seed_tag {
inline constexpr std::uint64_t pool = 1;
inline constexpr std::uint64_t partition = 2;
inline constexpr std::uint64_t split = 3;
inline constexpr std::uint64_t model_init = 4;
inline constexpr std::uint64_t federation = 5;
inline constexpr std::uint64_t datastore = 6;
inline constexpr std::uint64_t client_selection = 7;
inline constexpr std::uint64_t local_update = 8;
inline constexpr std::uint64_t baseline_local = 9;
inline constexpr std::uint64_t baseline_finetune = 10;
inline constexpr std::uint64_t drift_before = 11;
inline constexpr std::uint64_t drift_after = 12;
inline constexpr std::uint64_t unseen_split = 13;
inline constexpr std::uint64_t capacity = 14;
inline constexpr std::uint64_t hw_split = 15;
inline constexpr std::uint64_t centralized = 16;
inline constexpr std::uint64_t compress = 17;
} // namespace seed_tag

/// Deterministic random stream. The generator state evolution is fully
/// specified here (xorshift-free splitmix64 counter mode) and all
/// distributions are implemented in terms of next_u64(), so identical seeds
/// give identical streams on every platform and compiler.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : state_(splitmix64(seed ^ 0x8000000000000000ull)) {}

    std::uint64_t next_u64() {
        state_ += 0x9E3779B97F4A7C15ull;
        std::uint64_t x = state_;
        x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
        x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
        return x ^ (x >> 31);
    }

    /// Uniform double in [0, 1), 53 bits of randomness.
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    /// Uniform integer in [0, n). Rejection sampling to avoid modulo bias.
    std::uint64_t uniform_below(std::uint64_t n);

    /// Standard normal via Box-Muller.
    double normal();

    /// Gamma(shape, 1) via Marsaglia-Tsang; shape < 1 handled by boosting.
    double gamma(double shape);

    /// Symmetric Dirichlet of the given order: normalized i.i.d. gammas.
    std::vector<double> dirichlet(std::size_t order, double concentration);

    /// Fisher-Yates; std::shuffle is implementation-defined, this is not.
    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            std::size_t j = static_cast<std::size_t>(uniform_below(i));
            using std::swap;
            swap(v[i - 1], v[j]);
        }
    }

    /// k distinct indices drawn uniformly from [0, n), in draw order.
    std::vector<std::size_t> sample_without_replacement(std::size_t n, std::size_t k);

private:
    std::uint64_t state_;
};

} // namespace fedmem

#endif
