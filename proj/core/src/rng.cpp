#include "fedmem/rng.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>

namespace fedmem {

std::uint64_t Rng::uniform_below(std::uint64_t n) {
    if (n == 0) throw std::invalid_argument("Rng::uniform_below: n must be positive");
    // Smallest power-of-two mask covering n, then reject.
    std::uint64_t mask = n - 1;
    mask |= mask >> 1;
    mask |= mask >> 2;
    mask |= mask >> 4;
    mask |= mask >> 8;
    mask |= mask >> 16;
    mask |= mask >> 32;
    for (;;) {
        std::uint64_t x = next_u64() & mask;
        if (x < n) return x;
    }
}

double Rng::normal() {
    // Box-Muller; u1 nudged away from zero so the log is finite.
    double u1 = uniform();
    double u2 = uniform();
    if (u1 <= 0.0) u1 = 0x1.0p-53;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

double Rng::gamma(double shape) {
    if (!(shape > 0.0)) throw std::invalid_argument("Rng::gamma: shape must be positive");
    if (shape < 1.0) {
        // Gamma(a) = Gamma(a+1) * U^(1/a)
        double g = gamma(shape + 1.0);
        double u = uniform();
        if (u <= 0.0) u = 0x1.0p-53;
        return g * std::pow(u, 1.0 / shape);
    }
    const double d = shape - 1.0 / 3.0;
    const double c = 1.0 / std::sqrt(9.0 * d);
    for (;;) {
        double x = normal();
        double v = 1.0 + c * x;
        if (v <= 0.0) continue;
        v = v * v * v;
        double u = uniform();
        if (u < 1.0 - 0.0331 * x * x * x * x) return d * v;
        if (u <= 0.0) u = 0x1.0p-53;
        if (std::log(u) < 0.5 * x * x + d * (1.0 - v + std::log(v))) return d * v;
    }
}

std::vector<double> Rng::dirichlet(std::size_t order, double concentration) {
    std::vector<double> draws(order);
    double total = 0.0;
    for (auto& g : draws) {
        g = gamma(concentration);
        total += g;
    }
    if (total <= 0.0) {
        // All gammas underflowed (tiny concentration); fall back to a
        // deterministic single-spike draw, the limit behavior of Dir(a->0).
        std::fill(draws.begin(), draws.end(), 0.0);
        draws[uniform_below(order)] = 1.0;
        return draws;
    }
    for (auto& g : draws) g /= total;
    return draws;
}

std::vector<std::size_t> Rng::sample_without_replacement(std::size_t n, std::size_t k) {
    if (k > n) throw std::invalid_argument("sample_without_replacement: k > n");
    // Partial Fisher-Yates over an index vector.
    std::vector<std::size_t> idx(n);
    for (std::size_t i = 0; i < n; ++i) idx[i] = i;
    std::vector<std::size_t> out;
    out.reserve(k);
    for (std::size_t i = 0; i < k; ++i) {
        std::size_t j = i + static_cast<std::size_t>(uniform_below(n - i));
        std::swap(idx[i], idx[j]);
        out.push_back(idx[i]);
    }
    return out;
}

} // namespace fedmem
