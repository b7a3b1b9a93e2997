#include "fedmem/personalize.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "fedmem/errors.hpp"

namespace fedmem {

namespace {

constexpr double kSimplexTolerance = 1e-6;

void check_simplex(std::span<const double> p, const char* what) {
    double total = 0.0;
    for (double v : p) {
        if (v < -kSimplexTolerance) {
            throw InputError(std::string(what) + " has a negative entry");
        }
        total += v;
    }
    if (std::abs(total - 1.0) > kSimplexTolerance) {
        throw InputError(std::string(what) + " does not sum to 1");
    }
}

} // namespace

std::vector<double> knn_posterior(const Neighborhood& neighborhood, int num_classes) {
    if (neighborhood.empty()) throw InputError("knn_posterior: empty neighborhood");
    if (num_classes < 1) throw ConfigError("num_classes must be >= 1");

    // Shifting all distances by the smallest one cancels in the
    // normalization and keeps exp() away from underflow.
    double d_min = neighborhood.front().distance;
    for (const auto& n : neighborhood) d_min = std::min(d_min, n.distance);

    std::vector<double> weights(static_cast<std::size_t>(num_classes), 0.0);
    double total = 0.0;
    for (const auto& n : neighborhood) {
        if (n.label < 0 || n.label >= num_classes) {
            throw InputError("neighbor label " + std::to_string(n.label) + " outside [0, " +
                             std::to_string(num_classes) + ")");
        }
        const double w = std::exp(-(n.distance - d_min));
        weights[static_cast<std::size_t>(n.label)] += w;
        total += w;
    }
    for (auto& w : weights) w /= total;
    return weights;
}

std::vector<double> interpolate(std::span<const double> knn_post,
                                std::span<const double> global_post, double lambda) {
    if (knn_post.size() != global_post.size()) {
        throw InputError("posterior lengths differ");
    }
    if (lambda < 0.0 || lambda > 1.0) throw ConfigError("lambda must be in [0, 1]");
    check_simplex(knn_post, "knn posterior");
    check_simplex(global_post, "global posterior");

    std::vector<double> out(knn_post.size());
    const double one_minus = 1.0 - lambda;
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = lambda * knn_post[i] + one_minus * global_post[i];
    }
    return out;
}

int argmax_class(std::span<const double> probs) {
    return static_cast<int>(std::max_element(probs.begin(), probs.end()) - probs.begin());
}

double model_accuracy(const Model& model, std::span<const Sample> samples) {
    if (samples.empty()) throw InputError("model_accuracy: empty sample set");
    std::size_t correct = 0;
    for (const auto& s : samples) {
        if (argmax_class(predict_proba(model, s.features)) == s.label) ++correct;
    }
    return static_cast<double>(correct) / static_cast<double>(samples.size());
}

PersonalizedPredictor::PersonalizedPredictor(const Model& model, const Datastore& store,
                                             KernelConfig kernel, double lambda)
    : model_(&model), store_(&store), kernel_(kernel), lambda_(lambda) {
    if (kernel.k < 1) throw ConfigError("kernel k must be >= 1");
    if (!(kernel.sigma > 0.0)) throw ConfigError("kernel sigma must be positive");
    if (lambda < 0.0 || lambda > 1.0) throw ConfigError("lambda must be in [0, 1]");
    if (!store.empty() && store.dim() != model.repr_dim()) {
        throw ConfigError("datastore dimension " + std::to_string(store.dim()) +
                          " does not match model representation dimension " +
                          std::to_string(model.repr_dim()));
    }
}

void PersonalizedPredictor::set_lambda(double lambda) {
    if (lambda < 0.0 || lambda > 1.0) throw ConfigError("lambda must be in [0, 1]");
    lambda_ = lambda;
}

std::vector<double> PersonalizedPredictor::predict(std::span<const double> x) const {
    ForwardResult fr = forward(*model_, x);
    std::vector<double> global_post = softmax(fr.logits);
    if (store_->empty()) return global_post;

    Neighborhood hood = knn_query(*store_, fr.repr, kernel_.k, kernel_.sigma);
    std::vector<double> knn_post = knn_posterior(hood, model_->num_classes());
    return interpolate(knn_post, global_post, lambda_);
}

double PersonalizedPredictor::evaluate(std::span<const Sample> test) const {
    if (test.empty()) throw InputError("evaluate: empty test set");
    std::size_t correct = 0;
    for (const auto& s : test) {
        if (argmax_class(predict(s.features)) == s.label) ++correct;
    }
    return static_cast<double>(correct) / static_cast<double>(test.size());
}

TuneResult tune_lambda(const Model& model, const Datastore& store, KernelConfig kernel,
                       std::span<const Sample> val, std::span<const double> grid) {
    if (val.empty()) throw InputError("tune_lambda: empty validation set");
    if (grid.empty()) throw ConfigError("lambda grid is empty");
    bool has_zero = false, has_one = false;
    for (double g : grid) {
        if (g < 0.0 || g > 1.0) throw ConfigError("lambda grid values must lie in [0, 1]");
        if (g == 0.0) has_zero = true;
        if (g == 1.0) has_one = true;
    }
    if (!has_zero || !has_one) throw ConfigError("lambda grid must contain both 0 and 1");
    if (!store.empty() && store.dim() != model.repr_dim()) {
        throw ConfigError("datastore dimension does not match model representation dimension");
    }

    // One kNN pass per sample, reused for every grid point.
    std::vector<std::vector<double>> knn_posts(val.size());
    std::vector<std::vector<double>> global_posts(val.size());
    for (std::size_t i = 0; i < val.size(); ++i) {
        ForwardResult fr = forward(model, val[i].features);
        global_posts[i] = softmax(fr.logits);
        if (store.empty()) {
            knn_posts[i] = global_posts[i]; // fallback: interpolation is a no-op
        } else {
            Neighborhood hood = knn_query(store, fr.repr, kernel.k, kernel.sigma);
            knn_posts[i] = knn_posterior(hood, model.num_classes());
        }
    }

    TuneResult best{grid.front(), -1.0};
    std::vector<double> ascending(grid.begin(), grid.end());
    std::sort(ascending.begin(), ascending.end());
    for (double lambda : ascending) {
        std::size_t correct = 0;
        for (std::size_t i = 0; i < val.size(); ++i) {
            // Mirror predict() exactly, including the empty-store fallback.
            const std::vector<double>& mixed =
                store.empty() ? global_posts[i]
                              : interpolate(knn_posts[i], global_posts[i], lambda);
            if (argmax_class(mixed) == val[i].label) ++correct;
        }
        const double acc = static_cast<double>(correct) / static_cast<double>(val.size());
        // Strict improvement only: ties keep the smaller lambda.
        if (acc > best.val_accuracy) best = TuneResult{lambda, acc};
    }
    return best;
}

} // namespace fedmem
