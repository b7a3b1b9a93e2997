#ifndef FEDMEM_PERSONALIZE_HPP
#define FEDMEM_PERSONALIZE_HPP

#include <span>
#include <vector>

#include "fedmem/datastore.hpp"
#include "fedmem/nn.hpp"
#include "fedmem/sample.hpp"

namespace fedmem {

/// Retrieval kernel: neighbor count and the Euclidean distance scale.
struct KernelConfig {
    int k = 10;
    double sigma = 1.0;
};

/// Label posterior from a retrieved neighborhood: weight exp(-d_i) per
/// neighbor, summed by label and normalized onto the simplex. With a single
/// neighbor this is a one-hot on its label for every sigma.
std::vector<double> knn_posterior(const Neighborhood& neighborhood, int num_classes);

/// lambda * knn + (1 - lambda) * global; both inputs must lie on the simplex
/// (tolerance 1e-6) and lambda in [0, 1]. The endpoints reproduce their
/// operand exactly.
std::vector<double> interpolate(std::span<const double> knn_post,
                                std::span<const double> global_post, double lambda);

/// First index of the maximum value; ties resolve to the lowest class id.
int argmax_class(std::span<const double> probs);

/// Accuracy of the bare global model under the same argmax rule.
double model_accuracy(const Model& model, std::span<const Sample> samples);

/// The personalized decision rule: a global model, a client datastore, a
/// retrieval kernel, and a per-client mixing weight. Holds non-owning
/// references; the model and store must outlive the predictor. Predictors
/// are read-only over their inputs and safe to evaluate concurrently.
class PersonalizedPredictor {
public:
    PersonalizedPredictor(const Model& model, const Datastore& store, KernelConfig kernel,
                          double lambda);

    /// Embeds x, retrieves neighbors, and mixes the kNN posterior with the
    /// global output. An empty datastore falls back to the global model
    /// (the lambda -> 0 limit), which keeps unseen-client onboarding total.
    std::vector<double> predict(std::span<const double> x) const;

    /// Fraction of argmax-correct predictions.
    double evaluate(std::span<const Sample> test) const;

    double lambda() const { return lambda_; }
    void set_lambda(double lambda);
    const KernelConfig& kernel() const { return kernel_; }
    const Model& model() const { return *model_; }
    const Datastore& store() const { return *store_; }

private:
    const Model* model_;
    const Datastore* store_;
    KernelConfig kernel_;
    double lambda_;
};

struct TuneResult {
    double lambda = 0.0;
    double val_accuracy = 0.0;
};

/// Grid search for the mixing weight on validation data. Embeddings and
/// neighborhoods are computed once per sample and reused across the grid;
/// the argmax ties toward the smaller lambda. The grid must contain both
/// endpoints 0 and 1.
TuneResult tune_lambda(const Model& model, const Datastore& store, KernelConfig kernel,
                       std::span<const Sample> val, std::span<const double> grid);

} // namespace fedmem

#endif
