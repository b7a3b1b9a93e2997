#ifndef FEDMEM_NN_HPP
#define FEDMEM_NN_HPP

#include <cstdint>
#include <span>
#include <vector>

#include "fedmem/sample.hpp"

namespace fedmem {

enum class Activation : std::uint32_t {
    relu = 0,
    identity = 1,
};

struct LayerSpec {
    int input_dim = 0;
    int output_dim = 0;
    Activation activation = Activation::relu;

    bool operator==(const LayerSpec&) const = default;
};

/// Fully-connected classifier with a designated representation layer.
///
/// Parameters are stored flat, per layer: row-major weights [out x in]
/// followed by the bias [out]. The network outputs raw logits; softmax is
/// applied by predict_proba / the loss. The post-activation output of
/// layers[repr_layer] is the embedding used as the kNN key space.
///
/// Instances are plain values: treat them as immutable after construction
/// and forward/predict calls are safe from any number of threads.
struct Model {
    std::vector<LayerSpec> layers;
    std::vector<double> params;
    int repr_layer = 0;

    int input_dim() const { return layers.front().input_dim; }
    int num_classes() const { return layers.back().output_dim; }
    int repr_dim() const { return layers[static_cast<std::size_t>(repr_layer)].output_dim; }
    std::size_t param_count() const { return params.size(); }
};

/// Flat gradient, same length and layout as Model::params.
struct Gradient {
    std::vector<double> values;
};

struct ForwardResult {
    std::vector<double> logits;
    std::vector<double> repr;
};

struct LossGrad {
    double loss = 0.0;
    Gradient grad;
};

/// Total parameter count of a layer chain: sum of (in + 1) * out.
std::size_t param_count(std::span<const LayerSpec> spec);

/// Seeded init: weights uniform in +-1/sqrt(fan_in), biases zero.
/// Throws ConfigError if the layers do not chain dimensionally, the final
/// activation is not identity, or repr_layer is out of range.
Model init_model(std::vector<LayerSpec> spec, int repr_layer, std::uint64_t seed);

/// Single forward pass returning logits and the representation.
ForwardResult forward(const Model& model, std::span<const double> x);

/// Numerically stable softmax (max subtraction).
std::vector<double> softmax(std::span<const double> logits);

/// softmax(logits) of a forward pass; always on the unit simplex.
std::vector<double> predict_proba(const Model& model, std::span<const double> x);

/// Mean cross-entropy over the batch and its gradient by backpropagation.
/// Probabilities are clamped at 1e-12 before the log.
LossGrad loss_and_grad(const Model& model, std::span<const Sample> batch);

/// Mean cross-entropy only (no gradient), for logging.
double mean_loss(const Model& model, std::span<const Sample> batch);

/// params <- params - lr * grad, as a new value.
Model sgd_step(const Model& model, const Gradient& grad, double lr);

/// In-place variant used by training loops.
void sgd_step_inplace(Model& model, const Gradient& grad, double lr);

/// Versioned little-endian binary: magic "FMNN", u32 version, u32 layer
/// count, per layer (u32 in, u32 out, u32 activation), then f32 params in
/// layer order. The representation layer index is not part of the format;
/// load_model defaults it to the last hidden layer unless overridden.
std::vector<std::uint8_t> save_model(const Model& model);
Model load_model(std::span<const std::uint8_t> bytes, int repr_layer = -1);

} // namespace fedmem

#endif
