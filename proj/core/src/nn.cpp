#include "fedmem/nn.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "fedmem/errors.hpp"
#include "fedmem/rng.hpp"
#include "wire.hpp"

namespace fedmem {

namespace {

constexpr double kProbFloor = 1e-12;
constexpr std::uint32_t kModelMagic = 0x4E4E4D46u; // "FMNN" little-endian
constexpr std::uint32_t kModelVersion = 1;

void validate_spec(std::span<const LayerSpec> spec, int repr_layer) {
    if (spec.empty()) throw ConfigError("model spec has no layers");
    for (std::size_t i = 0; i < spec.size(); ++i) {
        if (spec[i].input_dim <= 0 || spec[i].output_dim <= 0) {
            throw ConfigError("layer " + std::to_string(i) + " has non-positive dimensions");
        }
        if (i + 1 < spec.size() && spec[i].output_dim != spec[i + 1].input_dim) {
            throw ConfigError("layer " + std::to_string(i) + " output_dim " +
                              std::to_string(spec[i].output_dim) + " does not match layer " +
                              std::to_string(i + 1) + " input_dim " +
                              std::to_string(spec[i + 1].input_dim));
        }
    }
    if (spec.back().activation != Activation::identity) {
        throw ConfigError("final layer activation must be identity (softmax lives in the loss)");
    }
    if (repr_layer < 0 || static_cast<std::size_t>(repr_layer) >= spec.size()) {
        throw ConfigError("repr_layer " + std::to_string(repr_layer) + " out of range for " +
                          std::to_string(spec.size()) + " layers");
    }
}

double apply_activation(Activation act, double z) {
    return act == Activation::relu ? (z > 0.0 ? z : 0.0) : z;
}

double activation_grad(Activation act, double z) {
    return act == Activation::relu ? (z > 0.0 ? 1.0 : 0.0) : 1.0;
}

struct LayerOffsets {
    std::size_t weights;
    std::size_t bias;
};

LayerOffsets offsets_of(const Model& m, std::size_t layer) {
    std::size_t off = 0;
    for (std::size_t l = 0; l < layer; ++l) {
        off += static_cast<std::size_t>(m.layers[l].input_dim + 1) * m.layers[l].output_dim;
    }
    std::size_t wsize =
        static_cast<std::size_t>(m.layers[layer].input_dim) * m.layers[layer].output_dim;
    return {off, off + wsize};
}

/// Pre- and post-activation values for every layer of one input.
struct Trace {
    std::vector<std::vector<double>> pre;  // z per layer
    std::vector<std::vector<double>> post; // act(z) per layer
};

Trace traced_forward(const Model& m, std::span<const double> x) {
    Trace t;
    t.pre.resize(m.layers.size());
    t.post.resize(m.layers.size());
    const double* in = x.data();
    std::size_t off = 0;
    for (std::size_t l = 0; l < m.layers.size(); ++l) {
        const auto& spec = m.layers[l];
        const std::size_t nin = static_cast<std::size_t>(spec.input_dim);
        const std::size_t nout = static_cast<std::size_t>(spec.output_dim);
        const double* w = m.params.data() + off;
        const double* b = w + nin * nout;
        auto& z = t.pre[l];
        auto& a = t.post[l];
        z.resize(nout);
        a.resize(nout);
        for (std::size_t j = 0; j < nout; ++j) {
            double acc = b[j];
            const double* wrow = w + j * nin;
            for (std::size_t i = 0; i < nin; ++i) acc += wrow[i] * in[i];
            z[j] = acc;
            a[j] = apply_activation(spec.activation, acc);
        }
        in = a.data();
        off += (nin + 1) * nout;
    }
    return t;
}

void check_input(const Model& m, std::span<const double> x) {
    if (static_cast<int>(x.size()) != m.input_dim()) {
        throw InputError("input has " + std::to_string(x.size()) + " features, model expects " +
                         std::to_string(m.input_dim()));
    }
}

} // namespace

std::size_t param_count(std::span<const LayerSpec> spec) {
    std::size_t n = 0;
    for (const auto& l : spec) {
        n += static_cast<std::size_t>(l.input_dim + 1) * l.output_dim;
    }
    return n;
}

Model init_model(std::vector<LayerSpec> spec, int repr_layer, std::uint64_t seed) {
    validate_spec(spec, repr_layer);
    Model m;
    m.layers = std::move(spec);
    m.repr_layer = repr_layer;
    m.params.assign(param_count(m.layers), 0.0);
    Rng rng(seed);
    std::size_t off = 0;
    for (const auto& layer : m.layers) {
        const std::size_t nw =
            static_cast<std::size_t>(layer.input_dim) * layer.output_dim;
        const double bound = 1.0 / std::sqrt(static_cast<double>(layer.input_dim));
        for (std::size_t i = 0; i < nw; ++i) m.params[off + i] = rng.uniform(-bound, bound);
        off += nw + static_cast<std::size_t>(layer.output_dim); // biases stay zero
    }
    return m;
}

ForwardResult forward(const Model& model, std::span<const double> x) {
    check_input(model, x);
    Trace t = traced_forward(model, x);
    ForwardResult r;
    r.logits = t.post.back();
    r.repr = t.post[static_cast<std::size_t>(model.repr_layer)];
    return r;
}

std::vector<double> softmax(std::span<const double> logits) {
    std::vector<double> p(logits.size());
    double mx = *std::max_element(logits.begin(), logits.end());
    double total = 0.0;
    for (std::size_t i = 0; i < logits.size(); ++i) {
        p[i] = std::exp(logits[i] - mx);
        total += p[i];
    }
    for (auto& v : p) v /= total;
    return p;
}

std::vector<double> predict_proba(const Model& model, std::span<const double> x) {
    return softmax(forward(model, x).logits);
}

LossGrad loss_and_grad(const Model& model, std::span<const Sample> batch) {
    if (batch.empty()) throw InputError("loss_and_grad: empty batch");
    const int num_classes = model.num_classes();
    const std::size_t num_layers = model.layers.size();

    LossGrad out;
    out.grad.values.assign(model.params.size(), 0.0);
    double loss_sum = 0.0;

    std::vector<double> delta, delta_prev;
    for (const auto& sample : batch) {
        if (sample.label < 0 || sample.label >= num_classes) {
            throw InputError("label " + std::to_string(sample.label) + " outside [0, " +
                             std::to_string(num_classes) + ")");
        }
        check_input(model, sample.features);
        Trace t = traced_forward(model, sample.features);

        std::vector<double> p = softmax(t.post.back());
        loss_sum += -std::log(std::max(p[static_cast<std::size_t>(sample.label)], kProbFloor));

        // dL/dlogits for cross-entropy after softmax.
        delta = std::move(p);
        delta[static_cast<std::size_t>(sample.label)] -= 1.0;

        for (std::size_t l = num_layers; l-- > 0;) {
            const auto& spec = model.layers[l];
            const std::size_t nin = static_cast<std::size_t>(spec.input_dim);
            const std::size_t nout = static_cast<std::size_t>(spec.output_dim);
            const auto off = offsets_of(model, l);
            const double* w = model.params.data() + off.weights;
            double* gw = out.grad.values.data() + off.weights;
            double* gb = out.grad.values.data() + off.bias;
            const double* a_in = l == 0 ? sample.features.data() : t.post[l - 1].data();

            for (std::size_t j = 0; j < nout; ++j) {
                const double d = delta[j];
                double* grow = gw + j * nin;
                for (std::size_t i = 0; i < nin; ++i) grow[i] += d * a_in[i];
                gb[j] += d;
            }
            if (l == 0) break;

            delta_prev.assign(nin, 0.0);
            for (std::size_t j = 0; j < nout; ++j) {
                const double d = delta[j];
                const double* wrow = w + j * nin;
                for (std::size_t i = 0; i < nin; ++i) delta_prev[i] += wrow[i] * d;
            }
            const auto& z_prev = t.pre[l - 1];
            for (std::size_t i = 0; i < nin; ++i) {
                delta_prev[i] *= activation_grad(model.layers[l - 1].activation, z_prev[i]);
            }
            delta = delta_prev;
        }
    }

    const double inv_b = 1.0 / static_cast<double>(batch.size());
    out.loss = loss_sum * inv_b;
    for (auto& g : out.grad.values) g *= inv_b;
    return out;
}

double mean_loss(const Model& model, std::span<const Sample> batch) {
    if (batch.empty()) throw InputError("mean_loss: empty batch");
    double total = 0.0;
    for (const auto& sample : batch) {
        auto p = predict_proba(model, sample.features);
        total += -std::log(std::max(p[static_cast<std::size_t>(sample.label)], kProbFloor));
    }
    return total / static_cast<double>(batch.size());
}

Model sgd_step(const Model& model, const Gradient& grad, double lr) {
    Model next = model;
    sgd_step_inplace(next, grad, lr);
    return next;
}

void sgd_step_inplace(Model& model, const Gradient& grad, double lr) {
    if (grad.values.size() != model.params.size()) {
        throw ConfigError("gradient length " + std::to_string(grad.values.size()) +
                          " does not match parameter count " + std::to_string(model.params.size()));
    }
    if (lr < 0.0) throw ConfigError("learning rate must be non-negative");
    for (std::size_t i = 0; i < model.params.size(); ++i) {
        model.params[i] -= lr * grad.values[i];
    }
}

std::vector<std::uint8_t> save_model(const Model& model) {
    std::vector<std::uint8_t> out;
    out.reserve(16 + model.layers.size() * 12 + model.params.size() * 4);
    wire::put_u32(out, kModelMagic);
    wire::put_u32(out, kModelVersion);
    wire::put_u32(out, static_cast<std::uint32_t>(model.layers.size()));
    for (const auto& l : model.layers) {
        wire::put_u32(out, static_cast<std::uint32_t>(l.input_dim));
        wire::put_u32(out, static_cast<std::uint32_t>(l.output_dim));
        wire::put_u32(out, static_cast<std::uint32_t>(l.activation));
    }
    for (double p : model.params) wire::put_f32(out, static_cast<float>(p));
    return out;
}

Model load_model(std::span<const std::uint8_t> bytes, int repr_layer) {
    wire::Reader r(bytes);
    if (r.u32() != kModelMagic) throw FormatError("bad model magic, expected \"FMNN\"");
    const std::uint32_t version = r.u32();
    if (version != kModelVersion) {
        throw FormatError("unsupported model format version " + std::to_string(version));
    }
    const std::uint32_t num_layers = r.u32();
    if (num_layers == 0) throw FormatError("model has no layers");
    std::vector<LayerSpec> spec(num_layers);
    for (auto& l : spec) {
        l.input_dim = static_cast<int>(r.u32());
        l.output_dim = static_cast<int>(r.u32());
        std::uint32_t act = r.u32();
        if (act > static_cast<std::uint32_t>(Activation::identity)) {
            throw FormatError("unknown activation code " + std::to_string(act));
        }
        l.activation = static_cast<Activation>(act);
    }
    if (repr_layer < 0) {
        repr_layer = num_layers >= 2 ? static_cast<int>(num_layers) - 2 : 0;
    }
    validate_spec(spec, repr_layer);

    Model m;
    m.layers = std::move(spec);
    m.repr_layer = repr_layer;
    const std::size_t n = param_count(m.layers);
    if (r.remaining() != n * 4) throw FormatError("parameter payload size mismatch");
    m.params.resize(n);
    for (auto& p : m.params) p = static_cast<double>(r.f32());
    return m;
}

} // namespace fedmem
