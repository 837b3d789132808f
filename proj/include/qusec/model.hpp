#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "qusec/dataset.hpp"
#include "qusec/layers.hpp"
#include "qusec/quantizer.hpp"
#include "qusec/tensor.hpp"

namespace qusec {

enum class Defense { none, cq, tq };
enum class Loss { mse, cross_entropy };

std::string to_string(Defense d);
std::string to_string(Loss l);
Defense parse_defense(const std::string& s);
Loss parse_loss(const std::string& s);

/// One convolution followed by relu.
struct ConvSpec {
    std::size_t filters = 0;
    std::size_t kernel = 0;
    Conv2dGeometry geometry;

    friend bool operator==(const ConvSpec&, const ConvSpec&) = default;
};

/// "conv:64x8/s2/same;conv:128x6/s2/valid;..." and back.
std::string architecture_string(const std::vector<ConvSpec>& convs);
std::vector<ConvSpec> parse_architecture(const std::string& text);

/// Conv(64,8x8,stride 2,same) -> Conv(128,6x6,stride 2,valid) -> Conv(128,5x5,stride 1,valid).
std::vector<ConvSpec> default_architecture();
/// The same kernel sizes, all stride 1 with valid padding.
std::vector<ConvSpec> stride1_architecture();

struct ModelConfig {
    Shape input_shape{28, 28, 1};
    Defense defense = Defense::none;
    std::size_t levels = 2;
    double steepness = 50.0;
    bool per_pixel_thresholds = false;
    std::vector<ConvSpec> convs = default_architecture();
    std::size_t classes = 10;
    std::uint64_t seed = 0;
    Loss loss = Loss::mse;

    /// Throws std::invalid_argument / ShapeError on an inconsistent config.
    void validate() const;

    /// Canonical "key=value" lines in fixed order; doubles in shortest round-trip form.
    std::string to_text() const;
    static ModelConfig from_text(const std::string& text);

    friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

struct ConvLayer {
    ConvSpec spec;
    Tensor kernels;  // [K,K,Cin,Cout]
    Tensor bias;     // [Cout]
};

/// Intermediate values of one forward pass, kept for backpropagation.
struct ForwardCache {
    Tensor input;
    Tensor quantized;              // equals input when there is no defense
    std::vector<Tensor> conv_out;  // post-relu activations
    Tensor flat;
    Tensor logits;
    Tensor probs;
};

/// Gradient buffers matching the model's parameters.
struct ModelGrad {
    std::vector<Tensor> conv_kernels;
    std::vector<Tensor> conv_bias;
    Tensor dense_weights;
    Tensor dense_bias;
    std::optional<Tensor> thresholds;
};

/// Optional quantizer -> conv+relu stack -> flatten -> dense -> softmax.
class Model {
public:
    Model(ModelConfig config, std::optional<Quantizer> quantizer, std::vector<ConvLayer> convs, Tensor dense_weights,
          Tensor dense_bias);

    const ModelConfig& config() const noexcept { return config_; }
    const std::optional<Quantizer>& quantizer() const noexcept { return quantizer_; }
    std::optional<Quantizer>& quantizer() noexcept { return quantizer_; }
    const std::vector<ConvLayer>& convs() const noexcept { return convs_; }
    const Tensor& dense_weights() const noexcept { return dense_weights_; }
    const Tensor& dense_bias() const noexcept { return dense_bias_; }

    /// Named parameter tensors in a fixed order (convN.kernels, convN.bias,
    /// dense.weights, dense.bias, then quantizer.thresholds when present).
    std::vector<std::pair<std::string, const Tensor*>> named_parameters() const;
    std::size_t parameter_count() const;

    ForwardCache forward(const Tensor& image) const;

    /// d cost / d input pixels given d cost / d logits; differentiates through the quantizer.
    Tensor input_gradient_from_logits(const ForwardCache& cache, const Tensor& d_logits) const;
    Tensor input_gradient_from_probs(const ForwardCache& cache, const Tensor& d_probs) const;

    /// Adds this example's parameter gradients into `grad`. Threshold gradients
    /// are only accumulated for a trainable quantizer.
    void accumulate_gradients(const ForwardCache& cache, const Tensor& d_logits, ModelGrad& grad) const;

    ModelGrad zero_grad() const;
    /// Plain SGD on every parameter; thresholds use `threshold_learning_rate`
    /// and are clamped to [0,1].
    void apply_gradients(const ModelGrad& grad, double learning_rate, double threshold_learning_rate);

private:
    Tensor backward_to_quantized(const ForwardCache& cache, const Tensor& d_logits, ModelGrad* grad) const;

    ModelConfig config_;
    std::optional<Quantizer> quantizer_;
    std::vector<ConvLayer> convs_;
    Tensor dense_weights_;  // [classes, flat]
    Tensor dense_bias_;
};

/// Builds the layer stack and draws weights uniformly in +-sqrt(6/(fan_in+fan_out))
/// from a generator seeded by config.seed. Biases start at zero.
Model build_model(const ModelConfig& config);

/// Class probabilities for one [H,W,C] image.
Tensor predict(const Model& model, const Tensor& image);
std::size_t argmax(const Tensor& t);

/// Loss value at `label` and its gradient with respect to the logits.
ScalarGrad loss_logit_gradient(Loss loss, const Tensor& probs, std::size_t label);

struct TrainOptions {
    std::size_t epochs = 5;
    std::size_t batch_size = 64;
    double learning_rate = 0.01;
    std::optional<double> threshold_learning_rate;  // defaults to learning_rate
    std::uint64_t seed = 0;                         // shuffling
};

struct EpochStats {
    double loss = 0.0;
    double accuracy = 0.0;
    double threshold_min = 0.0;
    double threshold_max = 0.0;
};

struct TrainTrace {
    std::vector<EpochStats> epochs;
    std::vector<double> batch_losses;
    std::size_t batches = 0;
};

/// Called after every batch update with (batch index, model).
using BatchHook = std::function<void(std::size_t, const Model&)>;

/// Mini-batch SGD over a per-epoch shuffle of `data`. Thresholds of a TQ model
/// update every batch. Throws DivergenceError naming the batch on a non-finite loss.
TrainTrace train(Model& model, const Dataset& data, const TrainOptions& options, const BatchHook& hook = {});

void save_weights(const Model& model, const std::filesystem::path& path);
std::vector<std::uint8_t> encode_weights(const Model& model);
/// Throws FormatError: bad_magic, truncated (naming the tensor), shape_mismatch.
Model load_weights(const std::filesystem::path& path);
Model decode_weights(const std::vector<std::uint8_t>& bytes);

}  // namespace qusec
