#pragma once

#include <cstddef>
#include <optional>

#include "qusec/tensor.hpp"

namespace qusec {

enum class QuantizerMode { constant, trainable };

/// Input-quantization defense layer. Each pixel x maps to the mean of n-1
/// sigmoids centred on the thresholds t_k:
///
///     y = 1/(n-1) * sum_k 1 / (1 + exp(-z (x - t_k)))
///
/// Thresholds are either one shared vector of length n-1, or one vector per
/// pixel (shape [H,W,C,n-1]). They stay inside [0,1]; in constant mode they
/// never change after construction.
class Quantizer {
public:
    /// Linear thresholds, frozen.
    static Quantizer constant(std::size_t levels, double steepness);
    /// Linear thresholds as a warm start. Pass an image shape for per-pixel thresholds.
    static Quantizer trainable(std::size_t levels, double steepness, std::optional<Shape> per_pixel = std::nullopt);
    /// Restores a quantizer with explicit thresholds (used by weight loading).
    Quantizer(std::size_t levels, double steepness, QuantizerMode mode, Tensor thresholds);

    std::size_t levels() const noexcept { return levels_; }
    double steepness() const noexcept { return steepness_; }
    QuantizerMode mode() const noexcept { return mode_; }
    const Tensor& thresholds() const noexcept { return thresholds_; }
    bool per_pixel() const noexcept { return thresholds_.rank() > 1; }
    std::size_t sigmoid_count() const noexcept { return levels_ - 1; }

    friend bool operator==(const Quantizer&, const Quantizer&) = default;

private:
    friend void apply_threshold_gradient(Quantizer& q, const Tensor& grad, double learning_rate);

    std::size_t levels_ = 2;
    double steepness_ = 1.0;
    QuantizerMode mode_ = QuantizerMode::constant;
    Tensor thresholds_;
};

/// 1 / (1 + e^(-z(x - t))), evaluated without overflow for large |z(x - t)|.
double sigmoid_unit(double x, double threshold, double steepness);

/// t_k = k/n for k = 1..n-1.
Tensor linear_thresholds(std::size_t levels);

Tensor quantize(const Tensor& x, const Quantizer& q);

/// dy/dx = z/(n-1) * sum_k y_k (1 - y_k). Strictly positive up to underflow.
Tensor quantize_grad_input(const Tensor& x, const Quantizer& q);

/// dy/dt_k = -z/(n-1) * y_k (1 - y_k) per pixel, for the 0-based threshold
/// index `k` (k < n-1). Per-pixel quantizers use each pixel's own t_k.
Tensor quantize_grad_threshold(const Tensor& x, const Quantizer& q, std::size_t k);

/// d cost / d thresholds given d cost / d y (the delta of the quantizer's
/// output). Shared thresholds sum the per-pixel contributions. The result has
/// the shape of q.thresholds().
Tensor threshold_gradient(const Tensor& x, const Quantizer& q, const Tensor& d_cost_dy);

/// t <- clamp(t - learning_rate * grad, 0, 1). Rejects constant-mode quantizers.
void apply_threshold_gradient(Quantizer& q, const Tensor& grad, double learning_rate);

/// One threshold step from a single delta: threshold_gradient then apply.
void update_thresholds(Quantizer& q, const Tensor& d_cost_dy, const Tensor& x, double learning_rate);

}  // namespace qusec
