#include "qusec/quantizer.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

#include "qusec/errors.hpp"

namespace qusec {
namespace {

// s(u) * s(-u), the sigmoid slope at u, without forming 1 - s(u).
double sigmoid_slope(double u) {
    const double e = std::exp(-std::abs(u));
    const double d = 1.0 + e;
    return e / (d * d);
}

void check_levels(std::size_t levels, double steepness) {
    if (levels < 2) throw std::invalid_argument("quantizer: level count must be >= 2, got " + std::to_string(levels));
    if (!(steepness > 0.0) || !std::isfinite(steepness)) {
        throw std::invalid_argument("quantizer: steepness must be positive and finite");
    }
}

// Threshold vector for pixel i: either the shared vector or the i-th row.
const double* thresholds_for(const Quantizer& q, std::size_t pixel) {
    return q.per_pixel() ? q.thresholds().data() + pixel * q.sigmoid_count() : q.thresholds().data();
}

void check_input(const Tensor& x, const Quantizer& q) {
    if (!q.per_pixel()) return;
    Shape expected = x.shape();
    expected.push_back(q.sigmoid_count());
    if (q.thresholds().shape() != expected) {
        throw ShapeError("quantize: per-pixel thresholds " + shape_string(q.thresholds().shape()) +
                         " do not match input " + shape_string(x.shape()));
    }
}

}  // namespace

double sigmoid_unit(double x, double threshold, double steepness) {
    const double u = steepness * (x - threshold);
    if (u >= 0.0) return 1.0 / (1.0 + std::exp(-u));
    const double e = std::exp(u);
    return e / (1.0 + e);
}

Tensor linear_thresholds(std::size_t levels) {
    if (levels < 2) throw std::invalid_argument("linear_thresholds: level count must be >= 2, got " + std::to_string(levels));
    Tensor t({levels - 1});
    for (std::size_t k = 1; k < levels; ++k) t[k - 1] = static_cast<double>(k) / static_cast<double>(levels);
    return t;
}

Quantizer::Quantizer(std::size_t levels, double steepness, QuantizerMode mode, Tensor thresholds)
    : levels_(levels), steepness_(steepness), mode_(mode), thresholds_(std::move(thresholds)) {
    check_levels(levels, steepness);
    if (thresholds_.empty() || thresholds_.shape().back() != levels - 1) {
        throw ShapeError("quantizer: threshold vector length must be n-1 = " + std::to_string(levels - 1));
    }
    if (thresholds_.rank() != 1 && thresholds_.rank() != 4) {
        throw ShapeError("quantizer: thresholds must be [n-1] or [H,W,C,n-1], got " + shape_string(thresholds_.shape()));
    }
    for (double t : thresholds_.values()) {
        if (!(t >= 0.0 && t <= 1.0)) throw std::invalid_argument("quantizer: thresholds must lie in [0,1]");
    }
}

Quantizer Quantizer::constant(std::size_t levels, double steepness) {
    check_levels(levels, steepness);
    return Quantizer(levels, steepness, QuantizerMode::constant, linear_thresholds(levels));
}

Quantizer Quantizer::trainable(std::size_t levels, double steepness, std::optional<Shape> per_pixel) {
    check_levels(levels, steepness);
    Tensor base = linear_thresholds(levels);
    if (!per_pixel) return Quantizer(levels, steepness, QuantizerMode::trainable, std::move(base));
    Shape shape = *per_pixel;
    if (shape.size() != 3) throw ShapeError("quantizer: per-pixel shape must be [H,W,C]");
    const std::size_t pixels = shape_size(shape);
    shape.push_back(levels - 1);
    Tensor t(shape);
    for (std::size_t i = 0; i < pixels; ++i) std::copy_n(base.data(), levels - 1, t.data() + i * (levels - 1));
    return Quantizer(levels, steepness, QuantizerMode::trainable, std::move(t));
}

Tensor quantize(const Tensor& x, const Quantizer& q) {
    check_input(x, q);
    const std::size_t m = q.sigmoid_count();
    const double z = q.steepness();
    Tensor y(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double* t = thresholds_for(q, i);
        double s = 0.0;
        for (std::size_t k = 0; k < m; ++k) s += sigmoid_unit(x[i], t[k], z);
        y[i] = s / static_cast<double>(m);
    }
    return y;
}

Tensor quantize_grad_input(const Tensor& x, const Quantizer& q) {
    check_input(x, q);
    const std::size_t m = q.sigmoid_count();
    const double z = q.steepness();
    const double scale = z / static_cast<double>(m);
    Tensor g(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double* t = thresholds_for(q, i);
        double s = 0.0;
        for (std::size_t k = 0; k < m; ++k) s += sigmoid_slope(z * (x[i] - t[k]));
        g[i] = scale * s;
    }
    return g;
}

Tensor quantize_grad_threshold(const Tensor& x, const Quantizer& q, std::size_t k) {
    check_input(x, q);
    const std::size_t m = q.sigmoid_count();
    if (k >= m) {
        throw std::out_of_range("quantize_grad_threshold: threshold index " + std::to_string(k) +
                                " out of range for " + std::to_string(m) + " thresholds");
    }
    const double z = q.steepness();
    const double scale = -z / static_cast<double>(m);
    Tensor g(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) g[i] = scale * sigmoid_slope(z * (x[i] - thresholds_for(q, i)[k]));
    return g;
}

Tensor threshold_gradient(const Tensor& x, const Quantizer& q, const Tensor& d_cost_dy) {
    require_same_shape(x, d_cost_dy, "threshold_gradient");
    check_input(x, q);
    const std::size_t m = q.sigmoid_count();
    const double z = q.steepness();
    const double scale = -z / static_cast<double>(m);
    Tensor g(q.thresholds().shape());
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double delta = d_cost_dy[i];
        if (delta == 0.0) continue;
        const double* t = thresholds_for(q, i);
        double* out = q.per_pixel() ? g.data() + i * m : g.data();
        for (std::size_t k = 0; k < m; ++k) out[k] += delta * scale * sigmoid_slope(z * (x[i] - t[k]));
    }
    return g;
}

void apply_threshold_gradient(Quantizer& q, const Tensor& grad, double learning_rate) {
    if (q.mode_ != QuantizerMode::trainable) {
        throw std::logic_error("update_thresholds: quantizer is in constant mode");
    }
    require_same_shape(q.thresholds_, grad, "update_thresholds");
    for (std::size_t i = 0; i < grad.size(); ++i) {
        q.thresholds_[i] = std::clamp(q.thresholds_[i] - learning_rate * grad[i], 0.0, 1.0);
    }
}

void update_thresholds(Quantizer& q, const Tensor& d_cost_dy, const Tensor& x, double learning_rate) {
    if (q.mode() != QuantizerMode::trainable) {
        throw std::logic_error("update_thresholds: quantizer is in constant mode");
    }
    apply_threshold_gradient(q, threshold_gradient(x, q, d_cost_dy), learning_rate);
}

}  // namespace qusec
