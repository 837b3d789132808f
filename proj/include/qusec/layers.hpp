#pragma once

#include <cstddef>
#include <functional>

#include "qusec/tensor.hpp"

namespace qusec {

enum class Padding { valid, same };

/// Stride and padding of a 2-D convolution. The default is valid padding, stride 1.
/// `same` follows the usual convention: output extent ceil(in / stride), with the
/// odd leftover padding row/column placed after the image.
struct Conv2dGeometry {
    std::size_t stride = 1;
    Padding padding = Padding::valid;

    friend bool operator==(const Conv2dGeometry&, const Conv2dGeometry&) = default;
};

struct Conv2dPlan {
    std::size_t in_h, in_w, in_c;
    std::size_t k_h, k_w, out_c;
    std::size_t out_h, out_w;
    std::size_t pad_top, pad_left;
    std::size_t stride;
};

/// Validates operand shapes and resolves output extents and padding offsets.
/// input [H,W,Cin], kernels [Kh,Kw,Cin,Cout], bias [Cout].
Conv2dPlan plan_conv2d(const Shape& input, const Shape& kernels, const Shape& bias, Conv2dGeometry geometry);

Tensor conv2d(const Tensor& input, const Tensor& kernels, const Tensor& bias, Conv2dGeometry geometry = {});

/// d_params holds "kernels" and "bias" unless `with_params` is false.
LayerGrad conv2d_backward(const Tensor& input, const Tensor& kernels, const Tensor& upstream,
                          Conv2dGeometry geometry = {}, bool with_params = true);

/// Accumulating form used by the trainer: adds into caller-owned gradient
/// buffers. Any of the outputs may be null when that gradient is not needed.
void conv2d_backward_accumulate(const Tensor& input, const Tensor& kernels, const Tensor& upstream,
                                Conv2dGeometry geometry, Tensor* d_input, Tensor* d_kernels, Tensor* d_bias);

/// W [M,N], input [N], bias [M]. Output W·input + b.
Tensor dense(const Tensor& input, const Tensor& weights, const Tensor& bias);
LayerGrad dense_backward(const Tensor& input, const Tensor& weights, const Tensor& upstream, bool with_params = true);

/// delta_k = sum_j w_jk * delta_j for W of shape [J,K].
Tensor backprop_delta(const Tensor& upstream_deltas, const Tensor& weights);

Tensor relu(const Tensor& x);
/// Gradient is zero where x <= 0.
Tensor relu_backward(const Tensor& x, const Tensor& upstream);

Tensor softmax(const Tensor& logits);
/// Vector-Jacobian product of softmax, taking the forward output `probs`.
Tensor softmax_backward(const Tensor& probs, const Tensor& upstream);

struct ScalarGrad {
    double value = 0.0;
    Tensor grad;
};

/// (1/C) sum_c (P(c) - P'(c))^2 and its gradient in P.
ScalarGrad mse_cost(const Tensor& probs, const Tensor& truth);

inline constexpr double kProbabilityFloor = 1e-12;

/// -log P(label), with P floored at kProbabilityFloor.
ScalarGrad cross_entropy(const Tensor& probs, std::size_t label);

Tensor one_hot(std::size_t label, std::size_t classes);

Tensor sgd_update(const Tensor& param, const Tensor& grad, double learning_rate);
void sgd_update_in_place(Tensor& param, const Tensor& grad, double learning_rate);

/// Central differences (f(x + h e_i) - f(x - h e_i)) / 2h for every coordinate.
Tensor finite_difference_gradient(const std::function<double(const Tensor&)>& f, const Tensor& x, double h);

}  // namespace qusec
