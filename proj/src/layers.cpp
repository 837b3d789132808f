#include "qusec/layers.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

#include "qusec/errors.hpp"

namespace qusec {
namespace {

std::string dim_message(const char* op, const char* dim, std::size_t got, std::size_t want) {
    return std::string(op) + ": " + dim + " is " + std::to_string(got) + ", expected " + std::to_string(want);
}

void require_rank(const Shape& shape, std::size_t rank, const char* op, const char* operand) {
    if (shape.size() != rank) {
        throw ShapeError(std::string(op) + ": " + operand + " has rank " + std::to_string(shape.size()) +
                         ", expected " + std::to_string(rank));
    }
}

void same_padding(std::size_t in, std::size_t k, std::size_t stride, std::size_t& out, std::size_t& before) {
    out = (in + stride - 1) / stride;
    const std::size_t needed = (out - 1) * stride + k;
    const std::size_t total = needed > in ? needed - in : 0;
    before = total / 2;
}

}  // namespace

Conv2dPlan plan_conv2d(const Shape& input, const Shape& kernels, const Shape& bias, Conv2dGeometry geometry) {
    require_rank(input, 3, "conv2d", "input");
    require_rank(kernels, 4, "conv2d", "kernels");
    require_rank(bias, 1, "conv2d", "bias");
    if (geometry.stride == 0) throw ShapeError("conv2d: stride must be positive");

    Conv2dPlan p{};
    p.in_h = input[0];
    p.in_w = input[1];
    p.in_c = input[2];
    p.k_h = kernels[0];
    p.k_w = kernels[1];
    p.out_c = kernels[3];
    p.stride = geometry.stride;
    if (kernels[2] != p.in_c) throw ShapeError(dim_message("conv2d", "kernel input channels", kernels[2], p.in_c));
    if (bias[0] != p.out_c) throw ShapeError(dim_message("conv2d", "bias length", bias[0], p.out_c));

    if (geometry.padding == Padding::valid) {
        if (p.k_h > p.in_h) throw ShapeError(dim_message("conv2d", "kernel height", p.k_h, p.in_h));
        if (p.k_w > p.in_w) throw ShapeError(dim_message("conv2d", "kernel width", p.k_w, p.in_w));
        p.out_h = (p.in_h - p.k_h) / p.stride + 1;
        p.out_w = (p.in_w - p.k_w) / p.stride + 1;
        p.pad_top = p.pad_left = 0;
    } else {
        same_padding(p.in_h, p.k_h, p.stride, p.out_h, p.pad_top);
        same_padding(p.in_w, p.k_w, p.stride, p.out_w, p.pad_left);
    }
    return p;
}

Tensor conv2d(const Tensor& input, const Tensor& kernels, const Tensor& bias, Conv2dGeometry geometry) {
    const Conv2dPlan p = plan_conv2d(input.shape(), kernels.shape(), bias.shape(), geometry);
    Tensor out({p.out_h, p.out_w, p.out_c});
    const double* in = input.data();
    const double* w = kernels.data();
    const std::size_t cout = p.out_c;

    for (std::size_t oy = 0; oy < p.out_h; ++oy) {
        for (std::size_t ox = 0; ox < p.out_w; ++ox) {
            double* acc = out.data() + (oy * p.out_w + ox) * cout;
            std::copy_n(bias.data(), cout, acc);
            for (std::size_t ky = 0; ky < p.k_h; ++ky) {
                const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * p.stride + ky) -
                                          static_cast<std::ptrdiff_t>(p.pad_top);
                if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(p.in_h)) continue;
                for (std::size_t kx = 0; kx < p.k_w; ++kx) {
                    const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * p.stride + kx) -
                                              static_cast<std::ptrdiff_t>(p.pad_left);
                    if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(p.in_w)) continue;
                    const double* px = in + (static_cast<std::size_t>(iy) * p.in_w + static_cast<std::size_t>(ix)) * p.in_c;
                    const double* wk = w + (ky * p.k_w + kx) * p.in_c * cout;
                    for (std::size_t ci = 0; ci < p.in_c; ++ci) {
                        const double v = px[ci];
                        // relu activations and image background are mostly zero
                        if (v == 0.0) continue;
                        const double* wrow = wk + ci * cout;
#pragma omp simd
                        for (std::size_t co = 0; co < cout; ++co) acc[co] += v * wrow[co];
                    }
                }
            }
        }
    }
    return out;
}

void conv2d_backward_accumulate(const Tensor& input, const Tensor& kernels, const Tensor& upstream,
                                Conv2dGeometry geometry, Tensor* d_input, Tensor* d_kernels, Tensor* d_bias) {
    if (kernels.rank() != 4) throw ShapeError("conv2d: kernels has rank " + std::to_string(kernels.rank()) + ", expected 4");
    const Conv2dPlan p = plan_conv2d(input.shape(), kernels.shape(), {kernels.extent(3)}, geometry);
    if (upstream.shape() != Shape{p.out_h, p.out_w, p.out_c}) {
        throw ShapeError("conv2d: upstream shape " + shape_string(upstream.shape()) + " does not match output " +
                         shape_string({p.out_h, p.out_w, p.out_c}));
    }
    if (d_kernels) require_same_shape(*d_kernels, kernels, "conv2d d_kernels");
    if (d_bias && d_bias->shape() != Shape{p.out_c}) throw ShapeError("conv2d: d_bias length does not match Cout");
    if (d_input) require_same_shape(*d_input, input, "conv2d d_input");

    const double* in = input.data();
    const double* w = kernels.data();
    double* dw = d_kernels ? d_kernels->data() : nullptr;
    double* db = d_bias ? d_bias->data() : nullptr;
    double* din = d_input ? d_input->data() : nullptr;
    const std::size_t cout = p.out_c;

    for (std::size_t oy = 0; oy < p.out_h; ++oy) {
        for (std::size_t ox = 0; ox < p.out_w; ++ox) {
            const double* up = upstream.data() + (oy * p.out_w + ox) * cout;
            bool any = false;
            for (std::size_t co = 0; co < cout; ++co) {
                if (db) db[co] += up[co];
                any = any || up[co] != 0.0;
            }
            if (!any) continue;
            for (std::size_t ky = 0; ky < p.k_h; ++ky) {
                const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * p.stride + ky) -
                                          static_cast<std::ptrdiff_t>(p.pad_top);
                if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(p.in_h)) continue;
                for (std::size_t kx = 0; kx < p.k_w; ++kx) {
                    const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * p.stride + kx) -
                                              static_cast<std::ptrdiff_t>(p.pad_left);
                    if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(p.in_w)) continue;
                    const std::size_t pix = (static_cast<std::size_t>(iy) * p.in_w + static_cast<std::size_t>(ix)) * p.in_c;
                    const std::size_t wk = (ky * p.k_w + kx) * p.in_c * cout;
                    for (std::size_t ci = 0; ci < p.in_c; ++ci) {
                        const double v = in[pix + ci];
                        const double* wrow = w + wk + ci * cout;
                        if (din) {
                            double s = 0.0;
#pragma omp simd reduction(+ : s)
                            for (std::size_t co = 0; co < cout; ++co) s += wrow[co] * up[co];
                            din[pix + ci] += s;
                        }
                        if (!dw || v == 0.0) continue;
                        double* dwrow = dw + wk + ci * cout;
#pragma omp simd
                        for (std::size_t co = 0; co < cout; ++co) dwrow[co] += v * up[co];
                    }
                }
            }
        }
    }
}

LayerGrad conv2d_backward(const Tensor& input, const Tensor& kernels, const Tensor& upstream,
                          Conv2dGeometry geometry, bool with_params) {
    if (kernels.rank() != 4) throw ShapeError("conv2d: kernels has rank " + std::to_string(kernels.rank()) + ", expected 4");
    LayerGrad g;
    g.d_input = Tensor(input.shape());
    Tensor dk(kernels.shape());
    Tensor db({kernels.extent(3)});
    conv2d_backward_accumulate(input, kernels, upstream, geometry, &g.d_input, &dk, &db);
    if (with_params) {
        g.d_params.emplace("kernels", std::move(dk));
        g.d_params.emplace("bias", std::move(db));
    }
    return g;
}

namespace {

void check_dense(const Tensor& input, const Tensor& weights) {
    if (weights.rank() != 2) throw ShapeError("dense: weights has rank " + std::to_string(weights.rank()) + ", expected 2");
    if (input.rank() != 1) throw ShapeError("dense: input has rank " + std::to_string(input.rank()) + ", expected 1");
    if (weights.extent(1) != input.size()) {
        throw ShapeError(dim_message("dense", "input length", input.size(), weights.extent(1)));
    }
}

// d_input[n] = sum_m W[m,n] up[m]; shared by dense_backward and backprop_delta.
Tensor transpose_product(const Tensor& weights, const Tensor& upstream) {
    const std::size_t rows = weights.extent(0), cols = weights.extent(1);
    Tensor out({cols});
    for (std::size_t m = 0; m < rows; ++m) {
        const double u = upstream[m];
        const double* row = weights.data() + m * cols;
        for (std::size_t n = 0; n < cols; ++n) out[n] += row[n] * u;
    }
    return out;
}

}  // namespace

Tensor dense(const Tensor& input, const Tensor& weights, const Tensor& bias) {
    check_dense(input, weights);
    const std::size_t rows = weights.extent(0), cols = weights.extent(1);
    if (bias.rank() != 1 || bias.size() != rows) throw ShapeError(dim_message("dense", "bias length", bias.size(), rows));
    Tensor out({rows});
    for (std::size_t m = 0; m < rows; ++m) {
        const double* row = weights.data() + m * cols;
        double s = 0.0;
        for (std::size_t n = 0; n < cols; ++n) s += row[n] * input[n];
        out[m] = s + bias[m];
    }
    return out;
}

LayerGrad dense_backward(const Tensor& input, const Tensor& weights, const Tensor& upstream, bool with_params) {
    check_dense(input, weights);
    const std::size_t rows = weights.extent(0), cols = weights.extent(1);
    if (upstream.size() != rows) throw ShapeError(dim_message("dense", "upstream length", upstream.size(), rows));
    LayerGrad g;
    g.d_input = transpose_product(weights, upstream);
    if (with_params) {
        Tensor dw(weights.shape());
        for (std::size_t m = 0; m < rows; ++m) {
            for (std::size_t n = 0; n < cols; ++n) dw[m * cols + n] = upstream[m] * input[n];
        }
        g.d_params.emplace("weights", std::move(dw));
        g.d_params.emplace("bias", upstream.reshaped({rows}));
    }
    return g;
}

Tensor backprop_delta(const Tensor& upstream_deltas, const Tensor& weights) {
    if (weights.rank() != 2) throw ShapeError("backprop_delta: weights has rank " + std::to_string(weights.rank()) + ", expected 2");
    if (upstream_deltas.size() != weights.extent(0)) {
        throw ShapeError(dim_message("backprop_delta", "delta length", upstream_deltas.size(), weights.extent(0)));
    }
    return transpose_product(weights, upstream_deltas);
}

Tensor relu(const Tensor& x) {
    Tensor out = x;
    for (double& v : out.values()) v = v > 0.0 ? v : 0.0;
    return out;
}

Tensor relu_backward(const Tensor& x, const Tensor& upstream) {
    require_same_shape(x, upstream, "relu");
    Tensor out(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] > 0.0 ? upstream[i] : 0.0;
    return out;
}

Tensor softmax(const Tensor& logits) {
    if (logits.rank() != 1 || logits.size() < 2) throw ShapeError("softmax: logits must be a vector of length >= 2");
    const double top = *std::max_element(logits.values().begin(), logits.values().end());
    Tensor out(logits.shape());
    double sum = 0.0;
    for (std::size_t i = 0; i < logits.size(); ++i) {
        out[i] = std::exp(logits[i] - top);
        sum += out[i];
    }
    for (double& v : out.values()) v /= sum;
    return out;
}

Tensor softmax_backward(const Tensor& probs, const Tensor& upstream) {
    require_same_shape(probs, upstream, "softmax");
    // J_ij = P_i (delta_ij - P_j); (J^T u)_j = P_j (u_j - sum_i u_i P_i)
    double dot = 0.0;
    for (std::size_t i = 0; i < probs.size(); ++i) dot += upstream[i] * probs[i];
    Tensor out(probs.shape());
    for (std::size_t j = 0; j < probs.size(); ++j) out[j] = probs[j] * (upstream[j] - dot);
    return out;
}

ScalarGrad mse_cost(const Tensor& probs, const Tensor& truth) {
    if (probs.size() != truth.size()) throw ShapeError(dim_message("mse_cost", "truth length", truth.size(), probs.size()));
    const double classes = static_cast<double>(probs.size());
    ScalarGrad r;
    r.grad = Tensor(probs.shape());
    for (std::size_t c = 0; c < probs.size(); ++c) {
        const double d = probs[c] - truth[c];
        r.value += d * d;
        r.grad[c] = 2.0 * d / classes;
    }
    r.value /= classes;
    return r;
}

ScalarGrad cross_entropy(const Tensor& probs, std::size_t label) {
    if (label >= probs.size()) {
        throw std::out_of_range("cross_entropy: label " + std::to_string(label) + " out of range for " +
                                std::to_string(probs.size()) + " classes");
    }
    ScalarGrad r;
    r.grad = Tensor(probs.shape());
    const double p = probs[label];
    if (p > kProbabilityFloor) {
        r.value = -std::log(p);
        r.grad[label] = -1.0 / p;
    } else {
        r.value = -std::log(kProbabilityFloor);
    }
    return r;
}

Tensor one_hot(std::size_t label, std::size_t classes) {
    if (label >= classes) throw std::out_of_range("one_hot: label " + std::to_string(label) + " out of range");
    Tensor t({classes});
    t[label] = 1.0;
    return t;
}

Tensor sgd_update(const Tensor& param, const Tensor& grad, double learning_rate) {
    Tensor out = param;
    sgd_update_in_place(out, grad, learning_rate);
    return out;
}

void sgd_update_in_place(Tensor& param, const Tensor& grad, double learning_rate) {
    require_same_shape(param, grad, "sgd_update");
    if (!(learning_rate > 0.0)) throw std::invalid_argument("sgd_update: learning rate must be positive");
    for (std::size_t i = 0; i < param.size(); ++i) param[i] -= learning_rate * grad[i];
}

Tensor finite_difference_gradient(const std::function<double(const Tensor&)>& f, const Tensor& x, double h) {
    if (!(h > 0.0)) throw std::invalid_argument("finite_difference_gradient: step must be positive");
    Tensor grad(x.shape());
    Tensor probe = x;
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double orig = probe[i];
        probe[i] = orig + h;
        const double up = f(probe);
        probe[i] = orig - h;
        const double down = f(probe);
        probe[i] = orig;
        grad[i] = (up - down) / (2.0 * h);
    }
    return grad;
}

}  // namespace qusec
