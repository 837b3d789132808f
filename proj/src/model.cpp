#include "qusec/model.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <map>
#include <random>
#include <sstream>
#include <stdexcept>

#include "qusec/container.hpp"
#include "qusec/errors.hpp"

namespace qusec {

std::string to_string(Defense d) {
    switch (d) {
        case Defense::none: return "none";
        case Defense::cq: return "cq";
        case Defense::tq: return "tq";
    }
    return "none";
}

std::string to_string(Loss l) { return l == Loss::mse ? "mse" : "cross_entropy"; }

Defense parse_defense(const std::string& s) {
    if (s == "none") return Defense::none;
    if (s == "cq") return Defense::cq;
    if (s == "tq") return Defense::tq;
    throw std::invalid_argument("unknown defense '" + s + "'");
}

Loss parse_loss(const std::string& s) {
    if (s == "mse") return Loss::mse;
    if (s == "cross_entropy" || s == "ce") return Loss::cross_entropy;
    throw std::invalid_argument("unknown loss '" + s + "'");
}

namespace {

std::string format_double(double v) {
    char buf[64];
    const auto res = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, res.ptr);
}

double parse_double(const std::string& s) {
    double v = 0.0;
    const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
    if (res.ec != std::errc{} || res.ptr != s.data() + s.size()) throw std::invalid_argument("bad number '" + s + "'");
    return v;
}

std::uint64_t parse_uint(const std::string& s) {
    std::uint64_t v = 0;
    const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
    if (res.ec != std::errc{} || res.ptr != s.data() + s.size()) throw std::invalid_argument("bad integer '" + s + "'");
    return v;
}

std::vector<std::string> split(const std::string& s, char sep) {
    std::vector<std::string> out;
    std::string cur;
    std::istringstream is(s);
    while (std::getline(is, cur, sep)) out.push_back(cur);
    return out;
}

// Maps 53 high bits of a 64-bit draw into [0,1); portable unlike std::uniform_real_distribution.
double unit_uniform(std::mt19937_64& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

void fill_uniform(Tensor& t, double limit, std::mt19937_64& rng) {
    for (double& v : t.values()) v = (2.0 * unit_uniform(rng) - 1.0) * limit;
}

Shape conv_output_shape(const Shape& in, const ConvSpec& c) {
    const Conv2dPlan p = plan_conv2d(in, {c.kernel, c.kernel, in[2], c.filters}, {c.filters}, c.geometry);
    return {p.out_h, p.out_w, p.out_c};
}

}  // namespace

std::string architecture_string(const std::vector<ConvSpec>& convs) {
    std::string out;
    for (std::size_t i = 0; i < convs.size(); ++i) {
        const auto& c = convs[i];
        if (i) out += ';';
        out += "conv:" + std::to_string(c.filters) + "x" + std::to_string(c.kernel) + "/s" +
               std::to_string(c.geometry.stride) + "/" + (c.geometry.padding == Padding::same ? "same" : "valid");
    }
    return out;
}

std::vector<ConvSpec> parse_architecture(const std::string& text) {
    std::vector<ConvSpec> convs;
    for (const auto& item : split(text, ';')) {
        if (item.rfind("conv:", 0) != 0) throw std::invalid_argument("architecture: expected 'conv:' in '" + item + "'");
        const auto parts = split(item.substr(5), '/');
        if (parts.size() != 3) throw std::invalid_argument("architecture: malformed layer '" + item + "'");
        const auto fk = split(parts[0], 'x');
        if (fk.size() != 2 || parts[1].empty() || parts[1][0] != 's') {
            throw std::invalid_argument("architecture: malformed layer '" + item + "'");
        }
        ConvSpec c;
        c.filters = parse_uint(fk[0]);
        c.kernel = parse_uint(fk[1]);
        c.geometry.stride = parse_uint(parts[1].substr(1));
        if (c.filters == 0 || c.kernel == 0 || c.geometry.stride == 0) {
            throw std::invalid_argument("architecture: filters, kernel and stride must be positive in '" + item + "'");
        }
        if (parts[2] == "same") {
            c.geometry.padding = Padding::same;
        } else if (parts[2] == "valid") {
            c.geometry.padding = Padding::valid;
        } else {
            throw std::invalid_argument("architecture: unknown padding '" + parts[2] + "'");
        }
        convs.push_back(c);
    }
    return convs;
}

std::vector<ConvSpec> default_architecture() {
    return {{64, 8, {2, Padding::same}}, {128, 6, {2, Padding::valid}}, {128, 5, {1, Padding::valid}}};
}

std::vector<ConvSpec> stride1_architecture() {
    return {{64, 8, {1, Padding::valid}}, {128, 6, {1, Padding::valid}}, {128, 5, {1, Padding::valid}}};
}

void ModelConfig::validate() const {
    if (input_shape.size() != 3 || shape_size(input_shape) == 0) {
        throw ShapeError("config: input shape must be [H,W,C] with positive extents");
    }
    if (classes < 2) throw std::invalid_argument("config: need at least 2 classes");
    if (convs.empty()) throw std::invalid_argument("config: architecture has no layers");
    if (defense != Defense::none) {
        if (levels < 2) throw std::invalid_argument("config: defense requires levels >= 2");
        if (!(steepness > 0.0) || !std::isfinite(steepness)) throw std::invalid_argument("config: defense requires z > 0");
    }
    Shape s = input_shape;
    for (std::size_t i = 0; i < convs.size(); ++i) {
        if (convs[i].filters == 0 || convs[i].kernel == 0) {
            throw std::invalid_argument("config: layer " + std::to_string(i) + " has zero filters or kernel");
        }
        try {
            s = conv_output_shape(s, convs[i]);
        } catch (const ShapeError& e) {
            throw ShapeError("config: layer " + std::to_string(i) + " does not fit input " + shape_string(s) + ": " +
                             e.what());
        }
    }
}

std::string ModelConfig::to_text() const {
    std::ostringstream os;
    os << "input_shape=" << input_shape[0] << ',' << input_shape[1] << ',' << input_shape[2] << '\n'
       << "defense=" << to_string(defense) << '\n'
       << "levels=" << levels << '\n'
       << "steepness=" << format_double(steepness) << '\n'
       << "per_pixel=" << (per_pixel_thresholds ? 1 : 0) << '\n'
       << "architecture=" << architecture_string(convs) << '\n'
       << "classes=" << classes << '\n'
       << "seed=" << seed << '\n'
       << "loss=" << to_string(loss) << '\n';
    return os.str();
}

ModelConfig ModelConfig::from_text(const std::string& text) {
    std::map<std::string, std::string> kv;
    for (const auto& line : split(text, '\n')) {
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw std::invalid_argument("config: malformed line '" + line + "'");
        kv[line.substr(0, eq)] = line.substr(eq + 1);
    }
    auto get = [&](const char* key) -> const std::string& {
        const auto it = kv.find(key);
        if (it == kv.end()) throw std::invalid_argument(std::string("config: missing key '") + key + "'");
        return it->second;
    };
    ModelConfig c;
    const auto dims = split(get("input_shape"), ',');
    if (dims.size() != 3) throw std::invalid_argument("config: input_shape needs three extents");
    c.input_shape = {parse_uint(dims[0]), parse_uint(dims[1]), parse_uint(dims[2])};
    c.defense = parse_defense(get("defense"));
    c.levels = parse_uint(get("levels"));
    c.steepness = parse_double(get("steepness"));
    c.per_pixel_thresholds = parse_uint(get("per_pixel")) != 0;
    c.convs = parse_architecture(get("architecture"));
    c.classes = parse_uint(get("classes"));
    c.seed = parse_uint(get("seed"));
    c.loss = parse_loss(get("loss"));
    c.validate();
    return c;
}

Model::Model(ModelConfig config, std::optional<Quantizer> quantizer, std::vector<ConvLayer> convs, Tensor dense_weights,
             Tensor dense_bias)
    : config_(std::move(config)),
      quantizer_(std::move(quantizer)),
      convs_(std::move(convs)),
      dense_weights_(std::move(dense_weights)),
      dense_bias_(std::move(dense_bias)) {}

Model build_model(const ModelConfig& config) {
    config.validate();
    std::mt19937_64 rng(config.seed);

    std::optional<Quantizer> quantizer;
    if (config.defense == Defense::cq) {
        quantizer = Quantizer::constant(config.levels, config.steepness);
    } else if (config.defense == Defense::tq) {
        quantizer = Quantizer::trainable(config.levels, config.steepness,
                                         config.per_pixel_thresholds ? std::optional<Shape>(config.input_shape)
                                                                     : std::nullopt);
    }

    std::vector<ConvLayer> convs;
    Shape s = config.input_shape;
    for (const auto& spec : config.convs) {
        ConvLayer layer{spec, Tensor({spec.kernel, spec.kernel, s[2], spec.filters}), Tensor({spec.filters})};
        const double fan_in = static_cast<double>(spec.kernel * spec.kernel * s[2]);
        const double fan_out = static_cast<double>(spec.kernel * spec.kernel * spec.filters);
        fill_uniform(layer.kernels, std::sqrt(6.0 / (fan_in + fan_out)), rng);
        s = conv_output_shape(s, spec);
        convs.push_back(std::move(layer));
    }
    const std::size_t flat = shape_size(s);
    Tensor w({config.classes, flat});
    fill_uniform(w, std::sqrt(6.0 / static_cast<double>(flat + config.classes)), rng);
    return Model(config, std::move(quantizer), std::move(convs), std::move(w), Tensor({config.classes}));
}

std::vector<std::pair<std::string, const Tensor*>> Model::named_parameters() const {
    std::vector<std::pair<std::string, const Tensor*>> out;
    for (std::size_t i = 0; i < convs_.size(); ++i) {
        out.emplace_back("conv" + std::to_string(i) + ".kernels", &convs_[i].kernels);
        out.emplace_back("conv" + std::to_string(i) + ".bias", &convs_[i].bias);
    }
    out.emplace_back("dense.weights", &dense_weights_);
    out.emplace_back("dense.bias", &dense_bias_);
    if (quantizer_) out.emplace_back("quantizer.thresholds", &quantizer_->thresholds());
    return out;
}

std::size_t Model::parameter_count() const {
    std::size_t n = 0;
    for (const auto& [name, t] : named_parameters()) n += t->size();
    return n;
}

ForwardCache Model::forward(const Tensor& image) const {
    if (image.shape() != config_.input_shape) {
        throw ShapeError("predict: image shape " + shape_string(image.shape()) + " does not match model input " +
                         shape_string(config_.input_shape));
    }
    ForwardCache c;
    c.input = image;
    c.quantized = quantizer_ ? quantize(image, *quantizer_) : image;
    const Tensor* a = &c.quantized;
    c.conv_out.reserve(convs_.size());
    for (const auto& layer : convs_) {
        Tensor z = conv2d(*a, layer.kernels, layer.bias, layer.spec.geometry);
        for (double& v : z.values()) v = v > 0.0 ? v : 0.0;
        c.conv_out.push_back(std::move(z));
        a = &c.conv_out.back();
    }
    c.flat = a->reshaped({a->size()});
    c.logits = dense(c.flat, dense_weights_, dense_bias_);
    c.probs = softmax(c.logits);
    return c;
}

Tensor Model::backward_to_quantized(const ForwardCache& cache, const Tensor& d_logits, ModelGrad* grad) const {
    const bool need_quantized = grad == nullptr || (grad->thresholds.has_value());
    if (grad) {
        const std::size_t cols = dense_weights_.extent(1);
        for (std::size_t m = 0; m < d_logits.size(); ++m) {
            const double u = d_logits[m];
            grad->dense_bias[m] += u;
            double* row = grad->dense_weights.data() + m * cols;
            for (std::size_t n = 0; n < cols; ++n) row[n] += u * cache.flat[n];
        }
    }
    Tensor delta = backprop_delta(d_logits, dense_weights_).reshaped(cache.conv_out.back().shape());

    for (std::size_t i = convs_.size(); i-- > 0;) {
        const Tensor& post = cache.conv_out[i];
        for (std::size_t j = 0; j < delta.size(); ++j) {
            if (!(post[j] > 0.0)) delta[j] = 0.0;
        }
        const Tensor& input = i == 0 ? cache.quantized : cache.conv_out[i - 1];
        const bool want_input = i > 0 || need_quantized;
        Tensor d_input = want_input ? Tensor(input.shape()) : Tensor();
        conv2d_backward_accumulate(input, convs_[i].kernels, delta, convs_[i].spec.geometry,
                                   want_input ? &d_input : nullptr, grad ? &grad->conv_kernels[i] : nullptr,
                                   grad ? &grad->conv_bias[i] : nullptr);
        delta = std::move(d_input);
    }
    return delta;
}

Tensor Model::input_gradient_from_logits(const ForwardCache& cache, const Tensor& d_logits) const {
    Tensor d = backward_to_quantized(cache, d_logits, nullptr);
    if (quantizer_) {
        const Tensor slope = quantize_grad_input(cache.input, *quantizer_);
        for (std::size_t i = 0; i < d.size(); ++i) d[i] *= slope[i];
    }
    return d;
}

Tensor Model::input_gradient_from_probs(const ForwardCache& cache, const Tensor& d_probs) const {
    return input_gradient_from_logits(cache, softmax_backward(cache.probs, d_probs));
}

ModelGrad Model::zero_grad() const {
    ModelGrad g;
    for (const auto& layer : convs_) {
        g.conv_kernels.emplace_back(layer.kernels.shape());
        g.conv_bias.emplace_back(layer.bias.shape());
    }
    g.dense_weights = Tensor(dense_weights_.shape());
    g.dense_bias = Tensor(dense_bias_.shape());
    if (quantizer_ && quantizer_->mode() == QuantizerMode::trainable) g.thresholds = Tensor(quantizer_->thresholds().shape());
    return g;
}

void Model::accumulate_gradients(const ForwardCache& cache, const Tensor& d_logits, ModelGrad& grad) const {
    const Tensor d_quantized = backward_to_quantized(cache, d_logits, &grad);
    if (grad.thresholds) {
        const Tensor g = threshold_gradient(cache.input, *quantizer_, d_quantized);
        for (std::size_t i = 0; i < g.size(); ++i) (*grad.thresholds)[i] += g[i];
    }
}

void Model::apply_gradients(const ModelGrad& grad, double learning_rate, double threshold_learning_rate) {
    for (std::size_t i = 0; i < convs_.size(); ++i) {
        sgd_update_in_place(convs_[i].kernels, grad.conv_kernels[i], learning_rate);
        sgd_update_in_place(convs_[i].bias, grad.conv_bias[i], learning_rate);
    }
    sgd_update_in_place(dense_weights_, grad.dense_weights, learning_rate);
    sgd_update_in_place(dense_bias_, grad.dense_bias, learning_rate);
    if (grad.thresholds && quantizer_) apply_threshold_gradient(*quantizer_, *grad.thresholds, threshold_learning_rate);
}

Tensor predict(const Model& model, const Tensor& image) { return model.forward(image).probs; }

std::size_t argmax(const Tensor& t) {
    return static_cast<std::size_t>(std::max_element(t.values().begin(), t.values().end()) - t.values().begin());
}

ScalarGrad loss_logit_gradient(Loss loss, const Tensor& probs, std::size_t label) {
    if (loss == Loss::mse) {
        ScalarGrad r = mse_cost(probs, one_hot(label, probs.size()));
        r.grad = softmax_backward(probs, r.grad);
        return r;
    }
    ScalarGrad r = cross_entropy(probs, label);
    // d(-log softmax_l)/d logits = P - onehot(l)
    r.grad = probs;
    r.grad[label] -= 1.0;
    return r;
}

namespace {

void scale(Tensor& t, double s) {
    for (double& v : t.values()) v *= s;
}

void scale(ModelGrad& g, double s) {
    for (auto& t : g.conv_kernels) scale(t, s);
    for (auto& t : g.conv_bias) scale(t, s);
    scale(g.dense_weights, s);
    scale(g.dense_bias, s);
    if (g.thresholds) scale(*g.thresholds, s);
}

void zero(ModelGrad& g) {
    auto z = [](Tensor& t) { std::fill(t.values().begin(), t.values().end(), 0.0); };
    for (auto& t : g.conv_kernels) z(t);
    for (auto& t : g.conv_bias) z(t);
    z(g.dense_weights);
    z(g.dense_bias);
    if (g.thresholds) z(*g.thresholds);
}

}  // namespace

TrainTrace train(Model& model, const Dataset& data, const TrainOptions& options, const BatchHook& hook) {
    if (data.size() == 0) throw std::invalid_argument("train: empty dataset");
    if (!(options.learning_rate > 0.0)) throw std::invalid_argument("train: learning rate must be positive");
    if (options.batch_size == 0) throw std::invalid_argument("train: batch size must be positive");
    if (data.image_shape() != model.config().input_shape) {
        throw ShapeError("train: dataset image shape " + shape_string(data.image_shape()) + " does not match model input " +
                         shape_string(model.config().input_shape));
    }
    const double threshold_lr = options.threshold_learning_rate.value_or(options.learning_rate);

    std::mt19937_64 rng(options.seed);
    std::vector<std::size_t> order(data.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

    TrainTrace trace;
    ModelGrad grad = model.zero_grad();
    for (std::size_t epoch = 0; epoch < options.epochs; ++epoch) {
        for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng() % i]);

        double loss_sum = 0.0;
        std::size_t correct = 0;
        for (std::size_t start = 0; start < order.size(); start += options.batch_size) {
            const std::size_t end = std::min(order.size(), start + options.batch_size);
            zero(grad);
            double batch_loss = 0.0;
            for (std::size_t j = start; j < end; ++j) {
                const std::size_t idx = order[j];
                const ForwardCache cache = model.forward(data.image(idx));
                const ScalarGrad lg = loss_logit_gradient(model.config().loss, cache.probs, data.label(idx));
                if (!std::isfinite(lg.value)) {
                    throw DivergenceError("train: non-finite loss at batch " + std::to_string(trace.batches) +
                                          " (epoch " + std::to_string(epoch) + ")");
                }
                batch_loss += lg.value;
                if (argmax(cache.probs) == data.label(idx)) ++correct;
                model.accumulate_gradients(cache, lg.grad, grad);
            }
            scale(grad, 1.0 / static_cast<double>(end - start));
            model.apply_gradients(grad, options.learning_rate, threshold_lr);
            loss_sum += batch_loss;
            trace.batch_losses.push_back(batch_loss / static_cast<double>(end - start));
            if (hook) hook(trace.batches, model);
            ++trace.batches;
        }

        EpochStats stats;
        stats.loss = loss_sum / static_cast<double>(data.size());
        stats.accuracy = static_cast<double>(correct) / static_cast<double>(data.size());
        if (model.quantizer()) {
            const auto t = model.quantizer()->thresholds().values();
            stats.threshold_min = *std::min_element(t.begin(), t.end());
            stats.threshold_max = *std::max_element(t.begin(), t.end());
        }
        trace.epochs.push_back(stats);
    }
    return trace;
}

namespace {

TensorContainer to_container(const Model& model) {
    TensorContainer c;
    c.header = model.config().to_text();
    for (const auto& [name, t] : model.named_parameters()) c.tensors.emplace_back(name, *t);
    return c;
}

}  // namespace

std::vector<std::uint8_t> encode_weights(const Model& model) { return encode_container(kWeightsMagic, to_container(model)); }

void save_weights(const Model& model, const std::filesystem::path& path) {
    write_container(path, kWeightsMagic, to_container(model));
}

namespace {

Model model_from_container(const TensorContainer& c) {
    if (c.version != 1) {
        throw FormatError(FormatError::Kind::bad_length, "unsupported weight file version " + std::to_string(c.version));
    }
    ModelConfig config;
    try {
        config = ModelConfig::from_text(c.header);
    } catch (const std::invalid_argument& e) {
        throw FormatError(FormatError::Kind::shape_mismatch, std::string("embedded config rejected: ") + e.what());
    }
    const Model skeleton = build_model(config);
    const auto expected = skeleton.named_parameters();
    if (c.tensors.size() != expected.size()) {
        throw FormatError(FormatError::Kind::shape_mismatch, "weight file holds " + std::to_string(c.tensors.size()) +
                                                                 " tensors, config expects " +
                                                                 std::to_string(expected.size()));
    }
    std::map<std::string, Tensor> found;
    for (std::size_t i = 0; i < expected.size(); ++i) {
        const auto& [name, t] = c.tensors[i];
        if (name != expected[i].first || t.shape() != expected[i].second->shape()) {
            throw FormatError(FormatError::Kind::shape_mismatch,
                              "tensor '" + name + "' " + shape_string(t.shape()) + " does not match config (expected '" +
                                  expected[i].first + "' " + shape_string(expected[i].second->shape()) + ")");
        }
        found.emplace(name, t);
    }

    std::vector<ConvLayer> convs = skeleton.convs();
    for (std::size_t i = 0; i < convs.size(); ++i) {
        convs[i].kernels = found.at("conv" + std::to_string(i) + ".kernels");
        convs[i].bias = found.at("conv" + std::to_string(i) + ".bias");
    }
    std::optional<Quantizer> q;
    if (skeleton.quantizer()) {
        try {
            q = Quantizer(config.levels, config.steepness, skeleton.quantizer()->mode(), found.at("quantizer.thresholds"));
        } catch (const std::exception& e) {
            throw FormatError(FormatError::Kind::shape_mismatch, std::string("quantizer rejected: ") + e.what());
        }
    }
    return Model(config, std::move(q), std::move(convs), found.at("dense.weights"), found.at("dense.bias"));
}

}  // namespace

Model decode_weights(const std::vector<std::uint8_t>& bytes) {
    return model_from_container(decode_container(kWeightsMagic, bytes));
}

Model load_weights(const std::filesystem::path& path) { return model_from_container(read_container(path, kWeightsMagic)); }

}  // namespace qusec
