#include "qusec/attacks.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <limits>
#include <map>
#include <sstream>
#include <stdexcept>

#include "qusec/container.hpp"
#include "qusec/errors.hpp"

namespace qusec {

std::string to_string(AttackKind k) {
    switch (k) {
        case AttackKind::fgsm: return "fgsm";
        case AttackKind::jsma: return "jsma";
        case AttackKind::cw_l2: return "cw_l2";
    }
    return "fgsm";
}

AttackKind parse_attack_kind(const std::string& s) {
    if (s == "fgsm") return AttackKind::fgsm;
    if (s == "jsma") return AttackKind::jsma;
    if (s == "cw_l2" || s == "cw") return AttackKind::cw_l2;
    throw std::invalid_argument("unknown attack '" + s + "'");
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

void require_finite(const Tensor& t, const std::string& where) {
    if (!t.all_finite()) throw DivergenceError(where + ": non-finite gradient");
}

AdversarialExample finish(const Model& model, const Tensor& x, Tensor perturbed, std::size_t label,
                          std::size_t before) {
    AdversarialExample ex;
    ex.original = x;
    ex.true_label = label;
    ex.predicted_before = before;
    const Tensor p = predict(model, perturbed);
    ex.predicted_after = argmax(p);
    ex.confidence_after = p[ex.predicted_after];
    ex.perturbed = std::move(perturbed);
    ex.success = ex.predicted_after != label;
    return ex;
}

}  // namespace

void AttackSpec::validate() const {
    if (!(epsilon >= 0.0 && epsilon <= 1.0)) throw std::invalid_argument("attack: epsilon must lie in [0,1]");
    if (targeted && !target_class) throw std::invalid_argument("attack: targeted attack needs a target class");
    if (kind == AttackKind::jsma && !targeted) throw std::invalid_argument("jsma: only the targeted attack is supported");
    if (!(gamma >= 0.0 && gamma <= 1.0)) throw std::invalid_argument("attack: gamma must lie in [0,1]");
}

std::string AttackSpec::to_text() const {
    std::ostringstream os;
    os << "kind=" << to_string(kind) << ";epsilon=" << format_double(epsilon) << ";iterations=" << iterations
       << ";targeted=" << (targeted ? 1 : 0) << ";target=" << (target_class ? std::to_string(*target_class) : "-")
       << ";kappa=" << format_double(kappa) << ";c=" << format_double(c) << ";step=" << format_double(step_size)
       << ";theta=" << format_double(theta) << ";gamma=" << format_double(gamma);
    return os.str();
}

AttackSpec AttackSpec::from_text(const std::string& text) {
    std::map<std::string, std::string> kv;
    std::istringstream is(text);
    std::string item;
    while (std::getline(is, item, ';')) {
        const auto eq = item.find('=');
        if (eq == std::string::npos) throw std::invalid_argument("attack spec: malformed item '" + item + "'");
        kv[item.substr(0, eq)] = item.substr(eq + 1);
    }
    auto get = [&](const char* key) -> const std::string& {
        const auto it = kv.find(key);
        if (it == kv.end()) throw std::invalid_argument(std::string("attack spec: missing key '") + key + "'");
        return it->second;
    };
    AttackSpec s;
    s.kind = parse_attack_kind(get("kind"));
    s.epsilon = parse_double(get("epsilon"));
    s.iterations = static_cast<std::size_t>(parse_double(get("iterations")));
    s.targeted = get("targeted") == "1";
    if (get("target") != "-") s.target_class = static_cast<std::size_t>(parse_double(get("target")));
    s.kappa = parse_double(get("kappa"));
    s.c = parse_double(get("c"));
    s.step_size = parse_double(get("step"));
    s.theta = parse_double(get("theta"));
    s.gamma = parse_double(get("gamma"));
    return s;
}

std::size_t next_class_target(std::size_t label, std::size_t classes) { return (label + 1) % classes; }

AdversarialExample fgsm(const Model& model, const Tensor& x, std::size_t true_label, const AttackSpec& spec) {
    spec.validate();
    const ForwardCache cache = model.forward(x);
    const ScalarGrad lg = loss_logit_gradient(model.config().loss, cache.probs, true_label);
    const Tensor g = model.input_gradient_from_logits(cache, lg.grad);
    require_finite(g, "fgsm");

    Tensor adv = x;
    for (std::size_t i = 0; i < adv.size(); ++i) {
        const double s = g[i] > 0.0 ? 1.0 : (g[i] < 0.0 ? -1.0 : 0.0);
        adv[i] = std::clamp(x[i] + spec.epsilon * s, 0.0, 1.0);
    }
    AdversarialExample ex = finish(model, x, std::move(adv), true_label, argmax(cache.probs));
    ex.iterations = 1;
    return ex;
}

AdversarialExample jsma(const Model& model, const Tensor& x, std::size_t true_label, const AttackSpec& spec) {
    spec.validate();
    const std::size_t target = *spec.target_class;
    const std::size_t classes = model.config().classes;
    if (target >= classes) throw std::invalid_argument("jsma: target class out of range");
    if (target == true_label) throw std::invalid_argument("jsma: target class equals the true label");

    const bool increase = spec.theta > 0.0;
    const std::size_t budget = static_cast<std::size_t>(std::floor(spec.gamma * static_cast<double>(x.size())));

    Tensor adv = x;
    std::vector<std::size_t> domain;
    for (std::size_t i = 0; i < x.size(); ++i) {
        if (increase ? x[i] < 1.0 : x[i] > 0.0) domain.push_back(i);
    }

    ForwardCache cache = model.forward(adv);
    const std::size_t before = argmax(cache.probs);
    std::size_t modified = 0;
    std::size_t iter = 0;
    Tensor up_target({classes});
    Tensor up_others({classes}, 1.0);
    up_target[target] = 1.0;
    up_others[target] = 0.0;

    while (argmax(cache.probs) != target && iter < spec.iterations && modified < budget && !domain.empty()) {
        const Tensor alpha = model.input_gradient_from_probs(cache, up_target);
        const Tensor beta = model.input_gradient_from_probs(cache, up_others);
        require_finite(alpha, "jsma");
        require_finite(beta, "jsma");

        // Saliency of a set: a = sum alpha, b = sum beta; admissible when a
        // pushes the target up and b pushes the others down (mirrored when
        // decreasing pixels); score a * |b|.
        auto admissible = [&](double a, double b) { return increase ? (a > 0.0 && b < 0.0) : (a < 0.0 && b > 0.0); };
        double best = -1.0;
        std::size_t bp = 0, bq = 0;
        bool pair = false;
        if (budget - modified >= 2) {
            for (std::size_t i = 0; i < domain.size(); ++i) {
                const std::size_t p = domain[i];
                for (std::size_t j = i + 1; j < domain.size(); ++j) {
                    const std::size_t q = domain[j];
                    const double a = alpha[p] + alpha[q];
                    const double b = beta[p] + beta[q];
                    if (!admissible(a, b)) continue;
                    const double score = std::abs(a * b);
                    if (score > best) {
                        best = score;
                        bp = p;
                        bq = q;
                        pair = true;
                    }
                }
            }
        }
        if (!pair) {
            for (std::size_t p : domain) {
                if (!admissible(alpha[p], beta[p])) continue;
                const double score = std::abs(alpha[p] * beta[p]);
                if (score > best) {
                    best = score;
                    bp = p;
                }
            }
            if (best < 0.0) break;
        }

        std::vector<std::size_t> chosen{bp};
        if (pair) chosen.push_back(bq);
        for (std::size_t p : chosen) {
            adv[p] = std::clamp(adv[p] + spec.theta, 0.0, 1.0);
            domain.erase(std::find(domain.begin(), domain.end(), p));
            ++modified;
        }
        ++iter;
        cache = model.forward(adv);
    }

    AdversarialExample ex = finish(model, x, std::move(adv), true_label, before);
    ex.iterations = iter;
    ex.success = ex.predicted_after == target;
    return ex;
}

AdversarialExample cw_l2(const Model& model, const Tensor& x, std::size_t true_label, const AttackSpec& spec,
                         std::vector<double>* objective_trace) {
    spec.validate();
    const std::size_t classes = model.config().classes;
    const std::size_t target = spec.targeted ? *spec.target_class : true_label;
    if (target >= classes) throw std::invalid_argument("cw_l2: target class out of range");

    const ForwardCache initial = model.forward(x);
    const std::size_t before = argmax(initial.probs);
    if (spec.iterations == 0) {
        AdversarialExample ex = finish(model, x, x, true_label, before);
        ex.success = spec.targeted ? ex.predicted_after == target : ex.predicted_after != true_label;
        return ex;
    }

    constexpr double kShrink = 0.999999;
    const double inf = std::numeric_limits<double>::infinity();
    const std::size_t n = x.size();
    Tensor w(x.shape()), w_lo(x.shape()), w_hi(x.shape());
    for (std::size_t i = 0; i < n; ++i) {
        w[i] = std::atanh((2.0 * x[i] - 1.0) * kShrink);
        const double lo = std::max(0.0, x[i] - spec.epsilon);
        const double hi = std::min(1.0, x[i] + spec.epsilon);
        w_lo[i] = lo <= 0.0 ? -inf : std::atanh(2.0 * lo - 1.0);
        w_hi[i] = hi >= 1.0 ? inf : std::atanh(2.0 * hi - 1.0);
        w[i] = std::clamp(w[i], w_lo[i], w_hi[i]);
    }

    Tensor adv(x.shape());
    auto to_pixels = [&] {
        for (std::size_t i = 0; i < n; ++i) adv[i] = 0.5 * (std::tanh(w[i]) + 1.0);
    };

    // Margin term: targeted max_{i!=t} Z_i - Z_t; untargeted Z_y - max_{i!=y} Z_i.
    auto margin = [&](const Tensor& logits, std::size_t& other) {
        other = target == 0 ? 1 : 0;
        for (std::size_t i = 0; i < classes; ++i) {
            if (i != target && logits[i] > logits[other]) other = i;
        }
        return spec.targeted ? logits[other] - logits[target] : logits[target] - logits[other];
    };
    auto succeeded = [&](const Tensor& logits) {
        const std::size_t top = argmax(logits);
        return spec.targeted ? top == target : top != true_label;
    };

    std::optional<Tensor> best;
    double best_l2 = inf;
    for (std::size_t step = 0; step <= spec.iterations; ++step) {
        to_pixels();
        const ForwardCache cache = model.forward(adv);
        double l2 = 0.0;
        for (std::size_t i = 0; i < n; ++i) l2 += (adv[i] - x[i]) * (adv[i] - x[i]);
        std::size_t other = 0;
        const double m = margin(cache.logits, other);
        const double objective = l2 + spec.c * std::max(m, -spec.kappa);
        if (!std::isfinite(objective)) throw DivergenceError("cw_l2: non-finite objective at step " + std::to_string(step));
        if (objective_trace) objective_trace->push_back(objective);
        if (step > 0 && succeeded(cache.logits) && l2 < best_l2) {
            best_l2 = l2;
            best = adv;
        }
        if (step == spec.iterations) break;

        Tensor d_logits({classes});
        if (m > -spec.kappa) {
            const double sign = spec.targeted ? 1.0 : -1.0;
            d_logits[other] = sign * spec.c;
            d_logits[target] = -sign * spec.c;
        }
        Tensor g = model.input_gradient_from_logits(cache, d_logits);
        if (!g.all_finite()) throw DivergenceError("cw_l2: non-finite gradient at step " + std::to_string(step));
        for (std::size_t i = 0; i < n; ++i) {
            const double t = std::tanh(w[i]);
            const double d_pixel = 2.0 * (adv[i] - x[i]) + g[i];
            w[i] = std::clamp(w[i] - spec.step_size * d_pixel * 0.5 * (1.0 - t * t), w_lo[i], w_hi[i]);
        }
    }

    Tensor out = best ? *best : adv;
    for (std::size_t i = 0; i < n; ++i) {
        out[i] = std::clamp(x[i] + std::clamp(out[i] - x[i], -spec.epsilon, spec.epsilon), 0.0, 1.0);
    }
    AdversarialExample ex = finish(model, x, std::move(out), true_label, before);
    ex.iterations = spec.iterations;
    ex.success = spec.targeted ? ex.predicted_after == target : ex.predicted_after != true_label;
    return ex;
}

AdversarialExample run_attack(const Model& model, const Tensor& x, std::size_t true_label, const AttackSpec& spec) {
    switch (spec.kind) {
        case AttackKind::fgsm: return fgsm(model, x, true_label, spec);
        case AttackKind::jsma: return jsma(model, x, true_label, spec);
        case AttackKind::cw_l2: return cw_l2(model, x, true_label, spec);
    }
    throw std::logic_error("unreachable");
}

Tensor AdversarialBatch::original(std::size_t i) const {
    const std::size_t n = originals.size() / size();
    Shape s(originals.shape().begin() + 1, originals.shape().end());
    const auto first = originals.values().begin() + static_cast<std::ptrdiff_t>(i * n);
    return Tensor(std::move(s), std::vector<double>(first, first + static_cast<std::ptrdiff_t>(n)));
}

Tensor AdversarialBatch::adversarial(std::size_t i) const {
    const std::size_t n = perturbed.size() / size();
    Shape s(perturbed.shape().begin() + 1, perturbed.shape().end());
    const auto first = perturbed.values().begin() + static_cast<std::ptrdiff_t>(i * n);
    return Tensor(std::move(s), std::vector<double>(first, first + static_cast<std::ptrdiff_t>(n)));
}

AdversarialBatch attack_dataset(const Model& model, const Dataset& data, const AttackSpec& spec) {
    AdversarialBatch batch;
    batch.spec = spec;
    batch.originals = data.images();
    std::vector<double> perturbed;
    perturbed.reserve(data.images().size());
    for (std::size_t i = 0; i < data.size(); ++i) {
        AttackSpec s = spec;
        const std::size_t label = data.label(i);
        if (s.targeted || s.kind == AttackKind::jsma) {
            s.targeted = true;
            if (!s.target_class || *s.target_class == label) s.target_class = next_class_target(label, model.config().classes);
            batch.targets.push_back(*s.target_class);
        }
        const AdversarialExample ex = run_attack(model, data.image(i), label, s);
        perturbed.insert(perturbed.end(), ex.perturbed.values().begin(), ex.perturbed.values().end());
        batch.labels.push_back(label);
    }
    batch.perturbed = Tensor(data.images().shape(), std::move(perturbed));
    return batch;
}

void save_adversarial(const AdversarialBatch& batch, const std::filesystem::path& path) {
    TensorContainer c;
    c.header = batch.spec.to_text();
    c.tensors.emplace_back("original", batch.originals);
    c.tensors.emplace_back("perturbed", batch.perturbed);
    std::vector<double> labels(batch.labels.begin(), batch.labels.end());
    c.tensors.emplace_back("labels", Tensor({batch.labels.size()}, std::move(labels)));
    if (!batch.targets.empty()) {
        std::vector<double> targets(batch.targets.begin(), batch.targets.end());
        c.tensors.emplace_back("targets", Tensor({batch.targets.size()}, std::move(targets)));
    }
    write_container(path, kAdversarialMagic, c);
}

AdversarialBatch load_adversarial(const std::filesystem::path& path) {
    const TensorContainer c = read_container(path, kAdversarialMagic);
    AdversarialBatch b;
    try {
        b.spec = AttackSpec::from_text(c.header);
    } catch (const std::invalid_argument& e) {
        throw FormatError(FormatError::Kind::shape_mismatch, std::string("adversarial header rejected: ") + e.what());
    }
    b.originals = c.at("original");
    b.perturbed = c.at("perturbed");
    const Tensor& labels = c.at("labels");
    for (double v : labels.values()) b.labels.push_back(static_cast<std::size_t>(v));
    for (const auto& [name, t] : c.tensors) {
        if (name != "targets") continue;
        for (double v : t.values()) b.targets.push_back(static_cast<std::size_t>(v));
    }
    if (b.originals.shape() != b.perturbed.shape() || b.originals.rank() != 4 || b.originals.extent(0) != b.labels.size()) {
        throw FormatError(FormatError::Kind::shape_mismatch, "adversarial batch tensors disagree in shape");
    }
    return b;
}

}  // namespace qusec
