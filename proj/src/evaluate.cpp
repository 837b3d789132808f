#include "qusec/evaluate.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <stdexcept>

#include "qusec/errors.hpp"

namespace qusec {

PerturbationStats perturbation_stats(const Tensor& originals, const Tensor& perturbed) {
    require_same_shape(originals, perturbed, "perturbation_stats");
    if (originals.rank() < 2) throw ShapeError("perturbation_stats: expected a batch [N,...]");
    const std::size_t count = originals.extent(0);
    const std::size_t per = originals.size() / count;
    PerturbationStats s;
    for (std::size_t i = 0; i < count; ++i) {
        double sq = 0.0;
        std::size_t changed = 0;
        for (std::size_t j = i * per; j < (i + 1) * per; ++j) {
            const double d = std::abs(perturbed[j] - originals[j]);
            sq += d * d;
            s.linf_max = std::max(s.linf_max, d);
            if (d > 1e-6) ++changed;
        }
        s.l2_mean += std::sqrt(sq);
        s.l0_mean += static_cast<double>(changed) / static_cast<double>(per);
    }
    s.l2_mean /= static_cast<double>(count);
    s.l0_mean /= static_cast<double>(count);
    return s;
}

EvalReport evaluate(const Model& model, const Dataset& data, const AdversarialBatch* adversarial) {
    if (data.image_shape() != model.config().input_shape) {
        throw ShapeError("evaluate: dataset image shape " + shape_string(data.image_shape()) +
                         " does not match model input " + shape_string(model.config().input_shape));
    }
    if (adversarial && (adversarial->size() != data.size() || adversarial->perturbed.shape() != data.images().shape())) {
        throw ShapeError("evaluate: adversarial batch " + shape_string(adversarial->perturbed.shape()) +
                         " does not match dataset " + shape_string(data.images().shape()));
    }
    const std::size_t classes = model.config().classes;
    EvalReport r;
    r.samples = data.size();
    r.per_class_accuracy.assign(classes, 0.0);
    r.per_class_count.assign(classes, 0);

    std::size_t clean_correct = 0, adv_correct = 0, n_correct = 0, n_incorrect = 0;
    double conf_correct = 0.0, conf_incorrect = 0.0;
    for (std::size_t i = 0; i < data.size(); ++i) {
        const std::size_t label = data.label(i);
        const Tensor p_clean = predict(model, data.image(i));
        const bool clean_ok = argmax(p_clean) == label;
        clean_correct += clean_ok;

        const Tensor p = adversarial ? predict(model, adversarial->adversarial(i)) : p_clean;
        const std::size_t top = argmax(p);
        const bool ok = top == label;
        adv_correct += ok;
        if (ok) {
            ++n_correct;
            conf_correct += p[top];
        } else {
            ++n_incorrect;
            conf_incorrect += p[top];
        }
        if (label < classes) {
            ++r.per_class_count[label];
            r.per_class_accuracy[label] += ok;
        }
    }
    const double n = static_cast<double>(data.size());
    r.clean_accuracy = static_cast<double>(clean_correct) / n;
    r.adv_accuracy = static_cast<double>(adv_correct) / n;
    r.mean_confidence_correct = n_correct ? conf_correct / static_cast<double>(n_correct) : 0.0;
    r.mean_confidence_incorrect = n_incorrect ? conf_incorrect / static_cast<double>(n_incorrect) : 0.0;
    for (std::size_t c = 0; c < classes; ++c) {
        if (r.per_class_count[c]) r.per_class_accuracy[c] /= static_cast<double>(r.per_class_count[c]);
    }

    const ModelConfig& cfg = model.config();
    r.defense = to_string(cfg.defense);
    r.levels = cfg.defense == Defense::none ? 0 : cfg.levels;
    r.steepness = cfg.defense == Defense::none ? 0.0 : cfg.steepness;
    if (adversarial) {
        r.perturbation = perturbation_stats(adversarial->originals, adversarial->perturbed);
        r.attack = adversarial->spec.to_text();
        if (adversarial->spec.kind != AttackKind::jsma) r.epsilon = adversarial->spec.epsilon;
    }
    return r;
}

Dataset batch_dataset(const AdversarialBatch& batch, const std::string& name) {
    std::vector<std::uint8_t> labels(batch.labels.begin(), batch.labels.end());
    return Dataset(name, Split::test, batch.originals, std::move(labels));
}

EvalReport transfer_attack(const Model& substitute, const Model& victim, const AttackSpec& spec, const Dataset& data) {
    if (substitute.config().input_shape != victim.config().input_shape) {
        throw ShapeError("transfer_attack: substitute input " + shape_string(substitute.config().input_shape) +
                         " differs from victim input " + shape_string(victim.config().input_shape));
    }
    const AdversarialBatch batch = attack_dataset(substitute, data, spec);
    return evaluate(victim, data, &batch);
}

nlohmann::json to_json(const EvalReport& r) {
    nlohmann::json j;
    j["schema_version"] = kReportSchemaVersion;
    j["samples"] = r.samples;
    j["clean_accuracy"] = r.clean_accuracy;
    j["adv_accuracy"] = r.adv_accuracy;
    j["mean_confidence_correct"] = r.mean_confidence_correct;
    j["mean_confidence_incorrect"] = r.mean_confidence_incorrect;
    j["l2_mean"] = r.perturbation.l2_mean;
    j["linf_max"] = r.perturbation.linf_max;
    j["l0_mean"] = r.perturbation.l0_mean;
    j["per_class_accuracy"] = r.per_class_accuracy;
    j["per_class_count"] = r.per_class_count;
    j["config"] = {{"defense", r.defense},
                   {"levels", r.levels},
                   {"steepness", r.steepness},
                   {"attack", r.attack ? nlohmann::json(*r.attack) : nlohmann::json(nullptr)},
                   {"epsilon", r.epsilon ? nlohmann::json(*r.epsilon) : nlohmann::json(nullptr)}};
    return j;
}

void validate_report_json(const nlohmann::json& j) {
    auto need = [&](const nlohmann::json& obj, const char* key, auto check, const char* type) {
        if (!obj.contains(key) || !check(obj.at(key))) {
            throw std::invalid_argument(std::string("report: key '") + key + "' missing or not " + type);
        }
    };
    const auto is_number = [](const nlohmann::json& v) { return v.is_number(); };
    const auto is_unsigned = [](const nlohmann::json& v) { return v.is_number_unsigned(); };
    const auto is_unit = [](const nlohmann::json& v) { return v.is_number() && v.get<double>() >= 0.0 && v.get<double>() <= 1.0; };
    const auto is_string = [](const nlohmann::json& v) { return v.is_string(); };
    const auto is_string_or_null = [](const nlohmann::json& v) { return v.is_string() || v.is_null(); };
    const auto is_number_or_null = [](const nlohmann::json& v) { return v.is_number() || v.is_null(); };
    const auto is_unit_array = [&](const nlohmann::json& v) {
        return v.is_array() && std::all_of(v.begin(), v.end(), is_unit);
    };
    const auto is_count_array = [&](const nlohmann::json& v) {
        return v.is_array() && std::all_of(v.begin(), v.end(), is_unsigned);
    };

    if (!j.is_object()) throw std::invalid_argument("report: not a JSON object");
    need(j, "schema_version", is_unsigned, "an unsigned integer");
    need(j, "samples", is_unsigned, "an unsigned integer");
    need(j, "clean_accuracy", is_unit, "a number in [0,1]");
    need(j, "adv_accuracy", is_unit, "a number in [0,1]");
    need(j, "mean_confidence_correct", is_unit, "a number in [0,1]");
    need(j, "mean_confidence_incorrect", is_unit, "a number in [0,1]");
    need(j, "l2_mean", is_number, "a number");
    need(j, "linf_max", is_number, "a number");
    need(j, "l0_mean", is_unit, "a number in [0,1]");
    need(j, "per_class_accuracy", is_unit_array, "an array of numbers in [0,1]");
    need(j, "per_class_count", is_count_array, "an array of counts");
    need(j, "config", [](const nlohmann::json& v) { return v.is_object(); }, "an object");
    const auto& c = j.at("config");
    need(c, "defense", is_string, "a string");
    need(c, "levels", is_unsigned, "an unsigned integer");
    need(c, "steepness", is_number, "a number");
    need(c, "attack", is_string_or_null, "a string or null");
    need(c, "epsilon", is_number_or_null, "a number or null");
    if (c.at("epsilon").is_number() && j.at("linf_max").get<double>() > c.at("epsilon").get<double>() + 1e-12) {
        throw std::invalid_argument("report: linf_max exceeds the declared epsilon");
    }
}

void write_report(const EvalReport& r, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw FormatError(FormatError::Kind::io, "cannot write " + path.string());
    out << to_json(r).dump(2) << '\n';
}

}  // namespace qusec
