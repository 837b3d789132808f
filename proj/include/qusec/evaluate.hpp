#pragma once

#include <cstddef>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "qusec/attacks.hpp"
#include "qusec/dataset.hpp"
#include "qusec/model.hpp"

namespace qusec {

struct PerturbationStats {
    double l2_mean = 0.0;   // per-image L2 norm, averaged
    double linf_max = 0.0;  // over every pixel of every image
    double l0_mean = 0.0;   // per-image fraction of pixels with |delta| > 1e-6, averaged
};

/// originals and perturbed are [N,...] with the same shape.
PerturbationStats perturbation_stats(const Tensor& originals, const Tensor& perturbed);

struct EvalReport {
    std::size_t samples = 0;
    double clean_accuracy = 0.0;
    double adv_accuracy = 0.0;  // equals clean_accuracy without an adversarial batch
    double mean_confidence_correct = 0.0;
    double mean_confidence_incorrect = 0.0;
    PerturbationStats perturbation;
    std::vector<double> per_class_accuracy;
    std::vector<std::size_t> per_class_count;
    // config echo
    std::string defense;
    std::size_t levels = 0;
    double steepness = 0.0;
    std::optional<std::string> attack;
    std::optional<double> epsilon;  // declared L-inf budget, when the attack has one
};

/// Accuracy of argmax(P) against the labels. With an adversarial batch the
/// confidences and per-class figures describe the perturbed images.
EvalReport evaluate(const Model& model, const Dataset& data, const AdversarialBatch* adversarial = nullptr);

/// Labels and originals of a stored batch as a dataset.
Dataset batch_dataset(const AdversarialBatch& batch, const std::string& name = "mnist");

/// Adversarial examples crafted white-box on `substitute` and scored on `victim`.
EvalReport transfer_attack(const Model& substitute, const Model& victim, const AttackSpec& spec, const Dataset& data);

inline constexpr unsigned kReportSchemaVersion = 1;

nlohmann::json to_json(const EvalReport& r);
/// Throws std::invalid_argument when a required key is missing or mistyped.
void validate_report_json(const nlohmann::json& j);
void write_report(const EvalReport& r, const std::filesystem::path& path);

}  // namespace qusec
