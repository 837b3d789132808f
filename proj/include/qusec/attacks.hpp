#pragma once

#include <cstddef>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "qusec/model.hpp"
#include "qusec/tensor.hpp"

namespace qusec {

enum class AttackKind { fgsm, jsma, cw_l2 };

std::string to_string(AttackKind k);
AttackKind parse_attack_kind(const std::string& s);

struct AttackSpec {
    AttackKind kind = AttackKind::fgsm;
    double epsilon = 0.3;         // per-pixel L-inf budget on the [0,1] scale
    std::size_t iterations = 100;
    bool targeted = false;
    std::optional<std::size_t> target_class;
    double kappa = 0.0;           // cw_l2 confidence margin
    double c = 1.0;               // cw_l2 trade-off constant
    double step_size = 0.01;      // cw_l2 gradient step in tanh space
    double theta = 1.0;           // jsma per-step pixel change
    double gamma = 0.1;           // jsma max fraction of pixels modified

    /// Checks epsilon in [0,1] and, for targeted specs, that a target exists.
    void validate() const;
    /// Canonical one-line "key=value;..." echo.
    std::string to_text() const;
    static AttackSpec from_text(const std::string& text);

    friend bool operator==(const AttackSpec&, const AttackSpec&) = default;
};

struct AdversarialExample {
    Tensor original;
    Tensor perturbed;
    std::size_t true_label = 0;
    std::size_t predicted_before = 0;
    std::size_t predicted_after = 0;
    double confidence_after = 0.0;
    std::size_t iterations = 0;
    bool success = false;  // targeted: reached the target; untargeted: label changed
};

/// x_adv = clamp(x + eps * sign(d loss / dx), 0, 1) with the model's training
/// loss at the true label. sign(0) = 0.
AdversarialExample fgsm(const Model& model, const Tensor& x, std::size_t true_label, const AttackSpec& spec);

/// Targeted saliency-map attack over pixel pairs. Uses the probability
/// Jacobian: alpha = d P_target / dx, beta = d (sum of other P) / dx.
AdversarialExample jsma(const Model& model, const Tensor& x, std::size_t true_label, const AttackSpec& spec);

/// Minimises ||delta||^2 + c * max(margin, -kappa) in tanh space with fixed-step
/// gradient descent, projecting delta onto the eps box after every step.
/// Untargeted when spec.targeted is false.
AdversarialExample cw_l2(const Model& model, const Tensor& x, std::size_t true_label, const AttackSpec& spec,
                         std::vector<double>* objective_trace = nullptr);

AdversarialExample run_attack(const Model& model, const Tensor& x, std::size_t true_label, const AttackSpec& spec);

/// Target used when a batch attack needs one: the next class modulo the class count.
std::size_t next_class_target(std::size_t label, std::size_t classes);

/// A set of adversarial examples with the spec that produced them.
struct AdversarialBatch {
    AttackSpec spec;
    Tensor originals;  // [N,H,W,C]
    Tensor perturbed;  // [N,H,W,C]
    std::vector<std::size_t> labels;
    std::vector<std::size_t> targets;  // empty for untargeted batches

    std::size_t size() const noexcept { return labels.size(); }
    Tensor original(std::size_t i) const;
    Tensor adversarial(std::size_t i) const;
};

/// Attacks every image of `data`. Targeted specs without an explicit target
/// use next_class_target for each image.
AdversarialBatch attack_dataset(const Model& model, const Dataset& data, const AttackSpec& spec);

/// "QSA1" container: tensors original, perturbed, labels (and targets), header = spec text.
void save_adversarial(const AdversarialBatch& batch, const std::filesystem::path& path);
AdversarialBatch load_adversarial(const std::filesystem::path& path);

}  // namespace qusec
