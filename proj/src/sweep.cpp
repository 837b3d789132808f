#include "qusec/sweep.hpp"

#include <bit>
#include <charconv>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>

#include "qusec/errors.hpp"

namespace qusec {
namespace {

class Fnv1a {
public:
    void bytes(const void* data, std::size_t n) {
        const auto* p = static_cast<const unsigned char*>(data);
        for (std::size_t i = 0; i < n; ++i) {
            hash_ ^= p[i];
            hash_ *= 0x100000001b3ULL;
        }
    }
    void text(const std::string& s) { bytes(s.data(), s.size()); }
    void u64(std::uint64_t v) { bytes(&v, sizeof v); }
    void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
    std::uint64_t value() const { return hash_; }

private:
    std::uint64_t hash_ = 0xcbf29ce484222325ULL;
};

std::string hex(std::uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

std::string num(double v) {
    char buf[64];
    const auto res = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, res.ptr);
}

}  // namespace

std::uint64_t training_fingerprint(const ModelConfig& config, const Dataset& data, const TrainOptions& options) {
    Fnv1a h;
    h.text(config.to_text());
    h.u64(options.epochs);
    h.u64(options.batch_size);
    h.f64(options.learning_rate);
    h.f64(options.threshold_learning_rate.value_or(-1.0));
    h.u64(options.seed);
    h.text(data.name());
    h.u64(data.size());
    h.bytes(data.images().data(), data.images().size() * sizeof(double));
    h.bytes(data.labels().data(), data.labels().size());
    return h.value();
}

Model train_or_load(const ModelConfig& config, const Dataset& train_data, const TrainOptions& options,
                    const std::filesystem::path& cache_dir, bool* trained) {
    const std::string stem = to_string(config.defense) + "-n" + std::to_string(config.levels) + "-" +
                             hex(training_fingerprint(config, train_data, options));
    const auto path = cache_dir / (stem + ".qsn");
    if (std::filesystem::exists(path)) {
        Model m = load_weights(path);
        if (m.config() == config) {
            if (trained) *trained = false;
            return m;
        }
    }
    Model m = build_model(config);
    train(m, train_data, options);
    std::filesystem::create_directories(cache_dir);
    save_weights(m, path);
    if (trained) *trained = true;
    return m;
}

SweepResult sweep(const ModelConfig& base, const std::vector<std::size_t>& levels, const std::vector<double>& epsilons,
                  const Dataset& train_data, const Dataset& test_data, const SweepSetup& setup) {
    if (levels.empty() || epsilons.empty()) throw std::invalid_argument("sweep: levels and epsilons must be nonempty");
    SweepResult result;
    std::map<std::size_t, double> mean_adv;
    for (std::size_t n : levels) {
        ModelConfig cfg = base;
        if (cfg.defense == Defense::none) cfg.defense = Defense::cq;
        cfg.levels = n;
        bool trained = false;
        const Model model = train_or_load(cfg, train_data, setup.train_options, setup.cache_dir, &trained);
        result.models_trained += trained;
        double sum = 0.0;
        for (double eps : epsilons) {
            AttackSpec spec = setup.attack;
            spec.epsilon = eps;
            const AdversarialBatch batch = attack_dataset(model, test_data, spec);
            SweepRow row{n, eps, evaluate(model, test_data, &batch)};
            sum += row.report.adv_accuracy;
            result.rows.push_back(std::move(row));
        }
        mean_adv[n] = sum / static_cast<double>(epsilons.size());
    }
    // std::map iterates ascending, so strict > keeps the smaller n on ties
    double best = -1.0;
    for (const auto& [n, acc] : mean_adv) {
        if (acc > best) {
            best = acc;
            result.recommended_levels = n;
        }
    }
    return result;
}

std::string sweep_csv(const SweepResult& result) {
    std::ostringstream os;
    os << "levels,epsilon,clean_accuracy,adv_accuracy,mean_confidence_correct,mean_confidence_incorrect,l2_mean,linf_max,"
          "l0_mean,recommended\n";
    for (const auto& row : result.rows) {
        const auto& r = row.report;
        os << row.levels << ',' << num(row.epsilon) << ',' << num(r.clean_accuracy) << ',' << num(r.adv_accuracy) << ','
           << num(r.mean_confidence_correct) << ',' << num(r.mean_confidence_incorrect) << ','
           << num(r.perturbation.l2_mean) << ',' << num(r.perturbation.linf_max) << ',' << num(r.perturbation.l0_mean)
           << ',' << (row.levels == result.recommended_levels ? 1 : 0) << '\n';
    }
    return os.str();
}

void write_sweep_csv(const SweepResult& result, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw FormatError(FormatError::Kind::io, "cannot write " + path.string());
    out << sweep_csv(result);
}

}  // namespace qusec
