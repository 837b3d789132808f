#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "qusec/attacks.hpp"
#include "qusec/evaluate.hpp"
#include "qusec/model.hpp"

namespace qusec {

/// FNV-1a over the config text, training options and dataset contents.
std::uint64_t training_fingerprint(const ModelConfig& config, const Dataset& data, const TrainOptions& options);

/// Loads `<cache_dir>/<fingerprint>.qsn` when present, otherwise trains and
/// stores it. `trained` reports which path was taken.
Model train_or_load(const ModelConfig& config, const Dataset& train_data, const TrainOptions& options,
                    const std::filesystem::path& cache_dir, bool* trained = nullptr);

struct SweepRow {
    std::size_t levels = 0;
    double epsilon = 0.0;
    EvalReport report;
};

struct SweepResult {
    std::vector<SweepRow> rows;
    std::size_t recommended_levels = 0;  // argmax of mean adversarial accuracy, ties to the smaller n
    std::size_t models_trained = 0;
};

struct SweepSetup {
    TrainOptions train_options;
    AttackSpec attack;  // epsilon is overwritten per row
    std::filesystem::path cache_dir;
};

/// For every n in `levels`: train (or reuse) a defended model, then attack the
/// test set at every epsilon. A base config without a defense sweeps CQ.
SweepResult sweep(const ModelConfig& base, const std::vector<std::size_t>& levels, const std::vector<double>& epsilons,
                  const Dataset& train_data, const Dataset& test_data, const SweepSetup& setup);

/// One row per (n, epsilon).
void write_sweep_csv(const SweepResult& result, const std::filesystem::path& path);
std::string sweep_csv(const SweepResult& result);

}  // namespace qusec
