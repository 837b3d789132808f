#include "cli.hpp"

#include <algorithm>
#include <chrono>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <stdexcept>

#include <CLI11.hpp>
#include <json.hpp>

#include "qusec/errors.hpp"
#include "qusec/evaluate.hpp"
#include "qusec/sweep.hpp"

namespace qusec::cli {
namespace {

namespace fs = std::filesystem;

// Options shared by every subcommand that touches a dataset.
struct DataOptions {
    std::string dataset = "mnist";
    std::string data_dir;
    std::size_t train_count = 10000;
    std::size_t test_count = 1000;
};

struct ModelOptions {
    std::string defense = "none";
    std::size_t levels = 2;
    double steepness = 50.0;
    bool per_pixel = false;
    std::string architecture;
    std::string loss = "mse";
    std::uint64_t seed = 0;
};

struct TrainingOptions {
    std::size_t epochs = 5;
    std::size_t batch_size = 64;
    double learning_rate = 0.01;
    std::optional<double> threshold_learning_rate;
};

struct AttackOptions {
    std::string method = "fgsm";
    double epsilon = 0.3;
    std::size_t iterations = 100;
    bool targeted = false;
    std::optional<std::size_t> target;
    double kappa = 0.0;
    double c = 1.0;
    double step_size = 0.01;
    double theta = 1.0;
    double gamma = 0.1;
};

void add_data_options(CLI::App* cmd, DataOptions& o) {
    cmd->add_option("--dataset", o.dataset, "mnist or cifar10")->check(CLI::IsMember({"mnist", "cifar10"}));
    cmd->add_option("--data-dir", o.data_dir, "dataset root (falls back to $QSN_DATA_DIR)");
    cmd->add_option("--train-count", o.train_count, "first N training records")->check(CLI::PositiveNumber);
    cmd->add_option("--test-count", o.test_count, "first N test records")->check(CLI::PositiveNumber);
}

void add_model_options(CLI::App* cmd, ModelOptions& o) {
    cmd->add_option("--defense", o.defense, "none, cq or tq")->check(CLI::IsMember({"none", "cq", "tq"}));
    cmd->add_option("--levels", o.levels, "quantization levels n")->check(CLI::Range(std::size_t{2}, std::size_t{256}));
    cmd->add_option("--z", o.steepness, "sigmoid steepness")->check(CLI::PositiveNumber);
    cmd->add_flag("--per-pixel", o.per_pixel, "one threshold set per pixel (tq)");
    cmd->add_option("--arch", o.architecture, "conv stack, e.g. conv:64x8/s2/same;conv:128x6/s2/valid");
    cmd->add_option("--loss", o.loss, "mse or cross_entropy")->check(CLI::IsMember({"mse", "cross_entropy", "ce"}));
    cmd->add_option("--seed", o.seed, "initialisation and shuffle seed");
}

void add_training_options(CLI::App* cmd, TrainingOptions& o) {
    cmd->add_option("--epochs", o.epochs, "training epochs")->check(CLI::PositiveNumber);
    cmd->add_option("--batch-size", o.batch_size, "mini-batch size")->check(CLI::PositiveNumber);
    cmd->add_option("--lr", o.learning_rate, "SGD learning rate")->check(CLI::PositiveNumber);
    cmd->add_option("--threshold-lr", o.threshold_learning_rate, "threshold learning rate (defaults to --lr)")
        ->check(CLI::PositiveNumber);
}

void add_attack_options(CLI::App* cmd, AttackOptions& o, bool with_epsilon) {
    cmd->add_option("--method", o.method, "fgsm, jsma or cw_l2")->check(CLI::IsMember({"fgsm", "jsma", "cw_l2"}));
    if (with_epsilon) cmd->add_option("--epsilon", o.epsilon, "per-pixel L-inf budget")->check(CLI::Range(0.0, 1.0));
    cmd->add_option("--iterations", o.iterations, "iteration cap (jsma, cw_l2)");
    cmd->add_flag("--targeted", o.targeted, "targeted attack (next class unless --target)");
    cmd->add_option("--target", o.target, "fixed target class")->check(CLI::Range(std::size_t{0}, std::size_t{9}));
    cmd->add_option("--kappa", o.kappa, "cw_l2 confidence margin")->check(CLI::NonNegativeNumber);
    cmd->add_option("--c", o.c, "cw_l2 trade-off constant")->check(CLI::PositiveNumber);
    cmd->add_option("--step", o.step_size, "cw_l2 gradient step")->check(CLI::PositiveNumber);
    cmd->add_option("--theta", o.theta, "jsma per-step pixel change")->check(CLI::Range(0.0, 1.0));
    cmd->add_option("--gamma", o.gamma, "jsma max fraction of modified pixels")->check(CLI::Range(0.0, 1.0));
}

fs::path data_root(const DataOptions& o) {
    if (!o.data_dir.empty()) return o.data_dir;
    if (const char* env = std::getenv("QSN_DATA_DIR"); env && *env) return env;
    throw FormatError(FormatError::Kind::io, "no dataset directory: pass --data-dir or set QSN_DATA_DIR");
}

Dataset load_split(const DataOptions& o, Split split) {
    const fs::path root = data_root(o);
    Dataset full = o.dataset == "cifar10" ? load_cifar10(root, split) : load_mnist(root, split);
    return full.head(split == Split::train ? o.train_count : o.test_count);
}

ModelConfig make_config(const ModelOptions& m, const DataOptions& d) {
    ModelConfig c;
    if (d.dataset == "cifar10") c.input_shape = {32, 32, 3};
    c.defense = parse_defense(m.defense);
    c.levels = m.levels;
    c.steepness = m.steepness;
    c.per_pixel_thresholds = m.per_pixel;
    if (!m.architecture.empty()) c.convs = parse_architecture(m.architecture);
    c.loss = parse_loss(m.loss);
    c.seed = m.seed;
    c.validate();
    return c;
}

TrainOptions make_train_options(const TrainingOptions& t, std::uint64_t seed) {
    TrainOptions o;
    o.epochs = t.epochs;
    o.batch_size = t.batch_size;
    o.learning_rate = t.learning_rate;
    o.threshold_learning_rate = t.threshold_learning_rate;
    o.seed = seed;
    return o;
}

AttackSpec make_attack(const AttackOptions& a) {
    AttackSpec s;
    s.kind = parse_attack_kind(a.method);
    s.epsilon = a.epsilon;
    s.iterations = a.iterations;
    s.targeted = a.targeted || a.target.has_value() || s.kind == AttackKind::jsma;
    s.target_class = a.target;
    s.kappa = a.kappa;
    s.c = a.c;
    s.step_size = a.step_size;
    s.theta = a.theta;
    s.gamma = a.gamma;
    return s;
}

std::vector<std::string> split_list(const std::string& text) {
    std::vector<std::string> items;
    std::stringstream ss(text);
    for (std::string item; std::getline(ss, item, ',');) {
        if (!item.empty()) items.push_back(item);
    }
    return items;
}

std::string utc_timestamp() {
    const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&now, &tm);
    std::ostringstream os;
    os << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
    return os.str();
}

fs::path run_log_path(const std::string& flag) {
    if (!flag.empty()) return flag;
    if (const char* env = std::getenv("QSN_RUN_LOG"); env && *env) return env;
    return "qusec-runs.jsonl";
}

void append_run_log(const fs::path& path, const std::vector<std::string>& args, const std::string& command, int code,
                    const nlohmann::json& result, const std::string& error) {
    nlohmann::json line{{"time", utc_timestamp()},
                        {"command", command},
                        {"args", args},
                        {"exit_code", code},
                        {"result", result}};
    if (!error.empty()) line["error"] = error;
    std::ofstream log(path, std::ios::app);
    if (log) log << line.dump() << '\n';
}

// The run-log flag read straight from the arguments, for runs that fail to parse.
std::string scan_run_log(const std::vector<std::string>& args) {
    for (std::size_t i = 0; i < args.size(); ++i) {
        if (args[i] == "--run-log" && i + 1 < args.size()) return args[i + 1];
        if (args[i].rfind("--run-log=", 0) == 0) return args[i].substr(10);
    }
    return {};
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"Input-quantization defense against adversarial examples", "qusec"};
    app.require_subcommand(1);
    app.fallthrough();
    std::string run_log;
    app.add_option("--run-log", run_log, "JSON-lines run log (falls back to $QSN_RUN_LOG, then ./qusec-runs.jsonl)");

    DataOptions data;
    ModelOptions model_opts;
    TrainingOptions training;
    AttackOptions attack_opts;
    std::string model_path, out_path, inputs_path, report_path, cache_dir = "qusec-cache";
    std::string levels_list = "2,3,4,6", epsilons_list = "0.1,0.2,0.3";

    auto* train_cmd = app.add_subcommand("train", "train a model and write its weight file");
    add_data_options(train_cmd, data);
    add_model_options(train_cmd, model_opts);
    add_training_options(train_cmd, training);
    train_cmd->add_option("--out", out_path, "weight file to write")->required();

    auto* attack_cmd = app.add_subcommand("attack", "craft adversarial examples for the test subset");
    add_data_options(attack_cmd, data);
    add_attack_options(attack_cmd, attack_opts, true);
    attack_cmd->add_option("--model", model_path, "weight file of the model to attack")->required();
    attack_cmd->add_option("--out", out_path, "adversarial batch file to write")->required();

    auto* evaluate_cmd = app.add_subcommand("evaluate", "score a model on clean or adversarial inputs");
    add_data_options(evaluate_cmd, data);
    evaluate_cmd->add_option("--model", model_path, "weight file")->required();
    evaluate_cmd->add_option("--inputs", inputs_path, "adversarial batch (default: clean test subset)");
    evaluate_cmd->add_option("--report", report_path, "JSON report to write");

    auto* sweep_cmd = app.add_subcommand("sweep", "train defended models per level count and attack each");
    add_data_options(sweep_cmd, data);
    add_model_options(sweep_cmd, model_opts);
    add_training_options(sweep_cmd, training);
    add_attack_options(sweep_cmd, attack_opts, false);
    sweep_cmd->add_option("--levels-list", levels_list, "comma-separated level counts");
    sweep_cmd->add_option("--epsilons", epsilons_list, "comma-separated budgets");
    sweep_cmd->add_option("--cache-dir", cache_dir, "trained-model cache");
    sweep_cmd->add_option("--out", out_path, "CSV table to write");

    auto* report_cmd = app.add_subcommand("report", "validate a JSON report and print a summary");
    report_cmd->add_option("--report", report_path, "JSON report to read")->required();

    std::vector<std::string> reversed(args.rbegin(), args.rend());
    try {
        app.parse(reversed);
    } catch (const CLI::CallForHelp&) {
        out << app.help();
        return kExitOk;
    } catch (const CLI::CallForAllHelp&) {
        out << app.help("", CLI::AppFormatMode::All);
        return kExitOk;
    } catch (const CLI::ParseError& e) {
        err << "error: " << e.what() << "\n\n" << app.help();
        append_run_log(run_log_path(scan_run_log(args)), args, args.empty() ? "" : args.front(), kExitUsage, nullptr, e.what());
        return kExitUsage;
    }

    const CLI::App* chosen = app.get_subcommands().front();
    const std::string command = chosen->get_name();
    nlohmann::json result;
    int code = kExitOk;
    std::string error;
    try {
        if (chosen == train_cmd) {
            const ModelConfig config = make_config(model_opts, data);
            const Dataset train_set = load_split(data, Split::train);
            Model model = build_model(config);
            const TrainTrace trace = train(model, train_set, make_train_options(training, model_opts.seed));
            save_weights(model, out_path);
            for (std::size_t e = 0; e < trace.epochs.size(); ++e) {
                const auto& s = trace.epochs[e];
                out << "epoch " << (e + 1) << " loss " << s.loss << " accuracy " << s.accuracy << '\n';
                result["epochs"].push_back({{"loss", s.loss}, {"accuracy", s.accuracy}});
            }
            out << "wrote " << out_path << '\n';
            result["out"] = out_path;
        } else if (chosen == attack_cmd) {
            const Model model = load_weights(model_path);
            const Dataset test_set = load_split(data, Split::test);
            const AdversarialBatch batch = attack_dataset(model, test_set, make_attack(attack_opts));
            save_adversarial(batch, out_path);
            const PerturbationStats stats = perturbation_stats(batch.originals, batch.perturbed);
            out << "wrote " << batch.size() << " examples to " << out_path << " (l2_mean " << stats.l2_mean
                << ", linf_max " << stats.linf_max << ")\n";
            result = {{"out", out_path}, {"samples", batch.size()}, {"l2_mean", stats.l2_mean}, {"linf_max", stats.linf_max}};
        } else if (chosen == evaluate_cmd) {
            const Model model = load_weights(model_path);
            EvalReport report;
            if (inputs_path.empty()) {
                report = evaluate(model, load_split(data, Split::test));
            } else {
                const AdversarialBatch batch = load_adversarial(inputs_path);
                report = evaluate(model, batch_dataset(batch, data.dataset), &batch);
            }
            if (!report_path.empty()) write_report(report, report_path);
            out << "clean_accuracy " << report.clean_accuracy << " adv_accuracy " << report.adv_accuracy << '\n';
            result = to_json(report);
        } else if (chosen == sweep_cmd) {
            std::vector<std::size_t> levels;
            for (const auto& s : split_list(levels_list)) levels.push_back(std::stoul(s));
            std::vector<double> epsilons;
            for (const auto& s : split_list(epsilons_list)) epsilons.push_back(std::stod(s));
            const ModelConfig base = make_config(model_opts, data);
            SweepSetup setup{make_train_options(training, model_opts.seed), make_attack(attack_opts), cache_dir};
            const SweepResult sweep_result =
                sweep(base, levels, epsilons, load_split(data, Split::train), load_split(data, Split::test), setup);
            const std::string csv = sweep_csv(sweep_result);
            if (!out_path.empty()) write_sweep_csv(sweep_result, out_path);
            out << csv << "recommended_levels " << sweep_result.recommended_levels << '\n';
            result = {{"recommended_levels", sweep_result.recommended_levels},
                      {"models_trained", sweep_result.models_trained}};
        } else if (chosen == report_cmd) {
            std::ifstream in(report_path);
            if (!in) throw FormatError(FormatError::Kind::io, "cannot read " + report_path);
            const nlohmann::json j = nlohmann::json::parse(in);
            validate_report_json(j);
            out << "samples " << j.at("samples") << " clean_accuracy " << j.at("clean_accuracy") << " adv_accuracy "
                << j.at("adv_accuracy") << " defense " << j.at("config").at("defense").get<std::string>() << '\n';
            result = {{"valid", true}};
        }
    } catch (const std::exception& e) {
        // Anything past argument parsing is a data or model problem.
        error = e.what();
        err << "error: " << error << '\n';
        code = kExitData;
    }
    append_run_log(run_log_path(run_log), args, command, code, result, error);
    return code;
}

}  // namespace qusec::cli
