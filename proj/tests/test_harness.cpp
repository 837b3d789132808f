#include <doctest.h>

#include <cmath>
#include <fstream>
#include <random>

#include "qusec/container.hpp"
#include "qusec/errors.hpp"
#include "qusec/evaluate.hpp"
#include "qusec/sweep.hpp"
#include "support.hpp"

using namespace qusec;
using namespace qusec::testing;

namespace {

FormatError::Kind error_kind(const std::function<void()>& f) {
    try {
        f();
    } catch (const FormatError& e) {
        return e.kind();
    }
    FAIL("expected a FormatError");
    return FormatError::Kind::io;
}

ModelConfig small_config(Defense defense = Defense::none) {
    ModelConfig c;
    c.input_shape = {28, 28, 1};
    c.convs = parse_architecture("conv:2x6/s4/valid;conv:4x3/s2/valid");
    c.defense = defense;
    c.seed = 2;
    c.loss = Loss::cross_entropy;
    return c;
}

}  // namespace

TEST_SUITE("container") {
    TEST_CASE("round trip and byte layout") {
        TensorContainer c;
        c.header = "hello";
        c.tensors.emplace_back("a", Tensor({2}, {1.5, -2.0}));
        const auto bytes = encode_container(kAdversarialMagic, c);
        // magic, version, header, count, name, rank, extent, payload
        CHECK(bytes.size() == 4 + 4 + (4 + 5) + 4 + (4 + 1) + 4 + 4 + 16);
        CHECK(bytes[8] == 5);
        const TensorContainer r = decode_container(kAdversarialMagic, bytes);
        CHECK(r.header == "hello");
        CHECK(r.at("a") == c.at("a"));
        CHECK_THROWS(r.at("b"));
    }

    TEST_CASE("errors are distinct") {
        TensorContainer c;
        c.tensors.emplace_back("w", Tensor({3}, 1.0));
        auto bytes = encode_container(kWeightsMagic, c);
        CHECK(error_kind([&] { decode_container(kAdversarialMagic, bytes); }) == FormatError::Kind::bad_magic);
        auto cut = bytes;
        cut.pop_back();
        CHECK(error_kind([&] { decode_container(kWeightsMagic, cut); }) == FormatError::Kind::truncated);
        auto extra = bytes;
        extra.push_back(0);
        CHECK(error_kind([&] { decode_container(kWeightsMagic, extra); }) == FormatError::Kind::bad_length);
        CHECK(error_kind([&] { read_container("/nonexistent/file.qsn", kWeightsMagic); }) == FormatError::Kind::io);
    }
}

TEST_SUITE("mnist loader") {
    TEST_CASE("two-image fixture gives exact pixel values") {
        const auto dir = scratch_dir("idx");
        std::vector<std::uint8_t> px(2 * 2 * 3);
        for (std::size_t i = 0; i < px.size(); ++i) px[i] = static_cast<std::uint8_t>(i * 23);
        write_bytes(dir / "img", idx_images(2, 2, 3, px));
        write_bytes(dir / "lbl", idx_labels({7, 1}));
        const Dataset d = load_idx(dir / "img", dir / "lbl", Split::test);
        CHECK(d.size() == 2);
        CHECK(d.image_shape() == Shape{2, 3, 1});
        for (std::size_t i = 0; i < px.size(); ++i) CHECK(d.images()[i] == px[i] / 255.0);
        CHECK(d.label(0) == 7);
        CHECK(d.label(1) == 1);
        CHECK(d.name() == "mnist");
    }

    TEST_CASE("errors are distinct") {
        const auto dir = scratch_dir("idx-bad");
        const std::vector<std::uint8_t> px(8, 10);
        write_bytes(dir / "img", idx_images(2, 2, 2, px));
        write_bytes(dir / "lbl", idx_labels({1, 2}));
        write_bytes(dir / "lbl-as-img", idx_labels({1, 2}, 2051));
        write_bytes(dir / "lbl3", idx_labels({1, 2, 3}));
        write_bytes(dir / "img-short", idx_images(2, 2, 2, std::vector<std::uint8_t>(7, 10)));
        CHECK(error_kind([&] { load_idx(dir / "img", dir / "lbl-as-img", Split::train); }) == FormatError::Kind::bad_magic);
        CHECK_THROWS_WITH(load_idx(dir / "img", dir / "lbl-as-img", Split::train), doctest::Contains("bad magic"));
        CHECK(error_kind([&] { load_idx(dir / "img", dir / "lbl3", Split::train); }) == FormatError::Kind::count_mismatch);
        CHECK(error_kind([&] { load_idx(dir / "img-short", dir / "lbl", Split::train); }) == FormatError::Kind::truncated);
        CHECK(error_kind([&] { load_mnist(dir, Split::train); }) == FormatError::Kind::io);
    }

    TEST_CASE("directory layout") {
        const auto dir = scratch_dir("mnist-dir");
        write_tiny_mnist(dir, 12, 5);
        const Dataset train = load_mnist(dir, Split::train);
        const Dataset test = load_mnist(dir, Split::test);
        CHECK(train.size() == 12);
        CHECK(test.size() == 5);
        CHECK(train.image_shape() == Shape{28, 28, 1});
        CHECK(test.split() == Split::test);
        CHECK(train.head(3).size() == 3);
        CHECK(train.head(3).image(2) == train.image(2));
        CHECK(train.head(100).size() == 12);
    }
}

TEST_SUITE("cifar loader") {
    TEST_CASE("one record round-trips channel-planar pixels") {
        const auto dir = scratch_dir("cifar");
        std::vector<std::uint8_t> rec(3073);
        rec[0] = 6;
        for (std::size_t i = 0; i < 3072; ++i) rec[1 + i] = static_cast<std::uint8_t>((i * 13) % 256);
        write_bytes(dir / "test_batch.bin", rec);
        const Dataset d = load_cifar10(dir, Split::test);
        REQUIRE(d.size() == 1);
        CHECK(d.image_shape() == Shape{32, 32, 3});
        CHECK(d.label(0) == 6);
        CHECK(d.name() == "cifar10");
        for (std::size_t ch = 0; ch < 3; ++ch)
            for (std::size_t p = 0; p < 1024; ++p) CHECK(d.images()[p * 3 + ch] == rec[1 + ch * 1024 + p] / 255.0);
    }

    TEST_CASE("length must be a multiple of the record size") {
        const auto dir = scratch_dir("cifar-bad");
        write_bytes(dir / "b.bin", std::vector<std::uint8_t>(3073 + 10));
        CHECK(error_kind([&] { load_cifar10_batch(dir / "b.bin", Split::train); }) == FormatError::Kind::bad_length);
    }
}

TEST_SUITE("dataset") {
    TEST_CASE("invariants") {
        CHECK_THROWS(Dataset("mnist", Split::train, Tensor({1, 2, 2, 1}, 1.5), {0}));
        CHECK_THROWS(Dataset("mnist", Split::train, Tensor({1, 2, 2, 1}, 0.5), {10}));
        CHECK_THROWS(Dataset("mnist", Split::train, Tensor({2, 2, 2, 1}, 0.5), {0}));
    }
}

TEST_SUITE("perturbation_stats") {
    TEST_CASE("identical tensors") {
        const Tensor a({2, 28, 28, 1}, 0.25);
        const PerturbationStats s = perturbation_stats(a, a);
        CHECK(s.l2_mean == 0.0);
        CHECK(s.linf_max == 0.0);
        CHECK(s.l0_mean == 0.0);
    }

    TEST_CASE("single pixel change") {
        const Tensor a({1, 28, 28, 1});
        Tensor b = a;
        b[100] = 0.3;
        const PerturbationStats s = perturbation_stats(a, b);
        CHECK(s.l2_mean == doctest::Approx(0.3).epsilon(1e-15));
        CHECK(s.linf_max == doctest::Approx(0.3).epsilon(1e-15));
        CHECK(s.l0_mean == doctest::Approx(1.0 / 784).epsilon(1e-15));
    }

    TEST_CASE("uniform shift") {
        const double eps = 0.05;
        const Tensor a({3, 28, 28, 1}, 0.5);
        const Tensor b({3, 28, 28, 1}, 0.5 + eps);
        const PerturbationStats s = perturbation_stats(a, b);
        CHECK(s.l2_mean == doctest::Approx(eps * std::sqrt(784.0)).epsilon(1e-12));
        CHECK(s.linf_max == doctest::Approx(eps).epsilon(1e-12));
        CHECK(s.l0_mean == 1.0);
    }

    TEST_CASE("shape mismatch") { CHECK_THROWS_AS(perturbation_stats(Tensor({1, 4}), Tensor({1, 5})), ShapeError); }
}

TEST_SUITE("evaluate") {
    const std::filesystem::path dir = std::filesystem::temp_directory_path() / "qusec-test-eval-data";

    TEST_CASE("an adversarial batch equal to the originals changes nothing") {
        write_tiny_mnist(dir, 10, 10);
        const Dataset d = load_mnist(dir, Split::test);
        const Model m = build_model(small_config());
        AdversarialBatch b;
        b.spec.epsilon = 0.0;
        b.originals = d.images();
        b.perturbed = d.images();
        for (std::size_t i = 0; i < d.size(); ++i) b.labels.push_back(d.label(i));
        const EvalReport r = evaluate(m, d, &b);
        CHECK(r.perturbation.l2_mean == 0.0);
        CHECK(r.adv_accuracy == r.clean_accuracy);
        CHECK(r.samples == 10);
    }

    TEST_CASE("a model that always predicts the label scores 1.0") {
        // One pixel x = label / 9 passes unchanged through a 1x1 identity conv;
        // logits 9000 k x - 500 k^2 = 500 (label^2 - (k - label)^2) peak at k = label.
        ModelConfig c;
        c.input_shape = {1, 1, 1};
        c.convs = parse_architecture("conv:1x1/s1/valid");
        TensorContainer tc = decode_container(kWeightsMagic, encode_weights(build_model(c)));
        for (auto& [name, t] : tc.tensors) {
            if (name == "conv0.kernels") t = Tensor({1, 1, 1, 1}, 1.0);
            if (name == "dense.weights")
                for (std::size_t k = 0; k < 10; ++k) t[k] = 9000.0 * static_cast<double>(k);
            if (name == "dense.bias")
                for (std::size_t k = 0; k < 10; ++k) t[k] = -500.0 * static_cast<double>(k * k);
        }
        const Model oracle = decode_weights(encode_container(kWeightsMagic, tc));
        Tensor images({10, 1, 1, 1});
        std::vector<std::uint8_t> labels;
        for (std::uint8_t k = 0; k < 10; ++k) {
            images[k] = k / 9.0;
            labels.push_back(k);
        }
        const EvalReport r = evaluate(oracle, Dataset("mnist", Split::test, images, labels));
        CHECK(r.clean_accuracy == 1.0);
        CHECK(r.mean_confidence_correct == doctest::Approx(1.0).epsilon(1e-9));
        CHECK(r.mean_confidence_incorrect == 0.0);
        for (double a : r.per_class_accuracy) CHECK(a == 1.0);
    }

    TEST_CASE("order of the dataset does not change the figures") {
        write_tiny_mnist(dir, 10, 10);
        const Dataset d = load_mnist(dir, Split::test);
        const Model m = build_model(small_config(Defense::cq));
        const EvalReport a = evaluate(m, d);
        const EvalReport b = evaluate(m, d.select({9, 3, 0, 7, 1, 5, 2, 8, 6, 4}));
        CHECK(a.clean_accuracy == b.clean_accuracy);
        CHECK(a.per_class_accuracy == b.per_class_accuracy);
        CHECK(a.mean_confidence_correct == doctest::Approx(b.mean_confidence_correct).epsilon(1e-12));
        CHECK(a.mean_confidence_incorrect == doctest::Approx(b.mean_confidence_incorrect).epsilon(1e-12));
    }

    TEST_CASE("shape mismatch") {
        write_tiny_mnist(dir, 10, 10);
        ModelConfig c = small_config();
        c.input_shape = {32, 32, 1};
        CHECK_THROWS_AS(evaluate(build_model(c), load_mnist(dir, Split::test)), ShapeError);
    }
}

TEST_SUITE("report json") {
    TEST_CASE("keys and types are stable") {
        const auto dir = scratch_dir("report");
        write_tiny_mnist(dir, 10, 10);
        const Dataset d = load_mnist(dir, Split::test);
        const Model m = build_model(small_config(Defense::cq));
        AttackSpec s;
        s.epsilon = 0.2;
        const AdversarialBatch b = attack_dataset(m, d, s);
        const nlohmann::json j = to_json(evaluate(m, d, &b));
        CHECK_NOTHROW(validate_report_json(j));

        // golden key set: changing it is a schema change
        std::vector<std::string> keys;
        for (const auto& [k, v] : j.items()) keys.push_back(k);
        CHECK(keys == std::vector<std::string>{"adv_accuracy", "clean_accuracy", "config", "l0_mean", "l2_mean", "linf_max",
                                               "mean_confidence_correct", "mean_confidence_incorrect", "per_class_accuracy",
                                               "per_class_count", "samples", "schema_version"});
        std::vector<std::string> config_keys;
        for (const auto& [k, v] : j.at("config").items()) config_keys.push_back(k);
        CHECK(config_keys == std::vector<std::string>{"attack", "defense", "epsilon", "levels", "steepness"});
        CHECK(j.at("config").at("epsilon").get<double>() == 0.2);
        CHECK(j.at("config").at("defense") == "cq");

        write_report(evaluate(m, d, &b), dir / "r.json");
        std::ifstream in(dir / "r.json");
        CHECK(nlohmann::json::parse(in) == j);
    }

    TEST_CASE("validation rejects broken reports") {
        nlohmann::json j = to_json(EvalReport{});
        CHECK_NOTHROW(validate_report_json(j));
        nlohmann::json missing = j;
        missing.erase("l2_mean");
        CHECK_THROWS(validate_report_json(missing));
        nlohmann::json out_of_range = j;
        out_of_range["clean_accuracy"] = 1.5;
        CHECK_THROWS(validate_report_json(out_of_range));
        nlohmann::json over_budget = j;
        over_budget["config"]["epsilon"] = 0.1;
        over_budget["linf_max"] = 0.2;
        CHECK_THROWS(validate_report_json(over_budget));
        CHECK_THROWS(validate_report_json(nlohmann::json::array()));
    }
}

TEST_SUITE("sweep") {
    TEST_CASE("one level at zero budget, and the cache is reused") {
        const auto dir = scratch_dir("sweep");
        write_tiny_mnist(dir / "data", 16, 8);
        const Dataset train = load_mnist(dir / "data", Split::train);
        const Dataset test = load_mnist(dir / "data", Split::test);
        SweepSetup setup;
        setup.train_options.epochs = 1;
        setup.train_options.batch_size = 8;
        setup.train_options.learning_rate = 0.05;
        setup.cache_dir = dir / "cache";

        const SweepResult first = sweep(small_config(), {2}, {0.0}, train, test, setup);
        REQUIRE(first.rows.size() == 1);
        CHECK(first.rows[0].report.adv_accuracy == first.rows[0].report.clean_accuracy);
        CHECK(first.rows[0].report.defense == "cq");
        CHECK(first.models_trained == 1);
        CHECK(first.recommended_levels == 2);

        const SweepResult second = sweep(small_config(), {2}, {0.0}, train, test, setup);
        CHECK(second.models_trained == 0);
        CHECK(sweep_csv(second) == sweep_csv(first));
    }

    TEST_CASE("full cross product, CSV rows and a recommended level") {
        const auto dir = scratch_dir("sweep2");
        write_tiny_mnist(dir / "data", 16, 8);
        const Dataset train = load_mnist(dir / "data", Split::train);
        const Dataset test = load_mnist(dir / "data", Split::test);
        SweepSetup setup;
        setup.train_options.epochs = 1;
        setup.train_options.batch_size = 8;
        setup.cache_dir = dir / "cache";
        const SweepResult r = sweep(small_config(Defense::cq), {3, 2}, {0.1, 0.3}, train, test, setup);
        CHECK(r.rows.size() == 4);
        CHECK(r.models_trained == 2);
        CHECK((r.recommended_levels == 2 || r.recommended_levels == 3));
        const std::string csv = sweep_csv(r);
        CHECK(std::count(csv.begin(), csv.end(), '\n') == 5);
        CHECK(csv.rfind("levels,epsilon,", 0) == 0);
        write_sweep_csv(r, dir / "t.csv");
        std::ifstream in(dir / "t.csv");
        CHECK(std::string(std::istreambuf_iterator<char>(in), {}) == csv);
        CHECK_THROWS(sweep(small_config(), {}, {0.1}, train, test, setup));
    }

    TEST_CASE("ties go to the smaller level count") {
        const auto dir = scratch_dir("sweep3");
        write_tiny_mnist(dir / "data", 8, 4);
        const Dataset train = load_mnist(dir / "data", Split::train);
        const Dataset test = load_mnist(dir / "data", Split::test);
        SweepSetup setup;
        setup.train_options.epochs = 1;
        setup.cache_dir = dir / "cache";
        const SweepResult r = sweep(small_config(), {4, 3}, {0.0}, train, test, setup);
        const double a4 = r.rows[0].report.adv_accuracy, a3 = r.rows[1].report.adv_accuracy;
        CHECK(r.recommended_levels == (a4 > a3 ? 4u : 3u));
    }

    TEST_CASE("fingerprint tracks config, options and data") {
        const auto dir = scratch_dir("fp");
        write_tiny_mnist(dir, 8, 4);
        const Dataset train = load_mnist(dir, Split::train);
        TrainOptions o;
        const auto base = training_fingerprint(small_config(), train, o);
        CHECK(base == training_fingerprint(small_config(), train, o));
        TrainOptions o2 = o;
        o2.learning_rate = 0.02;
        CHECK(base != training_fingerprint(small_config(), train, o2));
        CHECK(base != training_fingerprint(small_config(Defense::cq), train, o));
        CHECK(base != training_fingerprint(small_config(), train.head(7), o));
    }
}
