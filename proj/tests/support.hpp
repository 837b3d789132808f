#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <random>
#include <string>
#include <vector>

#include "qusec/dataset.hpp"
#include "qusec/tensor.hpp"

namespace qusec::testing {

/// Uniform draws in [lo, hi) from a seeded generator.
inline Tensor random_tensor(std::mt19937_64& rng, Shape shape, double lo = -1.0, double hi = 1.0) {
    std::uniform_real_distribution<double> dist(lo, hi);
    Tensor t(std::move(shape));
    for (double& v : t.values()) v = dist(rng);
    return t;
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

/// max_i |a_i - b_i| / max(|a_i|, |b_i|, floor); the floor keeps near-zero
/// entries from dominating.
inline double max_rel_error(const Tensor& a, const Tensor& b, double floor = 1e-8) {
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double scale = std::max({std::abs(a[i]), std::abs(b[i]), floor});
        m = std::max(m, std::abs(a[i] - b[i]) / scale);
    }
    return m;
}

inline double dot(const Tensor& a, const Tensor& b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

/// A fresh, empty directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& name) {
    const auto dir = std::filesystem::temp_directory_path() / ("qusec-test-" + name);
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);
    return dir;
}

inline void write_bytes(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

inline std::vector<std::uint8_t> read_bytes(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void put_be32(std::vector<std::uint8_t>& out, std::uint32_t v) {
    for (int shift = 24; shift >= 0; shift -= 8) out.push_back(static_cast<std::uint8_t>(v >> shift));
}

/// Big-endian IDX image file: magic 2051, count, rows, cols, then u8 pixels.
inline std::vector<std::uint8_t> idx_images(std::uint32_t count, std::uint32_t rows, std::uint32_t cols,
                                            const std::vector<std::uint8_t>& pixels, std::uint32_t magic = 2051) {
    std::vector<std::uint8_t> out;
    put_be32(out, magic);
    put_be32(out, count);
    put_be32(out, rows);
    put_be32(out, cols);
    out.insert(out.end(), pixels.begin(), pixels.end());
    return out;
}

/// Big-endian IDX label file: magic 2049, count, then u8 labels.
inline std::vector<std::uint8_t> idx_labels(const std::vector<std::uint8_t>& labels, std::uint32_t magic = 2049) {
    std::vector<std::uint8_t> out;
    put_be32(out, magic);
    put_be32(out, static_cast<std::uint32_t>(labels.size()));
    out.insert(out.end(), labels.begin(), labels.end());
    return out;
}

/// Writes a tiny MNIST-layout directory (train-* and t10k-* files) whose
/// images are 28x28 with a class-dependent bright bar, so a model can learn it.
inline void write_tiny_mnist(const std::filesystem::path& dir, std::uint32_t train_count, std::uint32_t test_count) {
    auto make = [](std::uint32_t count, std::uint32_t offset, std::vector<std::uint8_t>& pixels,
                   std::vector<std::uint8_t>& labels) {
        for (std::uint32_t i = 0; i < count; ++i) {
            const std::uint8_t label = static_cast<std::uint8_t>((i + offset) % 10);
            labels.push_back(label);
            for (std::uint32_t r = 0; r < 28; ++r) {
                for (std::uint32_t c = 0; c < 28; ++c) {
                    const bool bar = r >= 2u + 2u * label && r < 4u + 2u * label && c > 4 && c < 24;
                    pixels.push_back(bar ? 255 : static_cast<std::uint8_t>((r * 7 + c * 3 + i) % 17));
                }
            }
        }
    };
    std::filesystem::create_directories(dir);
    std::vector<std::uint8_t> px, lb;
    make(train_count, 0, px, lb);
    write_bytes(dir / "train-images-idx3-ubyte", idx_images(train_count, 28, 28, px));
    write_bytes(dir / "train-labels-idx1-ubyte", idx_labels(lb));
    px.clear();
    lb.clear();
    make(test_count, 3, px, lb);
    write_bytes(dir / "t10k-images-idx3-ubyte", idx_images(test_count, 28, 28, px));
    write_bytes(dir / "t10k-labels-idx1-ubyte", idx_labels(lb));
}

}  // namespace qusec::testing
