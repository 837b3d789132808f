#include "qusec/dataset.hpp"

#include <array>
#include <fstream>
#include <iterator>
#include <stdexcept>

#include "qusec/errors.hpp"

namespace qusec {
namespace {

constexpr std::uint32_t kIdxImageMagic = 2051;
constexpr std::uint32_t kIdxLabelMagic = 2049;
constexpr std::size_t kCifarSide = 32;
constexpr std::size_t kCifarRecord = 1 + 3 * kCifarSide * kCifarSide;

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError(FormatError::Kind::io, "cannot open " + path.string());
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::uint32_t read_be32(const std::vector<std::uint8_t>& bytes, std::size_t offset, const std::filesystem::path& path) {
    if (offset + 4 > bytes.size()) {
        throw FormatError(FormatError::Kind::truncated, "truncated IDX header in " + path.string());
    }
    return (std::uint32_t{bytes[offset]} << 24) | (std::uint32_t{bytes[offset + 1]} << 16) |
           (std::uint32_t{bytes[offset + 2]} << 8) | std::uint32_t{bytes[offset + 3]};
}

}  // namespace

Dataset::Dataset(std::string name, Split split, Tensor images, std::vector<std::uint8_t> labels)
    : name_(std::move(name)), split_(split), images_(std::move(images)), labels_(std::move(labels)) {
    if (labels_.empty()) throw std::invalid_argument("dataset: no records");
    if (images_.rank() != 4) throw ShapeError("dataset: images must be [N,H,W,C]");
    if (images_.extent(0) != labels_.size()) {
        throw FormatError(FormatError::Kind::count_mismatch, "dataset: " + std::to_string(images_.extent(0)) +
                                                                 " images but " + std::to_string(labels_.size()) + " labels");
    }
    for (double v : images_.values()) {
        if (!(v >= 0.0 && v <= 1.0)) throw std::invalid_argument("dataset: pixel outside [0,1]");
    }
    for (auto l : labels_) {
        if (l >= 10) throw std::invalid_argument("dataset: label " + std::to_string(l) + " out of range");
    }
}

Tensor Dataset::image(std::size_t i) const {
    if (i >= size()) throw std::out_of_range("dataset: index " + std::to_string(i) + " out of range");
    const std::size_t n = image_size();
    const auto first = images_.values().begin() + static_cast<std::ptrdiff_t>(i * n);
    return Tensor(image_shape(), std::vector<double>(first, first + static_cast<std::ptrdiff_t>(n)));
}

Dataset Dataset::head(std::size_t count) const {
    std::vector<std::size_t> idx(std::min(count, size()));
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    return select(idx);
}

Dataset Dataset::select(const std::vector<std::size_t>& indices) const {
    const std::size_t n = image_size();
    std::vector<double> data;
    data.reserve(indices.size() * n);
    std::vector<std::uint8_t> labels;
    labels.reserve(indices.size());
    for (std::size_t i : indices) {
        if (i >= size()) throw std::out_of_range("dataset: index " + std::to_string(i) + " out of range");
        const auto first = images_.values().begin() + static_cast<std::ptrdiff_t>(i * n);
        data.insert(data.end(), first, first + static_cast<std::ptrdiff_t>(n));
        labels.push_back(labels_[i]);
    }
    Shape shape = image_shape();
    shape.insert(shape.begin(), indices.size());
    return Dataset(name_, split_, Tensor(std::move(shape), std::move(data)), std::move(labels));
}

Dataset load_idx(const std::filesystem::path& images, const std::filesystem::path& labels, Split split) {
    const auto img = read_file(images);
    const auto lab = read_file(labels);

    if (read_be32(img, 0, images) != kIdxImageMagic) {
        throw FormatError(FormatError::Kind::bad_magic, "bad magic in IDX image file " + images.string());
    }
    if (read_be32(lab, 0, labels) != kIdxLabelMagic) {
        throw FormatError(FormatError::Kind::bad_magic, "bad magic in IDX label file " + labels.string());
    }
    const std::size_t count = read_be32(img, 4, images);
    const std::size_t rows = read_be32(img, 8, images);
    const std::size_t cols = read_be32(img, 12, images);
    const std::size_t label_count = read_be32(lab, 4, labels);
    if (count != label_count) {
        throw FormatError(FormatError::Kind::count_mismatch, "IDX count mismatch: " + std::to_string(count) +
                                                                 " images, " + std::to_string(label_count) + " labels");
    }
    if (count == 0 || rows == 0 || cols == 0) throw FormatError(FormatError::Kind::bad_length, "empty IDX file");
    const std::size_t pixels = rows * cols;
    if (img.size() < 16 + count * pixels) {
        throw FormatError(FormatError::Kind::truncated, "truncated IDX image payload in " + images.string());
    }
    if (lab.size() < 8 + count) {
        throw FormatError(FormatError::Kind::truncated, "truncated IDX label payload in " + labels.string());
    }

    std::vector<double> data(count * pixels);
    for (std::size_t i = 0; i < data.size(); ++i) data[i] = img[16 + i] / 255.0;
    std::vector<std::uint8_t> lbl(lab.begin() + 8, lab.begin() + 8 + static_cast<std::ptrdiff_t>(count));
    return Dataset("mnist", split, Tensor({count, rows, cols, 1}, std::move(data)), std::move(lbl));
}

Dataset load_mnist(const std::filesystem::path& dir, Split split) {
    const std::string prefix = split == Split::train ? "train" : "t10k";
    return load_idx(dir / (prefix + "-images-idx3-ubyte"), dir / (prefix + "-labels-idx1-ubyte"), split);
}

Dataset load_cifar10_batch(const std::filesystem::path& file, Split split) {
    const auto bytes = read_file(file);
    if (bytes.empty() || bytes.size() % kCifarRecord != 0) {
        throw FormatError(FormatError::Kind::bad_length, "CIFAR-10 file " + file.string() + " has length " +
                                                             std::to_string(bytes.size()) + ", not a multiple of 3073");
    }
    const std::size_t count = bytes.size() / kCifarRecord;
    const std::size_t plane = kCifarSide * kCifarSide;
    std::vector<double> data(count * plane * 3);
    std::vector<std::uint8_t> labels(count);
    for (std::size_t r = 0; r < count; ++r) {
        const std::uint8_t* rec = bytes.data() + r * kCifarRecord;
        labels[r] = rec[0];
        double* out = data.data() + r * plane * 3;
        // channel-planar on disk, interleaved [H,W,C] in memory
        for (std::size_t c = 0; c < 3; ++c) {
            for (std::size_t p = 0; p < plane; ++p) out[p * 3 + c] = rec[1 + c * plane + p] / 255.0;
        }
    }
    return Dataset("cifar10", split, Tensor({count, kCifarSide, kCifarSide, 3}, std::move(data)), std::move(labels));
}

Dataset load_cifar10(const std::filesystem::path& dir, Split split) {
    if (split == Split::test) return load_cifar10_batch(dir / "test_batch.bin", split);
    std::vector<double> data;
    std::vector<std::uint8_t> labels;
    for (int b = 1; b <= 5; ++b) {
        Dataset part = load_cifar10_batch(dir / ("data_batch_" + std::to_string(b) + ".bin"), split);
        data.insert(data.end(), part.images().values().begin(), part.images().values().end());
        labels.insert(labels.end(), part.labels().begin(), part.labels().end());
    }
    const std::size_t n = labels.size();
    return Dataset("cifar10", split, Tensor({n, kCifarSide, kCifarSide, 3}, std::move(data)), std::move(labels));
}

}  // namespace qusec
