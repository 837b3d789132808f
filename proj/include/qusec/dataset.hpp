#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "qusec/tensor.hpp"

namespace qusec {

enum class Split { train, test };

/// Labelled images, pixels in [0,1], stored as one [N,H,W,C] tensor.
class Dataset {
public:
    Dataset(std::string name, Split split, Tensor images, std::vector<std::uint8_t> labels);

    const std::string& name() const noexcept { return name_; }
    Split split() const noexcept { return split_; }
    std::size_t size() const noexcept { return labels_.size(); }
    Shape image_shape() const { return {images_.extent(1), images_.extent(2), images_.extent(3)}; }
    std::size_t image_size() const noexcept { return images_.size() / labels_.size(); }

    const Tensor& images() const noexcept { return images_; }
    const std::vector<std::uint8_t>& labels() const noexcept { return labels_; }
    std::size_t label(std::size_t i) const { return labels_.at(i); }
    Tensor image(std::size_t i) const;

    /// The first `count` records (or all of them if fewer).
    Dataset head(std::size_t count) const;
    /// Records at the given indices, in that order.
    Dataset select(const std::vector<std::size_t>& indices) const;

private:
    std::string name_;
    Split split_;
    Tensor images_;
    std::vector<std::uint8_t> labels_;
};

/// Reads the four standard big-endian IDX files (train-* and t10k-*) from `dir`.
/// Throws FormatError for bad magic, image/label count mismatch, or truncation.
Dataset load_mnist(const std::filesystem::path& dir, Split split);

/// Parses an IDX image/label file pair directly.
Dataset load_idx(const std::filesystem::path& images, const std::filesystem::path& labels, Split split);

/// Reads CIFAR-10 binary batches: 1 label byte then 3072 channel-planar pixel bytes per record.
/// The train split concatenates data_batch_1..5; test reads test_batch.bin.
Dataset load_cifar10(const std::filesystem::path& dir, Split split);
Dataset load_cifar10_batch(const std::filesystem::path& file, Split split);

}  // namespace qusec
