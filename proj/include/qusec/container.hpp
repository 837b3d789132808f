#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "qusec/tensor.hpp"

namespace qusec {

/// Binary tensor container shared by weight files ("QSN1") and adversarial
/// batches ("QSA1"). Layout, all integers little-endian:
///
///     magic[4] | version u32 | header: u32 length + bytes | tensor count u32 |
///     per tensor: name (u32 length + bytes), rank u32, extents u32[rank], f64 payload
struct TensorContainer {
    std::uint32_t version = 1;
    std::string header;
    std::vector<std::pair<std::string, Tensor>> tensors;

    const Tensor& at(const std::string& name) const;
};

using Magic = std::array<char, 4>;

inline constexpr Magic kWeightsMagic{'Q', 'S', 'N', '1'};
inline constexpr Magic kAdversarialMagic{'Q', 'S', 'A', '1'};

std::vector<std::uint8_t> encode_container(const Magic& magic, const TensorContainer& c);
/// Throws FormatError: bad_magic, or truncated (naming the tensor being read).
TensorContainer decode_container(const Magic& magic, const std::vector<std::uint8_t>& bytes);

void write_container(const std::filesystem::path& path, const Magic& magic, const TensorContainer& c);
TensorContainer read_container(const std::filesystem::path& path, const Magic& magic);

}  // namespace qusec
