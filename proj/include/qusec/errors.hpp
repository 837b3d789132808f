#pragma once

#include <stdexcept>
#include <string>

namespace qusec {

/// Operand shapes do not agree. The message names the offending dimension.
class ShapeError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// A file on disk does not match the expected container layout.
class FormatError : public std::runtime_error {
public:
    enum class Kind { bad_magic, truncated, count_mismatch, shape_mismatch, bad_length, io };

    FormatError(Kind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}

    Kind kind() const noexcept { return kind_; }

private:
    Kind kind_;
};

/// Training or an attack produced non-finite values.
class DivergenceError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

}  // namespace qusec
