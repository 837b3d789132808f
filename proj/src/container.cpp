#include "qusec/container.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <limits>

#include "qusec/errors.hpp"

namespace qusec {
namespace {

static_assert(std::numeric_limits<double>::is_iec559);

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void put_string(std::vector<std::uint8_t>& out, const std::string& s) {
    put_u32(out, static_cast<std::uint32_t>(s.size()));
    out.insert(out.end(), s.begin(), s.end());
}

void put_f64(std::vector<std::uint8_t>& out, double v) {
    const auto bits = std::bit_cast<std::uint64_t>(v);
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(bits >> (8 * i)));
}

class Reader {
public:
    explicit Reader(const std::vector<std::uint8_t>& bytes) : bytes_(bytes) {}

    void need(std::size_t n, const std::string& what) const {
        if (bytes_.size() - pos_ < n) throw FormatError(FormatError::Kind::truncated, "truncated file: " + what);
    }
    std::uint32_t u32(const std::string& what) {
        need(4, what);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= std::uint32_t{bytes_[pos_ + i]} << (8 * i);
        pos_ += 4;
        return v;
    }
    std::string str(const std::string& what) {
        const std::uint32_t n = u32(what);
        need(n, what);
        std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
        pos_ += n;
        return s;
    }
    double f64() {
        std::uint64_t bits = 0;
        for (int i = 0; i < 8; ++i) bits |= std::uint64_t{bytes_[pos_ + i]} << (8 * i);
        pos_ += 8;
        return std::bit_cast<double>(bits);
    }
    bool done() const { return pos_ == bytes_.size(); }

private:
    const std::vector<std::uint8_t>& bytes_;
    std::size_t pos_ = 0;
};

}  // namespace

const Tensor& TensorContainer::at(const std::string& name) const {
    for (const auto& [n, t] : tensors) {
        if (n == name) return t;
    }
    throw FormatError(FormatError::Kind::shape_mismatch, "missing tensor '" + name + "'");
}

std::vector<std::uint8_t> encode_container(const Magic& magic, const TensorContainer& c) {
    std::vector<std::uint8_t> out(magic.begin(), magic.end());
    put_u32(out, c.version);
    put_string(out, c.header);
    put_u32(out, static_cast<std::uint32_t>(c.tensors.size()));
    for (const auto& [name, t] : c.tensors) {
        put_string(out, name);
        put_u32(out, static_cast<std::uint32_t>(t.rank()));
        for (std::size_t e : t.shape()) put_u32(out, static_cast<std::uint32_t>(e));
        for (double v : t.values()) put_f64(out, v);
    }
    return out;
}

TensorContainer decode_container(const Magic& magic, const std::vector<std::uint8_t>& bytes) {
    if (bytes.size() < 4 || std::memcmp(bytes.data(), magic.data(), 4) != 0) {
        throw FormatError(FormatError::Kind::bad_magic,
                          "bad magic: expected '" + std::string(magic.begin(), magic.end()) + "'");
    }
    std::vector<std::uint8_t> body(bytes.begin() + 4, bytes.end());
    Reader r(body);
    TensorContainer c;
    c.version = r.u32("version");
    c.header = r.str("header");
    const std::uint32_t count = r.u32("tensor count");
    for (std::uint32_t i = 0; i < count; ++i) {
        const std::string label = "tensor #" + std::to_string(i);
        std::string name = r.str(label + " name");
        const std::string what = "tensor '" + name + "'";
        const std::uint32_t rank = r.u32(what);
        Shape shape(rank);
        for (auto& e : shape) e = r.u32(what);
        const std::size_t n = shape_size(shape);
        r.need(n * 8, what);
        std::vector<double> data(n);
        for (auto& v : data) v = r.f64();
        c.tensors.emplace_back(std::move(name), Tensor(std::move(shape), std::move(data)));
    }
    if (!r.done()) throw FormatError(FormatError::Kind::bad_length, "trailing bytes after last tensor");
    return c;
}

void write_container(const std::filesystem::path& path, const Magic& magic, const TensorContainer& c) {
    const auto bytes = encode_container(magic, c);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw FormatError(FormatError::Kind::io, "cannot write " + path.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw FormatError(FormatError::Kind::io, "write failed for " + path.string());
}

TensorContainer read_container(const std::filesystem::path& path, const Magic& magic) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError(FormatError::Kind::io, "cannot open " + path.string());
    std::vector<std::uint8_t> bytes{std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
    return decode_container(magic, bytes);
}

}  // namespace qusec
