#include "canon/checkpoint.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>

namespace canon {

namespace {

static_assert(sizeof(double) == 8);

void write_f64_le(std::ostream& os, const std::vector<double>& values) {
    if constexpr (std::endian::native == std::endian::little) {
        os.write(reinterpret_cast<const char*>(values.data()),
                 static_cast<std::streamsize>(values.size() * 8));
    } else {
        for (double v : values) {
            std::uint64_t bits;
            std::memcpy(&bits, &v, 8);
            char buf[8];
            for (int i = 0; i < 8; ++i) buf[i] = static_cast<char>((bits >> (8 * i)) & 0xff);
            os.write(buf, 8);
        }
    }
}

std::vector<double> read_f64_le(std::istream& is, std::size_t count, const std::string& path) {
    std::vector<double> values(count);
    if constexpr (std::endian::native == std::endian::little) {
        is.read(reinterpret_cast<char*>(values.data()), static_cast<std::streamsize>(count * 8));
    } else {
        for (std::size_t i = 0; i < count; ++i) {
            char buf[8];
            is.read(buf, 8);
            std::uint64_t bits = 0;
            for (int b = 0; b < 8; ++b)
                bits |= static_cast<std::uint64_t>(static_cast<unsigned char>(buf[b])) << (8 * b);
            std::memcpy(&values[i], &bits, 8);
        }
    }
    if (!is)
        throw IoError("CANON1: truncated payload in " + path + " at byte offset " +
                      std::to_string(static_cast<long long>(is.tellg())));
    return values;
}

}  // namespace

void write_canon1(const std::string& path,
                  const std::vector<std::pair<std::string, Tensor>>& tensors) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("CANON1: cannot open " + path + " for writing");
    os << "CANON1\n" << tensors.size() << "\n";
    for (const auto& [name, t] : tensors) {
        os << name << "\n";
        const Shape& s = t.shape();
        for (std::size_t i = 0; i < s.size(); ++i) {
            if (i) os << " ";
            os << s[i];
        }
        os << "\n";
        write_f64_le(os, t.data());
    }
    if (!os) throw IoError("CANON1: write failure on " + path);
}

std::vector<std::pair<std::string, Tensor>> read_canon1(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("CANON1: cannot open " + path);
    std::string magic;
    std::getline(is, magic);
    if (magic != "CANON1")
        throw IoError("CANON1: bad magic in " + path + " (expected CANON1, got '" + magic +
                      "') at byte offset 0");
    std::string line;
    std::getline(is, line);
    std::size_t count = 0;
    try {
        count = std::stoull(line);
    } catch (const std::exception&) {
        throw IoError("CANON1: bad tensor count line '" + line + "' in " + path);
    }
    std::vector<std::pair<std::string, Tensor>> tensors;
    tensors.reserve(count);
    for (std::size_t i = 0; i < count; ++i) {
        std::string name;
        if (!std::getline(is, name))
            throw IoError("CANON1: truncated header (tensor " + std::to_string(i) + ") in " + path);
        std::string shape_line;
        if (!std::getline(is, shape_line))
            throw IoError("CANON1: missing shape line for '" + name + "' in " + path);
        Shape shape;
        std::istringstream ss(shape_line);
        std::size_t dim;
        while (ss >> dim) shape.push_back(dim);
        std::vector<double> data = read_f64_le(is, numel(shape), path);
        tensors.emplace_back(name, Tensor::from_data(std::move(shape), std::move(data)));
    }
    return tensors;
}

void save_checkpoint(const std::string& path, const ParameterStore& params) {
    std::vector<std::pair<std::string, Tensor>> tensors;
    tensors.reserve(params.size());
    for (const auto& [name, t] : params.items()) tensors.emplace_back(name, t);
    write_canon1(path, tensors);
}

void load_checkpoint(const std::string& path, ParameterStore& params) {
    auto tensors = read_canon1(path);
    if (tensors.size() != params.size())
        throw IoError("checkpoint " + path + ": tensor count " + std::to_string(tensors.size()) +
                      " does not match parameter count " + std::to_string(params.size()));
    for (auto& [name, t] : tensors) {
        if (!params.contains(name))
            throw IoError("checkpoint " + path + ": unknown parameter '" + name + "'");
        Tensor& dst = params.at(name);
        if (dst.shape() != t.shape())
            throw IoError("checkpoint " + path + ": shape mismatch for '" + name + "': " +
                          shape_str(dst.shape()) + " vs " + shape_str(t.shape()));
        dst.raw_data() = t.data();
    }
}

}  // namespace canon
