#pragma once

#include <string>
#include <utility>
#include <vector>

#include "canon/tensor.hpp"

namespace canon {

/// I/O failure (missing file, bad magic, truncated payload). Messages carry
/// byte offsets where applicable.
class IoError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// CANON1 container: ASCII magic "CANON1\n", tensor count as a decimal line,
/// then per tensor: name line, shape as space-separated decimals line, and a
/// row-major little-endian f64 payload of the declared size. Round-trips are
/// bit-exact.
void write_canon1(const std::string& path,
                  const std::vector<std::pair<std::string, Tensor>>& tensors);
std::vector<std::pair<std::string, Tensor>> read_canon1(const std::string& path);

void save_checkpoint(const std::string& path, const ParameterStore& params);

/// Loads a checkpoint into an existing store; every name must resolve and
/// shapes must match (architecture check).
void load_checkpoint(const std::string& path, ParameterStore& params);

}  // namespace canon
