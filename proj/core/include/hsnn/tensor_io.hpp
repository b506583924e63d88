#pragma once

// Binary tensor files and named-parameter directories.
//
// Tensor file layout (all little-endian):
//   bytes 0-3   magic "HSNT"
//   u32         format version (1)
//   u32         rank
//   u64 x rank  dims
//   f64 x prod(dims) values, row-major

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "hsnn/numerics.hpp"

namespace hsnn {

struct Tensor {
  std::vector<std::size_t> shape;
  std::vector<double> values;
};

void write_tensor(const std::filesystem::path& path, std::span<const std::size_t> shape,
                  std::span<const double> values);
Tensor read_tensor(const std::filesystem::path& path);

// Writes one tensor file per parameter under `dir` (named after the
// parameter, '.' kept) and returns the file names in order.
std::vector<std::string> write_params(const std::filesystem::path& dir, const NamedParams& params);
// Loads each parameter from `dir`, checking shapes; missing files fail.
void read_params(const std::filesystem::path& dir, const NamedParams& params);

std::string read_text_file(const std::filesystem::path& path);
void write_text_file(const std::filesystem::path& path, const std::string& text);

}  // namespace hsnn
