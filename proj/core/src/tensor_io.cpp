#include "hsnn/tensor_io.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

namespace hsnn {

static_assert(std::endian::native == std::endian::little,
              "tensor files are written in native order; big-endian hosts are unsupported");

namespace {

constexpr char kMagic[4] = {'H', 'S', 'N', 'T'};
constexpr std::uint32_t kVersion = 1;

template <class T>
void put(std::ostream& out, T v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T get(std::istream& in, const std::filesystem::path& path) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!in) throw FormatError(path.string() + ": truncated tensor header");
  return v;
}

}  // namespace

void write_tensor(const std::filesystem::path& path, std::span<const std::size_t> shape,
                  std::span<const double> values) {
  std::size_t count = 1;
  for (auto d : shape) count *= d;
  if (count != values.size()) {
    throw DimensionError(path.string() + ": shape does not match value count");
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot open " + path.string() + " for writing");
  out.write(kMagic, 4);
  put<std::uint32_t>(out, kVersion);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(shape.size()));
  for (auto d : shape) put<std::uint64_t>(out, d);
  out.write(reinterpret_cast<const char*>(values.data()),
            static_cast<std::streamsize>(values.size() * sizeof(double)));
  if (!out) throw FormatError("write failed for " + path.string());
}

Tensor read_tensor(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, kMagic, 4) != 0) {
    throw FormatError(path.string() + ": bad tensor magic");
  }
  const auto version = get<std::uint32_t>(in, path);
  if (version != kVersion) {
    throw FormatError(path.string() + ": unsupported tensor version " + std::to_string(version));
  }
  const auto rank = get<std::uint32_t>(in, path);
  Tensor t;
  std::size_t count = 1;
  for (std::uint32_t i = 0; i < rank; ++i) {
    t.shape.push_back(static_cast<std::size_t>(get<std::uint64_t>(in, path)));
    count *= t.shape.back();
  }
  t.values.resize(count);
  in.read(reinterpret_cast<char*>(t.values.data()),
          static_cast<std::streamsize>(count * sizeof(double)));
  if (!in) throw FormatError(path.string() + ": truncated tensor payload");
  return t;
}

std::vector<std::string> write_params(const std::filesystem::path& dir, const NamedParams& params) {
  std::filesystem::create_directories(dir);
  std::vector<std::string> files;
  for (const auto& p : params) {
    const std::string file = p.name + ".bin";
    write_tensor(dir / file, p.shape, p.values);
    files.push_back(file);
  }
  return files;
}

void read_params(const std::filesystem::path& dir, const NamedParams& params) {
  for (const auto& p : params) {
    const Tensor t = read_tensor(dir / (p.name + ".bin"));
    if (t.shape != p.shape) {
      throw FormatError("parameter '" + p.name + "': stored shape does not match the model");
    }
    std::copy(t.values.begin(), t.values.end(), p.values.begin());
  }
}

std::string read_text_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text_file(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot open " + path.string() + " for writing");
  out << text;
  if (!out) throw FormatError("write failed for " + path.string());
}

}  // namespace hsnn
