#include "ftex/tensor_file.hpp"

#include <fstream>

#include "binio.hpp"

namespace ftex {

namespace {
constexpr char kContainerMagic[9] = "FTEXMP01";
constexpr std::uint32_t kMaxName = 4096;
constexpr std::uint64_t kMaxElements = 1ull << 28;
}  // namespace

void save_container(const std::filesystem::path& path, const NamedTensors& tensors, std::string_view meta) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot open '" + path.string() + "' for writing");
  out.write(kContainerMagic, 8);
  binio::put_u32(out, kContainerVersion);
  binio::put_u32(out, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& [name, m] : tensors) {
    binio::put_u32(out, static_cast<std::uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    binio::put_u32(out, static_cast<std::uint32_t>(m.rows));
    binio::put_u32(out, static_cast<std::uint32_t>(m.cols));
    binio::put_floats(out, m.data);
  }
  binio::put_u32(out, static_cast<std::uint32_t>(meta.size()));
  out.write(meta.data(), static_cast<std::streamsize>(meta.size()));
  if (!out) throw Error("write failed for '" + path.string() + "'");
}

TensorContainer load_container(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open '" + path.string() + "'");
  binio::expect_magic(in, kContainerMagic);
  const std::uint32_t version = binio::get_u32(in, "version");
  if (version != kContainerVersion) {
    throw FormatError("container version " + std::to_string(version) + " is not supported (expected " +
                      std::to_string(kContainerVersion) + ")");
  }
  const std::uint32_t count = binio::get_u32(in, "tensor count");
  TensorContainer c;
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::uint32_t len = binio::get_u32(in, "name length");
    if (len == 0 || len > kMaxName) throw FormatError("corrupt tensor name length");
    std::string name(len, '\0');
    binio::read_exact(in, name.data(), len, "tensor name");
    const std::uint32_t rows = binio::get_u32(in, "tensor rows");
    const std::uint32_t cols = binio::get_u32(in, "tensor cols");
    if (static_cast<std::uint64_t>(rows) * cols > kMaxElements) throw FormatError("corrupt tensor shape for '" + name + "'");
    Matrix m(rows, cols);
    binio::get_floats(in, m.data, "tensor payload");
    c.tensors.add(std::move(name), std::move(m));
  }
  const std::uint32_t meta_len = binio::get_u32(in, "metadata length");
  if (meta_len > (1u << 24)) throw FormatError("corrupt metadata length");
  c.meta.resize(meta_len);
  if (meta_len > 0) binio::read_exact(in, c.meta.data(), meta_len, "metadata");
  if (in.peek() != std::char_traits<char>::eof()) throw FormatError("trailing bytes after container");
  return c;
}

}  // namespace ftex
