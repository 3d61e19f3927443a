#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "safer/error.hpp"
#include "safer/matrix.hpp"
#include "safer/nn.hpp"

namespace safer {

static_assert(std::endian::native == std::endian::little,
              "checkpoint format stores raw little-endian doubles");

struct NamedTensor {
  std::string name;
  Matrix value;
};

// Checkpoint layout: 8-byte magic, u32 tensor count, then per tensor a u32
// name length, the name bytes, u32 rows, u32 cols and rows*cols doubles.
inline constexpr char kCheckpointMagic[8] = {'S', 'A', 'F', 'E', 'R', 'C', 'K', '1'};

inline void write_checkpoint(const std::string& path, const std::vector<NamedTensor>& tensors) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("write_checkpoint: cannot open " + path);
  out.write(kCheckpointMagic, 8);
  auto put_u32 = [&out](uint32_t v) { out.write(reinterpret_cast<const char*>(&v), 4); };
  put_u32(static_cast<uint32_t>(tensors.size()));
  for (const auto& t : tensors) {
    put_u32(static_cast<uint32_t>(t.name.size()));
    out.write(t.name.data(), static_cast<std::streamsize>(t.name.size()));
    put_u32(static_cast<uint32_t>(t.value.rows()));
    put_u32(static_cast<uint32_t>(t.value.cols()));
    out.write(reinterpret_cast<const char*>(t.value.data()),
              static_cast<std::streamsize>(t.value.size() * sizeof(double)));
  }
  if (!out) throw DataError("write_checkpoint: short write to " + path);
}

inline std::vector<NamedTensor> read_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("read_checkpoint: cannot open " + path);
  char magic[8];
  in.read(magic, 8);
  if (!in || std::memcmp(magic, kCheckpointMagic, 8) != 0)
    throw ParseError("read_checkpoint: " + path + " is not a checkpoint file");
  auto get_u32 = [&in, &path]() {
    uint32_t v = 0;
    in.read(reinterpret_cast<char*>(&v), 4);
    if (!in) throw ParseError("read_checkpoint: truncated header in " + path);
    return v;
  };
  const uint32_t count = get_u32();
  std::vector<NamedTensor> tensors;
  tensors.reserve(count);
  for (uint32_t i = 0; i < count; ++i) {
    const uint32_t name_len = get_u32();
    std::string name(name_len, '\0');
    in.read(name.data(), name_len);
    const uint32_t rows = get_u32();
    const uint32_t cols = get_u32();
    Matrix m(static_cast<int>(rows), static_cast<int>(cols));
    in.read(reinterpret_cast<char*>(m.data()),
            static_cast<std::streamsize>(m.size() * sizeof(double)));
    if (!in) throw ParseError("read_checkpoint: truncated tensor '" + name + "' in " + path);
    tensors.push_back({std::move(name), std::move(m)});
  }
  return tensors;
}

// Copies checkpoint tensors onto an existing parameter set, matching by name
// and validating shapes. Every ref must be satisfied.
inline void load_into(const std::vector<NamedTensor>& tensors,
                      const std::vector<ParamRef>& refs) {
  for (const auto& ref : refs) {
    const NamedTensor* found = nullptr;
    for (const auto& t : tensors)
      if (t.name == ref.name) {
        found = &t;
        break;
      }
    if (!found) throw DataError("load_into: checkpoint missing tensor '" + ref.name + "'");
    if (!found->value.same_shape(*ref.value))
      throw ShapeError("load_into: tensor '" + ref.name + "' has shape " +
                       found->value.shape_str() + ", expected " + ref.value->shape_str());
    *ref.value = found->value;
  }
}

}  // namespace safer
