#pragma once

// Versioned binary parameter container.
//
// Layout (all integers little-endian):
//   bytes 0..3   magic "ASR1"
//   u32          format version (1)
//   u8           precision in bytes (4 = float, 8 = double)
//   u32          entry count
//   per entry:   u16 name length, name bytes,
//                u8 rank, u32 dims[rank],
//                u64 offset into the data section (in elements)
//   data section: raw scalar payload, concatenated in entry order
//
// Entries cover trainable parameters, batchnorm running statistics and any
// extra named vectors the caller passes (e.g. scale gates).

#include <cstdint>
#include <cstdio>
#include <cstring>
#include <string>
#include <vector>

#include "asr/common.hpp"
#include "asr/tensor.hpp"

namespace asr {

namespace detail {

inline void write_bytes(std::FILE* f, const void* p, size_t n) {
  if (std::fwrite(p, 1, n, f) != n) throw IoError("checkpoint: short write");
}

inline void read_bytes(std::FILE* f, void* p, size_t n) {
  if (std::fread(p, 1, n, f) != n) throw IoError("checkpoint: short read");
}

template <typename U>
void write_pod(std::FILE* f, U v) {
  write_bytes(f, &v, sizeof(U));
}

template <typename U>
U read_pod(std::FILE* f) {
  U v;
  read_bytes(f, &v, sizeof(U));
  return v;
}

}  // namespace detail

template <typename T>
void save_checkpoint(const std::string& path, const std::vector<NamedTensor<T>>& entries) {
  std::FILE* f = std::fopen(path.c_str(), "wb");
  if (!f) throw IoError("checkpoint: cannot open " + path + " for writing");
  try {
    detail::write_bytes(f, "ASR1", 4);
    detail::write_pod<uint32_t>(f, 1);
    detail::write_pod<uint8_t>(f, sizeof(T));
    detail::write_pod<uint32_t>(f, static_cast<uint32_t>(entries.size()));
    uint64_t offset = 0;
    for (const auto& e : entries) {
      detail::write_pod<uint16_t>(f, static_cast<uint16_t>(e.name.size()));
      detail::write_bytes(f, e.name.data(), e.name.size());
      detail::write_pod<uint8_t>(f, static_cast<uint8_t>(e.tensor.ndim()));
      for (int i = 0; i < e.tensor.ndim(); ++i) {
        detail::write_pod<uint32_t>(f, static_cast<uint32_t>(e.tensor.dim(i)));
      }
      detail::write_pod<uint64_t>(f, offset);
      offset += static_cast<uint64_t>(e.tensor.numel());
    }
    for (const auto& e : entries) {
      detail::write_bytes(f, e.tensor.data(), sizeof(T) * static_cast<size_t>(e.tensor.numel()));
    }
  } catch (...) {
    std::fclose(f);
    throw;
  }
  std::fclose(f);
}

template <typename T>
std::vector<NamedTensor<T>> load_checkpoint(const std::string& path) {
  std::FILE* f = std::fopen(path.c_str(), "rb");
  if (!f) throw IoError("checkpoint: cannot open " + path);
  std::vector<NamedTensor<T>> out;
  try {
    char magic[4];
    detail::read_bytes(f, magic, 4);
    if (std::memcmp(magic, "ASR1", 4) != 0) throw IoError("checkpoint: bad magic");
    const uint32_t version = detail::read_pod<uint32_t>(f);
    if (version != 1) throw IoError(str_format("checkpoint: unsupported version %u", version));
    const uint8_t prec = detail::read_pod<uint8_t>(f);
    if (prec != sizeof(T)) {
      throw IoError(str_format("checkpoint: stores %u-byte scalars, expected %zu-byte",
                               static_cast<unsigned>(prec), sizeof(T)));
    }
    const uint32_t count = detail::read_pod<uint32_t>(f);
    std::vector<uint64_t> offsets;
    for (uint32_t i = 0; i < count; ++i) {
      const uint16_t name_len = detail::read_pod<uint16_t>(f);
      std::string name(name_len, '\0');
      detail::read_bytes(f, name.data(), name_len);
      const uint8_t rank = detail::read_pod<uint8_t>(f);
      Shape shape(rank);
      for (uint8_t d = 0; d < rank; ++d) {
        shape[d] = static_cast<int64_t>(detail::read_pod<uint32_t>(f));
      }
      offsets.push_back(detail::read_pod<uint64_t>(f));
      out.push_back({std::move(name), Tensor<T>::zeros(std::move(shape))});
    }
    for (uint32_t i = 0; i < count; ++i) {
      // entries are stored contiguously in order; offsets enable sparse reads
      (void)offsets;
      auto& t = out[i].tensor;
      detail::read_bytes(f, t.data(), sizeof(T) * static_cast<size_t>(t.numel()));
    }
  } catch (...) {
    std::fclose(f);
    throw;
  }
  std::fclose(f);
  return out;
}

// Copies checkpoint values into a live model's named tensors; every model
// tensor must be present with a matching shape.
template <typename T>
void restore_named(const std::vector<NamedTensor<T>>& loaded,
                   std::vector<NamedTensor<T>> targets) {
  for (auto& tgt : targets) {
    bool found = false;
    for (const auto& src : loaded) {
      if (src.name != tgt.name) continue;
      if (src.tensor.shape() != tgt.tensor.shape()) {
        throw IoError(str_format("checkpoint: %s has shape %s, model expects %s",
                                 src.name.c_str(), shape_str(src.tensor.shape()).c_str(),
                                 shape_str(tgt.tensor.shape()).c_str()));
      }
      tgt.tensor.copy_values_from(src.tensor);
      found = true;
      break;
    }
    if (!found) throw IoError("checkpoint: missing entry " + tgt.name);
  }
}

}  // namespace asr
