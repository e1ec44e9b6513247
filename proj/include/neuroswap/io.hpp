#pragma once

// NSWT binary tensor format:
//   magic "NSWT" | u8 version=1 | u8 dtype (0=f32, 1=f64) | u8 ndim |
//   little-endian u64 dims | raw little-endian scalars, row-major.
// Checkpoints are a JSON manifest followed by named NSWT blobs.

#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "neuroswap/errors.hpp"
#include "neuroswap/tensor.hpp"

namespace neuroswap {

namespace detail {

inline void write_bytes(std::ostream& os, const void* p, size_t n) {
  os.write(reinterpret_cast<const char*>(p), static_cast<std::streamsize>(n));
  if (!os) throw IoError("write failed");
}

inline void read_bytes(std::istream& is, void* p, size_t n) {
  is.read(reinterpret_cast<char*>(p), static_cast<std::streamsize>(n));
  if (is.gcount() != static_cast<std::streamsize>(n)) throw IoError("unexpected end of file");
}

template <typename T>
constexpr uint8_t nswt_dtype() {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>, "NSWT supports f32/f64");
  return std::is_same_v<T, float> ? 0 : 1;
}

}  // namespace detail

// This code assumes a little-endian host, as everything x86/ARM we target is.

template <typename T>
void write_nswt(std::ostream& os, const TensorT<T>& t) {
  detail::write_bytes(os, "NSWT", 4);
  uint8_t header[3] = {1, detail::nswt_dtype<T>(), static_cast<uint8_t>(t.ndim())};
  detail::write_bytes(os, header, 3);
  for (int64_t d : t.shape()) {
    uint64_t v = static_cast<uint64_t>(d);
    detail::write_bytes(os, &v, 8);
  }
  detail::write_bytes(os, t.data().data(), sizeof(T) * t.numel());
}

template <typename T>
void save_nswt(const std::string& path, const TensorT<T>& t) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open for write: " + path);
  write_nswt(os, t);
}

template <typename T>
TensorT<T> read_nswt(std::istream& is) {
  char magic[4];
  detail::read_bytes(is, magic, 4);
  if (std::memcmp(magic, "NSWT", 4) != 0) throw IoError("bad NSWT magic");
  uint8_t header[3];
  detail::read_bytes(is, header, 3);
  if (header[0] != 1) throw IoError("unsupported NSWT version " + std::to_string(header[0]));
  if (header[1] != detail::nswt_dtype<T>())
    throw IoError("NSWT dtype mismatch: file has " + std::string(header[1] == 0 ? "f32" : "f64"));
  Shape shape(header[2]);
  for (auto& d : shape) {
    uint64_t v;
    detail::read_bytes(is, &v, 8);
    d = static_cast<int64_t>(v);
    if (d <= 0) throw IoError("NSWT: non-positive extent");
  }
  std::vector<T> data(shape_numel(shape));
  detail::read_bytes(is, data.data(), sizeof(T) * data.size());
  return TensorT<T>::from_data(std::move(shape), std::move(data));
}

template <typename T>
TensorT<T> load_nswt(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open: " + path);
  return read_nswt<T>(is);
}

inline uint8_t peek_nswt_dtype(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open: " + path);
  char magic[4];
  detail::read_bytes(is, magic, 4);
  if (std::memcmp(magic, "NSWT", 4) != 0) throw IoError("bad NSWT magic");
  uint8_t header[2];
  detail::read_bytes(is, header, 2);
  return header[1];
}

// ---------------------------------------------------------------------------
// Checkpoint container: u64 manifest length, manifest JSON (utf-8), then per
// tensor: u64 name length, name bytes, NSWT blob. Tensor order matches the
// manifest's "tensors" array.
// ---------------------------------------------------------------------------

struct Checkpoint {
  std::string manifest_json;
  std::vector<std::pair<std::string, Tensor>> tensors;

  const Tensor& find(const std::string& name) const {
    for (const auto& [n, t] : tensors)
      if (n == name) return t;
    throw IoError("checkpoint tensor not found: " + name);
  }
  bool has(const std::string& name) const {
    for (const auto& [n, t] : tensors)
      if (n == name) return true;
    return false;
  }
};

inline void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open for write: " + path);
  uint64_t mlen = ckpt.manifest_json.size();
  detail::write_bytes(os, &mlen, 8);
  detail::write_bytes(os, ckpt.manifest_json.data(), mlen);
  for (const auto& [name, t] : ckpt.tensors) {
    uint64_t nlen = name.size();
    detail::write_bytes(os, &nlen, 8);
    detail::write_bytes(os, name.data(), nlen);
    write_nswt(os, t);
  }
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open: " + path);
  Checkpoint ckpt;
  uint64_t mlen;
  detail::read_bytes(is, &mlen, 8);
  ckpt.manifest_json.resize(mlen);
  detail::read_bytes(is, ckpt.manifest_json.data(), mlen);
  while (is.peek() != EOF) {
    uint64_t nlen;
    detail::read_bytes(is, &nlen, 8);
    std::string name(nlen, '\0');
    detail::read_bytes(is, name.data(), nlen);
    ckpt.tensors.emplace_back(std::move(name), read_nswt<float>(is));
  }
  return ckpt;
}

}  // namespace neuroswap
