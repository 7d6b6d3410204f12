#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "actloc/tensor.hpp"

namespace actloc {

enum class CkptErrorKind { io, magic, version, truncated, checksum };

class CheckpointError : public std::runtime_error {
 public:
  CkptErrorKind kind;
  CheckpointError(CkptErrorKind k, const std::string& msg) : std::runtime_error(msg), kind(k) {}
};

// Reflected CRC-32 (IEEE 802.3 polynomial).
inline std::uint32_t crc32(const std::uint8_t* data, std::size_t n) {
  static const auto table = [] {
    std::array<std::uint32_t, 256> t{};
    for (std::uint32_t i = 0; i < 256; ++i) {
      std::uint32_t c = i;
      for (int b = 0; b < 8; ++b) c = (c & 1) ? 0xEDB88320u ^ (c >> 1) : c >> 1;
      t[i] = c;
    }
    return t;
  }();
  std::uint32_t crc = 0xFFFFFFFFu;
  for (std::size_t i = 0; i < n; ++i) crc = table[(crc ^ data[i]) & 0xFFu] ^ (crc >> 8);
  return crc ^ 0xFFFFFFFFu;
}

// Named-tensor bag with helpers for scalar metadata entries.
struct Checkpoint {
  static constexpr std::uint32_t kVersion = 1;
  std::vector<std::pair<std::string, Tensor>> entries;

  void put(const std::string& name, const Tensor& t) {
    for (auto& [n, v] : entries)
      if (n == name) {
        v = t.detach_copy();
        return;
      }
    entries.emplace_back(name, t.detach_copy());
  }
  void put_scalar(const std::string& name, double v) { put(name, Tensor::scalar(v)); }

  const Tensor* find(const std::string& name) const {
    for (const auto& [n, v] : entries)
      if (n == name) return &v;
    return nullptr;
  }
  const Tensor& get(const std::string& name) const {
    const Tensor* t = find(name);
    if (!t) throw std::runtime_error("checkpoint: missing entry '" + name + "'");
    return *t;
  }
  double get_scalar(const std::string& name) const { return get(name).value(); }

  // u64 values are split into two exactly-representable 32-bit halves.
  void put_u64(const std::string& name, std::uint64_t v) {
    put_scalar(name + "_lo", static_cast<double>(v & 0xFFFFFFFFull));
    put_scalar(name + "_hi", static_cast<double>(v >> 32));
  }
  std::uint64_t get_u64(const std::string& name) const {
    const auto lo = static_cast<std::uint64_t>(get_scalar(name + "_lo"));
    const auto hi = static_cast<std::uint64_t>(get_scalar(name + "_hi"));
    return (hi << 32) | lo;
  }
};

namespace detail {

inline void put_u16(std::vector<std::uint8_t>& b, std::uint16_t v) {
  b.push_back(static_cast<std::uint8_t>(v & 0xFF));
  b.push_back(static_cast<std::uint8_t>(v >> 8));
}
inline void put_u32(std::vector<std::uint8_t>& b, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) b.push_back(static_cast<std::uint8_t>((v >> (8 * i)) & 0xFF));
}
inline void put_f64(std::vector<std::uint8_t>& b, double v) {
  std::uint64_t bits;
  std::memcpy(&bits, &v, 8);
  for (int i = 0; i < 8; ++i) b.push_back(static_cast<std::uint8_t>((bits >> (8 * i)) & 0xFF));
}

struct ByteReader {
  const std::uint8_t* p;
  std::size_t n;
  std::size_t pos = 0;

  void need(std::size_t k, const char* what) {
    if (pos + k > n)
      throw CheckpointError(CkptErrorKind::truncated,
                            std::string("checkpoint truncated while reading ") + what);
  }
  std::uint16_t u16(const char* what) {
    need(2, what);
    const std::uint16_t v = static_cast<std::uint16_t>(p[pos] | (p[pos + 1] << 8));
    pos += 2;
    return v;
  }
  std::uint32_t u32(const char* what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(p[pos + static_cast<std::size_t>(i)]) << (8 * i);
    pos += 4;
    return v;
  }
  std::uint8_t u8(const char* what) {
    need(1, what);
    return p[pos++];
  }
  double f64(const char* what) {
    need(8, what);
    std::uint64_t bits = 0;
    for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(p[pos + static_cast<std::size_t>(i)]) << (8 * i);
    pos += 8;
    double v;
    std::memcpy(&v, &bits, 8);
    return v;
  }
};

}  // namespace detail

// Layout: magic "ORNT" | u32 version | u32 entry count | entries | u32 crc32.
// Per entry: u16 name length, name bytes, u8 ndim, u32 per dim, f64 payload.
// All integers and floats little-endian; the checksum covers everything after
// the magic. Entries are written sorted by name so identical contents always
// produce identical bytes.
inline void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
  std::vector<std::pair<std::string, const Tensor*>> sorted;
  sorted.reserve(ckpt.entries.size());
  for (const auto& [n, t] : ckpt.entries) sorted.emplace_back(n, &t);
  std::sort(sorted.begin(), sorted.end(),
            [](const auto& a, const auto& b) { return a.first < b.first; });

  std::vector<std::uint8_t> body;
  detail::put_u32(body, Checkpoint::kVersion);
  detail::put_u32(body, static_cast<std::uint32_t>(sorted.size()));
  for (const auto& [name, t] : sorted) {
    if (name.size() > 0xFFFF)
      throw CheckpointError(CkptErrorKind::io, "checkpoint: entry name too long: " + name);
    detail::put_u16(body, static_cast<std::uint16_t>(name.size()));
    body.insert(body.end(), name.begin(), name.end());
    body.push_back(static_cast<std::uint8_t>(t->ndim()));
    for (int d = 0; d < t->ndim(); ++d) detail::put_u32(body, static_cast<std::uint32_t>(t->dim(d)));
    for (long long i = 0; i < t->size(); ++i) detail::put_f64(body, (*t)[i]);
  }
  const std::uint32_t crc = crc32(body.data(), body.size());

  const std::string tmp = path + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw CheckpointError(CkptErrorKind::io, "checkpoint: cannot open " + tmp);
    f.write("ORNT", 4);
    f.write(reinterpret_cast<const char*>(body.data()), static_cast<std::streamsize>(body.size()));
    std::vector<std::uint8_t> tail;
    detail::put_u32(tail, crc);
    f.write(reinterpret_cast<const char*>(tail.data()), 4);
    if (!f) throw CheckpointError(CkptErrorKind::io, "checkpoint: write failed for " + tmp);
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0)
    throw CheckpointError(CkptErrorKind::io, "checkpoint: rename to " + path + " failed");
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw CheckpointError(CkptErrorKind::io, "checkpoint: cannot open " + path);
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)),
                                  std::istreambuf_iterator<char>());
  if (bytes.size() < 4 || std::memcmp(bytes.data(), "ORNT", 4) != 0)
    throw CheckpointError(CkptErrorKind::magic, "checkpoint: bad magic in " + path);
  if (bytes.size() < 8 + 4)
    throw CheckpointError(CkptErrorKind::truncated, "checkpoint: file too short: " + path);

  const std::uint8_t* body = bytes.data() + 4;
  const std::size_t body_len = bytes.size() - 8;  // magic stripped, crc held back
  std::uint32_t stored = 0;
  for (int i = 0; i < 4; ++i)
    stored |= static_cast<std::uint32_t>(bytes[bytes.size() - 4 + static_cast<std::size_t>(i)]) << (8 * i);
  if (crc32(body, body_len) != stored)
    throw CheckpointError(CkptErrorKind::checksum, "checkpoint: checksum mismatch in " + path);

  detail::ByteReader r{body, body_len};
  const std::uint32_t version = r.u32("version");
  if (version != Checkpoint::kVersion)
    throw CheckpointError(CkptErrorKind::version,
                          "checkpoint: version " + std::to_string(version) + " unsupported");
  const std::uint32_t count = r.u32("entry count");
  Checkpoint ckpt;
  ckpt.entries.reserve(count);
  for (std::uint32_t e = 0; e < count; ++e) {
    const std::uint16_t name_len = r.u16("name length");
    r.need(name_len, "name");
    std::string name(reinterpret_cast<const char*>(r.p + r.pos), name_len);
    r.pos += name_len;
    const int ndim = r.u8("rank");
    Shape shape;
    long long numel = 1;
    for (int d = 0; d < ndim; ++d) {
      const std::uint32_t dim = r.u32("dimension");
      shape.push_back(static_cast<int>(dim));
      numel *= dim;
    }
    Tensor t(shape);
    for (long long i = 0; i < numel; ++i) t[i] = r.f64("payload");
    ckpt.entries.emplace_back(std::move(name), std::move(t));
  }
  if (r.pos != body_len)
    throw CheckpointError(CkptErrorKind::truncated,
                          "checkpoint: trailing bytes after last entry in " + path);
  return ckpt;
}

}  // namespace actloc
