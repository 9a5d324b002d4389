#pragma once

#include <cstdint>
#include <cstdio>
#include <cstring>
#include <string>
#include <vector>

#include "dvs/tensor.hpp"

namespace dvs {

// On-disk snapshot: "DVWS" magic, a format version, then named typed records.
// Layout per record: name length (u32), name bytes, dtype (u8), rank (u32),
// extents (i64 each), raw payload.  All integers little-endian.  A file is
// parsed completely before any caller sees a record, so a truncated or
// oversized file never half-applies.

enum : std::uint8_t {
  kDtypeF32 = 0,   // network parameters
  kDtypeF64 = 1,   // optimizer accumulators
  kDtypeBytes = 2, // opaque state such as serialized RNG text
  kDtypeI64 = 3,   // counters
};

inline long dtype_size(std::uint8_t dt) {
  switch (dt) {
    case kDtypeF32: return 4;
    case kDtypeF64: return 8;
    case kDtypeBytes: return 1;
    case kDtypeI64: return 8;
  }
  DVS_CHECK(false, "checkpoint: unknown dtype code ", int(dt));
  return 0;
}

struct CkptRecord {
  std::string name;
  std::uint8_t dtype = kDtypeF32;
  std::vector<long> extents;
  std::vector<unsigned char> payload;

  long numel() const {
    long n = 1;
    for (long e : extents) n *= e;
    return n;
  }
};

struct Checkpoint {
  static constexpr std::uint32_t kVersion = 1;
  std::vector<CkptRecord> records;

  const CkptRecord* find(const std::string& name) const {
    for (const auto& r : records)
      if (r.name == name) return &r;
    return nullptr;
  }
  const CkptRecord& get(const std::string& name) const {
    const CkptRecord* r = find(name);
    DVS_CHECK(r != nullptr, "checkpoint: no record named '", name, "'");
    return *r;
  }
};

// ---- builders ----

template <typename T>
void add_f32(Checkpoint& c, const std::string& name, const Tensor<T>& t) {
  CkptRecord r;
  r.name = name;
  r.dtype = kDtypeF32;
  r.extents = t.shape();
  r.payload.resize(std::size_t(t.numel()) * 4);
  for (long i = 0; i < t.numel(); ++i) {
    const float f = float(t.data()[i]);
    std::memcpy(r.payload.data() + i * 4, &f, 4);
  }
  c.records.push_back(std::move(r));
}

inline void add_f64_vec(Checkpoint& c, const std::string& name,
                        const std::vector<double>& v) {
  CkptRecord r;
  r.name = name;
  r.dtype = kDtypeF64;
  r.extents = {long(v.size())};
  r.payload.resize(v.size() * 8);
  if (!v.empty()) std::memcpy(r.payload.data(), v.data(), v.size() * 8);
  c.records.push_back(std::move(r));
}

inline void add_bytes(Checkpoint& c, const std::string& name, const std::string& s) {
  CkptRecord r;
  r.name = name;
  r.dtype = kDtypeBytes;
  r.extents = {long(s.size())};
  r.payload.assign(s.begin(), s.end());
  c.records.push_back(std::move(r));
}

inline void add_i64(Checkpoint& c, const std::string& name, long value) {
  CkptRecord r;
  r.name = name;
  r.dtype = kDtypeI64;
  r.extents = {1};
  const std::int64_t v = value;
  r.payload.resize(8);
  std::memcpy(r.payload.data(), &v, 8);
  c.records.push_back(std::move(r));
}

// ---- readers ----

template <typename T>
void load_f32(const Checkpoint& c, const std::string& name, Tensor<T>& into) {
  const CkptRecord& r = c.get(name);
  DVS_CHECK(r.dtype == kDtypeF32, "checkpoint: record '", name, "' has dtype ",
            int(r.dtype), ", expected f32");
  DVS_CHECK(r.extents == into.shape(), "checkpoint: record '", name, "' shape ",
            shape_str(r.extents), " does not match parameter ",
            shape_str(into.shape()));
  for (long i = 0; i < into.numel(); ++i) {
    float f;
    std::memcpy(&f, r.payload.data() + i * 4, 4);
    into.data()[i] = T(f);
  }
}

inline std::vector<double> get_f64_vec(const Checkpoint& c, const std::string& name) {
  const CkptRecord& r = c.get(name);
  DVS_CHECK(r.dtype == kDtypeF64, "checkpoint: record '", name, "' has dtype ",
            int(r.dtype), ", expected f64");
  std::vector<double> v(std::size_t(r.numel()));
  if (!v.empty()) std::memcpy(v.data(), r.payload.data(), v.size() * 8);
  return v;
}

inline std::string get_bytes(const Checkpoint& c, const std::string& name) {
  const CkptRecord& r = c.get(name);
  DVS_CHECK(r.dtype == kDtypeBytes, "checkpoint: record '", name, "' has dtype ",
            int(r.dtype), ", expected bytes");
  return std::string(r.payload.begin(), r.payload.end());
}

inline long get_i64(const Checkpoint& c, const std::string& name) {
  const CkptRecord& r = c.get(name);
  DVS_CHECK(r.dtype == kDtypeI64 && r.numel() == 1, "checkpoint: record '", name,
            "' is not a single i64");
  std::int64_t v;
  std::memcpy(&v, r.payload.data(), 8);
  return long(v);
}

// ---- serialization ----

namespace ckpt_detail {

inline void put_u32(std::vector<unsigned char>& b, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) b.push_back((unsigned char)(v >> (8 * i)));
}
inline void put_i64(std::vector<unsigned char>& b, std::int64_t v) {
  for (int i = 0; i < 8; ++i) b.push_back((unsigned char)(std::uint64_t(v) >> (8 * i)));
}

struct Cursor {
  const unsigned char* p;
  std::size_t n, at = 0;

  void need(std::size_t k, const char* what) {
    DVS_CHECK(at + k <= n, "checkpoint: truncated file while reading ", what,
              " (need ", k, " bytes at offset ", at, ", have ", n - at, ")");
  }
  std::uint32_t u32(const char* what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= std::uint32_t(p[at + i]) << (8 * i);
    at += 4;
    return v;
  }
  std::int64_t i64(const char* what) {
    need(8, what);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= std::uint64_t(p[at + i]) << (8 * i);
    at += 8;
    return std::int64_t(v);
  }
  std::uint8_t u8(const char* what) {
    need(1, what);
    return p[at++];
  }
};

}  // namespace ckpt_detail

inline std::vector<unsigned char> serialize_checkpoint(const Checkpoint& c) {
  using ckpt_detail::put_i64;
  using ckpt_detail::put_u32;
  std::vector<unsigned char> b;
  b.insert(b.end(), {'D', 'V', 'W', 'S'});
  put_u32(b, Checkpoint::kVersion);
  put_u32(b, std::uint32_t(c.records.size()));
  for (const auto& r : c.records) {
    DVS_CHECK(long(r.payload.size()) == r.numel() * dtype_size(r.dtype),
              "checkpoint: record '", r.name, "' payload of ", r.payload.size(),
              " bytes does not match extents");
    put_u32(b, std::uint32_t(r.name.size()));
    b.insert(b.end(), r.name.begin(), r.name.end());
    b.push_back(r.dtype);
    put_u32(b, std::uint32_t(r.extents.size()));
    for (long e : r.extents) put_i64(b, e);
    b.insert(b.end(), r.payload.begin(), r.payload.end());
  }
  return b;
}

inline Checkpoint parse_checkpoint(const std::vector<unsigned char>& bytes) {
  ckpt_detail::Cursor cur{bytes.data(), bytes.size()};
  cur.need(4, "magic");
  DVS_CHECK(std::memcmp(cur.p, "DVWS", 4) == 0,
            "checkpoint: bad magic, not a snapshot file");
  cur.at = 4;
  const std::uint32_t ver = cur.u32("version");
  DVS_CHECK(ver == Checkpoint::kVersion, "checkpoint: file version ", ver,
            " but this build reads version ", Checkpoint::kVersion);
  const std::uint32_t count = cur.u32("record count");
  Checkpoint c;
  c.records.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    CkptRecord r;
    const std::uint32_t nl = cur.u32("name length");
    cur.need(nl, "name");
    r.name.assign(reinterpret_cast<const char*>(cur.p + cur.at), nl);
    cur.at += nl;
    r.dtype = cur.u8("dtype");
    dtype_size(r.dtype);
    const std::uint32_t rank = cur.u32("rank");
    DVS_CHECK(rank <= 8, "checkpoint: record '", r.name, "' claims rank ", rank);
    r.extents.resize(rank);
    for (std::uint32_t d = 0; d < rank; ++d) {
      r.extents[d] = long(cur.i64("extent"));
      DVS_CHECK(r.extents[d] >= 0, "checkpoint: record '", r.name,
                "' has negative extent");
    }
    const long bytes_needed = r.numel() * dtype_size(r.dtype);
    cur.need(std::size_t(bytes_needed), "payload");
    r.payload.assign(cur.p + cur.at, cur.p + cur.at + bytes_needed);
    cur.at += std::size_t(bytes_needed);
    c.records.push_back(std::move(r));
  }
  DVS_CHECK(cur.at == cur.n, "checkpoint: ", cur.n - cur.at,
            " trailing bytes after the last record");
  return c;
}

// Write-to-temp plus rename keeps a crash from leaving a torn file behind.
inline void write_checkpoint(const std::string& path, const Checkpoint& c) {
  const std::vector<unsigned char> bytes = serialize_checkpoint(c);
  const std::string tmp = path + ".tmp";
  std::FILE* f = std::fopen(tmp.c_str(), "wb");
  DVS_CHECK(f != nullptr, "checkpoint: cannot open '", tmp, "' for writing");
  const std::size_t wrote = std::fwrite(bytes.data(), 1, bytes.size(), f);
  const int closed = std::fclose(f);
  DVS_CHECK(wrote == bytes.size() && closed == 0, "checkpoint: short write to '",
            tmp, "'");
  DVS_CHECK(std::rename(tmp.c_str(), path.c_str()) == 0,
            "checkpoint: cannot move '", tmp, "' into place");
}

inline Checkpoint read_checkpoint(const std::string& path) {
  std::FILE* f = std::fopen(path.c_str(), "rb");
  DVS_CHECK(f != nullptr, "checkpoint: cannot open '", path, "'");
  std::fseek(f, 0, SEEK_END);
  const long sz = std::ftell(f);
  std::fseek(f, 0, SEEK_SET);
  std::vector<unsigned char> bytes(static_cast<std::size_t>(sz));
  const std::size_t got = sz > 0 ? std::fread(bytes.data(), 1, bytes.size(), f) : 0;
  std::fclose(f);
  DVS_CHECK(long(got) == sz, "checkpoint: short read from '", path, "'");
  return parse_checkpoint(bytes);
}

}  // namespace dvs
