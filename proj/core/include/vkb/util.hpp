#pragma once

#include <bit>
#include <cctype>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <random>
#include <string>
#include <string_view>
#include <type_traits>
#include <vector>

#include "vkb/errors.hpp"

namespace vkb {

static_assert(std::endian::native == std::endian::little,
              "binary formats are little-endian; big-endian hosts are unsupported");

// ---------------------------------------------------------------------------
// Hashing
// ---------------------------------------------------------------------------

// Seeded FNV-1a over bytes.  Stable across platforms and runs; used for
// feature hashing, dataset splits, and content fingerprints.
inline std::uint64_t hash64(std::string_view s, std::uint64_t seed = 0) {
  std::uint64_t h = 0xcbf29ce484222325ull ^ (seed * 0x9e3779b97f4a7c15ull);
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

inline std::uint64_t hash_combine(std::uint64_t a, std::uint64_t b) {
  // Boost-style mix; good enough to derive per-block salts from one seed.
  a ^= b + 0x9e3779b97f4a7c15ull + (a << 6) + (a >> 2);
  return a;
}

// Fast fingerprint of a large buffer: FNV-1a over u64 chunks with a byte
// tail.  Roughly 8x the throughput of the bytewise loop; used to detect
// stale index/checkpoint pairs where the buffer is megabytes of weights.
inline std::uint64_t fingerprint64(const void* data, std::size_t n_bytes,
                                   std::uint64_t seed = 0) {
  const unsigned char* p = static_cast<const unsigned char*>(data);
  std::uint64_t h = 0xcbf29ce484222325ull ^ (seed * 0x9e3779b97f4a7c15ull);
  std::size_t n_chunks = n_bytes / 8;
  for (std::size_t i = 0; i < n_chunks; ++i) {
    std::uint64_t chunk;
    std::memcpy(&chunk, p + i * 8, 8);
    h ^= chunk;
    h *= 0x100000001b3ull;
    h ^= h >> 32;
  }
  for (std::size_t i = n_chunks * 8; i < n_bytes; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ull;
  }
  return h;
}

// ---------------------------------------------------------------------------
// Deterministic RNG
// ---------------------------------------------------------------------------

// Thin wrapper over mt19937_64 with hand-rolled draw helpers.  The standard
// distributions are not bit-stable across library implementations, so every
// draw that influences an artifact goes through these.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : gen_(seed) {}

  std::uint64_t next_u64() { return gen_(); }

  // Uniform in [0, n).  n must be positive.
  std::size_t next_index(std::size_t n) {
    if (n == 0) throw ContractError("Rng::next_index: n must be positive");
    return static_cast<std::size_t>(gen_() % n);
  }

  // Uniform in [0, 1) with 53 bits of mantissa.
  double next_unit() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }

  // Uniform in [lo, hi).
  double next_uniform(double lo, double hi) { return lo + (hi - lo) * next_unit(); }

  // Standard normal via Box-Muller (one value per call; the pair's twin is
  // discarded to keep the state sequence easy to reason about).
  double next_gaussian() {
    double u1 = next_unit();
    double u2 = next_unit();
    if (u1 < 1e-300) u1 = 1e-300;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
  }

  // Fisher-Yates shuffle.
  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::size_t j = next_index(i);
      std::swap(v[i - 1], v[j]);
    }
  }

  // k distinct indices from [0, n), in the order drawn.
  std::vector<std::int64_t> sample_distinct(std::size_t n, std::size_t k) {
    if (k > n) throw ContractError("Rng::sample_distinct: k > n");
    std::vector<std::int64_t> pool(n);
    for (std::size_t i = 0; i < n; ++i) pool[i] = static_cast<std::int64_t>(i);
    std::vector<std::int64_t> out;
    out.reserve(k);
    for (std::size_t i = 0; i < k; ++i) {
      std::size_t j = i + next_index(n - i);
      std::swap(pool[i], pool[j]);
      out.push_back(pool[i]);
    }
    return out;
  }

 private:
  std::mt19937_64 gen_;
};

// ---------------------------------------------------------------------------
// Little-endian binary IO
// ---------------------------------------------------------------------------

class BinaryWriter {
 public:
  explicit BinaryWriter(const std::string& path) : path_(path), out_(path, std::ios::binary) {
    if (!out_) throw IoError("cannot open for writing: " + path);
  }

  void write_bytes(const void* p, std::size_t n) {
    out_.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
    if (!out_) throw IoError("write failed: " + path_);
  }
  void write_u32(std::uint32_t v) { write_bytes(&v, 4); }
  void write_u64(std::uint64_t v) { write_bytes(&v, 8); }
  void write_i64(std::int64_t v) { write_bytes(&v, 8); }
  void write_f32(float v) { write_bytes(&v, 4); }
  void write_f64(double v) { write_bytes(&v, 8); }
  void write_string(const std::string& s) {
    write_u64(s.size());
    write_bytes(s.data(), s.size());
  }
  template <typename T>
  void write_vec(const std::vector<T>& v) {
    static_assert(std::is_arithmetic_v<T>);
    write_bytes(v.data(), v.size() * sizeof(T));
  }
  void close() {
    out_.close();
    if (!out_) throw IoError("close failed: " + path_);
  }

 private:
  std::string path_;
  std::ofstream out_;
};

class BinaryReader {
 public:
  explicit BinaryReader(const std::string& path) : path_(path), in_(path, std::ios::binary) {
    if (!in_) throw IoError("cannot open for reading: " + path);
  }

  void read_bytes(void* p, std::size_t n) {
    in_.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(in_.gcount()) != n)
      throw IoError("unexpected end of file: " + path_);
  }
  std::uint32_t read_u32() { std::uint32_t v; read_bytes(&v, 4); return v; }
  std::uint64_t read_u64() { std::uint64_t v; read_bytes(&v, 8); return v; }
  std::int64_t read_i64() { std::int64_t v; read_bytes(&v, 8); return v; }
  float read_f32() { float v; read_bytes(&v, 4); return v; }
  double read_f64() { double v; read_bytes(&v, 8); return v; }
  std::string read_string() {
    std::uint64_t n = read_u64();
    if (n > (1ull << 32)) throw IoError("implausible string length in " + path_);
    std::string s(n, '\0');
    read_bytes(s.data(), n);
    return s;
  }
  template <typename T>
  void read_vec(std::vector<T>& v, std::size_t count) {
    static_assert(std::is_arithmetic_v<T>);
    v.resize(count);
    read_bytes(v.data(), count * sizeof(T));
  }
  bool at_eof() { return in_.peek() == std::char_traits<char>::eof(); }
  const std::string& path() const { return path_; }

 private:
  std::string path_;
  std::ifstream in_;
};

// Checks a file's magic + version header and throws a descriptive IoError on
// mismatch.  Every binary artifact starts with these two u32 fields.
inline void expect_magic(BinaryReader& r, std::uint32_t magic, std::uint32_t version,
                         const char* kind) {
  std::uint32_t m = r.read_u32();
  if (m != magic)
    throw IoError(std::string("bad magic for ") + kind + " file: " + r.path());
  std::uint32_t v = r.read_u32();
  if (v != version)
    throw IoError(std::string("unsupported ") + kind + " version " + std::to_string(v) +
                  " in " + r.path());
}

// ---------------------------------------------------------------------------
// Misc
// ---------------------------------------------------------------------------

inline double wall_ms() {
  return std::chrono::duration<double, std::milli>(
             std::chrono::steady_clock::now().time_since_epoch())
      .count();
}

inline std::string to_lower(std::string_view s) {
  std::string out(s);
  for (char& c : out)
    if (c >= 'A' && c <= 'Z') c = static_cast<char>(c - 'A' + 'a');
  return out;
}

// Whitespace tokenizer; tokens are lowercased.
inline std::vector<std::string> tokenize(std::string_view text) {
  std::vector<std::string> out;
  std::size_t i = 0;
  while (i < text.size()) {
    while (i < text.size() && std::isspace(static_cast<unsigned char>(text[i]))) ++i;
    std::size_t j = i;
    while (j < text.size() && !std::isspace(static_cast<unsigned char>(text[j]))) ++j;
    if (j > i) out.push_back(to_lower(text.substr(i, j - i)));
    i = j;
  }
  return out;
}

}  // namespace vkb
