#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <numeric>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace fd2 {

// ---------------------------------------------------------------------------
// Errors. Each maps to one failure class named in the API contracts.
// ---------------------------------------------------------------------------

class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

class DimError : public Error {
 public:
  explicit DimError(const std::string& msg) : Error("dimension error: " + msg) {}
};
class ValueError : public Error {
 public:
  explicit ValueError(const std::string& msg) : Error("validation error: " + msg) {}
};
class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& msg) : Error("config error: " + msg) {}
};
class StateError : public Error {
 public:
  explicit StateError(const std::string& msg) : Error("state error: " + msg) {}
};
class IndexError : public Error {
 public:
  explicit IndexError(const std::string& msg) : Error("index error: " + msg) {}
};
class IoError : public Error {
 public:
  explicit IoError(const std::string& msg) : Error("io error: " + msg) {}
};
class ProvenanceError : public Error {
 public:
  explicit ProvenanceError(const std::string& msg) : Error("provenance error: " + msg) {}
};
class InternalError : public Error {
 public:
  explicit InternalError(const std::string& msg) : Error("internal error: " + msg) {}
};

// ---------------------------------------------------------------------------
// Hashing and seeding
// ---------------------------------------------------------------------------

inline constexpr std::uint64_t kFnvOffset = 14695981039346656037ull;
inline constexpr std::uint64_t kFnvPrime = 1099511628211ull;

inline std::uint64_t fnv1a64(const void* data, std::size_t n,
                             std::uint64_t h = kFnvOffset) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= kFnvPrime;
  }
  return h;
}

inline std::uint64_t fnv1a64(const std::string& s) {
  return fnv1a64(s.data(), s.size());
}

inline std::string to_hex(std::uint64_t x) {
  static const char* digits = "0123456789abcdef";
  std::string out(16, '0');
  for (int i = 15; i >= 0; --i) {
    out[i] = digits[x & 0xf];
    x >>= 4;
  }
  return out;
}

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

// ---------------------------------------------------------------------------
// Rng: mt19937_64 engine with explicit value mappings. The engine output is
// fully specified by the standard, and the mappings below avoid the
// implementation-defined std distributions, so draws are reproducible across
// compilers. fork() derives an independent, order-insensitive substream.
// ---------------------------------------------------------------------------

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : seed_(seed), eng_(splitmix64(seed)) {}

  std::uint64_t seed() const { return seed_; }

  std::uint64_t next_u64() { return eng_(); }

  // uniform double in [0, 1)
  double uniform() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // integer in [0, n)
  std::uint64_t uniform_int(std::uint64_t n) {
    if (n == 0) throw ValueError("uniform_int: n must be positive");
    return next_u64() % n;
  }

  // standard normal via Box-Muller on the portable uniforms
  double normal() {
    double u1 = uniform();
    double u2 = uniform();
    if (u1 < 1e-300) u1 = 1e-300;
    return std::sqrt(-2.0 * std::log(u1)) *
           std::cos(2.0 * 3.14159265358979323846 * u2);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  Rng fork(std::uint64_t tag) const {
    return Rng(splitmix64(seed_ ^ splitmix64(tag + 0x517cc1b727220a95ull)));
  }

  template <typename It>
  void shuffle(It first, It last) {
    const auto n = static_cast<std::uint64_t>(std::distance(first, last));
    for (std::uint64_t i = n; i > 1; --i) {
      std::swap(first[i - 1], first[uniform_int(i)]);
    }
  }

 private:
  std::uint64_t seed_;
  std::mt19937_64 eng_;
};

// ---------------------------------------------------------------------------
// Tensor: dense row-major n-d array. Deliberately minimal; the heavy lifting
// (GEMM) maps the flat buffer into Eigen.
// ---------------------------------------------------------------------------

template <typename T>
struct Tensor {
  std::vector<int> shape;
  std::vector<T> v;

  Tensor() = default;
  explicit Tensor(std::vector<int> s) : shape(std::move(s)) {
    v.assign(static_cast<std::size_t>(numel_of(shape)), T(0));
  }
  Tensor(std::vector<int> s, std::vector<T> data)
      : shape(std::move(s)), v(std::move(data)) {
    if (static_cast<std::int64_t>(v.size()) != numel_of(shape))
      throw DimError("tensor data size does not match shape");
  }

  static std::int64_t numel_of(const std::vector<int>& s) {
    std::int64_t n = 1;
    for (int d : s) {
      if (d < 0) throw DimError("negative dimension");
      n *= d;
    }
    return n;
  }

  static Tensor zeros(std::vector<int> s) { return Tensor(std::move(s)); }

  static Tensor full(std::vector<int> s, T value) {
    Tensor t(std::move(s));
    std::fill(t.v.begin(), t.v.end(), value);
    return t;
  }

  static Tensor scalar(T value) { return Tensor({}, {value}); }

  std::int64_t numel() const { return static_cast<std::int64_t>(v.size()); }
  int rank() const { return static_cast<int>(shape.size()); }
  int dim(int i) const { return shape.at(static_cast<std::size_t>(i)); }

  T* data() { return v.data(); }
  const T* data() const { return v.data(); }

  T& operator[](std::int64_t i) { return v[static_cast<std::size_t>(i)]; }
  const T& operator[](std::int64_t i) const {
    return v[static_cast<std::size_t>(i)];
  }

  T& at2(int i, int j) { return v[std::size_t(i) * shape[1] + j]; }
  const T& at2(int i, int j) const { return v[std::size_t(i) * shape[1] + j]; }

  T& at3(int c, int h, int w) {
    return v[(std::size_t(c) * shape[1] + h) * shape[2] + w];
  }
  const T& at3(int c, int h, int w) const {
    return v[(std::size_t(c) * shape[1] + h) * shape[2] + w];
  }

  T& at4(int n, int c, int h, int w) {
    return v[((std::size_t(n) * shape[1] + c) * shape[2] + h) * shape[3] + w];
  }
  const T& at4(int n, int c, int h, int w) const {
    return v[((std::size_t(n) * shape[1] + c) * shape[2] + h) * shape[3] + w];
  }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }

  bool all_finite() const {
    for (const T& x : v)
      if (!std::isfinite(static_cast<double>(x))) return false;
    return true;
  }

  Tensor reshaped(std::vector<int> s) const {
    if (numel_of(s) != numel()) throw DimError("reshape changes element count");
    Tensor t;
    t.shape = std::move(s);
    t.v = v;
    return t;
  }

  template <typename U>
  Tensor<U> cast() const {
    Tensor<U> t;
    t.shape = shape;
    t.v.resize(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) t.v[i] = static_cast<U>(v[i]);
    return t;
  }
};

template <typename T>
std::string shape_str(const Tensor<T>& t) {
  std::string s = "[";
  for (std::size_t i = 0; i < t.shape.size(); ++i) {
    if (i) s += "x";
    s += std::to_string(t.shape[i]);
  }
  return s + "]";
}

// ---------------------------------------------------------------------------
// Small vector math used by the constraint/theory layers.
// ---------------------------------------------------------------------------

template <typename T>
T vdot(const std::vector<T>& a, const std::vector<T>& b) {
  if (a.size() != b.size()) throw DimError("dot: size mismatch");
  T s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

template <typename T>
T vnorm(const std::vector<T>& a) {
  T s = 0;
  for (T x : a) s += x * x;
  return std::sqrt(s);
}

template <typename T>
std::vector<T> vsub(const std::vector<T>& a, const std::vector<T>& b) {
  if (a.size() != b.size()) throw DimError("sub: size mismatch");
  std::vector<T> r(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) r[i] = a[i] - b[i];
  return r;
}

// Euclidean normalization with zero-vector passthrough.
template <typename T>
std::vector<T> vnormalize(const std::vector<T>& a) {
  T n = vnorm(a);
  if (n <= T(0)) return a;
  std::vector<T> r(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) r[i] = a[i] / n;
  return r;
}

}  // namespace fd2
