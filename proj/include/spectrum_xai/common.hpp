#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <iosfwd>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace spectrum_xai {

// Error taxonomy shared by every module.
class InvalidConfig : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class StructuralError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class StateError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ParseError : public std::runtime_error {
 public:
  ParseError(const std::string& what, std::size_t line, std::size_t offset);
  std::size_t line() const { return line_; }
  std::size_t offset() const { return offset_; }

 private:
  std::size_t line_;
  std::size_t offset_;
};

// Dense row-major matrix of doubles.
struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> data;

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c, double fill = 0.0) : rows(r), cols(c), data(r * c, fill) {}

  double& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }

  std::span<double> row(std::size_t r) { return {data.data() + r * cols, cols}; }
  std::span<const double> row(std::size_t r) const { return {data.data() + r * cols, cols}; }

  bool operator==(const Matrix&) const = default;
};

// Seeded generator with distribution code that does not depend on the
// standard library's (implementation-defined) distributions.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }
  double uniform();  // [0, 1)
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  std::size_t index(std::size_t n);  // [0, n)
  double normal();
  double normal(double mean, double stddev) { return mean + stddev * normal(); }
  unsigned poisson(double lambda);

  // First `count` entries of a seeded permutation of [0, n).
  std::vector<std::size_t> sample_without_replacement(std::size_t n, std::size_t count);

 private:
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

// min(n, cap) distinct indices in [0, n), ascending. All of them when n <= cap.
std::vector<std::size_t> seeded_subsample(std::size_t n, std::size_t cap, std::uint64_t seed);

// splitmix64 mixing of a base seed and a stream id.
std::uint64_t derive_seed(std::uint64_t base, std::uint64_t stream);

class Fnv1a {
 public:
  void update(const void* bytes, std::size_t n);
  void update(std::string_view s) { update(s.data(), s.size()); }
  void update(std::span<const double> values);
  void update(std::span<const int> values);
  std::uint64_t value() const { return state_; }
  std::string hex() const;

 private:
  std::uint64_t state_ = 0xcbf29ce484222325ULL;
};

std::string hex64(std::uint64_t v);
std::string hash_file(const std::string& path);

// Little-endian binary encoding used by every on-disk format.
class BinaryWriter {
 public:
  explicit BinaryWriter(std::ostream& os) : os_(os) {}
  void bytes(std::string_view b);
  void u8(std::uint8_t v);
  void u32(std::uint32_t v);
  void u64(std::uint64_t v);
  void f32(float v);
  void f64(double v);
  void f64s(std::span<const double> v);

 private:
  std::ostream& os_;
};

class BinaryReader {
 public:
  explicit BinaryReader(std::istream& is) : is_(is) {}
  std::string bytes(std::size_t n);
  std::uint8_t u8();
  std::uint32_t u32();
  std::uint64_t u64();
  float f32();
  double f64();
  std::vector<double> f64s(std::size_t n);
  std::size_t offset() const { return offset_; }

 private:
  void read(char* dst, std::size_t n);
  std::istream& is_;
  std::size_t offset_ = 0;
};

// Worker cap used by parallel_for; 0 means hardware concurrency.
void set_thread_count(std::size_t n);
std::size_t thread_count();

// Runs fn(i) for i in [0, n). Work items must be independent; callers
// reduce per-item results in index order so output never depends on the
// worker count.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn);

void require_finite(std::span<const double> values, const char* what);

// Shortest round-trip decimal form.
std::string format_double(double v);

void write_text_file(const std::string& path, std::string_view contents);
std::string read_text_file(const std::string& path);

}  // namespace spectrum_xai
