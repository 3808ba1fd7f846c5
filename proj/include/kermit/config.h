#pragma once

#include <cstdint>
#include <iosfwd>
#include <map>
#include <string>

namespace kermit {

// Flat `key=value` configuration. Blank lines and lines starting with '#'
// are ignored; whitespace around keys and values is trimmed.
class KeyValues {
 public:
  static KeyValues parse(std::istream& in);
  static KeyValues load(const std::string& path);

  void set(const std::string& key, const std::string& value) { values_[key] = value; }
  bool has(const std::string& key) const { return values_.count(key) != 0; }
  const std::map<std::string, std::string>& values() const { return values_; }

  std::string get_string(const std::string& key, const std::string& fallback) const;
  double get_double(const std::string& key, double fallback) const;
  std::int64_t get_int(const std::string& key, std::int64_t fallback) const;
  std::size_t get_size(const std::string& key, std::size_t fallback) const;

  void write(std::ostream& out) const;

 private:
  std::map<std::string, std::string> values_;
};

// Deterministic generator shared by initialization and data synthesis.
// Uses explicit bit manipulation so the streams are identical across
// standard library implementations.
class Rng {
 public:
  explicit Rng(std::uint64_t seed);
  std::uint64_t next_u64();
  double uniform();                              // [0, 1)
  double uniform(double lo, double hi);
  std::size_t uniform_int(std::size_t lo, std::size_t hi);  // inclusive
  double normal();

 private:
  std::uint64_t state_[4];
  bool have_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace kermit
