#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace dualpath {

// Flat "key=value" record, one entry per line, '#' starts a comment.
// Entry order is preserved so serialized files are stable.
class KeyValues {
 public:
  static KeyValues parse(std::string_view text, const std::string& source = "<config>");
  static KeyValues read(const std::filesystem::path& path);

  void set(const std::string& key, std::string value);
  void set(const std::string& key, const char* value) { set(key, std::string(value)); }
  template <typename Number>
  void set(const std::string& key, Number value) {
    set(key, format_number(static_cast<double>(value)));
  }

  bool contains(std::string_view key) const { return find(key) != nullptr; }
  std::optional<std::string> get(std::string_view key) const;

  std::string get_string(std::string_view key, std::string fallback) const;
  int get_int(std::string_view key, int fallback) const;
  std::uint64_t get_uint64(std::string_view key, std::uint64_t fallback) const;
  double get_double(std::string_view key, double fallback) const;
  std::vector<int> get_int_list(std::string_view key, std::vector<int> fallback) const;

  // ConfigError naming the first key not in `known`.
  void require_known(std::span<const std::string_view> known) const;

  const std::vector<std::pair<std::string, std::string>>& entries() const { return entries_; }
  std::string to_string() const;
  void write(const std::filesystem::path& path) const;

  static std::string format_number(double value);
  static std::string format_list(const std::vector<int>& values);

  // Equality compares entries only, not where they were read from.
  friend bool operator==(const KeyValues& a, const KeyValues& b) { return a.entries_ == b.entries_; }

 private:
  const std::string* find(std::string_view key) const;

  std::vector<std::pair<std::string, std::string>> entries_;
  std::string source_;
};

// 64-bit FNV-1a.
std::uint64_t fnv1a(std::string_view bytes, std::uint64_t seed = 0xcbf29ce484222325ULL);

// Decorrelated child seed (splitmix64 finalizer over the combined input).
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream, std::uint64_t index = 0);

}  // namespace dualpath
