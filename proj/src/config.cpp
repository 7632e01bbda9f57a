#include "dualpath/config.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "dualpath/errors.hpp"

namespace dualpath {

namespace {

std::string trim(std::string_view s) {
  const auto begin = s.find_first_not_of(" \t\r");
  if (begin == std::string_view::npos) return {};
  const auto end = s.find_last_not_of(" \t\r");
  return std::string(s.substr(begin, end - begin + 1));
}

}  // namespace

KeyValues KeyValues::parse(std::string_view text, const std::string& source) {
  KeyValues kv;
  kv.source_ = source;
  std::istringstream in{std::string(text)};
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    const std::string body = trim(line);
    if (body.empty()) continue;
    const auto eq = body.find('=');
    if (eq == std::string::npos) {
      throw ParseError(source + ":" + std::to_string(line_no) + ": expected key=value");
    }
    std::string key = trim(std::string_view(body).substr(0, eq));
    if (key.empty()) throw ParseError(source + ":" + std::to_string(line_no) + ": empty key");
    if (kv.contains(key)) throw ParseError(source + ":" + std::to_string(line_no) + ": duplicate key '" + key + "'");
    kv.entries_.emplace_back(std::move(key), trim(std::string_view(body).substr(eq + 1)));
  }
  return kv;
}

KeyValues KeyValues::read(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path.string());
  std::stringstream buffer;
  buffer << in.rdbuf();
  return parse(buffer.str(), path.string());
}

void KeyValues::set(const std::string& key, std::string value) {
  for (auto& [k, v] : entries_) {
    if (k == key) {
      v = std::move(value);
      return;
    }
  }
  entries_.emplace_back(key, std::move(value));
}

const std::string* KeyValues::find(std::string_view key) const {
  for (const auto& [k, v] : entries_) {
    if (k == key) return &v;
  }
  return nullptr;
}

std::optional<std::string> KeyValues::get(std::string_view key) const {
  if (const std::string* v = find(key)) return *v;
  return std::nullopt;
}

std::string KeyValues::get_string(std::string_view key, std::string fallback) const {
  const std::string* v = find(key);
  return v ? *v : std::move(fallback);
}

namespace {

template <typename Number>
Number parse_number(const std::string& text, std::string_view key, const std::string& source) {
  Number value{};
  const char* end = text.data() + text.size();
  auto [ptr, ec] = std::from_chars(text.data(), end, value);
  if (ec != std::errc() || ptr != end) {
    throw ConfigError(source + ": key '" + std::string(key) + "' has malformed value '" + text + "'");
  }
  return value;
}

}  // namespace

int KeyValues::get_int(std::string_view key, int fallback) const {
  const std::string* v = find(key);
  return v ? parse_number<int>(*v, key, source_) : fallback;
}

std::uint64_t KeyValues::get_uint64(std::string_view key, std::uint64_t fallback) const {
  const std::string* v = find(key);
  return v ? parse_number<std::uint64_t>(*v, key, source_) : fallback;
}

double KeyValues::get_double(std::string_view key, double fallback) const {
  const std::string* v = find(key);
  return v ? parse_number<double>(*v, key, source_) : fallback;
}

std::vector<int> KeyValues::get_int_list(std::string_view key, std::vector<int> fallback) const {
  const std::string* v = find(key);
  if (!v) return fallback;
  std::vector<int> out;
  std::string item;
  std::istringstream in(*v);
  while (std::getline(in, item, ',')) out.push_back(parse_number<int>(trim(item), key, source_));
  if (out.empty()) throw ConfigError(source_ + ": key '" + std::string(key) + "' needs at least one value");
  return out;
}

void KeyValues::require_known(std::span<const std::string_view> known) const {
  for (const auto& [k, v] : entries_) {
    if (std::find(known.begin(), known.end(), k) == known.end()) {
      throw ConfigError(source_ + ": unknown key '" + k + "'");
    }
  }
}

std::string KeyValues::to_string() const {
  std::string out;
  for (const auto& [k, v] : entries_) out += k + "=" + v + "\n";
  return out;
}

void KeyValues::write(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write " + path.string());
  out << to_string();
}

std::string KeyValues::format_number(double value) {
  if (std::nearbyint(value) == value && std::abs(value) < 1e15) {
    return std::to_string(static_cast<long long>(value));
  }
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", value);
  return buf;
}

std::string KeyValues::format_list(const std::vector<int>& values) {
  std::string out;
  for (std::size_t i = 0; i < values.size(); ++i) out += (i ? "," : "") + std::to_string(values[i]);
  return out;
}

std::uint64_t fnv1a(std::string_view bytes, std::uint64_t seed) {
  std::uint64_t h = seed;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream, std::uint64_t index) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (stream + 1) + 0xbf58476d1ce4e5b9ULL * (index + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

}  // namespace dualpath
