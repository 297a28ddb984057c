#pragma once

#include <charconv>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <system_error>
#include <vector>

namespace poisonbench {

inline std::string read_text_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open file: " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

inline std::vector<std::uint8_t> read_binary_file(const std::filesystem::path& path) {
  std::string text = read_text_file(path);
  return std::vector<std::uint8_t>(text.begin(), text.end());
}

// Write to a sibling temp file, then rename over the target. Partial output
// never lands under the final name.
inline void atomic_write_file(const std::filesystem::path& path, const std::string& content) {
  std::filesystem::path dir = path.parent_path();
  if (!dir.empty()) std::filesystem::create_directories(dir);
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open file for writing: " + tmp.string());
    out.write(content.data(), static_cast<std::streamsize>(content.size()));
    if (!out) throw std::runtime_error("write failed: " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

inline void atomic_write_file(const std::filesystem::path& path,
                              const std::vector<std::uint8_t>& bytes) {
  atomic_write_file(path, std::string(bytes.begin(), bytes.end()));
}

// Shortest round-trip decimal form; stable across runs on one platform.
inline std::string format_double(double value) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), value);
  if (res.ec != std::errc()) throw std::runtime_error("format_double failed");
  return std::string(buf, res.ptr);
}

// FNV-1a, used for config hashes and derived artifact ids.
inline std::uint64_t fnv1a64(const std::string& text) {
  std::uint64_t hash = 0xcbf29ce484222325ull;
  for (unsigned char c : text) {
    hash ^= c;
    hash *= 0x100000001b3ull;
  }
  return hash;
}

inline std::string hex64(std::uint64_t value) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(value));
  return std::string(buf);
}

}  // namespace poisonbench
