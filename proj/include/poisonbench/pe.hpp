#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <set>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "poisonbench/rng.hpp"

namespace poisonbench::pe {

// Section characteristic flags (subset used here).
inline constexpr std::uint32_t kSectionCode = 0x00000020;
inline constexpr std::uint32_t kSectionInitializedData = 0x00000040;
inline constexpr std::uint32_t kSectionExecute = 0x20000000;
inline constexpr std::uint32_t kSectionRead = 0x40000000;
inline constexpr std::uint32_t kSectionWrite = 0x80000000;

inline constexpr std::uint16_t kMagicPe32 = 0x10b;
inline constexpr std::uint16_t kMagicPe32Plus = 0x20b;

class PeError : public std::runtime_error {
 public:
  PeError(const std::string& what, std::size_t offset)
      : std::runtime_error(what + " (offset " + std::to_string(offset) + ")"), offset_(offset) {}
  std::size_t offset() const { return offset_; }

 private:
  std::size_t offset_;
};

namespace detail {

inline std::uint16_t read_u16(std::span<const std::uint8_t> bytes, std::size_t at) {
  if (at + 2 > bytes.size()) throw PeError("read past end of file", at);
  return static_cast<std::uint16_t>(bytes[at] | (bytes[at + 1] << 8));
}

inline std::uint32_t read_u32(std::span<const std::uint8_t> bytes, std::size_t at) {
  if (at + 4 > bytes.size()) throw PeError("read past end of file", at);
  return static_cast<std::uint32_t>(bytes[at]) | (static_cast<std::uint32_t>(bytes[at + 1]) << 8) |
         (static_cast<std::uint32_t>(bytes[at + 2]) << 16) |
         (static_cast<std::uint32_t>(bytes[at + 3]) << 24);
}

inline void write_u16(std::vector<std::uint8_t>& bytes, std::size_t at, std::uint16_t v) {
  bytes[at] = static_cast<std::uint8_t>(v & 0xff);
  bytes[at + 1] = static_cast<std::uint8_t>(v >> 8);
}

inline void write_u32(std::vector<std::uint8_t>& bytes, std::size_t at, std::uint32_t v) {
  bytes[at] = static_cast<std::uint8_t>(v & 0xff);
  bytes[at + 1] = static_cast<std::uint8_t>((v >> 8) & 0xff);
  bytes[at + 2] = static_cast<std::uint8_t>((v >> 16) & 0xff);
  bytes[at + 3] = static_cast<std::uint8_t>((v >> 24) & 0xff);
}

inline bool is_power_of_two(std::uint32_t v) { return v != 0 && (v & (v - 1)) == 0; }

inline std::uint64_t align_up(std::uint64_t value, std::uint64_t alignment) {
  return (value + alignment - 1) / alignment * alignment;
}

}  // namespace detail

struct SectionHeader {
  std::array<std::uint8_t, 8> name{};
  std::uint32_t virtual_size = 0;
  std::uint32_t virtual_address = 0;
  std::uint32_t size_of_raw_data = 0;
  std::uint32_t pointer_to_raw_data = 0;
  std::uint32_t pointer_to_relocations = 0;
  std::uint32_t pointer_to_linenumbers = 0;
  std::uint16_t number_of_relocations = 0;
  std::uint16_t number_of_linenumbers = 0;
  std::uint32_t characteristics = 0;

  std::string name_string() const {
    std::string s;
    for (std::uint8_t c : name) {
      if (c == 0) break;
      s += static_cast<char>(c);
    }
    return s;
  }

  void set_name(const std::string& s) {
    if (s.empty()) throw std::invalid_argument("section name must be non-empty");
    if (s.size() > 8) throw std::invalid_argument("section name longer than 8 bytes: " + s);
    name.fill(0);
    for (std::size_t i = 0; i < s.size(); ++i) name[i] = static_cast<std::uint8_t>(s[i]);
  }

  bool operator==(const SectionHeader&) const = default;
};

struct Section {
  SectionHeader header;
  std::vector<std::uint8_t> data;

  bool operator==(const Section&) const = default;
};

// Parsed image. Raw header regions are retained so writing an untouched file
// reproduces every parsed field and section payload exactly.
struct PeFile {
  std::array<std::uint8_t, 64> dos_header{};
  std::vector<std::uint8_t> dos_stub;  // bytes between the DOS header and the PE signature
  std::uint32_t e_lfanew = 0;

  std::uint16_t machine = 0;
  std::uint32_t time_date_stamp = 0;
  std::uint32_t pointer_to_symbol_table = 0;
  std::uint32_t number_of_symbols = 0;
  std::uint16_t size_of_optional_header = 0;
  std::uint16_t coff_characteristics = 0;

  std::vector<std::uint8_t> optional_header;  // raw, parsed fields patched on write
  std::uint16_t magic = 0;
  std::uint32_t address_of_entry_point = 0;
  std::uint32_t section_alignment = 0;
  std::uint32_t file_alignment = 0;
  std::uint32_t size_of_image = 0;
  std::uint32_t size_of_headers = 0;

  std::vector<Section> sections;
  std::vector<std::uint8_t> overlay;

  bool is_pe32plus() const { return magic == kMagicPe32Plus; }
  std::uint16_t number_of_sections() const { return static_cast<std::uint16_t>(sections.size()); }

  std::size_t header_span() const {
    return static_cast<std::size_t>(e_lfanew) + 4 + 20 + size_of_optional_header +
           sections.size() * 40;
  }
};

// Optional-header field offsets shared by PE32 and PE32+.
namespace detail {
inline constexpr std::size_t kOptMagic = 0;
inline constexpr std::size_t kOptEntryPoint = 16;
inline constexpr std::size_t kOptSectionAlignment = 32;
inline constexpr std::size_t kOptFileAlignment = 36;
inline constexpr std::size_t kOptSizeOfImage = 56;
inline constexpr std::size_t kOptSizeOfHeaders = 60;
}  // namespace detail

inline PeFile parse_pe(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 128) throw PeError("file too small for a PE image", bytes.size());
  if (bytes[0] != 'M' || bytes[1] != 'Z') throw PeError("bad DOS magic", 0);

  PeFile pe;
  std::copy(bytes.begin(), bytes.begin() + 64, pe.dos_header.begin());
  pe.e_lfanew = detail::read_u32(bytes, 0x3c);
  if (pe.e_lfanew < 64 || pe.e_lfanew + 24 > bytes.size()) {
    throw PeError("e_lfanew out of range", 0x3c);
  }
  pe.dos_stub.assign(bytes.begin() + 64, bytes.begin() + pe.e_lfanew);

  const std::size_t sig = pe.e_lfanew;
  if (bytes[sig] != 'P' || bytes[sig + 1] != 'E' || bytes[sig + 2] != 0 || bytes[sig + 3] != 0) {
    throw PeError("bad PE signature", sig);
  }
  const std::size_t coff = sig + 4;
  pe.machine = detail::read_u16(bytes, coff);
  std::uint16_t n_sections = detail::read_u16(bytes, coff + 2);
  pe.time_date_stamp = detail::read_u32(bytes, coff + 4);
  pe.pointer_to_symbol_table = detail::read_u32(bytes, coff + 8);
  pe.number_of_symbols = detail::read_u32(bytes, coff + 12);
  pe.size_of_optional_header = detail::read_u16(bytes, coff + 16);
  pe.coff_characteristics = detail::read_u16(bytes, coff + 18);

  const std::size_t opt = coff + 20;
  if (pe.size_of_optional_header < 64) {
    throw PeError("optional header too small", coff + 16);
  }
  if (opt + pe.size_of_optional_header > bytes.size()) {
    throw PeError("optional header overruns file", opt);
  }
  pe.optional_header.assign(bytes.begin() + opt, bytes.begin() + opt + pe.size_of_optional_header);
  pe.magic = detail::read_u16(bytes, opt + detail::kOptMagic);
  if (pe.magic != kMagicPe32 && pe.magic != kMagicPe32Plus) {
    throw PeError("unknown optional header magic", opt);
  }
  pe.address_of_entry_point = detail::read_u32(bytes, opt + detail::kOptEntryPoint);
  pe.section_alignment = detail::read_u32(bytes, opt + detail::kOptSectionAlignment);
  pe.file_alignment = detail::read_u32(bytes, opt + detail::kOptFileAlignment);
  pe.size_of_image = detail::read_u32(bytes, opt + detail::kOptSizeOfImage);
  pe.size_of_headers = detail::read_u32(bytes, opt + detail::kOptSizeOfHeaders);
  if (!detail::is_power_of_two(pe.file_alignment)) {
    throw PeError("file alignment must be a nonzero power of two", opt + detail::kOptFileAlignment);
  }
  if (!detail::is_power_of_two(pe.section_alignment)) {
    throw PeError("section alignment must be a nonzero power of two",
                  opt + detail::kOptSectionAlignment);
  }

  std::size_t table = opt + pe.size_of_optional_header;
  if (table + static_cast<std::size_t>(n_sections) * 40 > bytes.size()) {
    throw PeError("section table overruns file", table);
  }
  std::uint64_t prev_va_end = 0;
  for (std::uint16_t i = 0; i < n_sections; ++i) {
    const std::size_t at = table + static_cast<std::size_t>(i) * 40;
    Section s;
    std::copy(bytes.begin() + at, bytes.begin() + at + 8, s.header.name.begin());
    s.header.virtual_size = detail::read_u32(bytes, at + 8);
    s.header.virtual_address = detail::read_u32(bytes, at + 12);
    s.header.size_of_raw_data = detail::read_u32(bytes, at + 16);
    s.header.pointer_to_raw_data = detail::read_u32(bytes, at + 20);
    s.header.pointer_to_relocations = detail::read_u32(bytes, at + 24);
    s.header.pointer_to_linenumbers = detail::read_u32(bytes, at + 28);
    s.header.number_of_relocations = detail::read_u16(bytes, at + 32);
    s.header.number_of_linenumbers = detail::read_u16(bytes, at + 34);
    s.header.characteristics = detail::read_u32(bytes, at + 36);
    if (s.header.size_of_raw_data > 0) {
      if (s.header.pointer_to_raw_data % pe.file_alignment != 0) {
        throw PeError("section raw offset not aligned", at + 20);
      }
      std::uint64_t raw_end = static_cast<std::uint64_t>(s.header.pointer_to_raw_data) +
                              s.header.size_of_raw_data;
      if (raw_end > bytes.size()) throw PeError("section raw data overruns file", at + 20);
      s.data.assign(bytes.begin() + s.header.pointer_to_raw_data, bytes.begin() + raw_end);
    }
    if (s.header.virtual_address < prev_va_end) {
      throw PeError("section virtual addresses overlap or are not ascending", at + 12);
    }
    prev_va_end = static_cast<std::uint64_t>(s.header.virtual_address) +
                  std::max(s.header.virtual_size, std::uint32_t{1});
    pe.sections.push_back(std::move(s));
  }

  std::size_t content_end = pe.header_span();
  for (const auto& s : pe.sections) {
    content_end = std::max(content_end, static_cast<std::size_t>(s.header.pointer_to_raw_data) +
                                            s.header.size_of_raw_data);
  }
  content_end = std::max(content_end, static_cast<std::size_t>(pe.size_of_headers));
  if (content_end < bytes.size()) {
    pe.overlay.assign(bytes.begin() + content_end, bytes.end());
  }
  return pe;
}

/// Serialize. Section payloads land at their recorded raw offsets; regions
/// not owned by a header or a section are zero-filled.
inline std::vector<std::uint8_t> write_pe(const PeFile& pe) {
  std::size_t total = std::max(pe.header_span(), static_cast<std::size_t>(pe.size_of_headers));
  for (const auto& s : pe.sections) {
    total = std::max(total, static_cast<std::size_t>(s.header.pointer_to_raw_data) +
                                s.header.size_of_raw_data);
  }
  std::vector<std::uint8_t> out(total, 0);
  std::copy(pe.dos_header.begin(), pe.dos_header.end(), out.begin());
  detail::write_u32(out, 0x3c, pe.e_lfanew);
  std::copy(pe.dos_stub.begin(), pe.dos_stub.end(), out.begin() + 64);

  const std::size_t sig = pe.e_lfanew;
  out[sig] = 'P';
  out[sig + 1] = 'E';
  const std::size_t coff = sig + 4;
  detail::write_u16(out, coff, pe.machine);
  detail::write_u16(out, coff + 2, pe.number_of_sections());
  detail::write_u32(out, coff + 4, pe.time_date_stamp);
  detail::write_u32(out, coff + 8, pe.pointer_to_symbol_table);
  detail::write_u32(out, coff + 12, pe.number_of_symbols);
  detail::write_u16(out, coff + 16, pe.size_of_optional_header);
  detail::write_u16(out, coff + 18, pe.coff_characteristics);

  const std::size_t opt = coff + 20;
  std::copy(pe.optional_header.begin(), pe.optional_header.end(), out.begin() + opt);
  detail::write_u16(out, opt + detail::kOptMagic, pe.magic);
  detail::write_u32(out, opt + detail::kOptEntryPoint, pe.address_of_entry_point);
  detail::write_u32(out, opt + detail::kOptSectionAlignment, pe.section_alignment);
  detail::write_u32(out, opt + detail::kOptFileAlignment, pe.file_alignment);
  detail::write_u32(out, opt + detail::kOptSizeOfImage, pe.size_of_image);
  detail::write_u32(out, opt + detail::kOptSizeOfHeaders, pe.size_of_headers);

  std::size_t table = opt + pe.size_of_optional_header;
  for (const auto& s : pe.sections) {
    std::copy(s.header.name.begin(), s.header.name.end(), out.begin() + table);
    detail::write_u32(out, table + 8, s.header.virtual_size);
    detail::write_u32(out, table + 12, s.header.virtual_address);
    detail::write_u32(out, table + 16, s.header.size_of_raw_data);
    detail::write_u32(out, table + 20, s.header.pointer_to_raw_data);
    detail::write_u32(out, table + 24, s.header.pointer_to_relocations);
    detail::write_u32(out, table + 28, s.header.pointer_to_linenumbers);
    detail::write_u16(out, table + 32, s.header.number_of_relocations);
    detail::write_u16(out, table + 34, s.header.number_of_linenumbers);
    detail::write_u32(out, table + 36, s.header.characteristics);
    table += 40;
    if (!s.data.empty()) {
      std::copy(s.data.begin(), s.data.end(), out.begin() + s.header.pointer_to_raw_data);
    }
  }
  out.insert(out.end(), pe.overlay.begin(), pe.overlay.end());
  return out;
}

struct TriggerSection {
  std::string name;
  std::vector<std::uint8_t> content;
  std::uint32_t characteristics = kSectionInitializedData | kSectionRead;
};

/// The backdoor trigger: the sections appended at byte level, plus the
/// feature-space delta used for vector-level injection into a dataset.
struct TriggerSpec {
  std::vector<TriggerSection> sections;
  std::vector<double> feature_delta;

  void validate() const {
    if (sections.empty() || sections.size() > 8) {
      throw std::invalid_argument("TriggerSpec: section count must be in [1,8]");
    }
    std::set<std::string> names;
    for (const auto& s : sections) {
      if (s.name.empty() || s.name.size() > 8) {
        throw std::invalid_argument("TriggerSpec: section names must be 1..8 bytes");
      }
      if (!names.insert(s.name).second) {
        throw std::invalid_argument("TriggerSpec: duplicate section name " + s.name);
      }
    }
  }

  /// Three read-only data sections of 512 seeded pseudo-random bytes each.
  static TriggerSpec default_trigger(std::uint64_t seed = 0x7716) {
    TriggerSpec t;
    Rng rng(seed);
    for (int i = 1; i <= 3; ++i) {
      TriggerSection s;
      s.name = ".rdat" + std::to_string(i);
      s.content.resize(512);
      for (auto& b : s.content) b = static_cast<std::uint8_t>(rng.below(256));
      t.sections.push_back(std::move(s));
    }
    return t;
  }
};

namespace detail {

// Deduplicate against existing names: keep the name if free, else append a
// counter suffix (truncating the stem to fit 8 bytes).
inline std::string dedup_section_name(const std::string& base, std::set<std::string>& taken) {
  if (taken.insert(base).second) return base;
  for (int k = 0;; ++k) {
    std::string suffix = std::to_string(k);
    std::string stem = base.substr(0, 8 - suffix.size());
    std::string candidate = stem + suffix;
    if (taken.insert(candidate).second) return candidate;
  }
}

}  // namespace detail

/// Append the trigger sections after the last section. Existing section
/// payloads and the entry point are untouched; fails if the section table
/// cannot grow inside the existing header region.
inline std::vector<std::uint8_t> append_sections(const PeFile& input, const TriggerSpec& trigger) {
  trigger.validate();
  PeFile pe = input;

  // Room check: the enlarged section table must stay clear of the first
  // section payload and of the declared header region.
  std::size_t new_table_end = static_cast<std::size_t>(pe.e_lfanew) + 24 +
                              pe.size_of_optional_header +
                              (pe.sections.size() + trigger.sections.size()) * 40;
  std::size_t first_raw = static_cast<std::size_t>(pe.size_of_headers);
  for (const auto& s : pe.sections) {
    if (s.header.size_of_raw_data > 0) {
      first_raw = std::min(first_raw, static_cast<std::size_t>(s.header.pointer_to_raw_data));
    }
  }
  if (new_table_end > first_raw) {
    throw PeError("insufficient header slack for appended section table entries", new_table_end);
  }

  std::set<std::string> taken;
  for (const auto& s : pe.sections) taken.insert(s.header.name_string());

  std::uint64_t next_raw = pe.size_of_headers;
  std::uint64_t next_va = pe.section_alignment;
  for (const auto& s : pe.sections) {
    next_raw = std::max(next_raw, static_cast<std::uint64_t>(s.header.pointer_to_raw_data) +
                                      s.header.size_of_raw_data);
    next_va = std::max(next_va, static_cast<std::uint64_t>(s.header.virtual_address) +
                                    std::max(s.header.virtual_size, std::uint32_t{1}));
  }
  next_raw = detail::align_up(next_raw, pe.file_alignment);
  next_va = detail::align_up(next_va, pe.section_alignment);

  for (const auto& ts : trigger.sections) {
    Section s;
    s.header.set_name(detail::dedup_section_name(ts.name, taken));
    s.header.characteristics = ts.characteristics;
    s.header.virtual_size = static_cast<std::uint32_t>(ts.content.size());
    s.header.virtual_address = static_cast<std::uint32_t>(next_va);
    s.header.size_of_raw_data =
        static_cast<std::uint32_t>(detail::align_up(ts.content.size(), pe.file_alignment));
    s.header.pointer_to_raw_data = ts.content.empty() ? 0 : static_cast<std::uint32_t>(next_raw);
    s.data = ts.content;
    s.data.resize(s.header.size_of_raw_data, 0);

    std::uint64_t va_span = detail::align_up(std::max<std::uint64_t>(ts.content.size(), 1),
                                             pe.section_alignment);
    if (next_va + va_span > 0xffffffffull) {
      throw PeError("virtual address space overflow", static_cast<std::size_t>(next_va));
    }
    next_va += va_span;
    next_raw += s.header.size_of_raw_data;
    pe.sections.push_back(std::move(s));
  }

  const auto& last = pe.sections.back().header;
  pe.size_of_image = static_cast<std::uint32_t>(detail::align_up(
      static_cast<std::uint64_t>(last.virtual_address) + std::max(last.virtual_size, std::uint32_t{1}),
      pe.section_alignment));
  return write_pe(pe);
}

inline constexpr int kFeatureDim = 264;
inline constexpr int kHistogramBins = 256;

// Structural feature slots following the byte histogram.
enum StructuralFeature : int {
  kFeatSectionCount = 256,
  kFeatLogTotalRawSize = 257,
  kFeatLogSizeOfImage = 258,
  kFeatFracExecutable = 259,
  kFeatFracWritable = 260,
  kFeatZeroRawSections = 261,
  kFeatLogEntryPoint = 262,
  kFeatLogMeanVirtualSize = 263,
};

/// 264-dim static feature vector: a whole-file byte histogram normalized to
/// sum 1, followed by eight structural values. Raw units; dataset-level
/// min-max scaling happens downstream.
inline std::vector<double> extract_features(std::span<const std::uint8_t> bytes) {
  PeFile pe = parse_pe(bytes);
  std::vector<double> features(kFeatureDim, 0.0);
  std::array<std::uint64_t, kHistogramBins> counts{};
  for (std::uint8_t b : bytes) ++counts[b];
  const double inv_size = 1.0 / static_cast<double>(bytes.size());
  for (int i = 0; i < kHistogramBins; ++i) {
    features[static_cast<std::size_t>(i)] = static_cast<double>(counts[static_cast<std::size_t>(i)]) * inv_size;
  }

  const double n_sections = static_cast<double>(pe.sections.size());
  std::uint64_t total_raw = 0;
  std::uint64_t total_virtual = 0;
  int executable = 0;
  int writable = 0;
  int zero_raw = 0;
  for (const auto& s : pe.sections) {
    total_raw += s.header.size_of_raw_data;
    total_virtual += s.header.virtual_size;
    if (s.header.characteristics & kSectionExecute) ++executable;
    if (s.header.characteristics & kSectionWrite) ++writable;
    if (s.header.size_of_raw_data == 0) ++zero_raw;
  }
  features[kFeatSectionCount] = n_sections;
  features[kFeatLogTotalRawSize] = std::log1p(static_cast<double>(total_raw));
  features[kFeatLogSizeOfImage] = std::log1p(static_cast<double>(pe.size_of_image));
  features[kFeatFracExecutable] = n_sections > 0 ? executable / n_sections : 0.0;
  features[kFeatFracWritable] = n_sections > 0 ? writable / n_sections : 0.0;
  features[kFeatZeroRawSections] = static_cast<double>(zero_raw);
  features[kFeatLogEntryPoint] = std::log1p(static_cast<double>(pe.address_of_entry_point));
  features[kFeatLogMeanVirtualSize] =
      n_sections > 0 ? std::log1p(static_cast<double>(total_virtual) / n_sections) : 0.0;
  return features;
}

/// Exact raw-feature change the trigger induces on a given base file:
/// extract(append(base, trigger)) - extract(base).
inline std::vector<double> trigger_feature_delta(const TriggerSpec& trigger,
                                                 std::span<const std::uint8_t> base) {
  std::vector<double> before = extract_features(base);
  std::vector<std::uint8_t> injected = append_sections(parse_pe(base), trigger);
  std::vector<double> after = extract_features(injected);
  for (std::size_t i = 0; i < after.size(); ++i) after[i] -= before[i];
  return after;
}

}  // namespace poisonbench::pe
