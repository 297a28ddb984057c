#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "poisonbench/pe.hpp"
#include "poisonbench/rng.hpp"

namespace poisonbench::pe {

struct PeBuildSection {
  std::string name;
  std::vector<std::uint8_t> content;
  std::uint32_t characteristics = kSectionInitializedData | kSectionRead;
};

struct PeBuildSpec {
  bool pe32plus = false;
  std::uint32_t file_alignment = 0x200;
  std::uint32_t section_alignment = 0x1000;
  std::uint32_t size_of_headers = 0x400;
  std::uint32_t time_date_stamp = 0;
  std::vector<PeBuildSection> sections;
};

namespace detail {

inline void put_u16(std::vector<std::uint8_t>& v, std::size_t at, std::uint16_t x) { write_u16(v, at, x); }
inline void put_u32(std::vector<std::uint8_t>& v, std::size_t at, std::uint32_t x) { write_u32(v, at, x); }

inline std::vector<std::uint8_t> make_optional_header(const PeBuildSpec& spec,
                                                      std::uint32_t entry_rva,
                                                      std::uint32_t size_of_image) {
  const bool plus = spec.pe32plus;
  std::vector<std::uint8_t> opt(plus ? 240 : 224, 0);
  put_u16(opt, 0, plus ? kMagicPe32Plus : kMagicPe32);
  opt[2] = 14;  // linker major
  put_u32(opt, 16, entry_rva);
  put_u32(opt, 20, 0x1000);  // BaseOfCode
  if (plus) {
    put_u32(opt, 24, 0x00400000);  // ImageBase low dword; high stays 0
  } else {
    put_u32(opt, 24, 0x2000);      // BaseOfData
    put_u32(opt, 28, 0x00400000);  // ImageBase
  }
  put_u32(opt, 32, spec.section_alignment);
  put_u32(opt, 36, spec.file_alignment);
  put_u16(opt, 40, 6);  // OS major
  put_u16(opt, 48, 6);  // subsystem major
  put_u32(opt, 56, size_of_image);
  put_u32(opt, 60, spec.size_of_headers);
  put_u16(opt, 68, 3);  // console subsystem
  if (plus) {
    put_u32(opt, 72, 0x100000);   // stack reserve (low dword)
    put_u32(opt, 80, 0x1000);     // stack commit
    put_u32(opt, 88, 0x100000);   // heap reserve
    put_u32(opt, 96, 0x1000);     // heap commit
    put_u32(opt, 108, 16);        // NumberOfRvaAndSizes
  } else {
    put_u32(opt, 72, 0x100000);
    put_u32(opt, 76, 0x1000);
    put_u32(opt, 80, 0x100000);
    put_u32(opt, 84, 0x1000);
    put_u32(opt, 92, 16);
  }
  return opt;
}

}  // namespace detail

/// Assemble a well-formed image from scratch. Sections land on the file and
/// section alignments in order; the entry point is the first executable
/// section's start (0 if none).
inline std::vector<std::uint8_t> build_pe(const PeBuildSpec& spec) {
  if (spec.sections.empty()) throw std::invalid_argument("build_pe: at least one section");
  PeFile pe;
  pe.dos_header.fill(0);
  pe.dos_header[0] = 'M';
  pe.dos_header[1] = 'Z';
  pe.e_lfanew = 64;
  pe.machine = spec.pe32plus ? 0x8664 : 0x014c;
  pe.time_date_stamp = spec.time_date_stamp;
  pe.size_of_optional_header = spec.pe32plus ? 240 : 224;
  pe.coff_characteristics = spec.pe32plus ? 0x0022 : 0x0102;
  pe.magic = spec.pe32plus ? kMagicPe32Plus : kMagicPe32;
  pe.section_alignment = spec.section_alignment;
  pe.file_alignment = spec.file_alignment;
  pe.size_of_headers = spec.size_of_headers;

  std::size_t table_end = 64 + 4 + 20 + pe.size_of_optional_header + spec.sections.size() * 40;
  if (table_end > spec.size_of_headers) {
    throw std::invalid_argument("build_pe: size_of_headers too small for the section table");
  }

  std::uint64_t raw = spec.size_of_headers;
  std::uint64_t va = spec.section_alignment;
  std::uint32_t entry_rva = 0;
  for (const auto& bs : spec.sections) {
    Section s;
    s.header.set_name(bs.name);
    s.header.characteristics = bs.characteristics;
    s.header.virtual_size = static_cast<std::uint32_t>(bs.content.size());
    s.header.virtual_address = static_cast<std::uint32_t>(va);
    s.header.size_of_raw_data =
        static_cast<std::uint32_t>(pe::detail::align_up(bs.content.size(), spec.file_alignment));
    s.header.pointer_to_raw_data = s.header.size_of_raw_data == 0 ? 0 : static_cast<std::uint32_t>(raw);
    s.data = bs.content;
    s.data.resize(s.header.size_of_raw_data, 0);
    if (entry_rva == 0 && (bs.characteristics & kSectionExecute)) {
      entry_rva = s.header.virtual_address;
    }
    raw += s.header.size_of_raw_data;
    va += pe::detail::align_up(std::max<std::uint64_t>(bs.content.size(), 1), spec.section_alignment);
    pe.sections.push_back(std::move(s));
  }
  pe.address_of_entry_point = entry_rva;
  pe.size_of_image = static_cast<std::uint32_t>(va);
  pe.optional_header = detail::make_optional_header(spec, entry_rva, pe.size_of_image);
  return write_pe(pe);
}

/// Canonical two-section PE32 fixture (regenerate with tools/make_fixtures).
inline std::vector<std::uint8_t> build_min32() {
  PeBuildSpec spec;
  std::vector<std::uint8_t> code = {0xb8, 0x2a, 0x00, 0x00, 0x00, 0xc3};  // mov eax, 42; ret
  std::string text = "poisonbench minimal PE32 fixture";
  spec.sections.push_back({".text", code, kSectionCode | kSectionExecute | kSectionRead});
  spec.sections.push_back({".data", std::vector<std::uint8_t>(text.begin(), text.end()),
                           kSectionInitializedData | kSectionRead | kSectionWrite});
  return build_pe(spec);
}

/// Canonical three-section PE32+ fixture.
inline std::vector<std::uint8_t> build_min64() {
  PeBuildSpec spec;
  spec.pe32plus = true;
  std::vector<std::uint8_t> code = {0xb8, 0x2a, 0x00, 0x00, 0x00, 0xc3};
  std::string ro = "read-only payload";
  std::string rw = "poisonbench minimal PE32+ fixture";
  spec.sections.push_back({".text", code, kSectionCode | kSectionExecute | kSectionRead});
  spec.sections.push_back({".rdata", std::vector<std::uint8_t>(ro.begin(), ro.end()),
                           kSectionInitializedData | kSectionRead});
  spec.sections.push_back({".data", std::vector<std::uint8_t>(rw.begin(), rw.end()),
                           kSectionInitializedData | kSectionRead | kSectionWrite});
  return build_pe(spec);
}

// ---------------------------------------------------------------------------
// Seeded fixture fleets for the byte-level end-to-end runs. Benign files get
// ASCII-heavy payloads; each "malware" family draws most content bytes from
// its own 16-byte alphabet, which separates the byte histograms by family.

struct FleetSpec {
  int n_benign = 60;
  int n_families = 3;
  int per_family = 20;
  std::uint64_t seed = 1;
};

struct FleetFile {
  std::string name;
  std::vector<std::uint8_t> bytes;
  int label = 0;  // 0 benign, 1 malware
  int family_id = 0;
};

namespace detail {

inline std::vector<std::uint8_t> benign_payload(Rng& rng, std::size_t size) {
  std::vector<std::uint8_t> out(size);
  for (auto& b : out) {
    double u = rng.next_double();
    if (u < 0.70) {
      b = static_cast<std::uint8_t>(0x20 + rng.below(0x5f));  // printable ASCII
    } else if (u < 0.85) {
      b = 0;
    } else {
      b = static_cast<std::uint8_t>(rng.below(256));
    }
  }
  return out;
}

inline std::vector<std::uint8_t> family_payload(Rng& rng, int family_id, std::size_t size) {
  Rng alphabet_rng(0xfa31u + static_cast<std::uint64_t>(family_id) * 7919u);
  std::array<std::uint8_t, 16> alphabet{};
  for (auto& b : alphabet) b = static_cast<std::uint8_t>(alphabet_rng.below(256));
  std::vector<std::uint8_t> out(size);
  for (auto& b : out) {
    if (rng.next_double() < 0.65) {
      b = alphabet[static_cast<std::size_t>(rng.below(16))];
    } else {
      b = static_cast<std::uint8_t>(rng.below(256));
    }
  }
  return out;
}

inline FleetFile make_fleet_file(const std::string& name, int label, int family_id, Rng& rng) {
  PeBuildSpec spec;
  spec.pe32plus = rng.next_double() < 0.5;
  int extra_sections = static_cast<int>(rng.below(3));  // 2..4 sections total
  std::size_t code_size = 256 + rng.below(1024);
  std::size_t data_size = 512 + rng.below(4096);
  auto payload = [&](std::size_t size) {
    return label == 0 ? benign_payload(rng, size) : family_payload(rng, family_id, size);
  };
  spec.sections.push_back({".text", payload(code_size), kSectionCode | kSectionExecute | kSectionRead});
  spec.sections.push_back({".data", payload(data_size),
                           kSectionInitializedData | kSectionRead | kSectionWrite});
  const char* extras[] = {".rdata", ".rsrc", ".reloc"};
  for (int i = 0; i < extra_sections; ++i) {
    spec.sections.push_back({extras[i], payload(256 + rng.below(1024)),
                             kSectionInitializedData | kSectionRead});
  }
  return FleetFile{name, build_pe(spec), label, family_id};
}

}  // namespace detail

inline std::vector<FleetFile> build_fleet(const FleetSpec& spec) {
  Rng rng(spec.seed);
  std::vector<FleetFile> fleet;
  for (int i = 0; i < spec.n_benign; ++i) {
    fleet.push_back(detail::make_fleet_file("benign-" + std::to_string(i) + ".exe", 0, 0, rng));
  }
  for (int f = 1; f <= spec.n_families; ++f) {
    for (int i = 0; i < spec.per_family; ++i) {
      fleet.push_back(detail::make_fleet_file(
          "family" + std::to_string(f) + "-" + std::to_string(i) + ".exe", 1, f, rng));
    }
  }
  return fleet;
}

}  // namespace poisonbench::pe
