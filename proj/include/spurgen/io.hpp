#pragma once

// File plumbing shared by checkpoints, feature caches and manifests.
//
// Binary container layout (all integers little-endian):
//   offset 0   8 bytes   magic, e.g. "SPGCKPT\0" or "SPGFEAT\0"
//   offset 8   u32       format version
//   offset 12  u64       header length N in bytes
//   offset 20  N bytes   UTF-8 JSON header
//   offset 20+N          payload: IEEE-754 binary64 values, little-endian
// Writers go through a temporary sibling file followed by rename(), so a
// reader never observes a partially written file.

#include <nlohmann/json.hpp>

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace spurgen::io {

using Magic = std::array<char, 8>;

struct Container {
    std::uint32_t version = 0;
    nlohmann::json header;
    std::vector<double> payload;
};

void write_container(const std::filesystem::path& path, const Magic& magic, std::uint32_t version,
                     const nlohmann::json& header, std::span<const double> payload);
Container read_container(const std::filesystem::path& path, const Magic& magic);

void atomic_write_text(const std::filesystem::path& path, const std::string& text);
std::string read_text(const std::filesystem::path& path);

std::string sha256_hex(std::span<const unsigned char> bytes);
std::string sha256_hex(const std::string& text);
std::string sha256_file(const std::filesystem::path& path);
std::string sha256_doubles(std::span<const double> values);

}  // namespace spurgen::io
