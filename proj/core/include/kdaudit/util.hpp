#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

namespace kdaudit {

// FNV-1a 64-bit. Used for condition-label hashing and file provenance hashes.
uint64_t fnv1a64(const void* data, size_t n, uint64_t seed = 0xcbf29ce484222325ull);
uint64_t fnv1a64(std::string_view s);

// Formats a double with 6 significant digits (%.6g), the report convention.
std::string fmt6(double v);

std::string read_text_file(const std::filesystem::path& path);
void write_text_file(const std::filesystem::path& path, std::string_view text);
std::vector<uint8_t> read_binary_file(const std::filesystem::path& path);
void write_binary_file(const std::filesystem::path& path, const void* data, size_t n);

uint64_t hash_file(const std::filesystem::path& path);

std::string lowercase(std::string s);

// Whole-word occurrences of `word` in `text`, words being maximal [A-Za-z] runs.
int64_t count_word(std::string_view text, std::string_view word);

}  // namespace kdaudit
