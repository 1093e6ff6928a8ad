#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <string_view>

namespace fruitform {

// Invalid inputs, bad flags, contract violations. CLI maps these to exit 2.
struct ValidationError : std::runtime_error {
    explicit ValidationError(const std::string& msg) : std::runtime_error(msg) {}
};

// Filesystem / codec failures. CLI maps these to exit 1.
struct IoError : std::runtime_error {
    explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

std::uint64_t fnv1a64(const void* data, std::size_t n);
std::uint64_t fnv1a64(std::string_view s);
std::string hex64(std::uint64_t v);

std::string read_file(const std::filesystem::path& path);
std::uint64_t hash_file(const std::filesystem::path& path);

// Write-temp-then-rename so reruns never leave a half-written artifact.
void atomic_write_file(const std::filesystem::path& path, std::string_view contents);

} // namespace fruitform
