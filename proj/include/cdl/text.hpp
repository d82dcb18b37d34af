#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

namespace cdl {

// Lowercases ASCII letters, splits on whitespace and emits every ASCII
// punctuation character as its own token. Non-ASCII bytes pass through.
std::vector<std::string> tokenize(std::string_view text);

std::string join(const std::vector<std::string>& tokens, std::string_view sep = " ");

// 64-bit FNV-1a, rendered as 16 hex digits. Used to stamp derived files with
// the checksums of their inputs.
std::uint64_t fnv1a(std::string_view bytes, std::uint64_t seed = 0xcbf29ce484222325ULL);
std::string hex64(std::uint64_t value);
std::string file_checksum(const std::string& path);

// Formats a double so that parsing it back yields the same bits.
std::string format_double(double value);

}  // namespace cdl
