#pragma once

#include <string>
#include <string_view>
#include <vector>

namespace ehrnav::text {

/// Unicode NFC normalization. Invalid UTF-8 sequences are replaced with U+FFFD.
std::string nfc(std::string_view input);

/// Full Unicode case folding (after NFC).
std::string casefold(std::string_view input);

/// The artifact-wide notion of a "token": a maximal run of non-whitespace code
/// points after NFC normalization. Chunk sizes, ROUGE-L and the hash embedding
/// all count tokens this way.
std::vector<std::string> words(std::string_view input);

struct Word {
  std::string text;
  int newlines_after = 0;  // line breaks in the whitespace that follows
};

/// words() plus the line-break count after each word.
std::vector<Word> split_words(std::string_view input);

/// Trim, collapse internal whitespace runs to a single space.
std::string collapse_whitespace(std::string_view input);

std::string_view trim(std::string_view input);
std::string to_lower_ascii(std::string_view input);
bool iequals_ascii(std::string_view a, std::string_view b);
bool starts_with_icase(std::string_view haystack, std::string_view prefix);
bool contains_icase(std::string_view haystack, std::string_view needle);

std::string join(const std::vector<std::string>& parts, std::string_view sep);

/// Lowercase hex SHA-256.
std::string sha256_hex(std::string_view data);

/// Short digest used for trace step inputs/outputs.
std::string digest(std::string_view data);

}  // namespace ehrnav::text
