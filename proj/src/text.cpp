#include "ehrnav/text.hpp"

#include <openssl/evp.h>
#include <unicode/normalizer2.h>
#include <unicode/uchar.h>
#include <unicode/unistr.h>
#include <unicode/utf8.h>

#include <algorithm>
#include <array>
#include <cctype>
#include <stdexcept>

#include "ehrnav/error.hpp"

namespace ehrnav {

std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::invalid_argument: return "invalid_argument";
    case ErrorCode::missing_placeholder: return "missing_placeholder";
    case ErrorCode::backend_transport: return "backend_transport";
    case ErrorCode::script_exhausted: return "script_exhausted";
    case ErrorCode::database_unavailable: return "database_unavailable";
    case ErrorCode::unknown_table: return "unknown_table";
    case ErrorCode::sql_extraction: return "sql_extraction";
    case ErrorCode::multi_statement: return "multi_statement";
    case ErrorCode::empty_description: return "empty_description";
    case ErrorCode::answer_parse: return "answer_parse";
    case ErrorCode::dataset_format: return "dataset_format";
    case ErrorCode::config: return "config";
    case ErrorCode::not_found: return "not_found";
    case ErrorCode::unknown_scope: return "unknown_scope";
    case ErrorCode::io: return "io";
  }
  return "unknown";
}

namespace text {

namespace {

const icu::Normalizer2& nfc_instance() {
  UErrorCode status = U_ZERO_ERROR;
  const icu::Normalizer2* n = icu::Normalizer2::getNFCInstance(status);
  if (U_FAILURE(status) || n == nullptr) {
    throw std::runtime_error("ICU NFC normalizer unavailable");
  }
  return *n;
}

bool is_ascii(std::string_view s) {
  return std::all_of(s.begin(), s.end(), [](char c) { return static_cast<unsigned char>(c) < 0x80; });
}

}  // namespace

std::string nfc(std::string_view input) {
  // ASCII is already in NFC.
  if (is_ascii(input)) return std::string(input);
  icu::UnicodeString u = icu::UnicodeString::fromUTF8(
      icu::StringPiece(input.data(), static_cast<int32_t>(input.size())));
  UErrorCode status = U_ZERO_ERROR;
  icu::UnicodeString normalized = nfc_instance().normalize(u, status);
  if (U_FAILURE(status)) throw std::runtime_error("NFC normalization failed");
  std::string out;
  normalized.toUTF8String(out);
  return out;
}

std::string casefold(std::string_view input) {
  if (is_ascii(input)) return to_lower_ascii(input);
  icu::UnicodeString u = icu::UnicodeString::fromUTF8(
      icu::StringPiece(input.data(), static_cast<int32_t>(input.size())));
  UErrorCode status = U_ZERO_ERROR;
  icu::UnicodeString normalized = nfc_instance().normalize(u, status);
  if (U_FAILURE(status)) throw std::runtime_error("NFC normalization failed");
  normalized.foldCase();
  std::string out;
  normalized.toUTF8String(out);
  return out;
}

std::vector<Word> split_words(std::string_view input) {
  const std::string normalized = nfc(input);
  std::vector<Word> out;
  const char* s = normalized.data();
  const int32_t len = static_cast<int32_t>(normalized.size());
  int32_t i = 0;
  int32_t start = -1;
  while (i < len) {
    const int32_t at = i;
    UChar32 c;
    U8_NEXT(s, i, len, c);
    const bool space = c >= 0 && u_isUWhiteSpace(c);
    if (space) {
      if (start >= 0) {
        out.push_back(Word{std::string(s + start, static_cast<std::size_t>(at - start)), 0});
        start = -1;
      }
      if (c == '\n' && !out.empty()) ++out.back().newlines_after;
    } else if (start < 0) {
      start = at;
    }
  }
  if (start >= 0) out.push_back(Word{std::string(s + start, static_cast<std::size_t>(len - start)), 0});
  return out;
}

std::vector<std::string> words(std::string_view input) {
  std::vector<std::string> out;
  for (auto& w : split_words(input)) out.push_back(std::move(w.text));
  return out;
}

std::string collapse_whitespace(std::string_view input) { return join(words(input), " "); }

std::string_view trim(std::string_view input) {
  auto is_space = [](char c) { return std::isspace(static_cast<unsigned char>(c)) != 0; };
  while (!input.empty() && is_space(input.front())) input.remove_prefix(1);
  while (!input.empty() && is_space(input.back())) input.remove_suffix(1);
  return input;
}

std::string to_lower_ascii(std::string_view input) {
  std::string out(input);
  for (char& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return out;
}

bool iequals_ascii(std::string_view a, std::string_view b) {
  return a.size() == b.size() && to_lower_ascii(a) == to_lower_ascii(b);
}

bool starts_with_icase(std::string_view haystack, std::string_view prefix) {
  return haystack.size() >= prefix.size() && iequals_ascii(haystack.substr(0, prefix.size()), prefix);
}

bool contains_icase(std::string_view haystack, std::string_view needle) {
  return to_lower_ascii(haystack).find(to_lower_ascii(needle)) != std::string::npos;
}

std::string join(const std::vector<std::string>& parts, std::string_view sep) {
  std::string out;
  for (std::size_t i = 0; i < parts.size(); ++i) {
    if (i) out += sep;
    out += parts[i];
  }
  return out;
}

std::string sha256_hex(std::string_view data) {
  std::array<unsigned char, EVP_MAX_MD_SIZE> md{};
  unsigned int md_len = 0;
  if (EVP_Digest(data.data(), data.size(), md.data(), &md_len, EVP_sha256(), nullptr) != 1) {
    throw std::runtime_error("SHA-256 digest failed");
  }
  static constexpr char kHex[] = "0123456789abcdef";
  std::string out;
  out.reserve(md_len * 2);
  for (unsigned int i = 0; i < md_len; ++i) {
    out += kHex[md[i] >> 4];
    out += kHex[md[i] & 0xF];
  }
  return out;
}

std::string digest(std::string_view data) { return sha256_hex(data).substr(0, 16); }

}  // namespace text
}  // namespace ehrnav
