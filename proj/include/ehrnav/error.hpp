#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace ehrnav {

enum class ErrorCode {
  invalid_argument,
  missing_placeholder,
  backend_transport,
  script_exhausted,
  database_unavailable,
  unknown_table,
  sql_extraction,
  multi_statement,
  empty_description,
  answer_parse,
  dataset_format,
  config,
  not_found,
  unknown_scope,  // unknown profile, database or patient in a request
  io,
};

std::string_view to_string(ErrorCode code);

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(message), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

/// Answer-parse failures keep the raw model output so callers can show it.
class AnswerParseError : public Error {
 public:
  AnswerParseError(const std::string& message, std::string raw_output)
      : Error(ErrorCode::answer_parse, message), raw_output_(std::move(raw_output)) {}

  const std::string& raw_output() const noexcept { return raw_output_; }

 private:
  std::string raw_output_;
};

}  // namespace ehrnav
