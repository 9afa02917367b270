#pragma once

#include <chrono>
#include <string>
#include <string_view>

namespace ehrnav {

/// UTC instant with second precision.
using Instant = std::chrono::sys_seconds;

/// Accepts "YYYY-MM-DD", "YYYY-MM-DD HH:MM[:SS]" and "YYYY-MM-DDTHH:MM[:SS][Z]".
/// Throws Error(invalid_argument) on anything else.
Instant parse_instant(std::string_view text);

/// "YYYY-MM-DDTHH:MM:SSZ"
std::string format_iso(Instant t);

/// "YYYY-MM-DD HH:MM:SS", the form used in chunk prefixes and prompts.
std::string format_clinical(Instant t);

}  // namespace ehrnav
