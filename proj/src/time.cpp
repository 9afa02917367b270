#include "ehrnav/time.hpp"

#include <cstdio>

#include "ehrnav/error.hpp"

namespace ehrnav {

namespace {

bool read_digits(std::string_view s, std::size_t pos, std::size_t count, int& out) {
  if (pos + count > s.size()) return false;
  int v = 0;
  for (std::size_t i = 0; i < count; ++i) {
    const char c = s[pos + i];
    if (c < '0' || c > '9') return false;
    v = v * 10 + (c - '0');
  }
  out = v;
  return true;
}

[[noreturn]] void bad(std::string_view text) {
  throw Error(ErrorCode::invalid_argument, "invalid timestamp: '" + std::string(text) + "'");
}

}  // namespace

Instant parse_instant(std::string_view text) {
  using namespace std::chrono;
  int y = 0, mo = 0, d = 0, h = 0, mi = 0, s = 0;
  if (!read_digits(text, 0, 4, y) || text.size() < 10 || text[4] != '-' ||
      !read_digits(text, 5, 2, mo) || text[7] != '-' || !read_digits(text, 8, 2, d)) {
    bad(text);
  }
  std::size_t pos = 10;
  if (pos < text.size()) {
    if (text[pos] != 'T' && text[pos] != ' ') bad(text);
    if (!read_digits(text, pos + 1, 2, h) || pos + 3 >= text.size() || text[pos + 3] != ':' ||
        !read_digits(text, pos + 4, 2, mi)) {
      bad(text);
    }
    pos += 6;
    if (pos < text.size() && text[pos] == ':') {
      if (!read_digits(text, pos + 1, 2, s)) bad(text);
      pos += 3;
    }
    if (pos < text.size() && text[pos] == 'Z') ++pos;
    if (pos != text.size()) bad(text);
  }
  const year_month_day ymd{year{y}, month{static_cast<unsigned>(mo)}, day{static_cast<unsigned>(d)}};
  if (!ymd.ok() || h > 23 || mi > 59 || s > 60) bad(text);
  return sys_days{ymd} + hours{h} + minutes{mi} + seconds{s};
}

namespace {

std::string format_with(Instant t, char sep, bool zulu) {
  using namespace std::chrono;
  const sys_days day_part = floor<days>(t);
  const year_month_day ymd{day_part};
  const hh_mm_ss tod{t - day_part};
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%04d-%02u-%02u%c%02d:%02d:%02d%s", static_cast<int>(ymd.year()),
                static_cast<unsigned>(ymd.month()), static_cast<unsigned>(ymd.day()), sep,
                static_cast<int>(tod.hours().count()), static_cast<int>(tod.minutes().count()),
                static_cast<int>(tod.seconds().count()), zulu ? "Z" : "");
  return buf;
}

}  // namespace

std::string format_iso(Instant t) { return format_with(t, 'T', true); }

std::string format_clinical(Instant t) { return format_with(t, ' ', false); }

}  // namespace ehrnav
