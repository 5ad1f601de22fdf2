#pragma once

#include <charconv>
#include <string>

namespace uapdfl {

// Shortest text that reads back to the identical double.
inline std::string fmt_double(double v) {
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return {buf, res.ptr};
}

}  // namespace uapdfl
