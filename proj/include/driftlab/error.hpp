#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace driftlab {

enum class errc {
  invalid_argument,
  state_error,
  numeric_error,
  fit_error,
  io_error,
  format_error,
  unsupported,
};

inline std::string_view to_string(errc code) {
  switch (code) {
    case errc::invalid_argument: return "invalid-argument";
    case errc::state_error: return "state-error";
    case errc::numeric_error: return "numeric-error";
    case errc::fit_error: return "fit-error";
    case errc::io_error: return "io-error";
    case errc::format_error: return "format-error";
    case errc::unsupported: return "unsupported";
  }
  return "unknown";
}

// Every failure raised by the library carries one of the errc kinds so callers
// (and the CLI exit path) can branch on the category instead of the message.
class error : public std::runtime_error {
 public:
  error(errc code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

  errc code() const noexcept { return code_; }

 private:
  errc code_;
};

[[noreturn]] inline void fail(errc code, const std::string& what) { throw error(code, what); }

inline void require(bool ok, errc code, const char* what) {
  if (!ok) fail(code, what);
}

}  // namespace driftlab
