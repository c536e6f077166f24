#pragma once

#include <stdexcept>
#include <string>

namespace nr {

// Machine-checkable failure categories. Every thrown nr::Error carries one,
// so tests can assert on the category instead of matching message text.
enum class Errc {
  bad_magic,
  bad_version,
  truncated,
  non_finite,
  duplicate_id,
  unknown_field,
  missing_field,
  out_of_range,
  shape_mismatch,
  dim_mismatch,
  not_found,
  invalid_argument,
  unstable_filter,
  io_failure,
  non_finite_loss,
};

const char* errc_name(Errc c);

class Error : public std::runtime_error {
 public:
  Error(Errc code, const std::string& msg)
      : std::runtime_error(std::string(errc_name(code)) + ": " + msg), code_(code) {}

  Errc code() const { return code_; }

 private:
  Errc code_;
};

[[noreturn]] inline void fail(Errc code, const std::string& msg) { throw Error(code, msg); }

}  // namespace nr
