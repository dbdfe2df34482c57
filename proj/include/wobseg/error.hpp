#pragma once

#include <stdexcept>
#include <string>

namespace wobseg {

/// Broad failure categories; the CLI maps them onto exit codes 1, 2 and 3.
enum class ErrorKind { config = 1, io = 2, infeasible = 3 };

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }
  int exit_code() const noexcept { return static_cast<int>(kind_); }

 private:
  ErrorKind kind_;
};

inline Error config_error(const std::string& what) {
  return Error(ErrorKind::config, what);
}
inline Error io_error(const std::string& what) {
  return Error(ErrorKind::io, what);
}
inline Error infeasible_error(const std::string& what) {
  return Error(ErrorKind::infeasible, what);
}

}  // namespace wobseg
