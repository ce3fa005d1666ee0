#pragma once

#include <stdexcept>
#include <string>

namespace knnlm {

/// Failure category; the CLI maps each one to a process exit code.
enum class ErrorKind {
  usage,       // bad arguments or configuration (exit 1)
  data,        // missing/corrupt artifact or hash mismatch (exit 2)
  divergence,  // non-finite loss during training (exit 3)
};

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

inline int exit_code(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::usage: return 1;
    case ErrorKind::data: return 2;
    case ErrorKind::divergence: return 3;
  }
  return 1;
}

[[noreturn]] inline void fail_usage(const std::string& msg) {
  throw Error(ErrorKind::usage, msg);
}
[[noreturn]] inline void fail_data(const std::string& msg) {
  throw Error(ErrorKind::data, msg);
}

}  // namespace knnlm
