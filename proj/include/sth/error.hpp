#pragma once

#include <stdexcept>
#include <string>
#include <type_traits>

namespace sth {

enum class ErrorKind {
  InvalidShape,
  ShapeMismatch,
  Argument,
  Layout,
  Config,
  Unsupported,
  MissingFile,
  BadMagic,
  DimOverflow,
  Parse,
  Validation,
  Io,
};

inline const char* to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::InvalidShape: return "invalid-shape";
    case ErrorKind::ShapeMismatch: return "shape-mismatch";
    case ErrorKind::Argument: return "argument";
    case ErrorKind::Layout: return "layout";
    case ErrorKind::Config: return "config";
    case ErrorKind::Unsupported: return "unsupported";
    case ErrorKind::MissingFile: return "missing-file";
    case ErrorKind::BadMagic: return "bad-magic";
    case ErrorKind::DimOverflow: return "dim-overflow";
    case ErrorKind::Parse: return "parse";
    case ErrorKind::Validation: return "validation";
    case ErrorKind::Io: return "io";
  }
  return "unknown";
}

/// Single exception type for the library; `kind()` discriminates failure classes.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(std::string(to_string(kind)) + ": " + what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& what) { throw Error(kind, what); }

inline void require(bool cond, ErrorKind kind, const char* what) {
  if (!cond) fail(kind, what);
}

/// Lazy form: the message is only built on failure.
template <typename MessageFn>
  requires std::is_invocable_r_v<std::string, MessageFn>
inline void require(bool cond, ErrorKind kind, MessageFn&& what) {
  if (!cond) fail(kind, what());
}

}  // namespace sth
