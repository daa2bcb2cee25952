#pragma once

#include <stdexcept>
#include <string>

namespace cellgraph {

enum class ErrorKind {
  Validation,             // bad input, bad shapes, bad config
  NormalizationUndefined, // symmetric edge normalization on non-positive degree
  Runtime,                // numerical failure during a run
  Io,
};

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void fail(const std::string& what) { throw Error(ErrorKind::Validation, what); }
[[noreturn]] inline void fail(ErrorKind kind, const std::string& what) { throw Error(kind, what); }

inline void require(bool cond, const std::string& what) {
  if (!cond) fail(what);
}

}  // namespace cellgraph
