#pragma once

#include <stdexcept>
#include <string>

namespace oodtest {

enum class ErrorKind {
  kValidation,  // malformed input or violated precondition
  kInfeasible,  // a requested split cannot be realized from the available cells
  kIo,
  kRunner,      // external prediction provider failed
};

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}

  [[nodiscard]] ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void fail(const std::string& what) { throw Error(ErrorKind::kValidation, what); }

[[noreturn]] inline void fail_infeasible(const std::string& what) {
  throw Error(ErrorKind::kInfeasible, what);
}

[[noreturn]] inline void fail_io(const std::string& what) { throw Error(ErrorKind::kIo, what); }

inline void require(bool cond, const std::string& what) {
  if (!cond) fail(what);
}

}  // namespace oodtest
