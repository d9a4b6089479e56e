#pragma once

#include <stdexcept>
#include <string>

namespace normlab {

/// Thrown when an operation's preconditions are violated by its arguments.
class rejected_input : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Malformed external data (CIFAR batches, parameter records, CSV).
class format_error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class io_error : public std::runtime_error {
 public:
  io_error(const std::string& what, const std::string& path)
      : std::runtime_error(what + ": " + path), path_(path) {}

  const std::string& path() const noexcept { return path_; }

 private:
  std::string path_;
};

namespace detail {

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw rejected_input(msg);
}

}  // namespace detail
}  // namespace normlab
