#pragma once

#include <stdexcept>
#include <string>

namespace muonseg {

// Invalid input or configuration: caller error, CLI exit code 2.
class ValidationError : public std::runtime_error {
 public:
  explicit ValidationError(const std::string& what) : std::runtime_error(what) {}
};

// Failure while doing otherwise valid work (I/O, numerical blow-up): exit 1.
class RuntimeError : public std::runtime_error {
 public:
  explicit RuntimeError(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace muonseg
