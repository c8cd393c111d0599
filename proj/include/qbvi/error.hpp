#pragma once

#include <stdexcept>
#include <string>

namespace qbvi {

// All library failures are reported as qbvi::Error. The code is a short
// dotted identifier (e.g. "nifti.magic") that the CLI prints verbatim so
// scripts can match on it.
class Error : public std::runtime_error {
 public:
  Error(std::string code, const std::string& message)
      : std::runtime_error(message), code_(std::move(code)) {}

  const std::string& code() const noexcept { return code_; }

 private:
  std::string code_;
};

inline void require(bool condition, const char* code, const std::string& message) {
  if (!condition) throw Error(code, message);
}

}  // namespace qbvi
