#pragma once

#include <stdexcept>
#include <string>

namespace ssf {

// Precondition or structural contract broken by the caller (length mismatch,
// coordinate-set mismatch, malformed shapes).
class ContractError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// A layer produced a non-finite value, or training diverged.
class NumericError : public std::runtime_error {
 public:
  NumericError(std::string where, const std::string& what)
      : std::runtime_error(where + ": " + what), where_(std::move(where)) {}

  const std::string& where() const { return where_; }

 private:
  std::string where_;
};

[[noreturn]] inline void contract_failure(const std::string& msg) {
  throw ContractError(msg);
}

#define SSF_REQUIRE(cond, msg)                           \
  do {                                                   \
    if (!(cond)) ::ssf::contract_failure(std::string(msg)); \
  } while (0)

}  // namespace ssf
