// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace unir {

// Input or contract violation. `code` is a stable identifier such as
// "EmptyMask" or "BadMagic" that callers and tests can match on.
class Error : public std::runtime_error {
public:
  Error(std::string code, const std::string& message)
    : std::runtime_error(code + ": " + message), code_(std::move(code)) {}

  const std::string& code() const noexcept { return code_; }

private:
  std::string code_;
};

}  // namespace unir
