#pragma once

#include <stdexcept>
#include <string>
#include <utility>

namespace egd {

// Error raised by any library module. The module tag is the short name used
// by the CLI when rendering "ERROR:<module>:<message>".
class Error : public std::runtime_error {
 public:
  Error(std::string module, const std::string& message)
      : std::runtime_error(message), module_(std::move(module)) {}

  const std::string& module() const noexcept { return module_; }

 private:
  std::string module_;
};

}  // namespace egd
