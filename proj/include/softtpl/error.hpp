#pragma once

#include <stdexcept>
#include <string>

namespace softtpl {

// Every module reports failures through this type. `module()` names the
// subsystem that raised it; the CLI prints it together with the message.
class Error : public std::runtime_error {
 public:
  Error(std::string module, const std::string& what)
      : std::runtime_error(what), module_(std::move(module)) {}

  const std::string& module() const noexcept { return module_; }

 private:
  std::string module_;
};

}  // namespace softtpl
