#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace lottalora {

/// Failure classes surfaced to callers and, through the CLI, as exit codes.
enum class ErrorCategory {
  usage = 2,
  configuration = 3,
  data = 4,
  parse = 5,
  format = 6,
  integrity = 7,
  incompatibility = 8,
  dimension = 9,
  domain = 10,
  run = 11,
  verification = 12,
};

constexpr std::string_view to_string(ErrorCategory c) {
  switch (c) {
    case ErrorCategory::usage: return "usage";
    case ErrorCategory::configuration: return "configuration";
    case ErrorCategory::data: return "data";
    case ErrorCategory::parse: return "parse";
    case ErrorCategory::format: return "format";
    case ErrorCategory::integrity: return "integrity";
    case ErrorCategory::incompatibility: return "incompatibility";
    case ErrorCategory::dimension: return "dimension";
    case ErrorCategory::domain: return "domain";
    case ErrorCategory::run: return "run";
    case ErrorCategory::verification: return "verification";
  }
  return "unknown";
}

class Error : public std::runtime_error {
 public:
  Error(ErrorCategory category, const std::string& what)
      : std::runtime_error(what), category_(category) {}

  ErrorCategory category() const noexcept { return category_; }

 private:
  ErrorCategory category_;
};

inline Error config_error(const std::string& field, const std::string& why) {
  return Error(ErrorCategory::configuration, "invalid '" + field + "': " + why);
}

}  // namespace lottalora
