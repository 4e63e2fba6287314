#pragma once

#include <stdexcept>
#include <string>

namespace esr {

/// Root of every error thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

#define ESR_DEFINE_ERROR(Name)             \
  class Name : public Error {              \
   public:                                 \
    using Error::Error;                    \
  };

ESR_DEFINE_ERROR(NumericError)
ESR_DEFINE_ERROR(ShapeError)
ESR_DEFINE_ERROR(VocabError)
ESR_DEFINE_ERROR(ContextError)
ESR_DEFINE_ERROR(ConfigError)
ESR_DEFINE_ERROR(AlphabetError)
ESR_DEFINE_ERROR(TextMismatchError)
ESR_DEFINE_ERROR(EmptyWindowError)
ESR_DEFINE_ERROR(InsufficientDataError)
ESR_DEFINE_ERROR(IoError)
ESR_DEFINE_ERROR(ReportError)

#undef ESR_DEFINE_ERROR

/// Config text that does not parse. Carries the 1-based line of the failure.
class ConfigParseError : public Error {
 public:
  ConfigParseError(const std::string& what, int line)
      : Error(what + " (line " + std::to_string(line) + ")"), line_(line) {}
  int line() const { return line_; }

 private:
  int line_;
};

}  // namespace esr
