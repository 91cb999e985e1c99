#pragma once

#include <stdexcept>
#include <string>

namespace quantal {

enum class ErrorKind {
  SyntaxError,
  UnsupportedArity,
  NegativeValue,
  UnknownVariable,
  BadParameter,
  UnorderedVariable,
  DivisionByZero,
  BadTarget,
  TooLarge,
  DegenerateReference,
  OutOfBudget,
  Timeout,
};

inline const char* to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::SyntaxError: return "SyntaxError";
    case ErrorKind::UnsupportedArity: return "UnsupportedArity";
    case ErrorKind::NegativeValue: return "NegativeValue";
    case ErrorKind::UnknownVariable: return "UnknownVariable";
    case ErrorKind::BadParameter: return "BadParameter";
    case ErrorKind::UnorderedVariable: return "UnorderedVariable";
    case ErrorKind::DivisionByZero: return "DivisionByZero";
    case ErrorKind::BadTarget: return "BadTarget";
    case ErrorKind::TooLarge: return "TooLarge";
    case ErrorKind::DegenerateReference: return "DegenerateReference";
    case ErrorKind::OutOfBudget: return "OutOfBudget";
    case ErrorKind::Timeout: return "Timeout";
  }
  return "Unknown";
}

/// Every failure raised by the library carries one of the kinds above so
/// callers (the CLI in particular) can map it to a distinct exit code.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(std::string(to_string(kind)) + ": " + what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

}  // namespace quantal
