#pragma once

#include <stdexcept>
#include <string>

namespace topforge {

// Non-finite or out-of-domain scalar input.
struct InvalidArgument : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// Node index outside [0, n+1].
struct InvalidRoute : std::out_of_range {
  using std::out_of_range::out_of_range;
};

// Operand shapes do not fit the operator.
struct ShapeError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// A mask row admits no entry (softmax over nothing).
struct InvalidMask : std::logic_error {
  using std::logic_error::logic_error;
};

// Caller broke an operation's precondition (upstream bug).
struct ContractViolation : std::logic_error {
  using std::logic_error::logic_error;
};

// No feasible solution exists for the instance.
struct InfeasibleInstance : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ParseError : std::runtime_error {
  ParseError(const std::string& what, std::size_t line)
      : std::runtime_error("line " + std::to_string(line) + ": " + what), line_(line) {}
  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

struct SchemaError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Configuration rejected before any work was done.
struct ConfigError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// Problem size beyond what an exact solver accepts.
struct RefusalError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace topforge
