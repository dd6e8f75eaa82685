#pragma once

#include <stdexcept>
#include <string>

namespace mlcil {

// Operand shapes disagree.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// A vector that must be normalized (or compared by angle) has zero norm.
class DegenerateVectorError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

// Caller violated an operation's precondition.
class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

// Malformed input data or configuration.
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// NaN/Inf encountered during training.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace mlcil
