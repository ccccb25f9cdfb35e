// Copyright 2026 The modnet Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>

namespace modnet {

/// Base class for all library errors.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Operand shapes do not conform to a primitive's signature.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// An index (module, token, datapoint) is outside its valid range.
class IndexError : public Error {
 public:
  using Error::Error;
};

/// A configuration value failed validation. `field()` names the dotted key.
class ConfigError : public Error {
 public:
  ConfigError(std::string field, const std::string& what)
      : Error(field + ": " + what), field_(std::move(field)) {}
  const std::string& field() const { return field_; }

 private:
  std::string field_;
};

/// NaN or infinity where a finite value is required.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// Enumeration would exceed the configured composition budget.
class BudgetError : public Error {
 public:
  using Error::Error;
};

}  // namespace modnet
