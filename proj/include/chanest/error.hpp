#pragma once

#include <stdexcept>
#include <string>

namespace chanest {

// Root of every error thrown by the library. Each subclass maps to one
// failure category so callers (the CLI in particular) can pick exit codes.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
public:
    using Error::Error;
};

class FormatError : public Error {
public:
    using Error::Error;
};

class IoError : public Error {
public:
    using Error::Error;
};

class EmptyDatasetError : public Error {
public:
    using Error::Error;
};

class DegenerateMaskError : public Error {
public:
    using Error::Error;
};

class BudgetError : public Error {
public:
    using Error::Error;
};

class DivisionByZeroError : public Error {
public:
    using Error::Error;
};

class ConfigError : public Error {
public:
    using Error::Error;
};

// Raised when a NaN or Inf shows up where only finite values are allowed.
class NumericError : public Error {
public:
    using Error::Error;
};

}  // namespace chanest
