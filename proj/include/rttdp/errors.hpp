#pragma once

#include <stdexcept>
#include <string>

namespace rttdp {

// Base of every error the library throws. Subclasses map one-to-one onto the
// failure classes callers are expected to distinguish.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

class NumericsError : public Error {
 public:
  using Error::Error;
};

class ContractError : public Error {
 public:
  using Error::Error;
};

class SingularCovarianceError : public Error {
 public:
  using Error::Error;
};

class DegenerateBatchError : public Error {
 public:
  using Error::Error;
};

class FormatError : public Error {
 public:
  using Error::Error;
};

class TrainingDivergedError : public Error {
 public:
  using Error::Error;
};

class AuditError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

}  // namespace rttdp
