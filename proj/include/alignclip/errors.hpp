#pragma once

#include <stdexcept>

namespace alignclip {

// Error families map onto CLI exit codes: ConfigError -> 2, DataError -> 3,
// NumericError -> 4. Library code throws the leaf types below so callers can
// either catch a family or a specific condition.
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// config
struct InvalidConfig : ConfigError {
  using ConfigError::ConfigError;
};
struct UnknownPreset : ConfigError {
  using ConfigError::ConfigError;
};

// data / artifact contracts
struct DimensionMismatch : DataError {
  using DataError::DataError;
};
struct ShapeMismatch : DataError {
  using DataError::DataError;
};
struct EmptySequence : DataError {
  using DataError::DataError;
};
struct BatchTooSmall : DataError {
  using DataError::DataError;
};
struct EmptyClassSet : DataError {
  using DataError::DataError;
};
struct NonZeroDiagonal : DataError {
  using DataError::DataError;
};
struct CorruptFile : DataError {
  using DataError::DataError;
};
struct VersionMismatch : DataError {
  using DataError::DataError;
};
struct IoError : DataError {
  using DataError::DataError;
};

// numerics
struct ZeroRow : NumericError {
  using NumericError::NumericError;
};
struct NonFinite : NumericError {
  using NumericError::NumericError;
};
struct DegenerateRank : NumericError {
  using NumericError::NumericError;
};

}  // namespace alignclip
