#pragma once

#include <stdexcept>
#include <string>

namespace lumenseg {

// Base class for every error raised by the library. `kind()` lets the CLI map
// failures onto distinct exit codes.
class Error : public std::runtime_error {
 public:
  enum class Kind { spec, shape, value, data, config, numeric, io, stats };

  Error(Kind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}

  Kind kind() const noexcept { return kind_; }

 private:
  Kind kind_;
};

// Invalid architecture or hyperparameter description.
struct SpecError : Error {
  explicit SpecError(const std::string& what) : Error(Kind::spec, what) {}
};

// Mismatched array shapes between paired inputs.
struct ShapeError : Error {
  explicit ShapeError(const std::string& what) : Error(Kind::shape, what) {}
};

// A value outside its admissible range.
struct ValueError : Error {
  explicit ValueError(const std::string& what) : Error(Kind::value, what) {}
};

// Problems with dataset content: missing masks, unknown patients, bad splits.
struct DataError : Error {
  explicit DataError(const std::string& what) : Error(Kind::data, what) {}
};

struct ConfigError : Error {
  explicit ConfigError(const std::string& what) : Error(Kind::config, what) {}
};

// NaN/Inf during optimisation.
struct NumericError : Error {
  explicit NumericError(const std::string& what) : Error(Kind::numeric, what) {}
};

struct IoError : Error {
  explicit IoError(const std::string& what) : Error(Kind::io, what) {}
};

// Statistical test is undefined for the given data (e.g. all observations tied).
struct DegenerateTiesError : Error {
  explicit DegenerateTiesError(const std::string& what) : Error(Kind::stats, what) {}
};

}  // namespace lumenseg
