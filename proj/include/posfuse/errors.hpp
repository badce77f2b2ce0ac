#pragma once

#include <stdexcept>
#include <string>

namespace posfuse {

// Every error the library raises derives from Error so callers can catch the
// family at once; the subclasses name the failure category.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct DimensionError : Error {
  using Error::Error;
};
struct ConfigError : Error {
  using Error::Error;
};
struct DataError : Error {
  using Error::Error;
};
struct NumericError : Error {
  using Error::Error;
};
struct LengthError : Error {
  using Error::Error;
};
struct ParameterError : Error {
  using Error::Error;
};
struct ContractError : Error {
  using Error::Error;
};

}  // namespace posfuse
