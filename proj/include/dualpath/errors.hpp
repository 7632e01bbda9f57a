#pragma once

#include <stdexcept>
#include <string>

namespace dualpath {

// Every failure surfaced by the library derives from Error so callers (the
// CLI in particular) can report a single-line diagnostic.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

#define DUALPATH_ERROR(Name)            \
  class Name : public Error {           \
   public:                              \
    using Error::Error;                 \
  }

DUALPATH_ERROR(DimensionError);
DUALPATH_ERROR(IndexError);
DUALPATH_ERROR(ParameterError);
DUALPATH_ERROR(NumericError);
DUALPATH_ERROR(BatchSizeError);
DUALPATH_ERROR(StateError);
DUALPATH_ERROR(UsageError);
DUALPATH_ERROR(DataError);
DUALPATH_ERROR(FormatError);
DUALPATH_ERROR(ParseError);
DUALPATH_ERROR(CapacityError);
DUALPATH_ERROR(ConfigError);
DUALPATH_ERROR(SamplingError);

#undef DUALPATH_ERROR

}  // namespace dualpath
