#pragma once

#include <stdexcept>
#include <string>

namespace cfdiff {

/// Base of every error raised by the library. `exit_code()` is what the CLI
/// returns when the error escapes a subcommand.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
  virtual int exit_code() const noexcept { return 1; }
};

#define CFDIFF_DEFINE_ERROR(Name, Code)                        \
  class Name : public Error {                                  \
   public:                                                     \
    explicit Name(const std::string& msg) : Error(msg) {}      \
    int exit_code() const noexcept override { return Code; }   \
  };

CFDIFF_DEFINE_ERROR(ShapeError, 1)
CFDIFF_DEFINE_ERROR(CyclicGraphError, 1)
CFDIFF_DEFINE_ERROR(EmptyDatasetError, 1)
CFDIFF_DEFINE_ERROR(UnknownAttributeError, 2)
CFDIFF_DEFINE_ERROR(OutOfRangeError, 2)
CFDIFF_DEFINE_ERROR(DomainError, 1)
CFDIFF_DEFINE_ERROR(ConfigError, 2)
CFDIFF_DEFINE_ERROR(IOError, 1)
CFDIFF_DEFINE_ERROR(DivergenceError, 1)
CFDIFF_DEFINE_ERROR(ScheduleError, 1)
CFDIFF_DEFINE_ERROR(FrozenViolationError, 1)
CFDIFF_DEFINE_ERROR(VariantError, 2)
CFDIFF_DEFINE_ERROR(DegenerateBatchError, 1)
CFDIFF_DEFINE_ERROR(MissingTrajectoryError, 1)
CFDIFF_DEFINE_ERROR(CacheMismatchError, 1)
CFDIFF_DEFINE_ERROR(QualityGateError, 4)
CFDIFF_DEFINE_ERROR(DegenerateSetError, 1)
CFDIFF_DEFINE_ERROR(DependencyError, 3)

#undef CFDIFF_DEFINE_ERROR

}  // namespace cfdiff
