#pragma once

#include <stdexcept>
#include <string>

namespace delta {

// Process exit codes used by the CLI. Every exception below maps to one.
enum class ExitCode : int {
    ok = 0,
    failure = 1,
    configuration = 2,
    invariant = 3,
    numerical = 4,
};

class Error : public std::runtime_error {
  public:
    explicit Error(const std::string &what, ExitCode code = ExitCode::failure)
        : std::runtime_error(what), code_(code) {}
    ExitCode exit_code() const { return code_; }

  private:
    ExitCode code_;
};

#define DELTA_DEFINE_ERROR(Name, Code)                                                                                 \
    class Name : public Error {                                                                                        \
      public:                                                                                                          \
        explicit Name(const std::string &what) : Error(what, Code) {}                                                  \
    }

DELTA_DEFINE_ERROR(DimensionError, ExitCode::failure);
DELTA_DEFINE_ERROR(IndexError, ExitCode::failure);
DELTA_DEFINE_ERROR(ContractError, ExitCode::failure);
DELTA_DEFINE_ERROR(TokenizationError, ExitCode::failure);
DELTA_DEFINE_ERROR(LengthError, ExitCode::failure);
DELTA_DEFINE_ERROR(IoError, ExitCode::failure);
DELTA_DEFINE_ERROR(CorruptionError, ExitCode::failure);
DELTA_DEFINE_ERROR(FormatError, ExitCode::failure);
DELTA_DEFINE_ERROR(StaleCacheError, ExitCode::failure);
DELTA_DEFINE_ERROR(ParseError, ExitCode::configuration);
DELTA_DEFINE_ERROR(ConfigurationError, ExitCode::configuration);
DELTA_DEFINE_ERROR(ConfigMismatchError, ExitCode::configuration);
DELTA_DEFINE_ERROR(CompatibilityError, ExitCode::configuration);
DELTA_DEFINE_ERROR(InvariantViolation, ExitCode::invariant);
DELTA_DEFINE_ERROR(NumericalError, ExitCode::numerical);

#undef DELTA_DEFINE_ERROR

#define DELTA_CHECK(cond, ErrorType, msg)                                                                              \
    do {                                                                                                               \
        if (!(cond)) {                                                                                                 \
            throw ErrorType(msg);                                                                                      \
        }                                                                                                              \
    } while (0)

} // namespace delta
