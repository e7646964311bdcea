#pragma once

#include <stdexcept>
#include <string>

namespace sigstyle {

// Every failure raised by the library derives from Error so callers (the CLI
// in particular) can map them to exit codes without catching std::exception.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

#define SIGSTYLE_DEFINE_ERROR(Name)                                  \
    class Name : public Error {                                      \
    public:                                                          \
        explicit Name(const std::string& what) : Error(what) {}      \
    }

SIGSTYLE_DEFINE_ERROR(DimensionError);
SIGSTYLE_DEFINE_ERROR(NumericError);
SIGSTYLE_DEFINE_ERROR(TimestepError);
SIGSTYLE_DEFINE_ERROR(UnknownTokenError);
SIGSTYLE_DEFINE_ERROR(ConfigError);
SIGSTYLE_DEFINE_ERROR(UnknownTargetError);
SIGSTYLE_DEFINE_ERROR(UnknownAddressError);
SIGSTYLE_DEFINE_ERROR(ParseError);
SIGSTYLE_DEFINE_ERROR(IncompatibleCheckpointError);
SIGSTYLE_DEFINE_ERROR(IncompatibilityError);
SIGSTYLE_DEFINE_ERROR(TraceGapError);
SIGSTYLE_DEFINE_ERROR(ValidationError);
SIGSTYLE_DEFINE_ERROR(SizeError);
SIGSTYLE_DEFINE_ERROR(CaptionerError);
SIGSTYLE_DEFINE_ERROR(CapabilityError);
SIGSTYLE_DEFINE_ERROR(PromptError);
SIGSTYLE_DEFINE_ERROR(IoError);

#undef SIGSTYLE_DEFINE_ERROR

}  // namespace sigstyle
