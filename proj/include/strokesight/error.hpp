#pragma once

#include <stdexcept>
#include <string>

namespace strokesight {

enum class ErrorKind {
    InvalidArgument,
    MalformedInput,
    ChannelCount,
    NonFinite,
    TooShort,
    UnknownChannel,
    Infeasible,
    SingularSystem,
    Divergence,
    Degenerate,
    NotFound,
    Conflict,
    OutOfRange,
    Io,
};

inline const char* to_string(ErrorKind k)
{
    switch (k) {
    case ErrorKind::InvalidArgument: return "invalid_argument";
    case ErrorKind::MalformedInput: return "malformed_input";
    case ErrorKind::ChannelCount: return "channel_count";
    case ErrorKind::NonFinite: return "non_finite";
    case ErrorKind::TooShort: return "too_short";
    case ErrorKind::UnknownChannel: return "unknown_channel";
    case ErrorKind::Infeasible: return "infeasible";
    case ErrorKind::SingularSystem: return "singular_system";
    case ErrorKind::Divergence: return "divergence";
    case ErrorKind::Degenerate: return "degenerate";
    case ErrorKind::NotFound: return "not_found";
    case ErrorKind::Conflict: return "conflict";
    case ErrorKind::OutOfRange: return "out_of_range";
    case ErrorKind::Io: return "io";
    }
    return "unknown";
}

/// Every failure the library reports carries a kind so callers (CLI, HTTP)
/// can map it to an exit code or status without string matching.
class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& what)
        : std::runtime_error(what), kind_(kind) {}

    ErrorKind kind() const noexcept { return kind_; }

private:
    ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& what)
{
    throw Error(kind, what);
}

} // namespace strokesight
