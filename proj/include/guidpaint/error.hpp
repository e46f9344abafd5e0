#pragma once

#include <stdexcept>
#include <string>

namespace guidpaint {

enum class ErrorKind {
    Validation,   // bad input or configuration
    NotFound,
    Conflict,     // operation not allowed in the current state
    TooLarge,
    Unsupported,  // backend lacks a capability
    Runtime,      // numerical or I/O failure during execution
};

class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
    /// Validation failure attributed to one request field.
    Error(ErrorKind kind, std::string field, const std::string& what)
        : std::runtime_error(what), kind_(kind), field_(std::move(field)) {}

    ErrorKind kind() const noexcept { return kind_; }
    const std::string& field() const noexcept { return field_; }

private:
    ErrorKind kind_;
    std::string field_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& what) { throw Error(kind, what); }

inline void require(bool cond, const std::string& what) {
    if (!cond) {
        throw Error(ErrorKind::Validation, what);
    }
}

const char* to_string(ErrorKind kind);

}  // namespace guidpaint
