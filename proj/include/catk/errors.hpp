#pragma once

#include <stdexcept>
#include <string>

namespace catk {

/// Base of every error thrown by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Malformed user-supplied configuration (probabilities, counts, K out of range).
class InvalidConfig : public Error {
public:
    using Error::Error;
};

/// Not enough distinct samples to build the requested vocabulary.
class InsufficientData : public Error {
public:
    using Error::Error;
};

class IoError : public Error {
public:
    using Error::Error;
};

/// Malformed file contents. Messages carry the offending line number.
class FormatError : public Error {
public:
    FormatError(std::size_t line, const std::string& what)
        : Error("line " + std::to_string(line) + ": " + what), line_(line) {}

    std::size_t line() const noexcept { return line_; }

private:
    std::size_t line_;
};

/// Training produced a non-finite loss.
class DivergenceError : public Error {
public:
    using Error::Error;
};

class LengthMismatch : public Error {
public:
    using Error::Error;
};

}  // namespace catk
