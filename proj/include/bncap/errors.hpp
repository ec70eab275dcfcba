#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace bncap {

/// Base of every error raised by the library. The CLI maps these to exit code 1.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Input bytes are not valid UTF-8.
class DecodeError : public Error {
public:
    using Error::Error;
};

/// A binary or text file does not follow its documented layout.
class FormatError : public Error {
public:
    using Error::Error;
};

/// A caption TSV line is malformed. Carries the 1-based line number.
class LineFormatError : public FormatError {
public:
    LineFormatError(std::size_t line, const std::string& what)
        : FormatError("line " + std::to_string(line) + ": " + what), line_(line) {}

    std::size_t line() const noexcept { return line_; }

private:
    std::size_t line_;
};

class DuplicateKeyError : public Error {
public:
    using Error::Error;
};

class OutOfRangeError : public Error {
public:
    using Error::Error;
};

/// A caption refers to an image id with no embedding, or similar dangling reference.
class ReferentialIntegrityError : public Error {
public:
    using Error::Error;
};

/// Invalid configuration values or combinations.
class ConfigError : public Error {
public:
    using Error::Error;
};

class IoError : public Error {
public:
    using Error::Error;
};

}  // namespace bncap
