#ifndef SGDL_ERRORS_HPP
#define SGDL_ERRORS_HPP

#include <stdexcept>
#include <string>

namespace sgdl {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class InvalidArgument : public Error {
public:
    using Error::Error;
};

/// Non-finite value encountered; the message names the offending site.
class NumericError : public Error {
public:
    using Error::Error;
};

/// Malformed on-disk data. `section()` names the part of the file that failed.
class FormatError : public Error {
public:
    FormatError(std::string section, const std::string &what)
        : Error("format error in " + section + ": " + what), section_(std::move(section)) {}

    const std::string &section() const { return section_; }

private:
    std::string section_;
};

class UnsupportedVersion : public FormatError {
public:
    explicit UnsupportedVersion(unsigned version)
        : FormatError("header", "unsupported version " + std::to_string(version)), version_(version) {}

    unsigned version() const { return version_; }

private:
    unsigned version_;
};

/// LLM output that does not follow the expected "Step k:" layout.
class ParseError : public Error {
public:
    ParseError(const std::string &what, std::string raw)
        : Error(what), raw_(std::move(raw)) {}

    const std::string &raw_text() const { return raw_; }

private:
    std::string raw_;
};

class CorrectionFailed : public Error {
public:
    using Error::Error;
};

/// Transport-level failure of an external service. Always retriable.
class ClientError : public Error {
public:
    using Error::Error;
};

/// A mock client was asked for something its fixture does not contain.
class FixtureError : public Error {
public:
    FixtureError(const std::string &what, std::string digest)
        : Error(what), digest_(std::move(digest)) {}

    const std::string &digest() const { return digest_; }

private:
    std::string digest_;
};

} // namespace sgdl

#endif // SGDL_ERRORS_HPP
