// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace qdst {

/// Base class for all qdst errors.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// A caller-supplied argument violates an operation's precondition.
class InvalidInput : public Error {
public:
    using Error::Error;
};

/// An operation was invoked before its required state was established
/// (e.g. backward without a cached forward).
class InvalidState : public Error {
public:
    using Error::Error;
};

/// An internal invariant that should be unreachable was violated.
class InternalInvariantViolation : public Error {
public:
    using Error::Error;
};

/// A computation produced a non-finite value.
class NumericalError : public Error {
public:
    using Error::Error;
};

/// A model file failed validation (magic, version, shape, or truncation).
class CorruptModel : public Error {
public:
    using Error::Error;
};

/// A candidate document id could not be resolved in the corpus.
class MissingDocument : public Error {
public:
    using Error::Error;
};

/// A data file line could not be parsed; the message carries the line number.
class ParseError : public Error {
public:
    ParseError(const std::string& path, std::size_t line, const std::string& what)
        : Error(path + ":" + std::to_string(line) + ": " + what), line_(line) {}
    std::size_t line() const { return line_; }

private:
    std::size_t line_;
};

/// A query produced no results where at least one was required.
class EmptyResult : public Error {
public:
    using Error::Error;
};

} // namespace qdst
