#pragma once

#include <stdexcept>
#include <string>

namespace scops {

class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class ConfigError : public Error {
public:
    using Error::Error;
};

/// Mismatched tensor shapes or feature dimensions.
class DimensionError : public Error {
public:
    using Error::Error;
};

/// Input spatially too small for the network.
class SizingError : public Error {
public:
    using Error::Error;
};

class IoError : public Error {
public:
    using Error::Error;
};

/// A non-finite loss term; `term()` names the offending component.
class LossError : public Error {
public:
    LossError(std::string term, const std::string& what)
        : Error(what), term_(std::move(term)) {}
    const std::string& term() const { return term_; }

private:
    std::string term_;
};

} // namespace scops
