#pragma once

#include <stdexcept>
#include <string>

namespace debias {

// Base of every error thrown by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class ArchitectureError : public Error {
public:
    using Error::Error;
};

// Shape or dimension disagreement between two operands.
class DimensionError : public Error {
public:
    using Error::Error;
};

// An argument outside its documented domain (non-finite values, bad ranges).
class ValueError : public Error {
public:
    using Error::Error;
};

class LabelError : public Error {
public:
    enum class Kind { out_of_range, negative, non_integral, gap };

    LabelError(Kind kind, const std::string& what) : Error(what), kind_(kind) {}

    Kind kind() const noexcept { return kind_; }

private:
    Kind kind_;
};

class ParseError : public Error {
public:
    using Error::Error;
};

class ConfigError : public Error {
public:
    using Error::Error;
};

// A stage was asked to run before the artifact it consumes was produced.
class MissingArtifactError : public Error {
public:
    explicit MissingArtifactError(const std::string& artifact)
        : Error("missing artifact: " + artifact), artifact_(artifact) {}

    const std::string& artifact() const noexcept { return artifact_; }

private:
    std::string artifact_;
};

} // namespace debias
