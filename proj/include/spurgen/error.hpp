#pragma once

#include <stdexcept>
#include <string>

namespace spurgen {

/// Invalid configuration, mismatched dimensions or inconsistent adapter setup.
class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Input violates a numerical precondition (zero-norm feature, singular step).
class DegenerateInputError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Input data is missing, malformed or insufficient (e.g. filter shortfall).
class DataError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Fewer images survive the consistency filter than were requested.
class ShortfallError : public DataError {
public:
    ShortfallError(const std::string& what, std::size_t qualifying)
        : DataError(what), qualifying_(qualifying) {}
    std::size_t qualifying() const { return qualifying_; }

private:
    std::size_t qualifying_;
};

/// Training produced a non-finite loss.
class DivergenceError : public std::runtime_error {
public:
    DivergenceError(const std::string& what, std::string dump_path)
        : std::runtime_error(what), dump_path_(std::move(dump_path)) {}
    const std::string& dump_path() const { return dump_path_; }

private:
    std::string dump_path_;
};

}  // namespace spurgen
