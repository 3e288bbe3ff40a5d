#pragma once

#include <stdexcept>
#include <string>

namespace mmrg {

// Base of every error raised by the library. The category drives the CLI
// exit code.
class error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Malformed container, shape mismatch, violated map invariant.
class format_error : public error {
public:
    using error::error;
};

// Bad arguments or configuration values.
class config_error : public error {
public:
    using error::error;
};

// NaN/Inf in weights, losses or sampler state.
class numeric_error : public error {
public:
    using error::error;
};

// A checkpoint or corpus the command depends on does not exist.
class missing_artifact : public error {
public:
    using error::error;
};

} // namespace mmrg
