#pragma once

#include <stdexcept>
#include <string>

namespace hybridmt {

// Base of every error thrown by the library. The CLI maps ValidationError to
// exit code 1 and everything else to exit code 2.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Bad input: malformed files, contract violations, inconsistent configuration.
class ValidationError : public Error {
public:
    using Error::Error;
};

// Failure talking to a remote scorer or translation backend.
class RemoteError : public Error {
public:
    RemoteError(std::string endpoint, const std::string& what)
        : Error(endpoint + ": " + what), endpoint_(std::move(endpoint)) {}

    const std::string& endpoint() const noexcept { return endpoint_; }

private:
    std::string endpoint_;
};

} // namespace hybridmt
