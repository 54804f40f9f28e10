#pragma once

#include <stdexcept>
#include <string>

namespace stochpc {

// Root of every exception thrown by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Operand shapes do not agree.
class DimensionError : public Error {
public:
    using Error::Error;
};

// A matrix that must have full (row or column) rank does not.
class RankError : public Error {
public:
    using Error::Error;
};

// Malformed numeric input (asymmetric PSD argument, non-finite entries, ...).
class InputError : public Error {
public:
    using Error::Error;
};

// A factorization or iteration broke down.
class NumericalError : public Error {
public:
    using Error::Error;
};

// Riccati iteration did not reach its tolerance; usually a detectability or
// stabilizability failure of the supplied pair.
class DareDiverged : public NumericalError {
public:
    using NumericalError::NumericalError;
};

// The receding-horizon problem stayed infeasible after falling back to the
// backup mean.
class InfeasibleAfterBackup : public Error {
public:
    InfeasibleAfterBackup(std::string what, long step)
        : Error(std::move(what)), step_(step) {}
    long step() const noexcept { return step_; }

private:
    long step_;
};

// Experiment configuration failed validation; `field` names the offending key.
class ValidationError : public Error {
public:
    ValidationError(const std::string& field, const std::string& what)
        : Error(field + ": " + what), field_(field) {}
    const std::string& field() const noexcept { return field_; }

private:
    std::string field_;
};

} // namespace stochpc
