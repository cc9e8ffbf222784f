#pragma once

// Error taxonomy shared by every module. Each stage of the pipeline surfaces
// one of these; the CLI maps them onto exit codes.

#include <cstddef>
#include <stdexcept>
#include <string>
#include <utility>

namespace hcnr {

class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Caller broke a documented precondition (shape mismatch, k > n, ...).
class ContractViolation : public Error {
public:
    using Error::Error;
};

// Factorization or solve failed (indefinite Hessian, singular system).
class NumericalError : public Error {
public:
    using Error::Error;
};

class ConfigError : public Error {
public:
    using Error::Error;
};

// Malformed user data, e.g. token id outside the vocabulary.
class InputError : public Error {
public:
    using Error::Error;
};

// Checkpoint / artifact decoding failure. `field()` names the offending
// header field or tensor.
class LoadError : public Error {
public:
    LoadError(std::string field, const std::string& what)
        : Error(what), field_(std::move(field)) {}
    const std::string& field() const noexcept { return field_; }

private:
    std::string field_;
};

class DegenerateLayerError : public Error {
public:
    using Error::Error;
};

class TrainingDiverged : public Error {
public:
    TrainingDiverged(std::size_t step, const std::string& what)
        : Error(what), step_(step) {}
    std::size_t step() const noexcept { return step_; }

private:
    std::size_t step_;
};

// The SFT model did not lose enough honesty to make surgery meaningful.
class DegradationGateError : public Error {
public:
    using Error::Error;
};

// Violated an internal invariant that construction should have prevented.
class InternalError : public Error {
public:
    using Error::Error;
};

// A pipeline stage failed; wraps the module error and names the stage.
class StageError : public Error {
public:
    StageError(std::string stage, const std::string& what)
        : Error("stage '" + stage + "' failed: " + what), stage_(std::move(stage)) {}
    const std::string& stage() const noexcept { return stage_; }

private:
    std::string stage_;
};

}  // namespace hcnr
