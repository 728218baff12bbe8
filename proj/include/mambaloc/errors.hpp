#pragma once

#include <stdexcept>
#include <string>

namespace mambaloc {

// Base class for every error this library raises on purpose.
struct Error : std::runtime_error {
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

struct ShapeMismatch : Error {
    explicit ShapeMismatch(const std::string& msg) : Error(msg) {}
};

struct DomainError : Error {
    explicit DomainError(const std::string& msg) : Error(msg) {}
};

struct NonScalarLoss : Error {
    explicit NonScalarLoss(const std::string& msg) : Error(msg) {}
};

struct NonFiniteValue : Error {
    explicit NonFiniteValue(const std::string& msg) : Error(msg) {}
};

// Reports the first op whose backward produced a NaN/Inf gradient.
struct NonFiniteGradient : Error {
    explicit NonFiniteGradient(const std::string& msg) : Error(msg) {}
};

struct DegenerateQuaternion : Error {
    explicit DegenerateQuaternion(const std::string& msg) : Error(msg) {}
};

struct NonUnitQuaternion : Error {
    explicit NonUnitQuaternion(const std::string& msg) : Error(msg) {}
};

struct DegenerateFeature : Error {
    explicit DegenerateFeature(const std::string& msg) : Error(msg) {}
};

struct EmptyDataset : Error {
    explicit EmptyDataset(const std::string& msg) : Error(msg) {}
};

struct FractionOutOfRange : Error {
    explicit FractionOutOfRange(const std::string& msg) : Error(msg) {}
};

struct ParseError : Error {
    explicit ParseError(const std::string& msg) : Error(msg) {}
};

struct MissingFeatureFile : Error {
    explicit MissingFeatureFile(const std::string& msg) : Error(msg) {}
};

struct BadMagic : Error {
    explicit BadMagic(const std::string& msg) : Error(msg) {}
};

struct ConfigError : Error {
    explicit ConfigError(const std::string& msg) : Error(msg) {}
};

struct NonFiniteLoss : Error {
    explicit NonFiniteLoss(const std::string& msg) : Error(msg) {}
};

struct ModeError : Error {
    explicit ModeError(const std::string& msg) : Error(msg) {}
};

}  // namespace mambaloc
