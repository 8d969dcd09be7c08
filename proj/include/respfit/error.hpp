#pragma once

#include <stdexcept>
#include <string>

namespace respfit {

/// Failure categories, also used as CLI exit codes.
enum class ErrorCategory : int {
  kValidation = 2,
  kNumerical = 3,
  kUnsupported = 4,
  kIo = 5,
  kEstimation = 6,
};

/// Base error: carries the module that raised it and a category.
class Error : public std::runtime_error {
 public:
  Error(ErrorCategory category, std::string module, const std::string& what)
      : std::runtime_error("[" + module + "] " + what),
        category_(category),
        module_(std::move(module)) {}

  ErrorCategory category() const noexcept { return category_; }
  const std::string& module() const noexcept { return module_; }

 private:
  ErrorCategory category_;
  std::string module_;
};

class ValidationError : public Error {
 public:
  ValidationError(std::string module, const std::string& what)
      : Error(ErrorCategory::kValidation, std::move(module), what) {}
};

/// Non-finite values, blow-ups, singular systems.
class NumericalError : public Error {
 public:
  NumericalError(std::string module, const std::string& what)
      : Error(ErrorCategory::kNumerical, std::move(module), what) {}
};

/// The model lacks an optional capability (equilibrium density, derivatives).
class UnsupportedCapability : public Error {
 public:
  UnsupportedCapability(std::string module, const std::string& what)
      : Error(ErrorCategory::kUnsupported, std::move(module), what) {}
};

class IoError : public Error {
 public:
  IoError(std::string module, const std::string& what)
      : Error(ErrorCategory::kIo, std::move(module), what) {}
};

class EstimationError : public Error {
 public:
  EstimationError(std::string module, const std::string& what)
      : Error(ErrorCategory::kEstimation, std::move(module), what) {}
};

}  // namespace respfit
