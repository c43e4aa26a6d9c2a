#ifndef SHORTLVLM_ERROR_HPP
#define SHORTLVLM_ERROR_HPP

#include <cstdint>
#include <stdexcept>
#include <string>

namespace shortlvlm {

enum class ErrorKind {
  kShape,
  kParameter,
  kNumeric,
  kFormat,
  kInput,
  kState,
  kTraining,
  kIngestion,
  kAlignment,
  kBudget,
};

inline const char* to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::kShape: return "shape error";
    case ErrorKind::kParameter: return "parameter error";
    case ErrorKind::kNumeric: return "numeric error";
    case ErrorKind::kFormat: return "format error";
    case ErrorKind::kInput: return "input error";
    case ErrorKind::kState: return "state error";
    case ErrorKind::kTraining: return "training error";
    case ErrorKind::kIngestion: return "ingestion error";
    case ErrorKind::kAlignment: return "alignment error";
    case ErrorKind::kBudget: return "budget error";
  }
  return "error";
}

/// Base of every error raised by the library. what() reads
/// "<module>: <kind>: <detail>" so the CLI can print it verbatim.
class Error : public std::runtime_error {
 public:
  Error(std::string module, ErrorKind kind, const std::string& detail)
      : std::runtime_error(module + ": " + to_string(kind) + ": " + detail),
        module_(std::move(module)),
        kind_(kind) {}

  const std::string& module() const noexcept { return module_; }
  ErrorKind kind() const noexcept { return kind_; }

 private:
  std::string module_;
  ErrorKind kind_;
};

#define SHORTLVLM_DEFINE_ERROR(Name, Kind)                        \
  class Name : public Error {                                     \
   public:                                                        \
    Name(std::string module, const std::string& detail)           \
        : Error(std::move(module), ErrorKind::Kind, detail) {}    \
  };

SHORTLVLM_DEFINE_ERROR(ShapeError, kShape)
SHORTLVLM_DEFINE_ERROR(ParameterError, kParameter)
SHORTLVLM_DEFINE_ERROR(InputError, kInput)
SHORTLVLM_DEFINE_ERROR(StateError, kState)
SHORTLVLM_DEFINE_ERROR(TrainingError, kTraining)
SHORTLVLM_DEFINE_ERROR(IngestionError, kIngestion)
SHORTLVLM_DEFINE_ERROR(AlignmentError, kAlignment)
SHORTLVLM_DEFINE_ERROR(BudgetError, kBudget)

#undef SHORTLVLM_DEFINE_ERROR

/// Iterative routine failed to converge; carries the residual it reached.
class NumericError : public Error {
 public:
  NumericError(std::string module, const std::string& detail, double residual)
      : Error(std::move(module), ErrorKind::kNumeric,
              detail + " (residual " + std::to_string(residual) + ")"),
        residual_(residual) {}

  double residual() const noexcept { return residual_; }

 private:
  double residual_;
};

/// Malformed archive; carries the byte offset where decoding stopped.
class FormatError : public Error {
 public:
  FormatError(std::string module, const std::string& detail, std::uint64_t offset)
      : Error(std::move(module), ErrorKind::kFormat,
              detail + " at byte offset " + std::to_string(offset)),
        offset_(offset) {}

  std::uint64_t offset() const noexcept { return offset_; }

 private:
  std::uint64_t offset_;
};

}  // namespace shortlvlm

#endif  // SHORTLVLM_ERROR_HPP
