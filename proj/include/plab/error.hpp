#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace plab {

enum class ErrorCode {
  PoolExhausted,
  TemplateShortage,
  UnknownToken,
  NoAlternativeObject,
  InvalidArgument,
  InvalidConfig,
  ShapeMismatch,
  EmptyMask,
  StaleTrace,
  NonFiniteGradient,
  NonFiniteLoss,
  EmptyInput,
  Io,
  Version,
  MissingSnapshot,
  SelectionTooLarge,
  InvalidNeuron,
  ProfileMissing,
  DegenerateDataset,
  FoldCoverage,
  WrongKind,
  InsufficientKnownFacts,
  EmptyRememberedSet,
  NonConvergence,
  StageGate,
};

std::string_view to_string(ErrorCode code);

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}
  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& what) { throw Error(code, what); }

}  // namespace plab
