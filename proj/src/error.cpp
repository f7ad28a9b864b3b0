#include "plab/error.hpp"

namespace plab {

std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::PoolExhausted: return "pool exhausted";
    case ErrorCode::TemplateShortage: return "template shortage";
    case ErrorCode::UnknownToken: return "unknown token";
    case ErrorCode::NoAlternativeObject: return "no alternative object";
    case ErrorCode::InvalidArgument: return "invalid argument";
    case ErrorCode::InvalidConfig: return "invalid config";
    case ErrorCode::ShapeMismatch: return "shape mismatch";
    case ErrorCode::EmptyMask: return "empty mask";
    case ErrorCode::StaleTrace: return "stale trace";
    case ErrorCode::NonFiniteGradient: return "non-finite gradient";
    case ErrorCode::NonFiniteLoss: return "non-finite loss";
    case ErrorCode::EmptyInput: return "empty input";
    case ErrorCode::Io: return "i/o error";
    case ErrorCode::Version: return "version error";
    case ErrorCode::MissingSnapshot: return "missing snapshot";
    case ErrorCode::SelectionTooLarge: return "selection too large";
    case ErrorCode::InvalidNeuron: return "invalid neuron";
    case ErrorCode::ProfileMissing: return "profile missing";
    case ErrorCode::DegenerateDataset: return "degenerate dataset";
    case ErrorCode::FoldCoverage: return "fold coverage";
    case ErrorCode::WrongKind: return "wrong classifier kind";
    case ErrorCode::InsufficientKnownFacts: return "insufficient known facts";
    case ErrorCode::EmptyRememberedSet: return "empty remembered set";
    case ErrorCode::NonConvergence: return "non-convergence";
    case ErrorCode::StageGate: return "stage gate";
  }
  return "error";
}

}  // namespace plab
