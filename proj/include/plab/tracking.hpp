#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "plab/model.hpp"

namespace plab::tracking {

enum class TokenMode { LastToken, SumTokens };
enum class Magnitude { Absolute, Signed };

struct ReductionSettings {
  bool standardize = true;
  TokenMode token_mode = TokenMode::LastToken;
  Magnitude magnitude = Magnitude::Absolute;
  bool operator==(const ReductionSettings&) const = default;
};
nlohmann::json to_json(const ReductionSettings& s);
ReductionSettings reduction_settings_from_json(const nlohmann::json& j);

/// batch x tokens x dim, row-major, with the valid (non-PAD) length of each
/// sequence. Positions at or beyond a sequence's length are padding.
struct Tensor3 {
  std::size_t batch = 0, tokens = 0, dim = 0;
  std::vector<double> values;
  std::vector<std::size_t> lengths;

  double& at(std::size_t b, std::size_t t, std::size_t i) { return values[(b * tokens + t) * dim + i]; }
  double at(std::size_t b, std::size_t t, std::size_t i) const { return values[(b * tokens + t) * dim + i]; }
  bool valid(std::size_t b, std::size_t t) const { return t < lengths[b]; }
};

template <class T>
Tensor3 to_tensor3(const model::Mat<T>& rows, std::size_t batch, std::size_t tokens,
                   const std::vector<std::size_t>& lengths);

/// (x - mean) / std over every valid entry (population std). Padding entries
/// come back as zero, and so does everything when std < 1e-12.
Tensor3 standardize(const Tensor3& t);

/// Per-neuron vector of length dim. LastToken reads each sequence's last
/// valid position; SumTokens sums over valid positions. Batch is summed.
std::vector<double> reduce(const Tensor3& t, TokenMode mode, Magnitude magnitude);

/// The tracked activations A^l(t) and grad-outs G^l(t) of one step.
struct StepCapture {
  std::size_t layers = 0;
  std::vector<Tensor3> activations;  // index layer * 4 + kind
  std::vector<Tensor3> grad_outs;

  const Tensor3& activation(std::size_t layer, model::TrackedKind k) const {
    return activations[layer * 4 + static_cast<std::size_t>(k)];
  }
  const Tensor3& grad_out(std::size_t layer, model::TrackedKind k) const {
    return grad_outs[layer * 4 + static_cast<std::size_t>(k)];
  }
};

template <class T>
StepCapture capture_step(const model::ForwardPass<T>& fwd, const model::BackwardPass<T>& bwd);

struct HistoricalProfile {
  model::ModelConfig model_config;
  ReductionSettings settings;
  std::vector<double> ha;  // one entry per flat neuron index
  std::vector<double> hg;
  std::uint64_t steps = 0;
  std::string model_fingerprint;

  std::size_t size() const { return hg.size(); }
};

HistoricalProfile make_profile(const model::ModelConfig& config, ReductionSettings settings = {});

/// HA += reduce(standardize?(A)), HG += reduce(standardize?(G)), steps += 1.
void accumulate(HistoricalProfile& profile, const StepCapture& capture);

/// Streams one step straight from the model traces (same arithmetic as
/// capture_step followed by accumulate).
template <class T>
void accumulate(HistoricalProfile& profile, const model::ForwardPass<T>& fwd, const model::BackwardPass<T>& bwd);

struct GradientSnapshot {
  ReductionSettings settings;
  std::vector<double> g_new;
  std::size_t size() const { return g_new.size(); }
};

/// One backward pass over the facts with no parameter update. Facts are
/// processed in consecutive batches of batch_size; per-batch reduced
/// grad-outs are summed.
GradientSnapshot snapshot_gradients(const model::Model& model, std::span<const model::EncodedFact> facts,
                                    ReductionSettings settings = {}, std::size_t batch_size = 32,
                                    model::LossMode loss_mode = model::LossMode::AllTokens);

inline constexpr std::string_view kProfileMagic = "PLABPROF1";

struct LoadedProfile {
  HistoricalProfile profile;
  bool settings_mismatch = false;
};

void save_profile(const HistoricalProfile& profile, const std::filesystem::path& path);
LoadedProfile load_profile(const std::filesystem::path& path, std::optional<ReductionSettings> expected = std::nullopt);
std::string profile_bytes(const HistoricalProfile& profile);
LoadedProfile profile_from_bytes(const std::string& bytes, std::optional<ReductionSettings> expected = std::nullopt);

/// neuron_id,layer,kind,index,HA,HG
void export_profile_csv(const HistoricalProfile& profile, const std::filesystem::path& path);

std::string fingerprint(const HistoricalProfile& profile);
std::string fingerprint(const GradientSnapshot& snapshot);

}  // namespace plab::tracking
