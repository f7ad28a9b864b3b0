#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "plab/model.hpp"
#include "plab/tracking.hpp"

namespace plab::plasticity {

using model::NeuronId;

enum class Strategy { Plastic, Stubborn, Candidate, Specific, Random, LotteryTicket, NonLottery, Full };
std::string_view to_string(Strategy s);
Strategy strategy_from_string(std::string_view s);

struct Provenance {
  std::string profile;
  std::string snapshot;
  std::optional<std::uint64_t> seed;
};

struct TargetSet {
  Strategy strategy = Strategy::Full;
  std::size_t selection_n = 0;
  std::vector<NeuronId> neurons;  // ascending
  Provenance provenance;
};
nlohmann::json to_json(const TargetSet& t);
TargetSet target_set_from_json(const nlohmann::json& j);

/// Everything a strategy may rank on. For LotteryTicket and NonLottery the
/// donor profile is ranked instead of `profile`.
struct SelectionInputs {
  const tracking::HistoricalProfile* profile = nullptr;
  const tracking::GradientSnapshot* snapshot = nullptr;
  const tracking::HistoricalProfile* donor = nullptr;
  std::optional<std::uint64_t> seed;
  /// Size of the stubborn set excluded by Specific; 0 means selection_n.
  std::size_t n_stubborn = 0;
};

/// Flat indices of the n largest (or smallest) scores, in rank order. Both
/// directions read one ranking (score descending, then ascending NeuronId), so
/// the n smallest take the higher index on ties and never meet the n largest
/// while 2n <= size.
std::vector<std::size_t> top_n(std::span<const double> scores, std::size_t n, bool largest);

TargetSet select_neurons(Strategy strategy, std::size_t selection_n, const model::ModelConfig& config,
                         const SelectionInputs& in);

struct LotteryPartition {
  TargetSet lottery;
  TargetSet non_lottery;
};
LotteryPartition lottery_partition(const tracking::HistoricalProfile& donor, std::size_t selection_n);

enum class UntrackedPolicy { Frozen, Trainable };

/// One byte per parameter entry, laid out like the model's flat buffer.
struct GradientMask {
  std::vector<std::uint8_t> entries;
  UntrackedPolicy untracked = UntrackedPolicy::Frozen;

  std::size_t size() const { return entries.size(); }
  std::size_t count() const;
};

GradientMask compile_mask(const TargetSet& target, const model::ModelConfig& config,
                          UntrackedPolicy untracked = UntrackedPolicy::Frozen);

template <class T>
void apply_mask(std::span<T> grads, const GradientMask& mask);

struct TrainHyper {
  model::OptimizerHyper optimizer;
  std::size_t batch_size = 32;
  std::size_t max_epochs = 100;
  /// Training continues past convergence until this many epochs have run.
  std::size_t min_epochs = 0;
  double convergence_threshold = 0.99;
  std::uint64_t shuffle_seed = 0;
  model::LossMode loss_mode = model::LossMode::AllTokens;
};
nlohmann::json to_json(const TrainHyper& h);
TrainHyper train_hyper_from_json(const nlohmann::json& j, TrainHyper defaults = {});

using StepHook = std::function<void(const model::ForwardPass<float>&, const model::BackwardPass<float>&)>;
using EvalHook = std::function<double(const model::Model&)>;

struct TrainHooks {
  StepHook on_step;
  std::vector<std::pair<std::string, EvalHook>> evals;  // run once after training
};

struct EpochRecord {
  std::size_t epoch = 0;
  double loss = 0;
  double accuracy = 0;
};

struct TrainingReport {
  std::vector<EpochRecord> epochs;
  std::size_t epochs_to_converge = 0;
  bool converged = false;
  std::uint64_t steps = 0;
  std::vector<std::pair<std::string, double>> final_evals;

  double eval(const std::string& name) const;
};
nlohmann::json to_json(const TrainingReport& r);

/// Mini-batch training until train accuracy reaches the threshold or
/// max_epochs. A null mask trains every parameter.
TrainingReport train(model::Model& model, std::span<const model::EncodedFact> facts, const TrainHyper& hyper,
                     const GradientMask* mask = nullptr, const TrainHooks& hooks = {});

TrainingReport train_targeted(model::Model& model, std::span<const model::EncodedFact> facts,
                              const GradientMask& mask, const TrainHyper& hyper, const TrainHooks& hooks = {});
TrainingReport train_targeted(model::Model& model, std::span<const model::EncodedFact> facts,
                              const TargetSet& target, const TrainHyper& hyper, const TrainHooks& hooks = {},
                              UntrackedPolicy untracked = UntrackedPolicy::Frozen);

struct LoraConfig {
  std::size_t rank = 4;
  double alpha = 8.0;
  std::vector<model::TrackedKind> kinds{model::TrackedKind::AttnCAttn, model::TrackedKind::AttnCProj};
  std::uint64_t seed = 0;
};
nlohmann::json to_json(const LoraConfig& c);
LoraConfig lora_config_from_json(const nlohmann::json& j);

/// Low-rank update of one matrix: W = W0 + scale * B A with B (out x r), A (r x in).
struct LoraFactor {
  std::size_t layer = 0;
  model::TrackedKind kind = model::TrackedKind::AttnCAttn;
  model::Mat<float> a;
  model::Mat<float> b;
};

struct LoraAdapter {
  std::size_t rank = 0;
  double scale = 0;
  std::vector<LoraFactor> factors;
};

LoraAdapter make_lora_adapter(const model::ModelConfig& config, const LoraConfig& lora);
/// Base weights plus every adapter delta.
model::Model merge_lora(const model::Model& base, const LoraAdapter& adapter);

struct LoraResult {
  TrainingReport report;
  LoraAdapter adapter;
  model::Model merged;
};

/// Trains adapter factors only; `base` is never written. Eval hooks see the
/// merged model.
LoraResult train_lora(const model::Model& base, std::span<const model::EncodedFact> facts, const LoraConfig& lora,
                      const TrainHyper& hyper, const TrainHooks& hooks = {});

}  // namespace plab::plasticity
