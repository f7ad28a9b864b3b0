#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "plab/classifier.hpp"
#include "plab/corpus.hpp"
#include "plab/error.hpp"
#include "plab/features.hpp"
#include "plab/model.hpp"
#include "plab/plasticity.hpp"
#include "plab/tracking.hpp"

namespace plab::harness {

enum class Stage {
  Baseline,
  NonDissonantUpdate,
  DissonantUpdate,
  ControlThirdRound,
  PlasticitySweep,
  ContradictionScale,
  Lottery,
  Classification,
  StubbornHistogram
};
std::string_view to_string(Stage s);
Stage stage_from_string(std::string_view s);

enum class Scenario { PretrainedLike, Finetuned };
std::string_view to_string(Scenario s);

struct CorpusParams {
  std::size_t n_base = 500;
  std::size_t n_new = 250;
  std::size_t n_control = 250;
  corpus::GenerationConfig generation = [] {
    corpus::GenerationConfig g;
    g.n_subjects = 600;
    g.disjoint_subjects = true;
    return g;
  }();
};

struct SweepParams {
  std::vector<plasticity::Strategy> strategies{plasticity::Strategy::Plastic, plasticity::Strategy::Stubborn,
                                               plasticity::Strategy::Candidate, plasticity::Strategy::Specific,
                                               plasticity::Strategy::Random};
  /// Fractions of all tracked neurons; actual counts are recorded.
  std::vector<double> fractions{0.05, 0.10, 0.20};
  bool lora = true;
  bool dissonant = true;
};

struct ClassificationCell {
  dissonance::FeatureConfig features;
  dissonance::ClassifierKind classifier = dissonance::ClassifierKind::LinearSVM;
};

struct ClassificationParams {
  Scenario scenario = Scenario::Finetuned;
  std::size_t n_per_class = 150;
  std::size_t folds = 5;
  std::vector<ClassificationCell> cells = default_cells();
  /// Index into cells of the arm whose shuffled-label baseline is reported.
  std::size_t baseline_cell = 0;
  std::size_t shuffles = 5;
  dissonance::SearchGrid grid;

  /// {A, G, A+G} x {Raw, Layer, Historical} x {SVM, RF}, then Concat output features.
  static std::vector<ClassificationCell> default_cells();
};

struct LotteryParams {
  std::size_t n_donor = 500;
  std::size_t n_facts = 250;
  std::vector<double> fractions{0.10, 0.20};
  std::size_t seeds = 5;
  plasticity::TrainHyper donor;
  /// Arms get a fixed budget so that accuracies differ between subnetworks.
  plasticity::TrainHyper train = [] {
    plasticity::TrainHyper h;
    h.max_epochs = 15;
    return h;
  }();
  bool random_arm = true;
};

struct RunConfig {
  std::uint64_t seed = 1;
  std::size_t folds = 5;
  CorpusParams corpus;
  model::ModelConfig model;  // vocab_size is filled from the corpus
  tracking::ReductionSettings tracking;
  plasticity::TrainHyper baseline = [] {
    plasticity::TrainHyper h;
    h.min_epochs = 50;  // keeps consolidating after convergence
    return h;
  }();
  plasticity::TrainHyper update = [] {
    plasticity::TrainHyper h;
    h.optimizer.lr = 3e-4;
    return h;
  }();
  plasticity::TrainHyper targeted = [] {
    plasticity::TrainHyper h;
    h.max_epochs = 8;  // fixed budget per sweep arm
    return h;
  }();
  plasticity::TrainHyper lora_train;
  plasticity::LoraConfig lora;
  plasticity::UntrackedPolicy untracked = plasticity::UntrackedPolicy::Frozen;
  std::size_t n_stubborn = 0;
  SweepParams sweep;
  std::vector<std::size_t> contradiction_sizes{5, 25, 125};
  bool control_round = true;
  ClassificationParams classification;
  LotteryParams lottery;
  std::vector<double> histogram_fractions{0.05, 0.10};
  std::size_t threads = 1;
  std::filesystem::path out_dir = "runs";

  void validate() const;
};

nlohmann::json to_json(const RunConfig& c);
/// Missing keys keep their defaults.
RunConfig run_config_from_json(const nlohmann::json& j);
/// TOML or JSON chosen by extension (.toml / .json).
RunConfig load_run_config(const std::filesystem::path& path);
nlohmann::json parse_config_text(const std::string& text, bool toml);
std::string config_hash(const RunConfig& c);

double harmonic_mean(double old_acc, double new_acc, double gen_acc);

/// Exit codes of the command line tool.
int exit_code_for(ErrorCode code);

// ---------------------------------------------------------------------------
// Per-fold pipeline pieces.

struct FoldData {
  std::size_t fold = 0;
  std::uint64_t seed = 0;
  corpus::FactCorpus corpus;
  std::vector<model::EncodedFact> base, fresh, control;
  std::vector<model::EncodedFact> fresh_paraphrases, control_paraphrases;
};
/// Fold f re-splits the generated pool with its own seed.
FoldData make_fold(const RunConfig& cfg, std::size_t fold);
std::uint64_t fold_seed(const RunConfig& cfg, std::size_t fold);
FoldData fold_from_corpus(corpus::FactCorpus corpus, std::size_t fold, std::uint64_t seed);
model::ModelConfig model_config_for(const RunConfig& cfg, const corpus::FactCorpus& c, std::uint64_t seed);

struct BaselineResult {
  model::Model model;
  tracking::HistoricalProfile profile;
  plasticity::TrainingReport training;
  double accuracy = 0;
};
/// Throws NonConvergence when the base facts are not learned in max_epochs.
BaselineResult run_baseline_fold(const RunConfig& cfg, const FoldData& data);

/// One training arm of an update stage.
struct ArmSpec {
  std::string name;  // "FullFT", "LoRA", "Plastic@230", ...
  enum class Kind { Full, Lora, Targeted } kind = Kind::Full;
  plasticity::Strategy strategy = plasticity::Strategy::Full;
  std::size_t selection_n = 0;
};

struct ArmResult {
  std::string arm;
  std::string scenario;  // "nondissonant", "dissonant", "control", "scale"
  std::size_t n_facts = 0;
  std::size_t selection_n = 0;
  double old_acc = 0, new_acc = 0, gen_acc = 0, harmonic = 0;
  std::size_t epochs = 0;
  bool converged = false;
  std::string checkpoint;
  plasticity::TrainingReport training;
};
nlohmann::json to_json(const ArmResult& a);

struct UpdateTask {
  std::string scenario;
  const model::Model* start = nullptr;
  std::vector<model::EncodedFact> facts;
  std::vector<model::EncodedFact> paraphrases;
  std::vector<model::EncodedFact> old_facts;  // retention set
};

/// Trains one arm from a copy of task.start and measures old/new/gen accuracy.
/// The trained model is returned through `out_model` when non-null.
ArmResult run_arm(const RunConfig& cfg, const UpdateTask& task, const ArmSpec& arm,
                  const tracking::HistoricalProfile& profile, std::uint64_t seed, model::Model* out_model = nullptr);

std::vector<ArmSpec> sweep_arms(const RunConfig& cfg, const model::ModelConfig& mc);
std::vector<ArmResult> run_arms(const RunConfig& cfg, const UpdateTask& task, const std::vector<ArmSpec>& arms,
                                const tracking::HistoricalProfile& profile, std::uint64_t seed);

/// Remembered base facts after the non-dissonant stage.
std::vector<model::EncodedFact> remembered(const model::Model& m, const std::vector<model::EncodedFact>& facts);

struct DissonantSet {
  std::vector<corpus::FactRecord> records;
  std::vector<model::EncodedFact> facts, paraphrases;
};
/// Counterfacts of the first n facts of the fold's new split.
DissonantSet make_dissonant_set(const FoldData& data, std::size_t n, std::uint64_t seed);

struct FoldRun {
  std::size_t fold = 0;
  std::string corpus_fingerprint;
  std::string baseline_checkpoint;
  std::string profile_fingerprint;
  std::string nondissonant_checkpoint;
  double baseline_accuracy = 0;
  std::size_t baseline_epochs = 0;
  std::size_t remembered = 0;
  std::vector<ArmResult> arms;

  const ArmResult* find(const std::string& scenario, const std::string& arm) const;
};
nlohmann::json to_json(const FoldRun& f);

struct PipelineOptions {
  bool lora = true;
  bool sweep = false;
  bool dissonant = true;
  bool control = true;
  bool scale = false;
};
/// Baseline, non-dissonant update and, as requested, dissonant, control,
/// sweep and contradiction-scale arms for one fold.
FoldRun run_fold(const RunConfig& cfg, std::size_t fold, const PipelineOptions& opt);

// ---------------------------------------------------------------------------
// Reports.

struct Aggregate {
  std::string scenario, arm;
  std::size_t folds = 0;
  double old_mean = 0, old_std = 0, new_mean = 0, new_std = 0, gen_mean = 0, gen_std = 0;
  double epochs_mean = 0;
  double harmonic = 0;  // of the three means
};
std::vector<Aggregate> aggregate(const std::vector<FoldRun>& folds);

/// Deterministic report body plus a separate "metadata" block with times.
nlohmann::json make_report(const RunConfig& cfg, const std::string& stage, nlohmann::json body);
/// The report without its metadata block, serialized; equal configs give equal bytes.
std::string report_body_bytes(const nlohmann::json& report);
void write_json(const nlohmann::json& j, const std::filesystem::path& path);
nlohmann::json read_json(const std::filesystem::path& path);
/// One row per fold x scenario x arm x metric.
void write_tidy_csv(const std::vector<FoldRun>& folds, const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Stage runners.

struct LotteryArm {
  std::size_t seed_index = 0;
  std::string arm;
  std::size_t selection_n = 0;
  double accuracy = 0;
  std::size_t epochs = 0;
};
struct LotteryResult {
  std::vector<LotteryArm> arms;
  std::vector<std::string> start_checkpoints;  // per seed, shared by every arm
};
LotteryResult run_lottery(const RunConfig& cfg);
nlohmann::json to_json(const LotteryResult& r);

struct ClassificationCellResult {
  std::string label;
  std::string classifier;
  std::size_t dims = 0;
  dissonance::CvResult cv;
  std::optional<dissonance::Importance> importance;
};
struct ClassificationResult {
  Scenario scenario = Scenario::Finetuned;
  std::size_t n_per_class = 0;
  std::string model_checkpoint;
  std::string dataset_fingerprint;
  std::vector<ClassificationCellResult> cells;
  double shuffled_accuracy = 0;
  std::vector<double> shuffled_runs;
  dissonance::OutputDims output_dims;
};

/// Labeled rows for every record, traced once; feature configs derive from the traces.
struct ClassificationData {
  std::vector<corpus::FactRecord> records;
  std::vector<dissonance::ClassLabel> labels;
  std::vector<corpus::FactId> groups;
  std::vector<model::EncodedFact> encoded;
  corpus::FoldPlan plan;
};
ClassificationData build_classification_dataset(const corpus::FactCorpus& corpus,
                                                const std::vector<corpus::FactId>& candidate_ids,
                                                const model::Model& m, std::size_t n_per_class,
                                                std::size_t folds, std::uint64_t seed,
                                                const corpus::GenerationConfig& generation);
dissonance::Dataset featurize(const ClassificationData& data, const model::Model& m,
                              const dissonance::FeatureConfig& fc, const tracking::HistoricalProfile* profile);

ClassificationResult run_classification(const RunConfig& cfg, const std::filesystem::path& out_dir = {});
nlohmann::json to_json(const ClassificationResult& r);

struct HistogramRow {
  std::size_t threshold = 0;
  std::size_t block = 0;
  model::TrackedKind kind = model::TrackedKind::AttnCAttn;
  std::size_t count = 0;
};
std::vector<HistogramRow> stubborn_histogram(const tracking::HistoricalProfile& profile,
                                             const std::vector<std::size_t>& thresholds);
void write_histogram_csv(const std::vector<HistogramRow>& rows, const std::filesystem::path& path);

}  // namespace plab::harness
