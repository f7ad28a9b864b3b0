#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "plab/corpus.hpp"
#include "plab/model.hpp"
#include "plab/tracking.hpp"

namespace plab::dissonance {

enum class ClassLabel : std::uint8_t { Novel = 0, Known = 1, Dissonant = 2 };
inline constexpr std::size_t kNumClasses = 3;
std::string_view to_string(ClassLabel c);
ClassLabel class_label_from_string(std::string_view s);

enum class Normalization { Raw, Layer, Historical };
enum class Stat { Mean, Std, Min, Max, Q25, Q50, Q75 };
enum class OutputKind { Feat1, Feat2, Feat3, Concat };
std::string_view to_string(Normalization n);
std::string_view to_string(Stat s);
std::string_view to_string(OutputKind k);
Normalization normalization_from_string(std::string_view s);
OutputKind output_kind_from_string(std::string_view s);

inline constexpr std::array<Stat, 7> kAllStats{Stat::Mean, Stat::Std, Stat::Min, Stat::Max,
                                               Stat::Q25,  Stat::Q50, Stat::Q75};

struct FeatureConfig {
  enum class Source { Internal, Output };
  Source source = Source::Internal;
  bool activations = true;  // Internal parts
  bool gradients = true;
  Normalization normalization = Normalization::Raw;
  std::vector<Stat> stats{kAllStats.begin(), kAllStats.end()};
  tracking::Magnitude magnitude = tracking::Magnitude::Signed;
  OutputKind output_kind = OutputKind::Concat;
  std::size_t n_last = 3;
  std::size_t top_k = 100;
  std::size_t n_bins = 100;
  bool indicators = true;  // Feat3 ground-truth bin block, appended after Concat
  model::LossMode loss_mode = model::LossMode::ObjectOnly;

  std::string label() const;  // e.g. "A+G/Historical" or "Concat"
};
nlohmann::json to_json(const FeatureConfig& c);
FeatureConfig feature_config_from_json(const nlohmann::json& j);

/// Where a feature came from. Internal features carry block/kind/part/stat;
/// output features carry group (Feat1, Feat2, Feat3, indicator) and position.
struct FeatureInfo {
  std::string name;
  std::string group;  // "A", "G", "Feat1", "Feat2", "Feat3", "indicator"
  int block = -1;
  std::string kind;
  std::string stat;
  int position = -1;
};
using Schema = std::vector<FeatureInfo>;

struct FeatureVector {
  std::vector<double> values;
  Schema schema;
  std::optional<ClassLabel> label;
};

/// Summary statistics with linear-interpolation quantiles, population std.
double quantile(std::vector<double> sorted_or_not, double q);
std::vector<double> summary_stats(const std::vector<double>& v, const std::vector<Stat>& stats);

Schema internal_schema(const model::ModelConfig& config, const FeatureConfig& fc);

/// Reduced per-neuron vectors of one record, before and after per-tensor
/// standardization, indexed (layer * 4 + kind) * 2 + part (0 = A, 1 = G).
/// Several feature configs can be derived from one trace.
struct InternalTrace {
  std::vector<std::vector<double>> raw;
  std::vector<std::vector<double>> layer;
};
InternalTrace trace_record(const model::Model& model, const model::EncodedFact& fact,
                           tracking::Magnitude magnitude = tracking::Magnitude::Signed,
                           model::LossMode loss_mode = model::LossMode::ObjectOnly);
FeatureVector internal_features(const InternalTrace& trace, const model::ModelConfig& config,
                                const FeatureConfig& fc, const tracking::HistoricalProfile* profile = nullptr);
FeatureVector extract_internal_features(const model::Model& model, const model::EncodedFact& fact,
                                        const FeatureConfig& config,
                                        const tracking::HistoricalProfile* profile = nullptr);

struct OutputDims {
  std::size_t feat1 = 0, feat2 = 0, feat3 = 0, concat = 0, indicators = 0;
};
OutputDims output_dims(const FeatureConfig& fc);
Schema output_schema(const FeatureConfig& fc);

/// Truncation point j < n_last predicts the j-th of the last n_last object
/// tokens; the final point is the full statement.
FeatureVector extract_output_features(const model::LogitModel& model, const model::EncodedFact& fact,
                                      const FeatureConfig& config);

FeatureVector extract_features(const model::Model& model, const model::EncodedFact& fact, const FeatureConfig& config,
                               const tracking::HistoricalProfile* profile = nullptr);

struct LabeledRow {
  std::vector<double> values;
  ClassLabel label = ClassLabel::Novel;
  corpus::FactId fact = 0;
  corpus::FactId group = 0;  // counterfacts share the group of the fact they contradict
};

struct Dataset {
  Schema schema;
  std::vector<LabeledRow> rows;
  std::size_t size() const { return rows.size(); }
  std::array<std::size_t, kNumClasses> class_counts() const;
};

void write_dataset_csv(const Dataset& d, const std::filesystem::path& path);

}  // namespace plab::dissonance
