#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "plab/corpus.hpp"
#include "plab/features.hpp"

namespace plab::dissonance {

enum class ClassifierKind { RandomForest, LinearSVM };
std::string_view to_string(ClassifierKind k);
ClassifierKind classifier_kind_from_string(std::string_view s);

struct ForestHyper {
  std::size_t n_trees = 100;
  std::size_t max_depth = 0;  // 0 = unbounded
  std::size_t min_samples_leaf = 1;
  double max_features = 0;  // fraction of features per split; 0 = sqrt(d)
};

struct SvmHyper {
  double c = 1.0;
  std::size_t max_epochs = 1000;
  double tol = 1e-3;
};

struct ClassifierHyper {
  ForestHyper forest;
  SvmHyper svm;
};
nlohmann::json to_json(const ClassifierHyper& h);

/// Declared search space for the seeded random search.
struct SearchGrid {
  std::vector<std::size_t> n_trees{50, 100, 200};
  std::vector<std::size_t> max_depth{4, 8, 16, 0};
  std::vector<std::size_t> min_samples_leaf{1, 2, 4};
  std::vector<double> max_features{0.0, 0.1, 0.3};
  std::vector<double> svm_c{0.001, 0.003, 0.01, 0.03, 0.1, 0.3, 1.0, 3.0, 10.0, 30.0, 100.0};
  std::size_t draws = 32;
  double holdout = 0.2;
};
nlohmann::json to_json(const SearchGrid& g);
SearchGrid search_grid_from_json(const nlohmann::json& j);

struct TreeNode {
  int feature = -1;  // -1 for leaves
  double threshold = 0;
  int left = -1, right = -1;
  std::array<double, kNumClasses> dist{};  // leaf class distribution
};

struct Tree {
  std::vector<TreeNode> nodes;
};

/// Fitted classifier. `kept` lists the input columns that survived the
/// constant-feature filter; models see only those columns.
struct ClassifierModel {
  ClassifierKind kind = ClassifierKind::RandomForest;
  ClassifierHyper hyper;
  std::uint64_t seed = 0;
  std::size_t n_features = 0;
  std::vector<std::size_t> kept;
  std::vector<Tree> trees;
  std::vector<double> importances;  // per kept feature, raw (unnormalized) impurity decrease
  std::vector<double> mean, scale;  // SVM standardization, per kept feature
  std::array<std::vector<double>, kNumClasses> weights;  // SVM, last entry is the bias

  ClassLabel predict(const std::vector<double>& x) const;
  std::vector<ClassLabel> predict(const std::vector<std::vector<double>>& xs) const;
  std::string fingerprint() const;
};

struct TrainingSet {
  std::vector<std::vector<double>> x;
  std::vector<ClassLabel> y;
};

ClassifierModel train_classifier(const TrainingSet& data, ClassifierKind kind, const ClassifierHyper& hyper,
                                 std::uint64_t seed);

struct SearchResult {
  ClassifierModel model;
  ClassifierHyper best;
  double holdout_accuracy = 0;
};
/// Random search on a stratified inner holdout, then a refit on all of `data`.
SearchResult search_and_fit(const TrainingSet& data, ClassifierKind kind, const SearchGrid& grid, std::uint64_t seed);

using Confusion = std::array<std::array<std::size_t, kNumClasses>, kNumClasses>;  // [truth][predicted]

double accuracy(const Confusion& c);
double macro_f1(const Confusion& c);

struct CvResult {
  double accuracy_mean = 0, accuracy_std = 0;
  double f1_mean = 0, f1_std = 0;
  std::vector<double> fold_accuracy, fold_f1;
  std::vector<Confusion> confusions;
  std::vector<ClassifierHyper> chosen;
};
nlohmann::json to_json(const CvResult& r);

/// Folds come from plan.assignments keyed by each row's group id.
CvResult cross_validate(const Dataset& data, const corpus::FoldPlan& plan, ClassifierKind kind,
                        const SearchGrid& grid, std::uint64_t seed);

struct Importance {
  std::vector<double> per_feature;  // sums to 1
  double activations = 0, gradients = 0, other = 0;
  std::vector<double> per_block;
};
Importance feature_importance(const ClassifierModel& model, const Schema& schema);
void write_importance_csv(const Importance& imp, const Schema& schema, const std::filesystem::path& path);
void write_confusion_csv(const CvResult& r, const std::filesystem::path& path);

}  // namespace plab::dissonance
