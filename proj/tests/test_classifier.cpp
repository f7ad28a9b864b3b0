#include <doctest.h>

#include <cmath>

#include "plab/classifier.hpp"
#include "plab/error.hpp"
#include "plab/rng.hpp"

using namespace plab;
using namespace plab::dissonance;

namespace {

TrainingSet blobs(std::size_t per_class, std::uint64_t seed, double spread = 0.6) {
  Rng rng(seed);
  const double cx[3] = {0, 4, 2}, cy[3] = {0, 0, 3.5};
  TrainingSet d;
  for (std::size_t i = 0; i < per_class; ++i)
    for (std::size_t c = 0; c < 3; ++c) {
      d.x.push_back({cx[c] + rng.normal() * spread, cy[c] + rng.normal() * spread});
      d.y.push_back(static_cast<ClassLabel>(c));
    }
  return d;
}

double score(const std::vector<ClassLabel>& pred, const std::vector<ClassLabel>& truth) {
  std::size_t ok = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) ok += pred[i] == truth[i];
  return double(ok) / double(pred.size());
}

// Independent reference classifier for the blob data.
std::vector<ClassLabel> nearest_centroid(const TrainingSet& train, const TrainingSet& test) {
  double sx[3] = {}, sy[3] = {}, n[3] = {};
  for (std::size_t i = 0; i < train.x.size(); ++i) {
    const auto c = static_cast<std::size_t>(train.y[i]);
    sx[c] += train.x[i][0];
    sy[c] += train.x[i][1];
    n[c] += 1;
  }
  std::vector<ClassLabel> out;
  for (const auto& x : test.x) {
    std::size_t best = 0;
    double bd = 1e300;
    for (std::size_t c = 0; c < 3; ++c) {
      const double d = std::pow(x[0] - sx[c] / n[c], 2) + std::pow(x[1] - sy[c] / n[c], 2);
      if (d < bd) bd = d, best = c;
    }
    out.push_back(static_cast<ClassLabel>(best));
  }
  return out;
}

Dataset as_dataset(const TrainingSet& t) {
  Dataset d;
  for (std::size_t j = 0; j < t.x[0].size(); ++j) d.schema.push_back({"f" + std::to_string(j), j == 0 ? "A" : "G", 0});
  for (std::size_t i = 0; i < t.x.size(); ++i) d.rows.push_back({t.x[i], t.y[i], corpus::FactId(i), corpus::FactId(i)});
  return d;
}

corpus::FoldPlan plan_for(const Dataset& d, std::size_t k, std::uint64_t seed) {
  std::vector<corpus::FactId> ids;
  for (const auto& r : d.rows) ids.push_back(r.group);
  return corpus::split_folds(ids, k, seed);
}

SearchGrid small_grid() {
  SearchGrid g;
  g.n_trees = {30};
  g.draws = 4;
  return g;
}

}  // namespace

TEST_SUITE("classifier") {

TEST_CASE("blobs: both kinds reach 0.95 where nearest centroid does") {
  const auto train = blobs(200, 1), test = blobs(200, 2);
  const double oracle = score(nearest_centroid(train, test), test.y);
  REQUIRE(oracle >= 0.95);
  for (auto kind : {ClassifierKind::RandomForest, ClassifierKind::LinearSVM}) {
    ClassifierHyper h;
    h.forest.n_trees = 50;
    const auto m = train_classifier(train, kind, h, 3);
    CHECK(score(m.predict(test.x), test.y) >= 0.95);
  }
}

TEST_CASE("single-class input is degenerate") {
  TrainingSet d;
  d.x = {{1, 2}, {3, 4}};
  d.y = {ClassLabel::Known, ClassLabel::Known};
  try {
    train_classifier(d, ClassifierKind::LinearSVM, {}, 1);
    FAIL("expected DegenerateDataset");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::DegenerateDataset);
  }
}

TEST_CASE("constant columns are dropped") {
  auto d = blobs(30, 4);
  for (auto& x : d.x) x.push_back(7.0);
  const auto m = train_classifier(d, ClassifierKind::RandomForest, {}, 1);
  CHECK(m.kept == std::vector<std::size_t>{0, 1});
}

TEST_CASE("determinism: same data and seed give the same fitted state") {
  const auto d = blobs(60, 5, 1.5);
  for (auto kind : {ClassifierKind::RandomForest, ClassifierKind::LinearSVM}) {
    const auto a = train_classifier(d, kind, {}, 9);
    const auto b = train_classifier(d, kind, {}, 9);
    CHECK(a.fingerprint() == b.fingerprint());
    CHECK(a.predict(d.x) == b.predict(d.x));
  }
  const auto s1 = search_and_fit(d, ClassifierKind::RandomForest, small_grid(), 4);
  const auto s2 = search_and_fit(d, ClassifierKind::RandomForest, small_grid(), 4);
  CHECK(s1.model.fingerprint() == s2.model.fingerprint());
}

TEST_CASE("metrics") {
  Confusion c{};
  c[0][0] = 5;
  c[1][1] = 3;
  c[1][2] = 2;
  c[2][2] = 0;
  CHECK(accuracy(c) == doctest::Approx(0.8));
  // class 2 has tp=0 so its F1 counts as zero
  const double f1_0 = 1.0, f1_1 = 2 * 1.0 * 0.6 / 1.6, f1_2 = 0.0;
  CHECK(macro_f1(c) == doctest::Approx((f1_0 + f1_1 + f1_2) / 3));
}

TEST_CASE("cross validation: separable data scores 1.0 with zero spread") {
  const auto d = as_dataset(blobs(40, 6, 0.1));
  for (auto kind : {ClassifierKind::RandomForest, ClassifierKind::LinearSVM}) {
    const auto r = cross_validate(d, plan_for(d, 5, 1), kind, small_grid(), 2);
    CHECK(r.accuracy_mean == 1.0);
    CHECK(r.accuracy_std == 0.0);
    CHECK(r.f1_mean == 1.0);
    CHECK(r.fold_accuracy.size() == 5);
  }
}

TEST_CASE("cross validation requires a covering plan") {
  const auto d = as_dataset(blobs(10, 6));
  corpus::FoldPlan partial = plan_for(d, 3, 1);
  partial.assignments.erase(partial.assignments.begin());
  try {
    cross_validate(d, partial, ClassifierKind::LinearSVM, small_grid(), 1);
    FAIL("expected FoldCoverage");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::FoldCoverage);
  }
}

TEST_CASE("permutation baseline sits near chance") {
  auto d = as_dataset(blobs(100, 7));
  Rng rng(11);
  double total = 0;
  for (int s = 0; s < 20; ++s) {
    std::vector<ClassLabel> labels;
    for (const auto& r : d.rows) labels.push_back(r.label);
    rng.shuffle(labels);
    auto shuffled = d;
    for (std::size_t i = 0; i < labels.size(); ++i) shuffled.rows[i].label = labels[i];
    total += cross_validate(shuffled, plan_for(d, 5, s), ClassifierKind::LinearSVM, small_grid(), s).accuracy_mean;
  }
  CHECK(std::abs(total / 20 - 1.0 / 3.0) < 0.1);
}

TEST_CASE("importance concentrates on the single informative feature") {
  Rng rng(3);
  TrainingSet d;
  for (int i = 0; i < 400; ++i) {
    std::vector<double> x(6);
    for (auto& v : x) v = rng.normal();
    d.x.push_back(x);
    d.y.push_back(x[0] > 0 ? ClassLabel::Known : ClassLabel::Dissonant);
  }
  ClassifierHyper h;
  h.forest.n_trees = 60;
  Schema schema;
  for (int j = 0; j < 6; ++j) schema.push_back({"f" + std::to_string(j), j < 3 ? "A" : "G", j % 2});
  // With sqrt(d) candidates the root often misses feature 0 and noise splits
  // take a share; a reference forest gives about 0.88 here.
  const auto sub = feature_importance(train_classifier(d, ClassifierKind::RandomForest, h, 5), schema);
  CHECK(sub.per_feature[0] > 0.8);
  for (int j = 1; j < 6; ++j) CHECK(sub.per_feature[0] > 10 * sub.per_feature[j]);
  h.forest.max_features = 1.0;
  const auto m = train_classifier(d, ClassifierKind::RandomForest, h, 5);
  const auto imp = feature_importance(m, schema);
  CHECK(imp.per_feature[0] > 0.9);
  double sum = 0;
  for (double v : imp.per_feature) {
    CHECK(v >= 0.0);
    sum += v;
  }
  CHECK(std::abs(sum - 1.0) < 1e-9);
  CHECK(imp.activations + imp.gradients + imp.other == doctest::Approx(1.0).epsilon(1e-12));
  double blocks = 0;
  for (double v : imp.per_block) blocks += v;
  CHECK(blocks == doctest::Approx(1.0).epsilon(1e-12));

  const auto svm = train_classifier(d, ClassifierKind::LinearSVM, {}, 5);
  CHECK_THROWS_AS(feature_importance(svm, schema), Error);
}

}
