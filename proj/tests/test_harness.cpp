#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <set>

#include "oracles.hpp"
#include "plab/harness.hpp"
#include "plab/rng.hpp"

using namespace plab;
using namespace plab::harness;

TEST_SUITE("harness") {

TEST_CASE("harmonic mean") {
  CHECK(harmonic_mean(0.5, 1.0, 0.5) == doctest::Approx(0.6));
  CHECK(harmonic_mean(0.0, 1.0, 0.5) == 0.0);
  CHECK(harmonic_mean(0.3, 0.0, 0.5) == 0.0);
  CHECK(harmonic_mean(1, 1, 1) == doctest::Approx(1.0));
  Rng rng(4);
  for (int i = 0; i < 200; ++i) {
    const double a = rng.uniform() + 1e-3, b = rng.uniform() + 1e-3, c = rng.uniform() + 1e-3;
    const double h = harmonic_mean(a, b, c);
    CHECK(h <= (a + b + c) / 3 + 1e-12);
    CHECK(h >= std::min({a, b, c}) - 1e-12);
  }
}

TEST_CASE("exit codes") {
  CHECK(exit_code_for(ErrorCode::InvalidConfig) == 2);
  CHECK(exit_code_for(ErrorCode::NonConvergence) == 3);
  CHECK(exit_code_for(ErrorCode::Io) == 4);
  CHECK(exit_code_for(ErrorCode::StageGate) == 4);
  CHECK(exit_code_for(ErrorCode::NonFiniteLoss) == 1);
}

TEST_CASE("config round trips through JSON and TOML") {
  RunConfig c;
  c.seed = 99;
  c.folds = 3;
  c.corpus.n_base = 120;
  c.model.n_layers = 2;
  c.update.optimizer.lr = 0.25;
  c.sweep.fractions = {0.1};
  c.contradiction_sizes = {2, 4};
  c.classification.cells.resize(2);
  const auto j = to_json(c);
  CHECK(to_json(run_config_from_json(j)) == j);
  CHECK(config_hash(run_config_from_json(j)) == config_hash(c));

  const std::string toml = R"(
seed = 99
folds = 3
[corpus]
n_base = 120
[model]
n_layers = 2
[train.update.optimizer]
lr = 0.25
[sweep]
fractions = [0.1]
)";
  const auto t = run_config_from_json(parse_config_text(toml, true));
  CHECK(t.seed == 99);
  CHECK(t.folds == 3);
  CHECK(t.corpus.n_base == 120);
  CHECK(t.model.n_layers == 2);
  CHECK(t.update.optimizer.lr == 0.25);
  CHECK(t.sweep.fractions == std::vector<double>{0.1});
  CHECK(t.baseline.optimizer.lr == RunConfig{}.baseline.optimizer.lr);

  const auto path = std::filesystem::temp_directory_path() / "plab_test_config.toml";
  std::ofstream(path) << toml;
  CHECK(config_hash(load_run_config(path)) == config_hash(t));
  std::filesystem::remove(path);
}

TEST_CASE("config errors") {
  CHECK_THROWS_AS(run_config_from_json(nlohmann::json{{"untracked", "Sometimes"}}), Error);
  CHECK_THROWS_AS(parse_config_text("seed = [", true), Error);
  try {
    run_config_from_json(nlohmann::json{{"folds", "five"}});
    FAIL("expected InvalidConfig");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::InvalidConfig);
  }
  RunConfig c;
  c.folds = 0;
  CHECK_THROWS_AS(c.validate(), Error);
  CHECK_THROWS_AS(load_run_config("/nonexistent/plab.toml"), Error);
}

TEST_CASE("out_dir and threads do not change the config hash") {
  RunConfig a, b;
  b.out_dir = "elsewhere";
  b.threads = 8;
  CHECK(config_hash(a) == config_hash(b));
  b.seed = 2;
  CHECK(config_hash(a) != config_hash(b));
}

TEST_CASE("reports separate metadata from the deterministic body") {
  RunConfig c;
  const auto r1 = make_report(c, "baseline", {{"x", 1}});
  const auto r2 = make_report(c, "baseline", {{"x", 1}});
  CHECK(r1.contains("metadata"));
  CHECK(r1.at("config_hash") == config_hash(c));
  CHECK(report_body_bytes(r1) == report_body_bytes(r2));
  CHECK(report_body_bytes(r1).find("metadata") == std::string::npos);
  const auto path = std::filesystem::temp_directory_path() / "plab_test_report.json";
  write_json(r1, path);
  CHECK(report_body_bytes(read_json(path)) == report_body_bytes(r1));
  std::filesystem::remove(path);
}

TEST_CASE("stubborn histogram accounting") {
  auto s = test::tiny_setup(20, 5, 2);
  auto p = tracking::make_profile(s.config);
  Rng rng(5);
  for (auto& v : p.hg) v = double(rng.below(50));
  const auto rows = stubborn_histogram(p, {10, 40});
  std::size_t t10 = 0, t40 = 0;
  for (const auto& r : rows) (r.threshold == 10 ? t10 : t40) += r.count;
  CHECK(t10 == 10);
  CHECK(t40 == 40);
  CHECK(rows.size() == 2 * s.config.n_layers * 4);
  const auto again = stubborn_histogram(p, {10, 40});
  for (std::size_t i = 0; i < rows.size(); ++i) CHECK(again[i].count == rows[i].count);
}

TEST_CASE("fold data: splits, paraphrases and per-fold seeds") {
  RunConfig c;
  c.corpus.n_base = 60;
  c.corpus.n_new = 20;
  c.corpus.n_control = 20;
  const auto f0 = make_fold(c, 0), f1 = make_fold(c, 1);
  CHECK(f0.base.size() == 60);
  CHECK(f0.fresh.size() == 20);
  CHECK(f0.control.size() == 20);
  CHECK(f0.fresh_paraphrases.size() == 40);
  CHECK(fold_seed(c, 0) != fold_seed(c, 1));
  CHECK(corpus::fingerprint(f0.corpus) != corpus::fingerprint(f1.corpus));
  CHECK(corpus::fingerprint(make_fold(c, 0).corpus) == corpus::fingerprint(f0.corpus));
  const auto ds = make_dissonant_set(f0, 5, 3);
  CHECK(ds.facts.size() == 5);
  CHECK(ds.paraphrases.size() == 10);
  for (std::size_t i = 0; i < 5; ++i) {
    CHECK(*ds.records[i].contradicts == f0.fresh[i].id);
    CHECK(ds.facts[i].tokens.back() == corpus::kEosId);
  }
}

TEST_CASE("classification dataset construction") {
  auto s = test::tiny_setup(60, 10, 5);
  model::Model m(s.config);
  plasticity::TrainHyper h;
  h.max_epochs = 60;
  h.batch_size = 16;
  h.optimizer.lr = 3e-3;
  plasticity::train(m, s.base, h);
  std::vector<corpus::FactId> ids;
  for (const auto& r : s.corpus.split("base")) ids.push_back(r.triple.id);
  const auto d = build_classification_dataset(s.corpus, ids, m, 20, 5, 7, {});
  REQUIRE(d.records.size() == 60);
  std::set<corpus::FactId> known;
  std::array<int, 3> counts{};
  for (std::size_t i = 0; i < d.records.size(); ++i) {
    ++counts[static_cast<std::size_t>(d.labels[i])];
    if (d.labels[i] == dissonance::ClassLabel::Known) {
      known.insert(d.records[i].triple.id);
      CHECK(model::recall_fact(m, d.encoded[i]));
    }
  }
  CHECK(counts == std::array<int, 3>{20, 20, 20});
  for (std::size_t i = 0; i < d.records.size(); ++i) {
    if (d.labels[i] != dissonance::ClassLabel::Dissonant) continue;
    CHECK(known.count(*d.records[i].contradicts));
    CHECK(d.groups[i] == *d.records[i].contradicts);
  }
  // fold hygiene: a counterfact always sits in the fold of the fact it contradicts
  for (std::size_t i = 0; i < d.records.size(); ++i) CHECK(d.plan.assignments.count(d.groups[i]));
  CHECK_THROWS_AS(build_classification_dataset(s.corpus, ids, m, 61, 5, 7, {}), Error);
}

}
