#include <doctest.h>

#include <algorithm>
#include <filesystem>
#include <set>

#include "plab/corpus.hpp"
#include "plab/error.hpp"

using namespace plab;
using namespace plab::corpus;

namespace {

std::set<std::pair<std::string, std::string>> pairs_of(const FactCorpus& c) {
  std::set<std::pair<std::string, std::string>> s;
  for (const auto& r : c.records) s.insert({r.triple.subject, r.triple.relation});
  return s;
}

ErrorCode code_of(auto&& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code();
  }
  FAIL("expected an error");
  return ErrorCode::InvalidArgument;
}

}  // namespace

TEST_SUITE("corpus") {

TEST_CASE("small corpus is deterministic with distinct pairs") {
  const auto a = generate_corpus(2, 1, 7);
  const auto b = generate_corpus(2, 1, 7);
  CHECK(a.records.size() == 3);
  CHECK(pairs_of(a).size() == 3);
  CHECK(to_json(a).dump() == to_json(b).dump());
  CHECK(a.split("base").size() == 2);
  CHECK(a.split("new").size() == 1);
  CHECK(fingerprint(a) != fingerprint(generate_corpus(2, 1, 8)));
}

TEST_CASE("full-size corpus") {
  GenerationConfig g;
  g.n_subjects = 600;
  const auto c = generate_corpus(2000, 1000, 0, g);
  CHECK(c.records.size() == 3000);
  CHECK(pairs_of(c).size() == 3000);
}

TEST_CASE("pool exhaustion") {
  GenerationConfig g;
  g.relations.resize(3);
  g.n_subjects = 4;  // 12 possible pairs
  CHECK(code_of([&] { generate_corpus(10, 5, 1, g); }) == ErrorCode::PoolExhausted);
}

TEST_CASE("surfaces end with object then EOS and use the vocabulary") {
  const auto c = generate_corpus(60, 30, 3);
  CHECK(c.vocabulary.contains("PAD"));
  CHECK(c.vocabulary.id("PAD") == kPadId);
  CHECK(c.vocabulary.id("BOS") == kBosId);
  CHECK(c.vocabulary.id("EOS") == kEosId);
  for (const auto& r : c.records) {
    CHECK(r.origin == Origin::Base);
    CHECK_FALSE(r.contradicts.has_value());
    REQUIRE(r.surface.size() >= 3);
    CHECK(r.surface.front() == "BOS");
    CHECK(r.surface.back() == "EOS");
    CHECK(r.surface[r.surface.size() - 2] == r.triple.object);
    for (const auto& t : r.surface) CHECK(c.vocabulary.contains(t));
    CHECK(r.paraphrases.size() == 2);
    for (const auto& p : r.paraphrases) {
      CHECK(p[p.size() - 2] == r.triple.object);
      CHECK(p.back() == "EOS");
      for (const auto& t : p) CHECK(c.vocabulary.contains(t));
    }
  }
}

TEST_CASE("counterfacts") {
  const auto c = generate_corpus(40, 20, 5);
  std::vector<FactId> ids;
  for (const auto& r : c.split("new")) ids.push_back(r.triple.id);
  const auto cf = make_counterfacts(c, ids, 9);
  REQUIRE(cf.size() == ids.size());
  std::set<FactId> targets;
  for (std::size_t i = 0; i < cf.size(); ++i) {
    const auto& t = c.find(ids[i]);
    CHECK(cf[i].origin == Origin::Counterfact);
    REQUIRE(cf[i].contradicts.has_value());
    CHECK(*cf[i].contradicts == ids[i]);
    targets.insert(*cf[i].contradicts);
    CHECK(cf[i].triple.subject == t.triple.subject);
    CHECK(cf[i].triple.relation == t.triple.relation);
    CHECK(cf[i].triple.object != t.triple.object);
    CHECK(cf[i].surface.back() == "EOS");
    for (const auto& tok : cf[i].surface) CHECK(c.vocabulary.contains(tok));
  }
  CHECK(targets.size() == ids.size());
  CHECK(make_counterfacts(c, {}, 9).empty());
  CHECK(to_json(FactCorpus{cf, c.vocabulary, {}, {}, {}}).dump() ==
        to_json(FactCorpus{make_counterfacts(c, ids, 9), c.vocabulary, {}, {}, {}}).dump());
}

TEST_CASE("counterfacts need an alternative object") {
  GenerationConfig g;
  g.n_objects_per_relation = 1;
  const auto c = generate_corpus(4, 2, 1, g);
  CHECK(code_of([&] { make_counterfacts(c, {c.records[0].triple.id}, 1); }) == ErrorCode::NoAlternativeObject);
}

TEST_CASE("novel facts use disjoint entities and existing relations") {
  const auto c = generate_corpus(200, 100, 2);
  std::set<std::string> base_entities, relations;
  for (const auto& r : c.records) {
    base_entities.insert(r.triple.subject);
    base_entities.insert(r.triple.object);
    relations.insert(r.triple.relation);
  }
  for (const auto& [rel, pool] : c.object_pools) base_entities.insert(pool.begin(), pool.end());
  const auto nv = make_novel_facts(600, 4);
  CHECK(nv.size() == 600);
  for (const auto& r : nv) {
    CHECK(r.origin == Origin::Novel);
    CHECK_FALSE(base_entities.count(r.triple.subject));
    CHECK_FALSE(base_entities.count(r.triple.object));
    CHECK(relations.count(r.triple.relation));
    CHECK(r.surface.back() == "EOS");
  }
  const auto one = make_novel_facts(1, 4);
  CHECK(one.size() == 1);
  CHECK(to_json(FactCorpus{make_novel_facts(50, 11), {}, {}, {}, {}}).dump() ==
        to_json(FactCorpus{make_novel_facts(50, 11), {}, {}, {}, {}}).dump());
}

TEST_CASE("paraphrases") {
  const auto c = generate_corpus(10, 5, 6);
  const auto& r = c.records[0];
  const auto p = make_paraphrases(c, r, 2, 3);
  REQUIRE(p.size() == 2);
  CHECK(p[0] != p[1]);
  for (const auto& s : p) {
    CHECK(s[s.size() - 2] == r.triple.object);
    CHECK(s != r.surface);
  }
  CHECK(make_paraphrases(c, r, 0, 3).empty());
  CHECK(code_of([&] { make_paraphrases(c, r, 4, 3); }) == ErrorCode::TemplateShortage);
}

TEST_CASE("tokenize round trip") {
  const auto c = generate_corpus(10, 5, 6);
  const auto& r = c.records[0];
  const auto ids = tokenize(c, r.surface);
  CHECK(ids.size() == r.surface.size());
  CHECK(detokenize(c, ids) == r.surface);
  CHECK(tokenize(c, {}).empty());
  CHECK(code_of([&] { tokenize(c, {"zzz-not-in-vocab"}); }) == ErrorCode::UnknownToken);
}

TEST_CASE("fold splits") {
  std::vector<FactId> ten(10), eleven(11);
  for (int i = 0; i < 11; ++i) {
    if (i < 10) ten[i] = i;
    eleven[i] = 100 + i;
  }
  const auto a = split_folds(ten, 5, 1);
  CHECK(a.sizes() == std::vector<std::size_t>{2, 2, 2, 2, 2});
  auto s = split_folds(eleven, 5, 1).sizes();
  std::sort(s.rbegin(), s.rend());
  CHECK(s == std::vector<std::size_t>{3, 2, 2, 2, 2});
  CHECK(code_of([] { split_folds({1, 2, 3}, 5, 1); }) == ErrorCode::InvalidArgument);
  CHECK(to_json(split_folds(eleven, 5, 7)).dump() == to_json(split_folds(eleven, 5, 7)).dump());
  const auto rt = fold_plan_from_json(to_json(a));
  CHECK(rt.assignments == a.assignments);
}

TEST_CASE("fold split property: every id exactly once, sizes within one") {
  for (std::uint64_t trial = 0; trial < 200; ++trial) {
    const std::size_t k = 2 + trial % 7;
    const std::size_t n = k + (trial * 37) % 90;
    std::vector<FactId> ids(n);
    for (std::size_t i = 0; i < n; ++i) ids[i] = static_cast<FactId>(i * 3 + trial);
    const auto plan = split_folds(ids, k, trial);
    CHECK(plan.assignments.size() == n);
    std::size_t total = 0;
    const auto sizes = plan.sizes();
    for (auto x : sizes) total += x;
    CHECK(total == n);
    CHECK(*std::max_element(sizes.begin(), sizes.end()) - *std::min_element(sizes.begin(), sizes.end()) <= 1);
  }
}

TEST_CASE("corpus save and load") {
  const auto c = generate_corpus(30, 10, 12);
  const auto path = std::filesystem::temp_directory_path() / "plab_test_corpus.json";
  save_corpus(c, path);
  const auto back = load_corpus(path);
  CHECK(fingerprint(back) == fingerprint(c));
  CHECK(back.split("new").size() == 10);
  std::filesystem::remove(path);
}

}
