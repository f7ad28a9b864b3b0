#include <doctest.h>

#include <algorithm>
#include <set>

#include "oracles.hpp"
#include "plab/error.hpp"
#include "plab/plasticity.hpp"
#include "plab/rng.hpp"

using namespace plab;
using namespace plab::plasticity;
using model::TrackedKind;

namespace {

model::ModelConfig small_config() {
  model::ModelConfig c;
  c.n_layers = 2;
  c.d_model = 8;
  c.n_heads = 2;
  c.d_ff = 16;
  c.vocab_size = 10;
  c.max_seq = 8;
  return c;
}

std::set<std::size_t> flat_set(const TargetSet& t, const model::ModelConfig& c) {
  const model::NeuronSpace s(c);
  std::set<std::size_t> out;
  for (const auto& n : t.neurons) out.insert(s.flat(n));
  return out;
}

std::set<std::size_t> first4(const TargetSet& t, const model::ModelConfig& c) {
  std::set<std::size_t> out;
  for (auto f : flat_set(t, c))
    if (f < 4) out.insert(f);
  return out;
}

// Random profile with many repeated values so tie-breaking is exercised.
tracking::HistoricalProfile random_profile(const model::ModelConfig& c, Rng& rng) {
  auto p = tracking::make_profile(c);
  const bool ties = rng.below(2) == 0;
  for (auto& v : p.hg) v = ties ? double(rng.below(20)) : rng.uniform() * 100;
  return p;
}

}  // namespace

TEST_SUITE("plasticity") {

TEST_CASE("top_n reads one ranking in both directions") {
  const std::vector<double> hg{0.9, 0.1, 0.5, 0.2};
  CHECK(top_n(hg, 2, false) == std::vector<std::size_t>{1, 3});
  CHECK(top_n(hg, 2, true) == std::vector<std::size_t>{0, 2});
  const std::vector<double> flat{1, 1, 1, 1};
  CHECK(top_n(flat, 2, true) == std::vector<std::size_t>{0, 1});
  CHECK(top_n(flat, 2, false) == std::vector<std::size_t>{3, 2});
  const std::vector<double> two{2, 1, 1, 1, 1, 0};
  CHECK(top_n(two, 3, true) == std::vector<std::size_t>{0, 1, 2});
  CHECK(top_n(two, 3, false) == std::vector<std::size_t>{5, 4, 3});
  CHECK_THROWS_AS(top_n(hg, 5, true), Error);
}

TEST_CASE("strategy examples embedded in a larger profile") {
  const auto c = small_config();
  auto p = tracking::make_profile(c);
  std::fill(p.hg.begin(), p.hg.end(), 0.3);
  p.hg[0] = 0.9;
  p.hg[1] = 0.1;
  p.hg[2] = 0.5;
  p.hg[3] = 0.2;
  tracking::GradientSnapshot snap;
  snap.g_new.assign(p.size(), 0.0);
  snap.g_new[0] = 10;
  snap.g_new[1] = 1;
  snap.g_new[2] = 8;
  snap.g_new[3] = 2;
  SelectionInputs in{&p, &snap};
  CHECK(flat_set(select_neurons(Strategy::Plastic, 2, c, in), c) == std::set<std::size_t>{1, 3});
  CHECK(flat_set(select_neurons(Strategy::Stubborn, 2, c, in), c) == std::set<std::size_t>{0, 2});
  CHECK(flat_set(select_neurons(Strategy::Candidate, 2, c, in), c) == std::set<std::size_t>{0, 2});
  CHECK(flat_set(select_neurons(Strategy::Specific, 2, c, in), c) == std::set<std::size_t>{1, 3});
  CHECK(first4(select_neurons(Strategy::Specific, 2, c, in), c).size() == 2);
}

TEST_CASE("lottery partition example") {
  const auto c = small_config();
  auto d = tracking::make_profile(c);
  std::fill(d.hg.begin(), d.hg.end(), 1.0);
  d.hg[0] = 5;
  d.hg[1] = 0.1;
  d.hg[2] = 3;
  d.hg[3] = 0.2;
  const auto lp = lottery_partition(d, 2);
  CHECK(flat_set(lp.lottery, c) == std::set<std::size_t>{0, 2});
  CHECK(flat_set(lp.non_lottery, c) == std::set<std::size_t>{1, 3});
  CHECK(to_json(lottery_partition(d, 2).lottery) == to_json(lp.lottery));
}

TEST_CASE("selection errors") {
  const auto c = small_config();
  auto p = tracking::make_profile(c);
  const std::size_t total = p.size();
  CHECK_THROWS_AS(select_neurons(Strategy::Candidate, 2, c, {&p}), Error);
  CHECK_THROWS_AS(select_neurons(Strategy::Plastic, total + 1, c, {&p}), Error);
  CHECK_THROWS_AS(select_neurons(Strategy::Plastic, 2, c, {}), Error);
  CHECK_THROWS_AS(select_neurons(Strategy::Random, 2, c, {&p}), Error);
  CHECK_THROWS_AS(select_neurons(Strategy::LotteryTicket, 2, c, {&p}), Error);
  try {
    select_neurons(Strategy::Specific, 2, c, {&p});
    FAIL("expected MissingSnapshot");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::MissingSnapshot);
  }
}

TEST_CASE("Full ignores selection_n and Random is seeded") {
  const auto c = small_config();
  auto p = tracking::make_profile(c);
  CHECK(select_neurons(Strategy::Full, 3, c, {&p}).neurons.size() == p.size());
  SelectionInputs in{&p};
  in.seed = 42;
  const auto a = select_neurons(Strategy::Random, 20, c, in);
  CHECK(flat_set(a, c).size() == 20);
  CHECK(to_json(a) == to_json(select_neurons(Strategy::Random, 20, c, in)));
  in.seed = 43;
  CHECK(to_json(a) != to_json(select_neurons(Strategy::Random, 20, c, in)));
}

TEST_CASE("target set JSON round trip") {
  const auto c = small_config();
  auto p = tracking::make_profile(c);
  SelectionInputs in{&p};
  in.seed = 5;
  const auto t = select_neurons(Strategy::Random, 7, c, in);
  CHECK(to_json(target_set_from_json(to_json(t))) == to_json(t));
}

TEST_CASE("strategy algebra on random profiles") {
  const auto c = small_config();
  Rng rng(2024);
  const std::size_t total = model::NeuronSpace(c).size();
  for (int trial = 0; trial < 300; ++trial) {
    const auto p = random_profile(c, rng);
    tracking::GradientSnapshot snap;
    snap.g_new.resize(total);
    for (auto& v : snap.g_new) v = rng.below(3) == 0 ? double(rng.below(5)) : rng.uniform();
    const std::size_t n = rng.below(total / 2 + 1);
    SelectionInputs in{&p, &snap};
    in.seed = trial;
    const auto plastic = flat_set(select_neurons(Strategy::Plastic, n, c, in), c);
    const auto stubborn = flat_set(select_neurons(Strategy::Stubborn, n, c, in), c);
    const auto specific = flat_set(select_neurons(Strategy::Specific, n, c, in), c);
    CHECK(plastic.size() == n);
    CHECK(stubborn.size() == n);
    CHECK(specific.size() == n);
    for (auto f : stubborn) {
      CHECK_FALSE(plastic.count(f));
      CHECK_FALSE(specific.count(f));
    }
    const double k = 0.001 + rng.uniform() * 1000;
    auto scaled = p;
    for (auto& v : scaled.hg) v *= k;
    SelectionInputs sin{&scaled, &snap};
    sin.seed = trial;
    for (auto s : {Strategy::Plastic, Strategy::Stubborn, Strategy::Specific, Strategy::Candidate, Strategy::Random})
      CHECK(select_neurons(s, n, c, in).neurons == select_neurons(s, n, c, sin).neurons);
  }
}

TEST_CASE("mask compilation") {
  const auto c = small_config();
  const model::ParamLayout lay(c);
  TargetSet one;
  one.strategy = Strategy::Plastic;
  one.selection_n = 1;
  one.neurons = {{0, TrackedKind::MlpCFc, 5}};
  const auto m = compile_mask(one, c);
  CHECK(m.count() == c.d_model + 1);
  const auto& w = lay[lay.tracked_weight(0, TrackedKind::MlpCFc)];
  const auto& b = lay[lay.tracked_bias(0, TrackedKind::MlpCFc)];
  for (std::size_t j = 0; j < c.d_model; ++j) CHECK(m.entries[w.offset + 5 * w.cols + j] == 1);
  CHECK(m.entries[b.offset + 5] == 1);

  auto p = tracking::make_profile(c);
  const auto full = compile_mask(select_neurons(Strategy::Full, 0, c, {&p}), c);
  for (std::size_t i = 0; i < lay.params().size(); ++i)
    for (std::size_t e = 0; e < lay[i].size(); ++e) CHECK(full.entries[lay[i].offset + e] == (lay.is_tracked(i) ? 1 : 0));
  const auto trainable = compile_mask(select_neurons(Strategy::Full, 0, c, {&p}), c, UntrackedPolicy::Trainable);
  CHECK(trainable.count() == lay.total());

  TargetSet empty;
  CHECK(compile_mask(empty, c).count() == 0);
  TargetSet bad;
  bad.neurons = {{0, TrackedKind::MlpCFc, 999}};
  CHECK_THROWS_AS(compile_mask(bad, c), Error);
}

TEST_CASE("apply_mask examples") {
  GradientMask m;
  m.entries = {1, 1, 0, 0};
  std::vector<double> g{1, 2, 3, 4};
  apply_mask(std::span<double>(g), m);
  CHECK(g == std::vector<double>{1, 2, 0, 0});
  m.entries = {1, 1, 1, 1};
  g = {1, 2, 3, 4};
  apply_mask(std::span<double>(g), m);
  CHECK(g == std::vector<double>{1, 2, 3, 4});
  m.entries = {0, 0, 0, 0};
  apply_mask(std::span<double>(g), m);
  CHECK(g == std::vector<double>{0, 0, 0, 0});
  std::vector<double> short_g{1};
  CHECK_THROWS_AS(apply_mask(std::span<double>(short_g), m), Error);
}

TEST_CASE("targeted training leaves unmasked entries bitwise unchanged") {
  auto s = test::tiny_setup(40, 20, 3);
  model::Model base(s.config);
  TrainHyper h;
  h.batch_size = 8;
  h.max_epochs = 4;
  auto p = tracking::make_profile(s.config);
  Rng rng(8);
  for (auto& v : p.hg) v = rng.uniform();
  for (auto strategy : {Strategy::Plastic, Strategy::Stubborn}) {
    auto m = base;
    const auto t = select_neurons(strategy, 30, s.config, {&p});
    const auto mask = compile_mask(t, s.config);
    train_targeted(m, s.fresh, t, h);
    std::size_t changed = 0;
    for (std::size_t i = 0; i < mask.size(); ++i) {
      if (!mask.entries[i]) CHECK(m.params()[i] == base.params()[i]);
      else changed += m.params()[i] != base.params()[i];
    }
    CHECK(changed > 0);
  }
  auto m = base;
  TargetSet none;
  train_targeted(m, s.fresh, none, h);
  CHECK(model::checkpoint_bytes(m) == model::checkpoint_bytes(base));
}

TEST_CASE("Full-mask training is bitwise identical to unmasked training") {
  auto s = test::tiny_setup(40, 20, 6);
  model::Model a(s.config);
  auto b = a;
  TrainHyper h;
  h.batch_size = 8;
  h.max_epochs = 3;
  h.shuffle_seed = 77;
  auto p = tracking::make_profile(s.config);
  const auto full = select_neurons(Strategy::Full, 0, s.config, {&p});
  const auto ra = train_targeted(a, s.base, full, h, {}, UntrackedPolicy::Trainable);
  const auto rb = train(b, s.base, h);
  CHECK(model::checkpoint_bytes(a) == model::checkpoint_bytes(b));
  CHECK(to_json(ra) == to_json(rb));
}

TEST_CASE("training report and hooks") {
  auto s = test::tiny_setup(30, 10, 2);
  model::Model m(s.config);
  TrainHyper h;
  h.batch_size = 10;
  h.max_epochs = 2;
  h.convergence_threshold = 2.0;
  std::size_t steps = 0;
  TrainHooks hooks;
  hooks.on_step = [&](const auto&, const auto&) { ++steps; };
  hooks.evals.push_back({"new", [&](const model::Model& mm) { return model::accuracy(mm, s.fresh); }});
  const auto r = train(m, s.base, h, nullptr, hooks);
  CHECK(steps == 6);
  CHECK(r.steps == 6);
  CHECK(r.epochs.size() == 2);
  CHECK_FALSE(r.converged);
  CHECK(r.epochs_to_converge == 2);
  CHECK(r.eval("new") == model::accuracy(m, s.fresh));
  CHECK_THROWS_AS(r.eval("missing"), Error);
  CHECK_THROWS_AS(train(m, std::span<const model::EncodedFact>{}, h), Error);
}

TEST_CASE("non-finite loss aborts") {
  auto s = test::tiny_setup(20, 5, 2);
  model::Model m(s.config);
  m.params()[m.layout()[m.layout().head()].offset] = std::numeric_limits<float>::infinity();
  TrainHyper h;
  h.max_epochs = 1;
  try {
    train(m, s.base, h);
    FAIL("expected NonFiniteLoss");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::NonFiniteLoss);
  }
}

TEST_CASE("LoRA: zero adapter is the identity and base weights stay frozen") {
  auto s = test::tiny_setup(40, 20, 12);
  model::Model base(s.config);
  const auto before = model::checkpoint_bytes(base);
  LoraConfig lc;
  lc.seed = 3;
  const auto adapter = make_lora_adapter(s.config, lc);
  CHECK(adapter.factors.size() == 2 * s.config.n_layers);
  CHECK(adapter.scale == 2.0);
  const auto merged = merge_lora(base, adapter);
  const auto lb = model::make_lm_batch(s.base);
  CHECK((merged.forward(lb.inputs).logits - base.forward(lb.inputs).logits).cwiseAbs().maxCoeff() == 0.0f);

  TrainHyper h;
  h.batch_size = 8;
  h.max_epochs = 3;
  h.optimizer.lr = 1e-2;
  const auto r = train_lora(base, s.fresh, lc, h);
  CHECK(model::checkpoint_bytes(base) == before);
  CHECK(r.report.steps == 9);
  // merged weights differ from base only inside adapted matrices
  const auto& lay = base.layout();
  bool moved = false;
  for (std::size_t i = 0; i < lay.params().size(); ++i) {
    bool adapted = false;
    for (std::size_t l = 0; l < s.config.n_layers; ++l)
      for (auto k : lc.kinds) adapted = adapted || i == lay.tracked_weight(l, k);
    for (std::size_t e = 0; e < lay[i].size(); ++e) {
      const auto x = r.merged.params()[lay[i].offset + e], y = base.params()[lay[i].offset + e];
      if (!adapted) CHECK(x == y);
      else moved = moved || x != y;
    }
  }
  CHECK(moved);
  // the merged model is exactly base + scale * B A
  const auto remerged = merge_lora(base, r.adapter);
  CHECK(model::checkpoint_bytes(remerged) == model::checkpoint_bytes(r.merged));
  const auto& f = r.adapter.factors[0];
  const auto w0 = base.param(lay.tracked_weight(f.layer, f.kind));
  const auto w1 = r.merged.param(lay.tracked_weight(f.layer, f.kind));
  const model::Mat<float> delta = (f.b * f.a) * static_cast<float>(r.adapter.scale);
  CHECK((w1 - w0 - delta).cwiseAbs().maxCoeff() < 1e-5f);
}

}
