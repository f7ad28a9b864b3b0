#include <doctest.h>

#include <filesystem>

#include "oracles.hpp"
#include "plab/error.hpp"
#include "plab/plasticity.hpp"
#include "plab/rng.hpp"
#include "plab/tracking.hpp"
#include "test_util.hpp"

using namespace plab;
using namespace plab::tracking;

namespace {

Tensor3 tensor(std::size_t b, std::size_t t, std::size_t d, std::vector<double> v) {
  Tensor3 x;
  x.batch = b;
  x.tokens = t;
  x.dim = d;
  x.values = std::move(v);
  x.lengths.assign(b, t);
  return x;
}

Tensor3 random_tensor(Rng& rng) {
  const std::size_t b = 1 + rng.below(4), t = 1 + rng.below(6), d = 1 + rng.below(7);
  Tensor3 x = tensor(b, t, d, std::vector<double>(b * t * d));
  for (auto& v : x.values) v = rng.normal() * 3 + 1;
  for (auto& n : x.lengths) n = 1 + rng.below(t);
  return x;
}

}  // namespace

TEST_SUITE("tracking") {

TEST_CASE("standardize examples") {
  const auto s = standardize(tensor(1, 2, 2, {1, 3, 5, 7}));
  const double r5 = std::sqrt(5.0);
  CHECK(s.values[0] == doctest::Approx(-3 / r5).epsilon(1e-12));
  CHECK(s.values[1] == doctest::Approx(-1 / r5).epsilon(1e-12));
  CHECK(s.values[2] == doctest::Approx(1 / r5).epsilon(1e-12));
  CHECK(s.values[3] == doctest::Approx(3 / r5).epsilon(1e-12));
  const auto z = standardize(tensor(1, 2, 2, {2, 2, 2, 2}));
  for (double v : z.values) CHECK(v == 0.0);
}

TEST_CASE("standardize property: zero mean, unit population std over valid entries") {
  Rng rng(3);
  for (int trial = 0; trial < 300; ++trial) {
    const auto x = random_tensor(rng);
    const auto s = standardize(x);
    double sum = 0, ss = 0;
    std::size_t n = 0;
    for (std::size_t b = 0; b < x.batch; ++b)
      for (std::size_t t = 0; t < x.tokens; ++t)
        for (std::size_t i = 0; i < x.dim; ++i) {
          if (!x.valid(b, t)) {
            CHECK(s.at(b, t, i) == 0.0);
            continue;
          }
          sum += s.at(b, t, i);
          ss += s.at(b, t, i) * s.at(b, t, i);
          ++n;
        }
    CHECK(std::abs(sum / double(n)) < 1e-9);
    if (n > 1) CHECK(ss / double(n) == doctest::Approx(1.0).epsilon(1e-9));
  }
}

TEST_CASE("reduce examples") {
  const auto x = tensor(1, 2, 2, {1, -2, 3, -4});
  CHECK(reduce(x, TokenMode::SumTokens, Magnitude::Absolute) == std::vector<double>{4, 6});
  CHECK(reduce(x, TokenMode::LastToken, Magnitude::Absolute) == std::vector<double>{3, 4});
  CHECK(reduce(x, TokenMode::SumTokens, Magnitude::Signed) == std::vector<double>{4, -6});
}

TEST_CASE("reduce reads each sequence's last valid position") {
  auto x = tensor(2, 3, 1, {1, 2, 3, 10, 20, 30});
  x.lengths = {2, 3};
  CHECK(reduce(x, TokenMode::LastToken, Magnitude::Signed) == std::vector<double>{2 + 30});
  CHECK(reduce(x, TokenMode::SumTokens, Magnitude::Signed) == std::vector<double>{1 + 2 + 10 + 20 + 30});
}

TEST_CASE("accumulate is additive; a zero capture only bumps the step count") {
  model::ModelConfig c;
  c.n_layers = 1;
  c.d_model = 8;
  c.n_heads = 2;
  c.d_ff = 8;
  c.vocab_size = 5;
  ReductionSettings s;
  s.standardize = false;
  auto p = make_profile(c, s);
  CHECK(p.size() == 24 + 8 + 8 + 8);
  const model::NeuronSpace space(c);
  auto capture = [&](double g0, double g1) {
    StepCapture cap;
    cap.layers = 1;
    for (auto k : model::kTrackedKinds) {
      const std::size_t w = space.width(k);
      cap.activations.push_back(tensor(1, 1, w, std::vector<double>(w, 0.0)));
      auto g = tensor(1, 1, w, std::vector<double>(w, 0.0));
      if (k == model::TrackedKind::MlpCProj) {
        g.values[0] = g0;
        g.values[1] = g1;
      }
      cap.grad_outs.push_back(g);
    }
    return cap;
  };
  accumulate(p, capture(1, 2));
  accumulate(p, capture(3, -1));
  const auto off = space.offset(0, model::TrackedKind::MlpCProj);
  CHECK(p.hg[off] == 4);
  CHECK(p.hg[off + 1] == 3);
  CHECK(p.steps == 2);
  const auto before = p.hg;
  accumulate(p, capture(0, 0));
  CHECK(p.hg == before);
  CHECK(p.steps == 3);

  StepCapture bad = capture(0, 0);
  bad.grad_outs[0].dim = 3;
  CHECK_THROWS_AS(accumulate(p, bad), Error);
}

TEST_CASE("streaming accumulate equals capture then accumulate") {
  auto m = test::random_model<float>(2, 16, 2, 24, 11, 8, 5);
  Rng rng(7);
  model::TokenBatch tb{2, 5, {}, {5, 3}};
  for (int i = 0; i < 10; ++i) tb.tokens.push_back(static_cast<model::TokenId>(3 + rng.below(8)));
  std::vector<model::TokenId> tgt(10, 4);
  std::vector<std::uint8_t> mask{1, 1, 1, 1, 1, 1, 1, 1, 0, 0};
  const auto fwd = m.forward(tb);
  const auto bwd = m.backward(fwd, tgt, mask);
  for (auto mode : {TokenMode::LastToken, TokenMode::SumTokens}) {
    auto a = make_profile(m.config(), {true, mode, Magnitude::Absolute});
    auto b = a;
    accumulate(a, fwd, bwd);
    accumulate(b, capture_step(fwd, bwd));
    CHECK(a.ha == b.ha);
    CHECK(a.hg == b.hg);
  }
}

TEST_CASE("profile equals replay of a persisted capture log") {
  auto s = test::tiny_setup(60, 10, 4);
  model::Model m(s.config);
  const auto log_path = std::filesystem::temp_directory_path() / "plab_test_capture.bin";
  for (auto settings : {ReductionSettings{}, ReductionSettings{true, TokenMode::SumTokens, Magnitude::Signed}}) {
    auto profile = make_profile(s.config, settings);
    test::CaptureLog log(log_path);
    plasticity::TrainHyper h;
    h.batch_size = 16;
    h.max_epochs = 8;
    h.convergence_threshold = 2.0;
    plasticity::TrainHooks hooks;
    hooks.on_step = [&](const auto& f, const auto& b) {
      accumulate(profile, f, b);
      log.write(f, b);
    };
    auto mm = m;
    plasticity::train(mm, s.base, h, nullptr, hooks);
    log.close();
    const auto r = test::replay_log(log_path, s.config, settings);
    CHECK(r.steps == 32);
    CHECK(profile.steps == 32);
    CHECK(r.ha == profile.ha);
    CHECK(r.hg == profile.hg);
  }
  std::filesystem::remove(log_path);
}

TEST_CASE("absolute accumulators never decrease") {
  auto s = test::tiny_setup(40, 10, 8);
  model::Model m(s.config);
  auto profile = make_profile(s.config);
  std::vector<double> prev = profile.hg, prev_a = profile.ha;
  bool monotone = true;
  plasticity::TrainHyper h;
  h.batch_size = 8;
  h.max_epochs = 3;
  h.convergence_threshold = 2.0;
  plasticity::TrainHooks hooks;
  hooks.on_step = [&](const auto& f, const auto& b) {
    accumulate(profile, f, b);
    for (std::size_t i = 0; i < prev.size(); ++i)
      monotone = monotone && profile.hg[i] >= prev[i] && profile.ha[i] >= prev_a[i];
    prev = profile.hg;
    prev_a = profile.ha;
  };
  plasticity::train(m, s.base, h, nullptr, hooks);
  CHECK(monotone);
}

TEST_CASE("snapshot leaves the model untouched and is additive over duplicated facts") {
  auto s = test::tiny_setup(30, 10, 9);
  const model::Model m(s.config);
  const auto before = model::checkpoint_bytes(m);
  const ReductionSettings signed_s{true, TokenMode::LastToken, Magnitude::Signed};
  const auto one = snapshot_gradients(m, s.base, signed_s, 30);
  CHECK(model::checkpoint_bytes(m) == before);
  auto twice = s.base;
  twice.insert(twice.end(), s.base.begin(), s.base.end());
  const auto two = snapshot_gradients(m, twice, signed_s, 30);
  for (std::size_t i = 0; i < one.size(); ++i) CHECK(two.g_new[i] == doctest::Approx(2 * one.g_new[i]).epsilon(1e-9));
  CHECK_THROWS_AS(snapshot_gradients(m, std::span<const model::EncodedFact>{}), Error);
}

TEST_CASE("snapshot is zero when the output head is zero") {
  auto s = test::tiny_setup(20, 5, 2);
  model::Model m(s.config);
  const auto& head = m.layout()[m.layout().head()];
  for (std::size_t i = 0; i < head.size(); ++i) m.params()[head.offset + i] = 0.0f;
  ReductionSettings raw{false, TokenMode::SumTokens, Magnitude::Absolute};
  const auto snap = snapshot_gradients(m, s.base, raw);
  for (double v : snap.g_new) CHECK(v == 0.0);
}

TEST_CASE("profile persistence") {
  auto s = test::tiny_setup(20, 5, 2);
  auto p = make_profile(s.config);
  Rng rng(1);
  for (auto& v : p.ha) v = rng.normal();
  for (auto& v : p.hg) v = rng.normal() * 1e-300;
  p.steps = 17;
  const auto path = std::filesystem::temp_directory_path() / "plab_test_profile.bin";
  save_profile(p, path);
  const auto back = load_profile(path);
  CHECK_FALSE(back.settings_mismatch);
  CHECK(back.profile.ha == p.ha);
  CHECK(back.profile.hg == p.hg);
  CHECK(back.profile.steps == 17);
  CHECK(fingerprint(back.profile) == fingerprint(p));
  CHECK(load_profile(path, ReductionSettings{true, TokenMode::SumTokens, Magnitude::Absolute}).settings_mismatch);
  const auto bytes = profile_bytes(p);
  CHECK_THROWS_AS(profile_from_bytes(bytes.substr(0, bytes.size() - 9)), Error);
  std::filesystem::remove(path);
}

}
