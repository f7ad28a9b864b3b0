#pragma once

// Independent recomputations used as test oracles.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <vector>

#include "plab/corpus.hpp"
#include "plab/model.hpp"
#include "plab/plasticity.hpp"
#include "plab/tracking.hpp"

namespace plab::test {

/// Appends every tracked activation and grad-out of a step to a binary log:
/// per step, per (layer, kind): batch, tokens, dim, lengths, A values, G values.
class CaptureLog {
 public:
  explicit CaptureLog(std::filesystem::path path) : path_(std::move(path)), out_(path_, std::ios::binary) {}

  void write(const model::ForwardPass<float>& fwd, const model::BackwardPass<float>& bwd) {
    for (std::size_t l = 0; l < fwd.blocks.size(); ++l)
      for (auto k : model::kTrackedKinds) {
        const auto& a = fwd.activation(l, k);
        const auto& g = bwd.grad_out.at(l, k);
        put<std::uint64_t>(fwd.batch);
        put<std::uint64_t>(fwd.seq);
        put<std::uint64_t>(static_cast<std::uint64_t>(a.cols()));
        for (auto n : fwd.lengths) put<std::uint64_t>(n);
        out_.write(reinterpret_cast<const char*>(a.data()), static_cast<std::streamsize>(a.size() * sizeof(float)));
        out_.write(reinterpret_cast<const char*>(g.data()), static_cast<std::streamsize>(g.size() * sizeof(float)));
      }
    ++steps_;
  }
  std::size_t steps() const { return steps_; }
  void close() { out_.close(); }
  const std::filesystem::path& path() const { return path_; }

 private:
  template <class U>
  void put(U v) {
    out_.write(reinterpret_cast<const char*>(&v), sizeof v);
  }
  std::filesystem::path path_;
  std::ofstream out_;
  std::size_t steps_ = 0;
};

struct Replayed {
  std::vector<double> ha, hg;
  std::size_t steps = 0;
};

namespace detail {

// Population standardization over valid positions, then reduction, in one
// pass order: batch, position, dim.
inline std::vector<double> replay_one(const std::vector<float>& v, std::size_t batch, std::size_t tokens,
                                      std::size_t dim, const std::vector<std::uint64_t>& len,
                                      const tracking::ReductionSettings& s) {
  std::vector<double> x(v.begin(), v.end());
  if (s.standardize) {
    double sum = 0;
    std::size_t n = 0;
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t t = 0; t < len[b]; ++t) {
        for (std::size_t i = 0; i < dim; ++i) sum += x[(b * tokens + t) * dim + i];
        n += dim;
      }
    const double mu = sum / double(n);
    double ss = 0;
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t t = 0; t < len[b]; ++t)
        for (std::size_t i = 0; i < dim; ++i) {
          const double d = x[(b * tokens + t) * dim + i] - mu;
          ss += d * d;
        }
    const double sd = std::sqrt(ss / double(n));
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t t = 0; t < tokens; ++t)
        for (std::size_t i = 0; i < dim; ++i) {
          double& e = x[(b * tokens + t) * dim + i];
          e = (t < len[b] && sd >= 1e-12) ? (e - mu) / sd : 0.0;
        }
  }
  std::vector<double> r(dim, 0.0);
  for (std::size_t b = 0; b < batch; ++b) {
    if (len[b] == 0) continue;
    const std::size_t t0 = s.token_mode == tracking::TokenMode::LastToken ? len[b] - 1 : 0;
    for (std::size_t t = t0; t < len[b]; ++t)
      for (std::size_t i = 0; i < dim; ++i) {
        const double e = x[(b * tokens + t) * dim + i];
        r[i] += s.magnitude == tracking::Magnitude::Absolute ? std::fabs(e) : e;
      }
  }
  return r;
}

}  // namespace detail

/// Brute-force sum over a persisted capture log.
inline Replayed replay_log(const std::filesystem::path& path, const model::ModelConfig& config,
                           const tracking::ReductionSettings& s) {
  const model::NeuronSpace space(config);
  Replayed out;
  out.ha.assign(space.size(), 0.0);
  out.hg.assign(space.size(), 0.0);
  std::ifstream in(path, std::ios::binary);
  auto get = [&] {
    std::uint64_t v = 0;
    in.read(reinterpret_cast<char*>(&v), sizeof v);
    return v;
  };
  while (in.peek() != std::char_traits<char>::eof()) {
    for (std::size_t l = 0; l < config.n_layers; ++l)
      for (auto k : model::kTrackedKinds) {
        const std::size_t batch = get(), tokens = get(), dim = get();
        std::vector<std::uint64_t> len(batch);
        for (auto& n : len) n = get();
        std::vector<float> a(batch * tokens * dim), g(a.size());
        in.read(reinterpret_cast<char*>(a.data()), static_cast<std::streamsize>(a.size() * sizeof(float)));
        in.read(reinterpret_cast<char*>(g.data()), static_cast<std::streamsize>(g.size() * sizeof(float)));
        const auto ra = detail::replay_one(a, batch, tokens, dim, len, s);
        const auto rg = detail::replay_one(g, batch, tokens, dim, len, s);
        const std::size_t off = space.offset(l, k);
        for (std::size_t i = 0; i < dim; ++i) {
          out.ha[off + i] += ra[i];
          out.hg[off + i] += rg[i];
        }
      }
    ++out.steps;
  }
  return out;
}

/// Tiny fact set plus a matching small model config.
struct TinySetup {
  corpus::FactCorpus corpus;
  std::vector<model::EncodedFact> base, fresh;
  model::ModelConfig config;
};

inline TinySetup tiny_setup(std::size_t n_base, std::size_t n_new, std::uint64_t seed, std::size_t layers = 2,
                            std::size_t d_model = 32) {
  TinySetup s;
  s.corpus = corpus::generate_corpus(n_base, n_new, seed);
  const auto base = s.corpus.split("base");
  const auto fresh = s.corpus.split("new");
  s.base = model::encode_facts(s.corpus.vocabulary, base);
  s.fresh = model::encode_facts(s.corpus.vocabulary, fresh);
  s.config.n_layers = layers;
  s.config.d_model = d_model;
  s.config.n_heads = 4;
  s.config.d_ff = 4 * d_model;
  s.config.vocab_size = s.corpus.vocabulary.size();
  s.config.max_seq = 16;
  s.config.seed = seed;
  return s;
}

}  // namespace plab::test
