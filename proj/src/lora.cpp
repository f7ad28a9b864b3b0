#include <algorithm>
#include <cmath>
#include <numeric>

#include "plab/error.hpp"
#include "plab/plasticity.hpp"
#include "plab/rng.hpp"

namespace plab::plasticity {
namespace {

using model::Mat;

struct AdamState {
  std::vector<float> m, v;
};

void adam_update(float* p, const float* g, std::size_t n, AdamState& s, const model::OptimizerHyper& h,
                 std::uint64_t step) {
  if (s.m.size() != n) {
    s.m.assign(n, 0.f);
    s.v.assign(n, 0.f);
  }
  const float lr = static_cast<float>(h.lr), b1 = static_cast<float>(h.beta1), b2 = static_cast<float>(h.beta2),
              eps = static_cast<float>(h.eps), wd = static_cast<float>(h.weight_decay);
  if (h.rule == model::OptimizerRule::SGD) {
    for (std::size_t i = 0; i < n; ++i) p[i] -= lr * (g[i] + wd * p[i]);
    return;
  }
  const float bc1 = 1.f - static_cast<float>(std::pow(h.beta1, static_cast<double>(step)));
  const float bc2 = 1.f - static_cast<float>(std::pow(h.beta2, static_cast<double>(step)));
  for (std::size_t i = 0; i < n; ++i) {
    s.m[i] = b1 * s.m[i] + (1.f - b1) * g[i];
    s.v[i] = b2 * s.v[i] + (1.f - b2) * g[i] * g[i];
    p[i] -= lr * ((s.m[i] / bc1) / (std::sqrt(s.v[i] / bc2) + eps) + wd * p[i]);
  }
}

void write_merged(model::Model& merged, const model::Model& base, const LoraAdapter& adapter) {
  const auto& layout = base.layout();
  for (const auto& f : adapter.factors) {
    const auto w = layout.tracked_weight(f.layer, f.kind);
    Mat<float> delta = f.b * f.a;
    merged.param(w) = base.param(w) + static_cast<float>(adapter.scale) * delta;
  }
}

}  // namespace

nlohmann::json to_json(const LoraConfig& c) {
  nlohmann::json kinds = nlohmann::json::array();
  for (auto k : c.kinds) kinds.push_back(model::to_string(k));
  return {{"rank", c.rank}, {"alpha", c.alpha}, {"kinds", kinds}, {"seed", c.seed}};
}

LoraConfig lora_config_from_json(const nlohmann::json& j) {
  LoraConfig c;
  c.rank = j.value("rank", c.rank);
  c.alpha = j.value("alpha", c.alpha);
  c.seed = j.value("seed", c.seed);
  if (j.contains("kinds")) {
    c.kinds.clear();
    for (const auto& k : j["kinds"]) c.kinds.push_back(model::tracked_kind_from_string(k.get<std::string>()));
  }
  if (c.rank == 0) fail(ErrorCode::InvalidConfig, "lora rank must be at least 1");
  return c;
}

LoraAdapter make_lora_adapter(const model::ModelConfig& config, const LoraConfig& lora) {
  if (lora.rank == 0) fail(ErrorCode::InvalidArgument, "lora rank must be at least 1");
  LoraAdapter ad;
  ad.rank = lora.rank;
  ad.scale = lora.alpha / static_cast<double>(lora.rank);
  Rng rng(derive_seed(lora.seed, 0x10AA));
  for (std::size_t l = 0; l < config.n_layers; ++l)
    for (auto k : lora.kinds) {
      LoraFactor f;
      f.layer = l;
      f.kind = k;
      const auto in = config.in_dim(k), out = config.out_dim(k);
      f.a.resize(static_cast<Eigen::Index>(lora.rank), static_cast<Eigen::Index>(in));
      const double sd = 1.0 / std::sqrt(static_cast<double>(in));
      for (Eigen::Index i = 0; i < f.a.size(); ++i) f.a.data()[i] = static_cast<float>(sd * rng.normal());
      f.b = Mat<float>::Zero(static_cast<Eigen::Index>(out), static_cast<Eigen::Index>(lora.rank));
      ad.factors.push_back(std::move(f));
    }
  return ad;
}

model::Model merge_lora(const model::Model& base, const LoraAdapter& adapter) {
  model::Model merged = base;
  write_merged(merged, base, adapter);
  return merged;
}

LoraResult train_lora(const model::Model& base, std::span<const model::EncodedFact> facts, const LoraConfig& lora,
                      const TrainHyper& hyper, const TrainHooks& hooks) {
  if (facts.empty()) fail(ErrorCode::EmptyInput, "no facts to train on");
  if (hyper.batch_size == 0) fail(ErrorCode::InvalidArgument, "batch_size must be positive");
  LoraResult out{{}, make_lora_adapter(base.config(), lora), base};
  auto& report = out.report;
  auto& ad = out.adapter;
  auto& merged = out.merged;
  merged.reset_optimizer();
  write_merged(merged, base, ad);

  const auto& layout = base.layout();
  const float s = static_cast<float>(ad.scale);
  std::vector<AdamState> state_a(ad.factors.size()), state_b(ad.factors.size());
  Rng rng(hyper.shuffle_seed);
  std::vector<std::size_t> order(facts.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::vector<model::EncodedFact> batch;
  for (std::size_t epoch = 1; epoch <= hyper.max_epochs; ++epoch) {
    rng.shuffle(order);
    double loss_sum = 0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < order.size(); start += hyper.batch_size) {
      batch.clear();
      for (std::size_t i = start; i < std::min(order.size(), start + hyper.batch_size); ++i)
        batch.push_back(facts[order[i]]);
      const auto lb = model::make_lm_batch(batch, hyper.loss_mode);
      const auto fwd = merged.forward(lb.inputs);
      const double l = model::loss<float>(fwd.logits, lb.targets, lb.mask);
      if (!std::isfinite(l)) fail(ErrorCode::NonFiniteLoss, "loss " + std::to_string(l) + " at epoch " + std::to_string(epoch));
      const auto bwd = merged.backward(fwd, lb.targets, lb.mask);
      if (hooks.on_step) hooks.on_step(fwd, bwd);
      ++report.steps;
      for (std::size_t i = 0; i < ad.factors.size(); ++i) {
        auto& f = ad.factors[i];
        const auto& info = layout[layout.tracked_weight(f.layer, f.kind)];
        const Eigen::Map<const Mat<float>> dw(bwd.grads.data() + info.offset, static_cast<Eigen::Index>(info.rows),
                                              static_cast<Eigen::Index>(info.cols));
        Mat<float> db = s * (dw * f.a.transpose());
        Mat<float> da = s * (f.b.transpose() * dw);
        for (Eigen::Index k = 0; k < db.size(); ++k)
          if (!std::isfinite(db.data()[k])) fail(ErrorCode::NonFiniteGradient, "lora factor gradient");
        for (Eigen::Index k = 0; k < da.size(); ++k)
          if (!std::isfinite(da.data()[k])) fail(ErrorCode::NonFiniteGradient, "lora factor gradient");
        adam_update(f.b.data(), db.data(), static_cast<std::size_t>(db.size()), state_b[i], hyper.optimizer,
                    report.steps);
        adam_update(f.a.data(), da.data(), static_cast<std::size_t>(da.size()), state_a[i], hyper.optimizer,
                    report.steps);
      }
      write_merged(merged, base, ad);
      loss_sum += l;
      ++batches;
    }
    const double acc = model::accuracy(merged, facts);
    report.epochs.push_back({epoch, loss_sum / static_cast<double>(batches), acc});
    report.epochs_to_converge = epoch;
    if (acc >= hyper.convergence_threshold) {
      report.converged = true;
      break;
    }
  }
  for (const auto& [name, fn] : hooks.evals) report.final_evals.emplace_back(name, fn(merged));
  return out;
}

}  // namespace plab::plasticity
