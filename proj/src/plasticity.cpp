#include "plab/plasticity.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "plab/error.hpp"
#include "plab/rng.hpp"

namespace plab::plasticity {
namespace {

constexpr std::array<std::pair<Strategy, std::string_view>, 8> kStrategyNames{{
    {Strategy::Plastic, "Plastic"},
    {Strategy::Stubborn, "Stubborn"},
    {Strategy::Candidate, "Candidate"},
    {Strategy::Specific, "Specific"},
    {Strategy::Random, "Random"},
    {Strategy::LotteryTicket, "LotteryTicket"},
    {Strategy::NonLottery, "NonLottery"},
    {Strategy::Full, "Full"},
}};

const tracking::HistoricalProfile& need_profile(const tracking::HistoricalProfile* p, std::size_t total,
                                                const char* what) {
  if (!p) fail(ErrorCode::ProfileMissing, std::string(what) + " profile required");
  if (p->size() != total) fail(ErrorCode::ShapeMismatch, std::string(what) + " profile does not match the model");
  return *p;
}

std::vector<NeuronId> to_neurons(const model::NeuronSpace& space, std::vector<std::size_t> flat) {
  std::sort(flat.begin(), flat.end());
  std::vector<NeuronId> out;
  out.reserve(flat.size());
  for (auto f : flat) out.push_back(space.at(f));
  return out;
}

}  // namespace

std::string_view to_string(Strategy s) {
  for (const auto& [k, v] : kStrategyNames)
    if (k == s) return v;
  return "?";
}

Strategy strategy_from_string(std::string_view s) {
  for (const auto& [k, v] : kStrategyNames)
    if (v == s) return k;
  fail(ErrorCode::InvalidConfig, "unknown strategy " + std::string(s));
}

nlohmann::json to_json(const TargetSet& t) {
  nlohmann::json neurons = nlohmann::json::array();
  for (const auto& n : t.neurons) neurons.push_back({n.layer, model::to_string(n.kind), n.index});
  nlohmann::json prov{{"profile", t.provenance.profile}, {"snapshot", t.provenance.snapshot}};
  prov["seed"] = t.provenance.seed ? nlohmann::json(*t.provenance.seed) : nlohmann::json(nullptr);
  return {{"strategy", to_string(t.strategy)}, {"selection_n", t.selection_n}, {"neurons", neurons},
          {"provenance", prov}};
}

TargetSet target_set_from_json(const nlohmann::json& j) {
  TargetSet t;
  t.strategy = strategy_from_string(j.at("strategy").get<std::string>());
  t.selection_n = j.at("selection_n").get<std::size_t>();
  for (const auto& n : j.at("neurons"))
    t.neurons.push_back({n.at(0).get<std::uint32_t>(), model::tracked_kind_from_string(n.at(1).get<std::string>()),
                         n.at(2).get<std::uint32_t>()});
  const auto& p = j.at("provenance");
  t.provenance.profile = p.value("profile", "");
  t.provenance.snapshot = p.value("snapshot", "");
  if (p.contains("seed") && !p["seed"].is_null()) t.provenance.seed = p["seed"].get<std::uint64_t>();
  return t;
}

std::vector<std::size_t> top_n(std::span<const double> scores, std::size_t n, bool largest) {
  if (n > scores.size()) fail(ErrorCode::SelectionTooLarge, "selection exceeds the neuron count");
  std::vector<std::size_t> idx(scores.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  auto before = [&](std::size_t a, std::size_t b) {
    if (scores[a] != scores[b]) return largest ? scores[a] > scores[b] : scores[a] < scores[b];
    return largest ? a < b : a > b;
  };
  std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n), idx.end(), before);
  idx.resize(n);
  return idx;
}

TargetSet select_neurons(Strategy strategy, std::size_t selection_n, const model::ModelConfig& config,
                         const SelectionInputs& in) {
  const model::NeuronSpace space(config);
  const std::size_t total = space.size();
  TargetSet t;
  t.strategy = strategy;
  if (in.profile) t.provenance.profile = tracking::fingerprint(*in.profile);
  if (in.snapshot) t.provenance.snapshot = tracking::fingerprint(*in.snapshot);
  t.provenance.seed = in.seed;

  if (strategy == Strategy::Full) {
    t.selection_n = total;
    std::vector<std::size_t> all(total);
    std::iota(all.begin(), all.end(), std::size_t{0});
    t.neurons = to_neurons(space, std::move(all));
    return t;
  }
  if (selection_n > total) fail(ErrorCode::SelectionTooLarge, "selection_n exceeds " + std::to_string(total));
  t.selection_n = selection_n;

  std::vector<std::size_t> flat;
  switch (strategy) {
    case Strategy::Plastic:
      flat = top_n(need_profile(in.profile, total, "historical").hg, selection_n, false);
      break;
    case Strategy::Stubborn:
      flat = top_n(need_profile(in.profile, total, "historical").hg, selection_n, true);
      break;
    case Strategy::Candidate:
    case Strategy::Specific: {
      if (!in.snapshot) fail(ErrorCode::MissingSnapshot, std::string(to_string(strategy)) + " needs a gradient snapshot");
      if (in.snapshot->size() != total) fail(ErrorCode::ShapeMismatch, "snapshot does not match the model");
      if (strategy == Strategy::Candidate) {
        flat = top_n(in.snapshot->g_new, selection_n, true);
        break;
      }
      const std::size_t ns = in.n_stubborn ? in.n_stubborn : selection_n;
      const auto stubborn = top_n(need_profile(in.profile, total, "historical").hg, ns, true);
      if (selection_n > total - stubborn.size())
        fail(ErrorCode::SelectionTooLarge, "not enough neurons outside the stubborn set");
      std::vector<double> scores(in.snapshot->g_new);
      // Excluded neurons rank below every admissible one.
      std::vector<std::uint8_t> excluded(total, 0);
      for (auto s : stubborn) excluded[s] = 1;
      std::vector<std::size_t> idx;
      idx.reserve(total - stubborn.size());
      for (std::size_t i = 0; i < total; ++i)
        if (!excluded[i]) idx.push_back(i);
      std::vector<double> sub(idx.size());
      for (std::size_t i = 0; i < idx.size(); ++i) sub[i] = scores[idx[i]];
      for (auto k : top_n(sub, selection_n, true)) flat.push_back(idx[k]);
      break;
    }
    case Strategy::Random: {
      if (!in.seed) fail(ErrorCode::InvalidArgument, "Random strategy needs a seed");
      Rng rng(*in.seed);
      flat = rng.sample_without_replacement(total, selection_n);
      break;
    }
    case Strategy::LotteryTicket:
    case Strategy::NonLottery: {
      const auto& donor = need_profile(in.donor, total, "donor");
      t.provenance.profile = tracking::fingerprint(donor);
      flat = top_n(donor.hg, selection_n, strategy == Strategy::LotteryTicket);
      break;
    }
    case Strategy::Full:
      break;
  }
  t.neurons = to_neurons(space, std::move(flat));
  return t;
}

LotteryPartition lottery_partition(const tracking::HistoricalProfile& donor, std::size_t selection_n) {
  SelectionInputs in;
  in.donor = &donor;
  return {select_neurons(Strategy::LotteryTicket, selection_n, donor.model_config, in),
          select_neurons(Strategy::NonLottery, selection_n, donor.model_config, in)};
}

std::size_t GradientMask::count() const {
  return static_cast<std::size_t>(std::count(entries.begin(), entries.end(), std::uint8_t{1}));
}

GradientMask compile_mask(const TargetSet& target, const model::ModelConfig& config, UntrackedPolicy untracked) {
  const model::ParamLayout layout(config);
  const model::NeuronSpace space(config);
  GradientMask mask;
  mask.untracked = untracked;
  mask.entries.assign(layout.total(), 0);
  if (untracked == UntrackedPolicy::Trainable)
    for (std::size_t p = 0; p < layout.params().size(); ++p) {
      if (layout.is_tracked(p)) continue;
      const auto& info = layout[p];
      std::fill_n(mask.entries.begin() + static_cast<std::ptrdiff_t>(info.offset), info.size(), std::uint8_t{1});
    }
  for (const auto& n : target.neurons) {
    if (!space.valid(n)) fail(ErrorCode::InvalidNeuron, "neuron " + model::to_string(n) + " is not in the model");
    const auto& w = layout[layout.tracked_weight(n.layer, n.kind)];
    const auto& b = layout[layout.tracked_bias(n.layer, n.kind)];
    std::fill_n(mask.entries.begin() + static_cast<std::ptrdiff_t>(w.offset + n.index * w.cols), w.cols,
                std::uint8_t{1});
    mask.entries[b.offset + n.index] = 1;
  }
  return mask;
}

template <class T>
void apply_mask(std::span<T> grads, const GradientMask& mask) {
  if (grads.size() != mask.size()) fail(ErrorCode::ShapeMismatch, "mask and gradient sizes differ");
  for (std::size_t i = 0; i < grads.size(); ++i)
    if (!mask.entries[i]) grads[i] = T(0);
}

template void apply_mask<float>(std::span<float>, const GradientMask&);
template void apply_mask<double>(std::span<double>, const GradientMask&);

nlohmann::json to_json(const TrainHyper& h) {
  return {{"optimizer", model::to_json(h.optimizer)},
          {"batch_size", h.batch_size},
          {"max_epochs", h.max_epochs},
          {"min_epochs", h.min_epochs},
          {"convergence_threshold", h.convergence_threshold},
          {"shuffle_seed", h.shuffle_seed},
          {"loss_mode", h.loss_mode == model::LossMode::AllTokens ? "AllTokens" : "ObjectOnly"}};
}

TrainHyper train_hyper_from_json(const nlohmann::json& j, TrainHyper d) {
  if (j.contains("optimizer")) {
    auto o = model::to_json(d.optimizer);
    o.update(j["optimizer"]);
    d.optimizer = model::optimizer_hyper_from_json(o);
  }
  d.batch_size = j.value("batch_size", d.batch_size);
  d.max_epochs = j.value("max_epochs", d.max_epochs);
  d.min_epochs = j.value("min_epochs", d.min_epochs);
  d.convergence_threshold = j.value("convergence_threshold", d.convergence_threshold);
  d.shuffle_seed = j.value("shuffle_seed", d.shuffle_seed);
  if (j.contains("loss_mode")) {
    const auto m = j["loss_mode"].get<std::string>();
    if (m == "AllTokens") d.loss_mode = model::LossMode::AllTokens;
    else if (m == "ObjectOnly") d.loss_mode = model::LossMode::ObjectOnly;
    else fail(ErrorCode::InvalidConfig, "loss_mode must be AllTokens or ObjectOnly");
  }
  if (d.batch_size == 0) fail(ErrorCode::InvalidConfig, "batch_size must be positive");
  if (!(d.optimizer.lr > 0)) fail(ErrorCode::InvalidConfig, "lr must be positive");
  return d;
}

double TrainingReport::eval(const std::string& name) const {
  for (const auto& [k, v] : final_evals)
    if (k == name) return v;
  fail(ErrorCode::InvalidArgument, "no eval named " + name);
}

nlohmann::json to_json(const TrainingReport& r) {
  nlohmann::json epochs = nlohmann::json::array();
  for (const auto& e : r.epochs) epochs.push_back({{"epoch", e.epoch}, {"loss", e.loss}, {"accuracy", e.accuracy}});
  nlohmann::json evals = nlohmann::json::object();
  for (const auto& [k, v] : r.final_evals) evals[k] = v;
  return {{"epochs", epochs},
          {"epochs_to_converge", r.epochs_to_converge},
          {"converged", r.converged},
          {"steps", r.steps},
          {"final_evals", evals}};
}

TrainingReport train(model::Model& m, std::span<const model::EncodedFact> facts, const TrainHyper& hyper,
                     const GradientMask* mask, const TrainHooks& hooks) {
  if (facts.empty()) fail(ErrorCode::EmptyInput, "no facts to train on");
  if (hyper.batch_size == 0) fail(ErrorCode::InvalidArgument, "batch_size must be positive");
  if (mask && mask->size() != m.params().size()) fail(ErrorCode::ShapeMismatch, "mask does not match the model");
  const std::span<const std::uint8_t> mask_span = mask ? std::span<const std::uint8_t>(mask->entries)
                                                       : std::span<const std::uint8_t>{};
  TrainingReport report;
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
      const auto fwd = m.forward(lb.inputs);
      const double l = model::loss<float>(fwd.logits, lb.targets, lb.mask);
      if (!std::isfinite(l))
        fail(ErrorCode::NonFiniteLoss, "loss " + std::to_string(l) + " at epoch " + std::to_string(epoch) +
                                           ", step " + std::to_string(report.steps + 1));
      auto bwd = m.backward(fwd, lb.targets, lb.mask);
      if (hooks.on_step) hooks.on_step(fwd, bwd);
      if (mask) apply_mask(std::span<float>(bwd.grads), *mask);
      m.optimizer_step(bwd.grads, hyper.optimizer, mask_span);
      ++report.steps;
      loss_sum += l;
      ++batches;
    }
    const double acc = model::accuracy(m, facts);
    report.epochs.push_back({epoch, loss_sum / static_cast<double>(batches), acc});
    if (!report.converged) report.epochs_to_converge = epoch;
    if (acc >= hyper.convergence_threshold) report.converged = true;
    if (report.converged && epoch >= hyper.min_epochs) break;
  }
  for (const auto& [name, fn] : hooks.evals) report.final_evals.emplace_back(name, fn(m));
  return report;
}

TrainingReport train_targeted(model::Model& m, std::span<const model::EncodedFact> facts, const GradientMask& mask,
                              const TrainHyper& hyper, const TrainHooks& hooks) {
  return train(m, facts, hyper, &mask, hooks);
}

TrainingReport train_targeted(model::Model& m, std::span<const model::EncodedFact> facts, const TargetSet& target,
                              const TrainHyper& hyper, const TrainHooks& hooks, UntrackedPolicy untracked) {
  const auto mask = compile_mask(target, m.config(), untracked);
  return train(m, facts, hyper, &mask, hooks);
}

}  // namespace plab::plasticity
