#include "plab/harness.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <ctime>
#include <fstream>
#include <map>
#include <mutex>
#include <numeric>
#include <sstream>
#include <thread>

#include "plab/error.hpp"
#include "plab/rng.hpp"

namespace plab::harness {
namespace {

using model::EncodedFact;

// Stream tags for derive_seed; one per independent consumer.
enum : std::uint64_t {
  kSeedFold = 100,
  kSeedModel = 1,
  kSeedShuffle = 2,
  kSeedDissonant = 3,
  kSeedArm = 4,
  kSeedLottery = 500,
  kSeedClassify = 600,
};

void parallel_for(std::size_t n, std::size_t threads, const std::function<void(std::size_t)>& fn) {
  threads = std::max<std::size_t>(1, std::min(threads, n));
  if (threads == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mu;
  std::vector<std::thread> pool;
  for (std::size_t t = 0; t < threads; ++t)
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard lock(error_mu);
          if (!error) error = std::current_exception();
        }
      }
    });
  for (auto& th : pool) th.join();
  if (error) std::rethrow_exception(error);
}

std::vector<EncodedFact> encode_paraphrases(const corpus::Vocabulary& vocab,
                                            const std::vector<corpus::FactRecord>& records) {
  std::vector<EncodedFact> out;
  for (const auto& r : records)
    for (const auto& p : r.paraphrases) out.push_back(model::encode_surface(vocab, r, p));
  return out;
}

plasticity::TrainHyper seeded(plasticity::TrainHyper h, std::uint64_t seed) {
  h.shuffle_seed = derive_seed(seed, h.shuffle_seed ^ kSeedShuffle);
  return h;
}

double acc_or_zero(const model::LogitModel& m, const std::vector<EncodedFact>& facts) {
  return facts.empty() ? 0.0 : model::accuracy(m, facts);
}

void mean_std(const std::vector<double>& v, double& mean, double& sd) {
  mean = sd = 0;
  if (v.empty()) return;
  for (double x : v) mean += x;
  mean /= static_cast<double>(v.size());
  for (double x : v) sd += (x - mean) * (x - mean);
  sd = std::sqrt(sd / static_cast<double>(v.size()));
}

std::string utc_now() {
  const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

}  // namespace

std::uint64_t fold_seed(const RunConfig& cfg, std::size_t fold) { return derive_seed(cfg.seed, kSeedFold + fold); }

FoldData fold_from_corpus(corpus::FactCorpus c, std::size_t fold, std::uint64_t seed) {
  FoldData d;
  d.fold = fold;
  d.seed = seed;
  d.corpus = std::move(c);
  const auto& v = d.corpus.vocabulary;
  const auto base = d.corpus.split("base");
  const auto fresh = d.corpus.split("new");
  d.base = model::encode_facts(v, base);
  d.fresh = model::encode_facts(v, fresh);
  d.fresh_paraphrases = encode_paraphrases(v, fresh);
  if (d.corpus.splits.count("control")) {
    const auto control = d.corpus.split("control");
    d.control = model::encode_facts(v, control);
    d.control_paraphrases = encode_paraphrases(v, control);
  }
  return d;
}

FoldData make_fold(const RunConfig& cfg, std::size_t fold) {
  auto gen = cfg.corpus.generation;
  gen.n_control = cfg.control_round ? cfg.corpus.n_control : 0;
  const auto seed = fold_seed(cfg, fold);
  return fold_from_corpus(corpus::generate_corpus(cfg.corpus.n_base, cfg.corpus.n_new, seed, gen), fold, seed);
}

model::ModelConfig model_config_for(const RunConfig& cfg, const corpus::FactCorpus& c, std::uint64_t seed) {
  auto mc = cfg.model;
  mc.vocab_size = c.vocabulary.size();
  mc.seed = derive_seed(seed, kSeedModel);
  std::size_t longest = 0;
  for (const auto& r : c.records) {
    longest = std::max(longest, r.surface.size());
    for (const auto& p : r.paraphrases) longest = std::max(longest, p.size());
  }
  if (longest - 1 > mc.max_seq) fail(ErrorCode::InvalidConfig, "max_seq is shorter than the longest surface");
  mc.validate();
  return mc;
}

BaselineResult run_baseline_fold(const RunConfig& cfg, const FoldData& data) {
  const auto mc = model_config_for(cfg, data.corpus, data.seed);
  BaselineResult r{model::Model(mc), tracking::make_profile(mc, cfg.tracking), {}, 0};
  plasticity::TrainHooks hooks;
  hooks.on_step = [&](const model::ForwardPass<float>& f, const model::BackwardPass<float>& b) {
    tracking::accumulate(r.profile, f, b);
  };
  r.training = plasticity::train(r.model, data.base, seeded(cfg.baseline, data.seed), nullptr, hooks);
  r.accuracy = r.training.epochs.back().accuracy;
  if (!r.training.converged)
    fail(ErrorCode::NonConvergence, "baseline reached " + std::to_string(r.accuracy) + " after " +
                                        std::to_string(r.training.epochs_to_converge) + " epochs");
  return r;
}

nlohmann::json to_json(const ArmResult& a) {
  return {{"arm", a.arm},
          {"scenario", a.scenario},
          {"n_facts", a.n_facts},
          {"selection_n", a.selection_n},
          {"old_acc", a.old_acc},
          {"new_acc", a.new_acc},
          {"gen_acc", a.gen_acc},
          {"harmonic_mean", a.harmonic},
          {"epochs_to_converge", a.epochs},
          {"converged", a.converged},
          {"checkpoint", a.checkpoint},
          {"training", plasticity::to_json(a.training)}};
}

ArmResult run_arm(const RunConfig& cfg, const UpdateTask& task, const ArmSpec& arm,
                  const tracking::HistoricalProfile& profile, std::uint64_t seed, model::Model* out_model) {
  if (!task.start) fail(ErrorCode::InvalidArgument, "update task without a start model");
  ArmResult r;
  r.arm = arm.name;
  r.scenario = task.scenario;
  r.n_facts = task.facts.size();
  const auto arm_seed = derive_seed(seed, kSeedArm);
  model::Model m = *task.start;
  m.reset_optimizer();
  switch (arm.kind) {
    case ArmSpec::Kind::Full:
      r.selection_n = m.config().total_neurons();
      r.training = plasticity::train(m, task.facts, seeded(cfg.update, seed));
      break;
    case ArmSpec::Kind::Lora: {
      auto lora = cfg.lora;
      lora.seed = derive_seed(arm_seed, lora.seed);
      auto res = plasticity::train_lora(m, task.facts, lora, seeded(cfg.lora_train, seed));
      r.training = std::move(res.report);
      m = std::move(res.merged);
      break;
    }
    case ArmSpec::Kind::Targeted: {
      plasticity::SelectionInputs in;
      in.profile = &profile;
      in.seed = arm_seed;
      in.n_stubborn = cfg.n_stubborn;
      std::optional<tracking::GradientSnapshot> snap;
      if (arm.strategy == plasticity::Strategy::Candidate || arm.strategy == plasticity::Strategy::Specific) {
        snap = tracking::snapshot_gradients(m, task.facts, cfg.tracking, cfg.targeted.batch_size,
                                            cfg.targeted.loss_mode);
        in.snapshot = &*snap;
      }
      const auto target = plasticity::select_neurons(arm.strategy, arm.selection_n, m.config(), in);
      r.selection_n = target.neurons.size();
      r.training = plasticity::train_targeted(m, task.facts, target, seeded(cfg.targeted, seed), {}, cfg.untracked);
      break;
    }
  }
  r.epochs = r.training.epochs_to_converge;
  r.converged = r.training.converged;
  r.new_acc = acc_or_zero(m, task.facts);
  r.old_acc = acc_or_zero(m, task.old_facts);
  r.gen_acc = acc_or_zero(m, task.paraphrases);
  r.harmonic = harmonic_mean(r.old_acc, r.new_acc, r.gen_acc);
  r.checkpoint = model::fingerprint(m);
  if (out_model) *out_model = std::move(m);
  return r;
}

std::vector<ArmSpec> sweep_arms(const RunConfig& cfg, const model::ModelConfig& mc) {
  std::vector<ArmSpec> arms;
  const std::size_t total = mc.total_neurons();
  for (double f : cfg.sweep.fractions) {
    const auto n = static_cast<std::size_t>(std::llround(f * static_cast<double>(total)));
    for (auto s : cfg.sweep.strategies) {
      if (s == plasticity::Strategy::LotteryTicket || s == plasticity::Strategy::NonLottery) continue;
      ArmSpec a;
      a.kind = ArmSpec::Kind::Targeted;
      a.strategy = s;
      a.selection_n = s == plasticity::Strategy::Full ? total : n;
      a.name = std::string(plasticity::to_string(s)) + "@" + std::to_string(a.selection_n);
      arms.push_back(a);
    }
  }
  return arms;
}

std::vector<ArmResult> run_arms(const RunConfig& cfg, const UpdateTask& task, const std::vector<ArmSpec>& arms,
                                const tracking::HistoricalProfile& profile, std::uint64_t seed) {
  std::vector<ArmResult> out(arms.size());
  parallel_for(arms.size(), cfg.threads, [&](std::size_t i) { out[i] = run_arm(cfg, task, arms[i], profile, seed); });
  return out;
}

std::vector<EncodedFact> remembered(const model::Model& m, const std::vector<EncodedFact>& facts) {
  const auto hits = model::recall_facts(m, facts);
  std::vector<EncodedFact> out;
  for (std::size_t i = 0; i < facts.size(); ++i)
    if (hits[i]) out.push_back(facts[i]);
  return out;
}

DissonantSet make_dissonant_set(const FoldData& data, std::size_t n, std::uint64_t seed) {
  const auto& ids = data.corpus.splits.at("new");
  if (n > ids.size()) fail(ErrorCode::InvalidArgument, "more counterfacts requested than new facts");
  const std::vector<corpus::FactId> targets(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(n));
  DissonantSet d;
  d.records = corpus::make_counterfacts(data.corpus, targets, derive_seed(seed, kSeedDissonant));
  d.facts = model::encode_facts(data.corpus.vocabulary, d.records);
  d.paraphrases = encode_paraphrases(data.corpus.vocabulary, d.records);
  return d;
}

const ArmResult* FoldRun::find(const std::string& scenario, const std::string& arm) const {
  for (const auto& a : arms)
    if (a.scenario == scenario && a.arm == arm) return &a;
  return nullptr;
}

nlohmann::json to_json(const FoldRun& f) {
  nlohmann::json arms = nlohmann::json::array();
  for (const auto& a : f.arms) arms.push_back(to_json(a));
  return {{"fold", f.fold},
          {"corpus_fingerprint", f.corpus_fingerprint},
          {"baseline_checkpoint", f.baseline_checkpoint},
          {"profile_fingerprint", f.profile_fingerprint},
          {"nondissonant_checkpoint", f.nondissonant_checkpoint},
          {"baseline_accuracy", f.baseline_accuracy},
          {"baseline_epochs", f.baseline_epochs},
          {"remembered", f.remembered},
          {"arms", arms}};
}

FoldRun run_fold(const RunConfig& cfg, std::size_t fold, const PipelineOptions& opt) {
  const auto data = make_fold(cfg, fold);
  auto base = run_baseline_fold(cfg, data);
  FoldRun run;
  run.fold = fold;
  run.corpus_fingerprint = corpus::fingerprint(data.corpus);
  run.baseline_checkpoint = model::fingerprint(base.model);
  run.profile_fingerprint = tracking::fingerprint(base.profile);
  run.baseline_accuracy = base.accuracy;
  run.baseline_epochs = base.training.epochs_to_converge;

  const std::vector<ArmSpec> sweep = opt.sweep ? sweep_arms(cfg, base.model.config()) : std::vector<ArmSpec>{};
  std::vector<ArmSpec> extra;
  if (opt.lora) extra.push_back({"LoRA", ArmSpec::Kind::Lora, plasticity::Strategy::Full, 0});
  extra.insert(extra.end(), sweep.begin(), sweep.end());

  UpdateTask nd{"nondissonant", &base.model, data.fresh, data.fresh_paraphrases, data.base};
  model::Model nd_model = base.model;
  run.arms.push_back(run_arm(cfg, nd, {"FullFT", ArmSpec::Kind::Full}, base.profile, data.seed, &nd_model));
  for (auto& a : run_arms(cfg, nd, extra, base.profile, data.seed)) run.arms.push_back(std::move(a));
  run.nondissonant_checkpoint = model::fingerprint(nd_model);

  const auto rem = remembered(nd_model, data.base);
  run.remembered = rem.size();
  if (!opt.dissonant && !opt.control && !opt.scale) return run;
  if (rem.empty()) fail(ErrorCode::EmptyRememberedSet, "no base fact survived the non-dissonant stage");

  if (opt.dissonant) {
    const auto ds = make_dissonant_set(data, data.fresh.size(), data.seed);
    UpdateTask d{"dissonant", &nd_model, ds.facts, ds.paraphrases, rem};
    std::vector<ArmSpec> arms{{"FullFT", ArmSpec::Kind::Full}};
    if (opt.lora) arms.push_back({"LoRA", ArmSpec::Kind::Lora});
    if (cfg.sweep.dissonant) arms.insert(arms.end(), sweep.begin(), sweep.end());
    for (auto& a : run_arms(cfg, d, arms, base.profile, data.seed)) run.arms.push_back(std::move(a));
  }
  if (opt.control) {
    if (data.control.empty()) fail(ErrorCode::InvalidConfig, "control round needs corpus.n_control > 0");
    UpdateTask c{"control", &nd_model, data.control, data.control_paraphrases, rem};
    run.arms.push_back(run_arm(cfg, c, {"FullFT", ArmSpec::Kind::Full}, base.profile, data.seed));
  }
  if (opt.scale)
    for (auto n : cfg.contradiction_sizes) {
      const auto ds = make_dissonant_set(data, n, data.seed);
      UpdateTask s{"scale@" + std::to_string(n), &nd_model, ds.facts, ds.paraphrases, rem};
      std::vector<ArmSpec> arms{{"FullFT", ArmSpec::Kind::Full}};
      arms.insert(arms.end(), sweep.begin(), sweep.end());
      for (auto& a : run_arms(cfg, s, arms, base.profile, data.seed)) run.arms.push_back(std::move(a));
    }
  return run;
}

std::vector<Aggregate> aggregate(const std::vector<FoldRun>& folds) {
  std::vector<std::pair<std::string, std::string>> keys;
  for (const auto& f : folds)
    for (const auto& a : f.arms) {
      std::pair<std::string, std::string> k{a.scenario, a.arm};
      if (std::find(keys.begin(), keys.end(), k) == keys.end()) keys.push_back(k);
    }
  std::vector<Aggregate> out;
  for (const auto& [scenario, arm] : keys) {
    std::vector<double> o, n, g, e;
    for (const auto& f : folds)
      if (const auto* a = f.find(scenario, arm)) {
        o.push_back(a->old_acc);
        n.push_back(a->new_acc);
        g.push_back(a->gen_acc);
        e.push_back(static_cast<double>(a->epochs));
      }
    Aggregate ag;
    ag.scenario = scenario;
    ag.arm = arm;
    ag.folds = o.size();
    mean_std(o, ag.old_mean, ag.old_std);
    mean_std(n, ag.new_mean, ag.new_std);
    mean_std(g, ag.gen_mean, ag.gen_std);
    double esd = 0;
    mean_std(e, ag.epochs_mean, esd);
    ag.harmonic = harmonic_mean(ag.old_mean, ag.new_mean, ag.gen_mean);
    out.push_back(ag);
  }
  return out;
}

nlohmann::json make_report(const RunConfig& cfg, const std::string& stage, nlohmann::json body) {
  auto config = to_json(cfg);
  config.erase("out_dir");
  config.erase("threads");
  return {{"stage", stage},
          {"config_hash", config_hash(cfg)},
          {"config", config},
          {"body", std::move(body)},
          {"metadata", {{"generated_at", utc_now()}, {"threads", cfg.threads}}}};
}

std::string report_body_bytes(const nlohmann::json& report) {
  auto j = report;
  j.erase("metadata");
  return j.dump(2);
}

void write_json(const nlohmann::json& j, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) fail(ErrorCode::Io, "cannot write " + path.string());
  out << j.dump(2) << '\n';
  if (!out) fail(ErrorCode::Io, "write failed for " + path.string());
}

nlohmann::json read_json(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorCode::Io, "cannot read " + path.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::Io, path.string() + ": " + e.what());
  }
}

void write_tidy_csv(const std::vector<FoldRun>& folds, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) fail(ErrorCode::Io, "cannot write " + path.string());
  out << "fold,scenario,arm,n_facts,selection_n,metric,value\n";
  char buf[40];
  for (const auto& f : folds)
    for (const auto& a : f.arms) {
      const std::pair<const char*, double> metrics[] = {{"old", a.old_acc},
                                                        {"new", a.new_acc},
                                                        {"gen", a.gen_acc},
                                                        {"harmonic_mean", a.harmonic},
                                                        {"epochs", static_cast<double>(a.epochs)}};
      for (const auto& [name, v] : metrics) {
        std::snprintf(buf, sizeof buf, "%.17g", v);
        out << f.fold << ',' << a.scenario << ',' << a.arm << ',' << a.n_facts << ',' << a.selection_n << ',' << name
            << ',' << buf << '\n';
      }
    }
}

// ---------------------------------------------------------------------------

LotteryResult run_lottery(const RunConfig& cfg) {
  LotteryResult res;
  auto gen = cfg.corpus.generation;
  gen.n_control = 0;
  for (std::size_t s = 0; s < cfg.lottery.seeds; ++s) {
    const auto seed = derive_seed(cfg.seed, kSeedLottery + s);
    // Facts H (donor) and facts A come from disjoint splits of one draw.
    const auto c = corpus::generate_corpus(cfg.lottery.n_donor, cfg.lottery.n_facts, seed, gen);
    const auto mc = model_config_for(cfg, c, seed);
    const auto donor_facts = model::encode_facts(c.vocabulary, c.split("base"));
    const auto facts_a = model::encode_facts(c.vocabulary, c.split("new"));
    const model::Model fresh(mc);
    res.start_checkpoints.push_back(model::fingerprint(fresh));

    model::Model donor = fresh;
    auto profile = tracking::make_profile(mc, cfg.tracking);
    plasticity::TrainHooks hooks;
    hooks.on_step = [&](const model::ForwardPass<float>& f, const model::BackwardPass<float>& b) {
      tracking::accumulate(profile, f, b);
    };
    plasticity::train(donor, donor_facts, seeded(cfg.lottery.donor, seed), nullptr, hooks);

    std::vector<std::pair<std::string, plasticity::TargetSet>> targets;
    const std::size_t total = mc.total_neurons();
    for (double f : cfg.lottery.fractions) {
      const auto n = static_cast<std::size_t>(std::llround(f * static_cast<double>(total)));
      auto part = plasticity::lottery_partition(profile, n);
      targets.emplace_back("LotteryTicket", std::move(part.lottery));
      targets.emplace_back("NonLottery", std::move(part.non_lottery));
      if (cfg.lottery.random_arm) {
        plasticity::SelectionInputs in;
        in.seed = derive_seed(seed, kSeedArm);
        targets.emplace_back("Random", plasticity::select_neurons(plasticity::Strategy::Random, n, mc, in));
      }
    }
    std::vector<LotteryArm> arms(targets.size());
    parallel_for(targets.size(), cfg.threads, [&](std::size_t i) {
      model::Model m = fresh;
      const auto rep = plasticity::train_targeted(m, facts_a, targets[i].second, seeded(cfg.lottery.train, seed), {},
                                                  cfg.untracked);
      arms[i] = {s, targets[i].first, targets[i].second.selection_n, model::accuracy(m, facts_a),
                 rep.epochs_to_converge};
    });
    res.arms.insert(res.arms.end(), arms.begin(), arms.end());
  }
  return res;
}

nlohmann::json to_json(const LotteryResult& r) {
  nlohmann::json arms = nlohmann::json::array();
  for (const auto& a : r.arms)
    arms.push_back({{"seed_index", a.seed_index},
                    {"arm", a.arm},
                    {"selection_n", a.selection_n},
                    {"accuracy", a.accuracy},
                    {"epochs", a.epochs}});
  return {{"arms", arms}, {"start_checkpoints", r.start_checkpoints}};
}

// ---------------------------------------------------------------------------

ClassificationData build_classification_dataset(const corpus::FactCorpus& c,
                                                const std::vector<corpus::FactId>& candidate_ids,
                                                const model::Model& m, std::size_t n_per_class, std::size_t folds,
                                                std::uint64_t seed, const corpus::GenerationConfig& generation) {
  const auto candidates = c.select(candidate_ids);
  const auto enc = model::encode_facts(c.vocabulary, candidates);
  const auto hits = model::recall_facts(m, enc);
  std::vector<corpus::FactId> known;
  for (std::size_t i = 0; i < candidates.size(); ++i)
    if (hits[i]) known.push_back(candidates[i].triple.id);
  if (known.size() < n_per_class)
    fail(ErrorCode::InsufficientKnownFacts,
         "model recalls " + std::to_string(known.size()) + " facts, need " + std::to_string(n_per_class));
  Rng rng(derive_seed(seed, 1));
  rng.shuffle(known);
  known.resize(n_per_class);
  std::sort(known.begin(), known.end());

  ClassificationData d;
  for (const auto& r : c.select(known)) {
    d.records.push_back(r);
    d.labels.push_back(dissonance::ClassLabel::Known);
    d.groups.push_back(r.triple.id);
  }
  for (auto& r : corpus::make_counterfacts(c, known, derive_seed(seed, 2))) {
    d.groups.push_back(*r.contradicts);
    d.labels.push_back(dissonance::ClassLabel::Dissonant);
    d.records.push_back(std::move(r));
  }
  for (auto& r : corpus::make_novel_facts(n_per_class, derive_seed(seed, 3), generation)) {
    d.groups.push_back(r.triple.id);
    d.labels.push_back(dissonance::ClassLabel::Novel);
    d.records.push_back(std::move(r));
  }
  d.encoded = model::encode_facts(c.vocabulary, d.records);
  std::vector<corpus::FactId> group_ids;
  for (std::size_t i = 0; i < d.records.size(); ++i)
    if (d.labels[i] != dissonance::ClassLabel::Dissonant) group_ids.push_back(d.groups[i]);
  d.plan = corpus::split_folds(group_ids, folds, derive_seed(seed, 4));
  return d;
}

dissonance::Dataset featurize(const ClassificationData& data, const model::Model& m,
                              const dissonance::FeatureConfig& fc, const tracking::HistoricalProfile* profile) {
  dissonance::Dataset ds;
  for (std::size_t i = 0; i < data.encoded.size(); ++i) {
    auto fv = dissonance::extract_features(m, data.encoded[i], fc, profile);
    if (ds.schema.empty()) ds.schema = std::move(fv.schema);
    ds.rows.push_back({std::move(fv.values), data.labels[i], data.records[i].triple.id, data.groups[i]});
  }
  return ds;
}

ClassificationResult run_classification(const RunConfig& cfg, const std::filesystem::path& out_dir) {
  const auto& p = cfg.classification;
  const auto data = make_fold(cfg, 0);
  ClassificationResult res;
  res.scenario = p.scenario;
  res.n_per_class = p.n_per_class;

  // The finetuned model is the fold-0 baseline. The pretrained stand-in is a
  // model trained on the disjoint new split, whose facts it then "knows".
  model::Model m(model_config_for(cfg, data.corpus, data.seed));
  tracking::HistoricalProfile profile;
  std::vector<corpus::FactId> candidates;
  if (p.scenario == Scenario::Finetuned) {
    auto base = run_baseline_fold(cfg, data);
    m = std::move(base.model);
    profile = std::move(base.profile);
    candidates = data.corpus.splits.at("base");
  } else {
    profile = tracking::make_profile(m.config(), cfg.tracking);
    plasticity::TrainHooks hooks;
    hooks.on_step = [&](const model::ForwardPass<float>& f, const model::BackwardPass<float>& b) {
      tracking::accumulate(profile, f, b);
    };
    const auto rep = plasticity::train(m, data.fresh, seeded(cfg.baseline, derive_seed(data.seed, kSeedClassify)),
                                       nullptr, hooks);
    if (!rep.converged) fail(ErrorCode::NonConvergence, "pretrained stand-in did not converge");
    candidates = data.corpus.splits.at("new");
  }
  res.model_checkpoint = model::fingerprint(m);
  const auto cseed = derive_seed(cfg.seed, kSeedClassify);
  const auto cd = build_classification_dataset(data.corpus, candidates, m, p.n_per_class, p.folds, cseed,
                                               cfg.corpus.generation);
  {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (std::size_t i = 0; i < cd.records.size(); ++i) {
      h = fnv1a(&cd.records[i].triple.id, sizeof(corpus::FactId), h);
      h = fnv1a(&cd.labels[i], sizeof(dissonance::ClassLabel), h);
    }
    res.dataset_fingerprint = hex64(h);
  }

  // Trace internals once per (magnitude, loss mode) and derive every cell from it.
  std::map<std::pair<int, int>, std::vector<dissonance::InternalTrace>> traces;
  auto traces_for = [&](const dissonance::FeatureConfig& fc) -> const std::vector<dissonance::InternalTrace>& {
    const std::pair<int, int> key{static_cast<int>(fc.magnitude), static_cast<int>(fc.loss_mode)};
    auto it = traces.find(key);
    if (it != traces.end()) return it->second;
    std::vector<dissonance::InternalTrace> t(cd.encoded.size());
    parallel_for(cd.encoded.size(), cfg.threads,
                 [&](std::size_t i) { t[i] = dissonance::trace_record(m, cd.encoded[i], fc.magnitude, fc.loss_mode); });
    return traces.emplace(key, std::move(t)).first->second;
  };
  auto dataset_for = [&](const dissonance::FeatureConfig& fc) {
    if (fc.source == dissonance::FeatureConfig::Source::Output) return featurize(cd, m, fc, nullptr);
    const auto& tr = traces_for(fc);
    dissonance::Dataset ds;
    for (std::size_t i = 0; i < tr.size(); ++i) {
      auto fv = dissonance::internal_features(tr[i], m.config(), fc, &profile);
      if (ds.schema.empty()) ds.schema = std::move(fv.schema);
      ds.rows.push_back({std::move(fv.values), cd.labels[i], cd.records[i].triple.id, cd.groups[i]});
    }
    return ds;
  };

  res.cells.resize(p.cells.size());
  for (std::size_t ci = 0; ci < p.cells.size(); ++ci) {
    const auto& cell = p.cells[ci];
    const auto ds = dataset_for(cell.features);
    auto& out = res.cells[ci];
    out.label = cell.features.label();
    out.classifier = std::string(dissonance::to_string(cell.classifier));
    out.dims = ds.schema.size();
    out.cv = dissonance::cross_validate(ds, cd.plan, cell.classifier, p.grid, derive_seed(cseed, 10 + ci));
    if (cell.classifier == dissonance::ClassifierKind::RandomForest) {
      dissonance::TrainingSet all;
      for (const auto& r : ds.rows) {
        all.x.push_back(r.values);
        all.y.push_back(r.label);
      }
      const auto fit = dissonance::search_and_fit(all, cell.classifier, p.grid, derive_seed(cseed, 200 + ci));
      out.importance = dissonance::feature_importance(fit.model, ds.schema);
    }
    if (!out_dir.empty()) {
      std::filesystem::create_directories(out_dir);
      std::string tag = out.label + "_" + out.classifier;
      std::replace(tag.begin(), tag.end(), '/', '_');
      std::replace(tag.begin(), tag.end(), '+', 'p');
      dissonance::write_confusion_csv(out.cv, out_dir / ("confusion_" + tag + ".csv"));
      if (out.importance) dissonance::write_importance_csv(*out.importance, ds.schema, out_dir / ("importance_" + tag + ".csv"));
      if (ci == p.baseline_cell) dissonance::write_dataset_csv(ds, out_dir / ("dataset_" + tag + ".csv"));
    }
    if (ci == p.baseline_cell) {
      for (std::size_t s = 0; s < p.shuffles; ++s) {
        auto shuffled = ds;
        std::vector<dissonance::ClassLabel> labels;
        for (const auto& r : shuffled.rows) labels.push_back(r.label);
        Rng rng(derive_seed(cseed, 1000 + s));
        rng.shuffle(labels);
        for (std::size_t i = 0; i < labels.size(); ++i) shuffled.rows[i].label = labels[i];
        res.shuffled_runs.push_back(
            dissonance::cross_validate(shuffled, cd.plan, cell.classifier, p.grid, derive_seed(cseed, 2000 + s))
                .accuracy_mean);
      }
      double sd = 0;
      mean_std(res.shuffled_runs, res.shuffled_accuracy, sd);
    }
  }
  dissonance::FeatureConfig out_fc;
  out_fc.source = dissonance::FeatureConfig::Source::Output;
  out_fc.output_kind = dissonance::OutputKind::Concat;
  res.output_dims = dissonance::output_dims(out_fc);
  return res;
}

nlohmann::json to_json(const ClassificationResult& r) {
  nlohmann::json cells = nlohmann::json::array();
  for (const auto& c : r.cells) {
    nlohmann::json j{{"features", c.label}, {"classifier", c.classifier}, {"dims", c.dims}, {"cv", dissonance::to_json(c.cv)}};
    if (c.importance)
      j["importance"] = {{"activations", c.importance->activations},
                         {"gradients", c.importance->gradients},
                         {"other", c.importance->other},
                         {"per_block", c.importance->per_block}};
    cells.push_back(j);
  }
  return {{"scenario", to_string(r.scenario)},
          {"scenario_note", r.scenario == Scenario::PretrainedLike
                                ? "pretrained stand-in: a model trained on a disjoint fact partition"
                                : "model finetuned on the known facts"},
          {"n_per_class", r.n_per_class},
          {"model_checkpoint", r.model_checkpoint},
          {"dataset_fingerprint", r.dataset_fingerprint},
          {"cells", cells},
          {"shuffled_accuracy", r.shuffled_accuracy},
          {"shuffled_runs", r.shuffled_runs},
          {"output_dims",
           {{"Feat1", r.output_dims.feat1},
            {"Feat2", r.output_dims.feat2},
            {"Feat3", r.output_dims.feat3},
            {"Concat", r.output_dims.concat},
            {"indicators", r.output_dims.indicators}}}};
}

// ---------------------------------------------------------------------------

std::vector<HistogramRow> stubborn_histogram(const tracking::HistoricalProfile& profile,
                                             const std::vector<std::size_t>& thresholds) {
  const model::NeuronSpace space(profile.model_config);
  std::vector<HistogramRow> rows;
  for (auto t : thresholds) {
    plasticity::SelectionInputs in;
    in.profile = &profile;
    const auto set = plasticity::select_neurons(plasticity::Strategy::Stubborn, t, profile.model_config, in);
    std::vector<std::size_t> counts(space.layers() * 4, 0);
    for (const auto& n : set.neurons) ++counts[n.layer * 4 + static_cast<std::size_t>(n.kind)];
    for (std::size_t l = 0; l < space.layers(); ++l)
      for (auto k : model::kTrackedKinds) rows.push_back({t, l, k, counts[l * 4 + static_cast<std::size_t>(k)]});
  }
  return rows;
}

void write_histogram_csv(const std::vector<HistogramRow>& rows, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) fail(ErrorCode::Io, "cannot write " + path.string());
  out << "threshold,block,kind,count\n";
  for (const auto& r : rows) out << r.threshold << ',' << r.block << ',' << model::to_string(r.kind) << ',' << r.count << '\n';
}

}  // namespace plab::harness
