// Command line front end: one subcommand per pipeline stage. Artifacts land
// under <out-dir>/fold<k>/ and stage reports under <out-dir>/reports/.
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>

#include <CLI11.hpp>

#include "plab/harness.hpp"

namespace fs = std::filesystem;
using namespace plab;
using harness::RunConfig;

namespace {

struct Paths {
  fs::path root;
  fs::path fold(std::size_t f) const { return root / ("fold" + std::to_string(f)); }
  fs::path corpus(std::size_t f) const { return fold(f) / "corpus.json"; }
  fs::path baseline(std::size_t f) const { return fold(f) / "baseline.ckpt"; }
  fs::path profile(std::size_t f) const { return fold(f) / "profile.bin"; }
  fs::path nondissonant(std::size_t f) const { return fold(f) / "nondissonant.ckpt"; }
  fs::path report(const std::string& stage) const { return root / "reports" / (stage + ".json"); }
};

std::vector<std::size_t> folds_of(const RunConfig& cfg, std::optional<std::size_t> only) {
  if (only) {
    if (*only >= cfg.folds) fail(ErrorCode::InvalidArgument, "fold index out of range");
    return {*only};
  }
  std::vector<std::size_t> f(cfg.folds);
  for (std::size_t i = 0; i < f.size(); ++i) f[i] = i;
  return f;
}

harness::FoldData load_fold(const RunConfig& cfg, const Paths& p, std::size_t f) {
  if (fs::exists(p.corpus(f))) return harness::fold_from_corpus(corpus::load_corpus(p.corpus(f)), f, harness::fold_seed(cfg, f));
  auto d = harness::make_fold(cfg, f);
  fs::create_directories(p.fold(f));
  corpus::save_corpus(d.corpus, p.corpus(f));
  return d;
}

model::Model need_checkpoint(const fs::path& path, const char* stage) {
  if (!fs::exists(path)) fail(ErrorCode::StageGate, std::string(stage) + " checkpoint missing: " + path.string());
  return model::load_checkpoint(path);
}

void emit(const RunConfig& cfg, const Paths& p, const std::string& stage, nlohmann::json body) {
  const auto path = p.report(stage);
  harness::write_json(harness::make_report(cfg, stage, std::move(body)), path);
  std::cout << "wrote " << path.string() << '\n';
}

nlohmann::json folds_body(const std::vector<harness::FoldRun>& runs) {
  nlohmann::json folds = nlohmann::json::array();
  for (const auto& r : runs) folds.push_back(harness::to_json(r));
  nlohmann::json aggs = nlohmann::json::array();
  for (const auto& a : harness::aggregate(runs))
    aggs.push_back({{"scenario", a.scenario},
                    {"arm", a.arm},
                    {"folds", a.folds},
                    {"old_mean", a.old_mean},
                    {"old_std", a.old_std},
                    {"new_mean", a.new_mean},
                    {"new_std", a.new_std},
                    {"gen_mean", a.gen_mean},
                    {"gen_std", a.gen_std},
                    {"epochs_mean", a.epochs_mean},
                    {"harmonic_mean", a.harmonic}});
  return {{"folds", folds}, {"aggregates", aggs}, {"std_convention", "population"}};
}

void cmd_gen_corpus(const RunConfig& cfg, const Paths& p, std::optional<std::size_t> only) {
  nlohmann::json folds = nlohmann::json::array();
  for (auto f : folds_of(cfg, only)) {
    auto d = harness::make_fold(cfg, f);
    fs::create_directories(p.fold(f));
    corpus::save_corpus(d.corpus, p.corpus(f));
    folds.push_back({{"fold", f},
                     {"corpus_fingerprint", corpus::fingerprint(d.corpus)},
                     {"records", d.corpus.records.size()},
                     {"vocabulary", d.corpus.vocabulary.size()}});
  }
  emit(cfg, p, "corpus", {{"folds", folds}});
}

void cmd_baseline(const RunConfig& cfg, const Paths& p, std::optional<std::size_t> only) {
  nlohmann::json folds = nlohmann::json::array();
  for (auto f : folds_of(cfg, only)) {
    const auto d = load_fold(cfg, p, f);
    const auto b = harness::run_baseline_fold(cfg, d);
    model::save_checkpoint(b.model, p.baseline(f));
    tracking::save_profile(b.profile, p.profile(f));
    tracking::export_profile_csv(b.profile, p.fold(f) / "profile.csv");
    folds.push_back({{"fold", f},
                     {"corpus_fingerprint", corpus::fingerprint(d.corpus)},
                     {"checkpoint", model::fingerprint(b.model)},
                     {"profile_fingerprint", tracking::fingerprint(b.profile)},
                     {"profile_steps", b.profile.steps},
                     {"accuracy", b.accuracy},
                     {"training", plasticity::to_json(b.training)}});
    std::cout << "fold " << f << ": baseline accuracy " << b.accuracy << " after " << b.training.epochs_to_converge
              << " epochs\n";
  }
  emit(cfg, p, "baseline", {{"folds", folds}});
}

struct BaselineArtifacts {
  harness::FoldData data;
  model::Model model;
  tracking::HistoricalProfile profile;
};

BaselineArtifacts load_baseline(const RunConfig& cfg, const Paths& p, std::size_t f) {
  auto data = load_fold(cfg, p, f);
  auto m = need_checkpoint(p.baseline(f), "baseline");
  if (!fs::exists(p.profile(f))) fail(ErrorCode::StageGate, "baseline profile missing: " + p.profile(f).string());
  auto loaded = tracking::load_profile(p.profile(f), cfg.tracking);
  if (loaded.settings_mismatch) std::cerr << "warning: profile reduction settings differ from the config\n";
  return {std::move(data), std::move(m), std::move(loaded.profile)};
}

/// Loads the non-dissonant checkpoint after checking it against the
/// fingerprint recorded by the update stage.
model::Model load_gated_nondissonant(const Paths& p, std::size_t f) {
  if (!fs::exists(p.report("nondissonant")))
    fail(ErrorCode::StageGate, "run the update stage first (no nondissonant report)");
  const auto rep = harness::read_json(p.report("nondissonant"));
  std::string expected;
  for (const auto& fr : rep.at("body").at("folds"))
    if (fr.at("fold").get<std::size_t>() == f) expected = fr.at("nondissonant_checkpoint").get<std::string>();
  if (expected.empty()) fail(ErrorCode::StageGate, "update report has no entry for fold " + std::to_string(f));
  auto m = need_checkpoint(p.nondissonant(f), "non-dissonant");
  if (model::fingerprint(m) != expected)
    fail(ErrorCode::StageGate, "non-dissonant checkpoint of fold " + std::to_string(f) + " does not match its report");
  return m;
}

harness::FoldRun fold_header(std::size_t f, const BaselineArtifacts& b) {
  harness::FoldRun r;
  r.fold = f;
  r.corpus_fingerprint = corpus::fingerprint(b.data.corpus);
  r.baseline_checkpoint = model::fingerprint(b.model);
  r.profile_fingerprint = tracking::fingerprint(b.profile);
  r.baseline_accuracy = model::accuracy(b.model, b.data.base);
  return r;
}

void cmd_update(const RunConfig& cfg, const Paths& p, std::optional<std::size_t> only) {
  std::vector<harness::FoldRun> runs;
  for (auto f : folds_of(cfg, only)) {
    const auto b = load_baseline(cfg, p, f);
    auto run = fold_header(f, b);
    harness::UpdateTask nd{"nondissonant", &b.model, b.data.fresh, b.data.fresh_paraphrases, b.data.base};
    model::Model nd_model = b.model;
    run.arms.push_back(harness::run_arm(cfg, nd, {"FullFT", harness::ArmSpec::Kind::Full}, b.profile, b.data.seed, &nd_model));
    if (cfg.sweep.lora)
      run.arms.push_back(harness::run_arm(cfg, nd, {"LoRA", harness::ArmSpec::Kind::Lora}, b.profile, b.data.seed));
    model::save_checkpoint(nd_model, p.nondissonant(f));
    run.nondissonant_checkpoint = model::fingerprint(nd_model);
    run.remembered = harness::remembered(nd_model, b.data.base).size();
    runs.push_back(std::move(run));
  }
  harness::write_tidy_csv(runs, p.root / "reports" / "nondissonant_tidy.csv");
  emit(cfg, p, "nondissonant", folds_body(runs));
}

void cmd_dissonant(const RunConfig& cfg, const Paths& p, std::optional<std::size_t> only) {
  std::vector<harness::FoldRun> runs;
  for (auto f : folds_of(cfg, only)) {
    const auto b = load_baseline(cfg, p, f);
    const auto nd_model = load_gated_nondissonant(p, f);
    auto run = fold_header(f, b);
    run.nondissonant_checkpoint = model::fingerprint(nd_model);
    const auto rem = harness::remembered(nd_model, b.data.base);
    run.remembered = rem.size();
    if (rem.empty()) fail(ErrorCode::EmptyRememberedSet, "fold " + std::to_string(f) + " remembers no base fact");
    const auto ds = harness::make_dissonant_set(b.data, b.data.fresh.size(), b.data.seed);
    harness::UpdateTask d{"dissonant", &nd_model, ds.facts, ds.paraphrases, rem};
    run.arms.push_back(harness::run_arm(cfg, d, {"FullFT", harness::ArmSpec::Kind::Full}, b.profile, b.data.seed));
    if (cfg.sweep.lora)
      run.arms.push_back(harness::run_arm(cfg, d, {"LoRA", harness::ArmSpec::Kind::Lora}, b.profile, b.data.seed));
    if (cfg.control_round) {
      if (b.data.control.empty()) fail(ErrorCode::InvalidConfig, "control round needs corpus.n_control > 0");
      harness::UpdateTask c{"control", &nd_model, b.data.control, b.data.control_paraphrases, rem};
      run.arms.push_back(harness::run_arm(cfg, c, {"FullFT", harness::ArmSpec::Kind::Full}, b.profile, b.data.seed));
    }
    runs.push_back(std::move(run));
  }
  harness::write_tidy_csv(runs, p.root / "reports" / "dissonant_tidy.csv");
  emit(cfg, p, "dissonant", folds_body(runs));
}

void cmd_sweep(const RunConfig& cfg, const Paths& p, std::optional<std::size_t> only) {
  std::vector<harness::FoldRun> runs;
  for (auto f : folds_of(cfg, only)) {
    const auto b = load_baseline(cfg, p, f);
    auto run = fold_header(f, b);
    const auto arms = harness::sweep_arms(cfg, b.model.config());
    harness::UpdateTask nd{"nondissonant", &b.model, b.data.fresh, b.data.fresh_paraphrases, b.data.base};
    for (auto& a : harness::run_arms(cfg, nd, arms, b.profile, b.data.seed)) run.arms.push_back(std::move(a));
    if (cfg.sweep.dissonant) {
      const auto nd_model = load_gated_nondissonant(p, f);
      run.nondissonant_checkpoint = model::fingerprint(nd_model);
      const auto rem = harness::remembered(nd_model, b.data.base);
      run.remembered = rem.size();
      if (rem.empty()) fail(ErrorCode::EmptyRememberedSet, "fold " + std::to_string(f) + " remembers no base fact");
      const auto ds = harness::make_dissonant_set(b.data, b.data.fresh.size(), b.data.seed);
      harness::UpdateTask d{"dissonant", &nd_model, ds.facts, ds.paraphrases, rem};
      for (auto& a : harness::run_arms(cfg, d, arms, b.profile, b.data.seed)) run.arms.push_back(std::move(a));
    }
    runs.push_back(std::move(run));
  }
  harness::write_tidy_csv(runs, p.root / "reports" / "sweep_tidy.csv");
  emit(cfg, p, "sweep", folds_body(runs));
}

void cmd_scale(const RunConfig& cfg, const Paths& p, std::optional<std::size_t> only, bool strategies) {
  std::vector<harness::FoldRun> runs;
  for (auto f : folds_of(cfg, only)) {
    const auto b = load_baseline(cfg, p, f);
    const auto nd_model = load_gated_nondissonant(p, f);
    auto run = fold_header(f, b);
    run.nondissonant_checkpoint = model::fingerprint(nd_model);
    const auto rem = harness::remembered(nd_model, b.data.base);
    run.remembered = rem.size();
    if (rem.empty()) fail(ErrorCode::EmptyRememberedSet, "fold " + std::to_string(f) + " remembers no base fact");
    std::vector<harness::ArmSpec> arms{{"FullFT", harness::ArmSpec::Kind::Full}};
    if (strategies) {
      const auto s = harness::sweep_arms(cfg, b.model.config());
      arms.insert(arms.end(), s.begin(), s.end());
    }
    for (auto n : cfg.contradiction_sizes) {
      const auto ds = harness::make_dissonant_set(b.data, n, b.data.seed);
      harness::UpdateTask t{"scale@" + std::to_string(n), &nd_model, ds.facts, ds.paraphrases, rem};
      for (auto& a : harness::run_arms(cfg, t, arms, b.profile, b.data.seed)) run.arms.push_back(std::move(a));
    }
    runs.push_back(std::move(run));
  }
  harness::write_tidy_csv(runs, p.root / "reports" / "scale_tidy.csv");
  auto body = folds_body(runs);
  body["sizes"] = cfg.contradiction_sizes;
  emit(cfg, p, "scale", body);
}

void cmd_lottery(const RunConfig& cfg, const Paths& p) {
  const auto r = harness::run_lottery(cfg);
  emit(cfg, p, "lottery", harness::to_json(r));
}

void cmd_classify(const RunConfig& cfg, const Paths& p) {
  const auto r = harness::run_classification(cfg, p.root / "classification");
  for (const auto& c : r.cells)
    std::cout << c.label << " " << c.classifier << ": accuracy " << c.cv.accuracy_mean << " (" << c.cv.accuracy_std
              << "), macro-F1 " << c.cv.f1_mean << '\n';
  emit(cfg, p, "classification", harness::to_json(r));
}

void cmd_histogram(const RunConfig& cfg, const Paths& p, std::optional<std::size_t> only) {
  const std::size_t f = only.value_or(0);
  if (!fs::exists(p.profile(f))) fail(ErrorCode::StageGate, "no profile for fold " + std::to_string(f) + "; run baseline");
  const auto profile = tracking::load_profile(p.profile(f)).profile;
  std::vector<std::size_t> thresholds;
  for (double x : cfg.histogram_fractions)
    thresholds.push_back(static_cast<std::size_t>(std::llround(x * static_cast<double>(profile.size()))));
  const auto rows = harness::stubborn_histogram(profile, thresholds);
  harness::write_histogram_csv(rows, p.root / "reports" / "stubborn_histogram.csv");
  nlohmann::json table = nlohmann::json::array();
  for (const auto& r : rows)
    table.push_back({{"threshold", r.threshold}, {"block", r.block}, {"kind", model::to_string(r.kind)}, {"count", r.count}});
  emit(cfg, p, "histogram", {{"fold", f}, {"profile", tracking::fingerprint(profile)}, {"rows", table}});
}

void cmd_report(const RunConfig& cfg, const Paths& p) {
  nlohmann::json summary = nlohmann::json::object();
  for (const char* stage : {"baseline", "nondissonant", "dissonant", "sweep", "scale", "lottery", "classification", "histogram"}) {
    if (!fs::exists(p.report(stage))) continue;
    const auto rep = harness::read_json(p.report(stage));
    if (rep.value("config_hash", "") != harness::config_hash(cfg))
      std::cerr << "warning: " << stage << " report was produced by a different config\n";
    const auto& body = rep.at("body");
    summary[stage] = body.contains("aggregates") ? body["aggregates"] : body;
  }
  if (summary.empty()) fail(ErrorCode::StageGate, "no stage reports under " + (p.root / "reports").string());
  emit(cfg, p, "summary", summary);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Dissonant and non-dissonant knowledge update experiments on a small transformer"};
  app.require_subcommand(1);
  std::string config_path, out_dir;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> threads, fold;
  bool scale_strategies = false;
  app.add_option("--config", config_path, "Run config (.toml or .json)");
  app.add_option("--seed", seed, "Override the config seed");
  app.add_option("--out-dir", out_dir, "Override the output directory");
  app.add_option("--threads", threads, "Worker threads for independent arms");

  const std::vector<std::pair<std::string, std::string>> commands{
      {"gen-corpus", "Generate and save the per-fold corpora"},
      {"baseline", "Train baselines and accumulate historical profiles"},
      {"update", "Non-dissonant update (full fine-tuning and LoRA)"},
      {"dissonant", "Dissonant update plus the control third round"},
      {"sweep", "Strategy x selection_n sweep on both update kinds"},
      {"scale", "Dissonant updates at each contradiction size"},
      {"lottery", "Lottery-ticket neuron experiment"},
      {"classify", "Dissonance-awareness classification grid"},
      {"histogram", "Stubborn-neuron distribution across blocks"},
      {"report", "Summarize every stage report in the output directory"},
  };
  std::map<std::string, CLI::App*> subs;
  for (const auto& [name, help] : commands) {
    auto* s = app.add_subcommand(name, help);
    if (name != "lottery" && name != "classify" && name != "report") s->add_option("--fold", fold, "Run a single fold");
    if (name == "scale") s->add_flag("--strategies", scale_strategies, "Also run the sweep strategies");
    subs[name] = s;
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    RunConfig cfg = config_path.empty() ? RunConfig{} : harness::load_run_config(config_path);
    if (seed) cfg.seed = *seed;
    if (threads) cfg.threads = *threads;
    if (!out_dir.empty()) cfg.out_dir = out_dir;
    cfg.validate();
    const Paths p{cfg.out_dir};
    fs::create_directories(p.root);

    if (subs["gen-corpus"]->parsed()) cmd_gen_corpus(cfg, p, fold);
    else if (subs["baseline"]->parsed()) cmd_baseline(cfg, p, fold);
    else if (subs["update"]->parsed()) cmd_update(cfg, p, fold);
    else if (subs["dissonant"]->parsed()) cmd_dissonant(cfg, p, fold);
    else if (subs["sweep"]->parsed()) cmd_sweep(cfg, p, fold);
    else if (subs["scale"]->parsed()) cmd_scale(cfg, p, fold, scale_strategies);
    else if (subs["lottery"]->parsed()) cmd_lottery(cfg, p);
    else if (subs["classify"]->parsed()) cmd_classify(cfg, p);
    else if (subs["histogram"]->parsed()) cmd_histogram(cfg, p, fold);
    else if (subs["report"]->parsed()) cmd_report(cfg, p);
    return 0;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return harness::exit_code_for(e.code());
  } catch (const fs::filesystem_error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
}
