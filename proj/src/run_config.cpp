#include <fstream>
#include <sstream>

#define TOML_EXCEPTIONS 1
#include <tomlplusplus/toml.hpp>

#include "plab/harness.hpp"
#include "plab/rng.hpp"

namespace plab::harness {
namespace {

constexpr std::array<std::pair<Stage, std::string_view>, 9> kStages{{
    {Stage::Baseline, "Baseline"},
    {Stage::NonDissonantUpdate, "NonDissonantUpdate"},
    {Stage::DissonantUpdate, "DissonantUpdate"},
    {Stage::ControlThirdRound, "ControlThirdRound"},
    {Stage::PlasticitySweep, "PlasticitySweep"},
    {Stage::ContradictionScale, "ContradictionScale"},
    {Stage::Lottery, "Lottery"},
    {Stage::Classification, "Classification"},
    {Stage::StubbornHistogram, "StubbornHistogram"},
}};

nlohmann::json generation_to_json(const corpus::GenerationConfig& g) {
  nlohmann::json rel = nlohmann::json::array();
  for (const auto& r : g.relations) rel.push_back({{"name", r.name}, {"templates", r.templates}});
  return {{"relations", rel},
          {"n_subjects", g.n_subjects},
          {"n_objects_per_relation", g.n_objects_per_relation},
          {"n_novel_subjects", g.n_novel_subjects},
          {"n_novel_objects_per_relation", g.n_novel_objects_per_relation},
          {"object_tokens", g.object_tokens},
          {"n_paraphrases", g.n_paraphrases},
          {"pool_seed", g.pool_seed},
          {"disjoint_subjects", g.disjoint_subjects}};
}

corpus::GenerationConfig generation_from_json(const nlohmann::json& j, corpus::GenerationConfig g) {
  if (j.contains("relations")) {
    g.relations.clear();
    for (const auto& r : j["relations"])
      g.relations.push_back({r.at("name").get<std::string>(), r.at("templates").get<std::vector<corpus::Template>>()});
  }
  g.n_subjects = j.value("n_subjects", g.n_subjects);
  g.n_objects_per_relation = j.value("n_objects_per_relation", g.n_objects_per_relation);
  g.n_novel_subjects = j.value("n_novel_subjects", g.n_novel_subjects);
  g.n_novel_objects_per_relation = j.value("n_novel_objects_per_relation", g.n_novel_objects_per_relation);
  g.object_tokens = j.value("object_tokens", g.object_tokens);
  g.n_paraphrases = j.value("n_paraphrases", g.n_paraphrases);
  g.pool_seed = j.value("pool_seed", g.pool_seed);
  g.disjoint_subjects = j.value("disjoint_subjects", g.disjoint_subjects);
  return g;
}

nlohmann::json merged(const nlohmann::json& defaults, const nlohmann::json& j, const char* key) {
  nlohmann::json out = defaults;
  if (j.contains(key)) out.update(j[key]);
  return out;
}

nlohmann::json cell_to_json(const ClassificationCell& c) {
  return {{"features", dissonance::to_json(c.features)}, {"classifier", dissonance::to_string(c.classifier)}};
}

std::vector<plasticity::Strategy> strategies_from_json(const nlohmann::json& j) {
  std::vector<plasticity::Strategy> out;
  for (const auto& s : j) out.push_back(plasticity::strategy_from_string(s.get<std::string>()));
  return out;
}

}  // namespace

std::string_view to_string(Stage s) {
  for (const auto& [k, v] : kStages)
    if (k == s) return v;
  return "?";
}

Stage stage_from_string(std::string_view s) {
  for (const auto& [k, v] : kStages)
    if (v == s) return k;
  fail(ErrorCode::InvalidConfig, "unknown stage " + std::string(s));
}

std::string_view to_string(Scenario s) { return s == Scenario::Finetuned ? "Finetuned" : "PretrainedLike"; }

std::vector<ClassificationCell> ClassificationParams::default_cells() {
  std::vector<ClassificationCell> cells;
  const std::pair<bool, bool> sources[] = {{true, false}, {false, true}, {true, true}};
  for (auto kind : {dissonance::ClassifierKind::LinearSVM, dissonance::ClassifierKind::RandomForest})
    for (auto [a, g] : sources)
      for (auto n : {dissonance::Normalization::Raw, dissonance::Normalization::Layer,
                     dissonance::Normalization::Historical}) {
        ClassificationCell c;
        c.features.activations = a;
        c.features.gradients = g;
        c.features.normalization = n;
        c.classifier = kind;
        cells.push_back(c);
      }
  for (auto kind : {dissonance::ClassifierKind::LinearSVM, dissonance::ClassifierKind::RandomForest}) {
    ClassificationCell c;
    c.features.source = dissonance::FeatureConfig::Source::Output;
    c.features.output_kind = dissonance::OutputKind::Concat;
    c.classifier = kind;
    cells.push_back(c);
  }
  return cells;
}

void RunConfig::validate() const {
  if (folds == 0) fail(ErrorCode::InvalidConfig, "folds must be positive");
  if (corpus.n_base == 0 || corpus.n_new == 0) fail(ErrorCode::InvalidConfig, "corpus needs base and new facts");
  for (double f : sweep.fractions)
    if (!(f > 0 && f <= 1)) fail(ErrorCode::InvalidConfig, "sweep fractions must be in (0, 1]");
  for (double f : lottery.fractions)
    if (!(f > 0 && f <= 0.5)) fail(ErrorCode::InvalidConfig, "lottery fractions must be in (0, 0.5]");
  for (double f : histogram_fractions)
    if (!(f > 0 && f <= 1)) fail(ErrorCode::InvalidConfig, "histogram fractions must be in (0, 1]");
  for (auto n : contradiction_sizes)
    if (n == 0 || n > corpus.n_new) fail(ErrorCode::InvalidConfig, "contradiction sizes must be in [1, n_new]");
  if (classification.cells.empty() || classification.baseline_cell >= classification.cells.size())
    fail(ErrorCode::InvalidConfig, "classification.baseline_cell out of range");
  if (classification.folds < 2) fail(ErrorCode::InvalidConfig, "classification needs at least two folds");
  if (lora.rank == 0) fail(ErrorCode::InvalidConfig, "lora rank must be at least 1");
  if (threads == 0) fail(ErrorCode::InvalidConfig, "threads must be positive");
  for (const auto* h : {&baseline, &update, &targeted, &lora_train, &lottery.donor, &lottery.train})
  {
    if (h->batch_size == 0 || h->max_epochs == 0) fail(ErrorCode::InvalidConfig, "batch_size and max_epochs must be positive");
    if (h->min_epochs > h->max_epochs) fail(ErrorCode::InvalidConfig, "min_epochs exceeds max_epochs");
  }
}

nlohmann::json to_json(const RunConfig& c) {
  nlohmann::json strategies = nlohmann::json::array();
  for (auto s : c.sweep.strategies) strategies.push_back(plasticity::to_string(s));
  nlohmann::json cells = nlohmann::json::array();
  for (const auto& cell : c.classification.cells) cells.push_back(cell_to_json(cell));
  auto mc = model::to_json(c.model);
  return {
      {"seed", c.seed},
      {"folds", c.folds},
      {"corpus",
       {{"n_base", c.corpus.n_base},
        {"n_new", c.corpus.n_new},
        {"n_control", c.corpus.n_control},
        {"generation", generation_to_json(c.corpus.generation)}}},
      {"model", mc},
      {"tracking", tracking::to_json(c.tracking)},
      {"train",
       {{"baseline", plasticity::to_json(c.baseline)},
        {"update", plasticity::to_json(c.update)},
        {"targeted", plasticity::to_json(c.targeted)},
        {"lora", plasticity::to_json(c.lora_train)}}},
      {"lora", plasticity::to_json(c.lora)},
      {"untracked", c.untracked == plasticity::UntrackedPolicy::Frozen ? "Frozen" : "Trainable"},
      {"n_stubborn", c.n_stubborn},
      {"sweep",
       {{"strategies", strategies},
        {"fractions", c.sweep.fractions},
        {"lora", c.sweep.lora},
        {"dissonant", c.sweep.dissonant}}},
      {"contradiction_sizes", c.contradiction_sizes},
      {"control_round", c.control_round},
      {"classification",
       {{"scenario", to_string(c.classification.scenario)},
        {"n_per_class", c.classification.n_per_class},
        {"folds", c.classification.folds},
        {"cells", cells},
        {"baseline_cell", c.classification.baseline_cell},
        {"shuffles", c.classification.shuffles},
        {"grid", dissonance::to_json(c.classification.grid)}}},
      {"lottery",
       {{"n_donor", c.lottery.n_donor},
        {"n_facts", c.lottery.n_facts},
        {"fractions", c.lottery.fractions},
        {"seeds", c.lottery.seeds},
        {"donor", plasticity::to_json(c.lottery.donor)},
        {"train", plasticity::to_json(c.lottery.train)},
        {"random_arm", c.lottery.random_arm}}},
      {"histogram_fractions", c.histogram_fractions},
      {"threads", c.threads},
      {"out_dir", c.out_dir.string()},
  };
}

RunConfig run_config_from_json(const nlohmann::json& j) {
  RunConfig c;
  try {
    const nlohmann::json d = to_json(c);
    c.seed = j.value("seed", c.seed);
    c.folds = j.value("folds", c.folds);
    if (j.contains("corpus")) {
      const auto& cj = j["corpus"];
      c.corpus.n_base = cj.value("n_base", c.corpus.n_base);
      c.corpus.n_new = cj.value("n_new", c.corpus.n_new);
      c.corpus.n_control = cj.value("n_control", c.corpus.n_control);
      if (cj.contains("generation")) c.corpus.generation = generation_from_json(cj["generation"], c.corpus.generation);
    }
    c.model = model::model_config_from_json(merged(d["model"], j, "model"));
    c.tracking = tracking::reduction_settings_from_json(merged(d["tracking"], j, "tracking"));
    if (j.contains("train")) {
      const auto& t = j["train"];
      if (t.contains("baseline")) c.baseline = plasticity::train_hyper_from_json(t["baseline"], c.baseline);
      if (t.contains("update")) c.update = plasticity::train_hyper_from_json(t["update"], c.update);
      if (t.contains("targeted")) c.targeted = plasticity::train_hyper_from_json(t["targeted"], c.targeted);
      if (t.contains("lora")) c.lora_train = plasticity::train_hyper_from_json(t["lora"], c.lora_train);
    }
    c.lora = plasticity::lora_config_from_json(merged(d["lora"], j, "lora"));
    if (j.contains("untracked")) {
      const auto u = j["untracked"].get<std::string>();
      if (u == "Frozen") c.untracked = plasticity::UntrackedPolicy::Frozen;
      else if (u == "Trainable") c.untracked = plasticity::UntrackedPolicy::Trainable;
      else fail(ErrorCode::InvalidConfig, "untracked must be Frozen or Trainable");
    }
    c.n_stubborn = j.value("n_stubborn", c.n_stubborn);
    if (j.contains("sweep")) {
      const auto& s = j["sweep"];
      if (s.contains("strategies")) c.sweep.strategies = strategies_from_json(s["strategies"]);
      c.sweep.fractions = s.value("fractions", c.sweep.fractions);
      c.sweep.lora = s.value("lora", c.sweep.lora);
      c.sweep.dissonant = s.value("dissonant", c.sweep.dissonant);
    }
    c.contradiction_sizes = j.value("contradiction_sizes", c.contradiction_sizes);
    c.control_round = j.value("control_round", c.control_round);
    if (j.contains("classification")) {
      const auto& cl = j["classification"];
      if (cl.contains("scenario")) {
        const auto s = cl["scenario"].get<std::string>();
        if (s == "Finetuned") c.classification.scenario = Scenario::Finetuned;
        else if (s == "PretrainedLike") c.classification.scenario = Scenario::PretrainedLike;
        else fail(ErrorCode::InvalidConfig, "scenario must be Finetuned or PretrainedLike");
      }
      c.classification.n_per_class = cl.value("n_per_class", c.classification.n_per_class);
      c.classification.folds = cl.value("folds", c.classification.folds);
      if (cl.contains("cells")) {
        c.classification.cells.clear();
        for (const auto& cell : cl["cells"]) {
          ClassificationCell cc;
          if (cell.contains("features")) cc.features = dissonance::feature_config_from_json(cell["features"]);
          if (cell.contains("classifier"))
            cc.classifier = dissonance::classifier_kind_from_string(cell["classifier"].get<std::string>());
          c.classification.cells.push_back(cc);
        }
      }
      c.classification.baseline_cell = cl.value("baseline_cell", c.classification.baseline_cell);
      c.classification.shuffles = cl.value("shuffles", c.classification.shuffles);
      if (cl.contains("grid"))
        c.classification.grid = dissonance::search_grid_from_json(merged(d["classification"]["grid"], cl, "grid"));
    }
    if (j.contains("lottery")) {
      const auto& l = j["lottery"];
      c.lottery.n_donor = l.value("n_donor", c.lottery.n_donor);
      c.lottery.n_facts = l.value("n_facts", c.lottery.n_facts);
      c.lottery.fractions = l.value("fractions", c.lottery.fractions);
      c.lottery.seeds = l.value("seeds", c.lottery.seeds);
      if (l.contains("donor")) c.lottery.donor = plasticity::train_hyper_from_json(l["donor"], c.lottery.donor);
      if (l.contains("train")) c.lottery.train = plasticity::train_hyper_from_json(l["train"], c.lottery.train);
      c.lottery.random_arm = l.value("random_arm", c.lottery.random_arm);
    }
    c.histogram_fractions = j.value("histogram_fractions", c.histogram_fractions);
    c.threads = j.value("threads", c.threads);
    if (j.contains("out_dir")) c.out_dir = j["out_dir"].get<std::string>();
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::InvalidConfig, std::string("config: ") + e.what());
  } catch (const Error& e) {
    if (e.code() == ErrorCode::InvalidConfig) throw;
    fail(ErrorCode::InvalidConfig, std::string("config: ") + e.what());
  }
  c.validate();
  return c;
}

nlohmann::json parse_config_text(const std::string& text, bool toml) {
  try {
    if (!toml) return nlohmann::json::parse(text);
    const toml::table tbl = toml::parse(text);
    std::ostringstream os;
    os << toml::json_formatter{tbl};
    return nlohmann::json::parse(os.str());
  } catch (const toml::parse_error& e) {
    fail(ErrorCode::InvalidConfig, std::string("TOML: ") + std::string(e.description()));
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::InvalidConfig, std::string("JSON: ") + e.what());
  }
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorCode::Io, "cannot read config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  const bool toml = path.extension() == ".toml";
  return run_config_from_json(parse_config_text(ss.str(), toml));
}

std::string config_hash(const RunConfig& c) {
  auto j = to_json(c);
  // Where results land and how many workers compute them do not change them.
  j.erase("out_dir");
  j.erase("threads");
  const auto s = j.dump();
  return hex64(fnv1a(s.data(), s.size()));
}

double harmonic_mean(double old_acc, double new_acc, double gen_acc) {
  if (old_acc <= 0 || new_acc <= 0 || gen_acc <= 0) return 0.0;
  return 3.0 / (1.0 / old_acc + 1.0 / new_acc + 1.0 / gen_acc);
}

int exit_code_for(ErrorCode code) {
  switch (code) {
    case ErrorCode::InvalidConfig:
    case ErrorCode::InvalidArgument:
      return 2;
    case ErrorCode::NonConvergence:
      return 3;
    case ErrorCode::Io:
    case ErrorCode::Version:
    case ErrorCode::StageGate:
      return 4;
    default:
      return 1;
  }
}

}  // namespace plab::harness
