#include "plab/corpus.hpp"

#include <algorithm>
#include <fstream>
#include <set>
#include <sstream>

#include "plab/error.hpp"
#include "plab/rng.hpp"

namespace plab::corpus {
namespace {

constexpr std::string_view kSubjectSlot = "{s}";
constexpr std::string_view kObjectSlot = "{o}";

std::vector<std::string> split_words(const std::string& s) {
  std::vector<std::string> out;
  std::istringstream in(s);
  for (std::string w; in >> w;) out.push_back(w);
  return out;
}

Template words(std::string_view s) { return split_words(std::string(s)); }

TokenSeq instantiate(const Template& tpl, const FactTriple& t) {
  TokenSeq out{std::string(kBos)};
  for (const auto& w : tpl) {
    if (w == kSubjectSlot) {
      for (auto& x : split_words(t.subject)) out.push_back(x);
    } else if (w == kObjectSlot) {
      for (auto& x : split_words(t.object)) out.push_back(x);
    } else {
      out.push_back(w);
    }
  }
  out.emplace_back(kEos);
  return out;
}

std::set<std::string> template_words(const std::vector<RelationSpec>& relations) {
  std::set<std::string> out;
  for (const auto& r : relations)
    for (const auto& tpl : r.templates)
      for (const auto& w : tpl)
        if (w != kSubjectSlot && w != kObjectSlot) out.insert(w);
  return out;
}

void validate(const GenerationConfig& config) {
  if (config.relations.empty()) fail(ErrorCode::InvalidConfig, "no relations");
  for (const auto& r : config.relations) {
    if (r.templates.empty()) fail(ErrorCode::InvalidConfig, "relation without templates: " + r.name);
    for (const auto& tpl : r.templates) {
      if (tpl.empty() || tpl.back() != kObjectSlot)
        fail(ErrorCode::InvalidConfig, "template must end with the object slot: " + r.name);
      if (std::count(tpl.begin(), tpl.end(), std::string(kSubjectSlot)) != 1)
        fail(ErrorCode::InvalidConfig, "template needs exactly one subject slot: " + r.name);
    }
  }
  if (config.object_tokens == 0) fail(ErrorCode::InvalidConfig, "object_tokens must be >= 1");
}

// Entity pools are a function of the config alone so that every corpus built
// from one config shares a vocabulary, whatever the sampling seed.
struct Pools {
  std::vector<std::string> subjects;
  std::map<std::string, std::vector<std::string>> objects;  // per relation
  std::vector<std::string> novel_subjects;
  std::map<std::string, std::vector<std::string>> novel_objects;
  std::vector<std::string> base_names;   // every base token in pool order
  std::vector<std::string> novel_names;  // every novel token in pool order
};

std::vector<std::string> make_objects(const std::vector<std::string>& names, std::size_t& cursor,
                                      std::size_t count, std::size_t tokens_per_object) {
  std::vector<std::string> out;
  for (std::size_t i = 0; i < count; ++i) {
    std::string obj;
    for (std::size_t t = 0; t < tokens_per_object; ++t) {
      if (t) obj += ' ';
      obj += names.at(cursor++);
    }
    out.push_back(obj);
  }
  return out;
}

Pools build_pools(const GenerationConfig& config) {
  validate(config);
  const auto tw = template_words(config.relations);
  const std::vector<std::string> avoid(tw.begin(), tw.end());
  const std::size_t n_rel = config.relations.size();

  Pools p;
  const std::size_t base_count =
      config.n_subjects + n_rel * config.n_objects_per_relation * config.object_tokens;
  p.base_names = syllable_names(base_count, derive_seed(config.pool_seed, 1), false, avoid);
  std::size_t cursor = 0;
  p.subjects.assign(p.base_names.begin(), p.base_names.begin() + config.n_subjects);
  cursor = config.n_subjects;
  for (const auto& r : config.relations)
    p.objects[r.name] = make_objects(p.base_names, cursor, config.n_objects_per_relation, config.object_tokens);

  const std::size_t novel_count =
      config.n_novel_subjects + n_rel * config.n_novel_objects_per_relation * config.object_tokens;
  p.novel_names = syllable_names(novel_count, derive_seed(config.pool_seed, 2), true, avoid);
  p.novel_subjects.assign(p.novel_names.begin(), p.novel_names.begin() + config.n_novel_subjects);
  cursor = config.n_novel_subjects;
  for (const auto& r : config.relations)
    p.novel_objects[r.name] =
        make_objects(p.novel_names, cursor, config.n_novel_objects_per_relation, config.object_tokens);
  return p;
}

Vocabulary build_vocabulary(const GenerationConfig& config, const Pools& pools) {
  std::vector<std::string> tokens{std::string(kPad), std::string(kBos), std::string(kEos)};
  for (const auto& w : template_words(config.relations)) tokens.push_back(w);
  for (const auto& n : pools.base_names) tokens.push_back(n);
  for (const auto& n : pools.novel_names) tokens.push_back(n);
  return Vocabulary(std::move(tokens));
}

FactRecord make_record(const FactTriple& triple, const RelationSpec& rel, Origin origin,
                       std::size_t n_paraphrases, Rng& rng) {
  FactRecord rec;
  rec.triple = triple;
  rec.origin = origin;
  rec.template_index = static_cast<std::size_t>(rng.below(rel.templates.size()));
  rec.surface = instantiate(rel.templates[rec.template_index], triple);
  std::vector<std::size_t> others;
  for (std::size_t i = 0; i < rel.templates.size(); ++i)
    if (i != rec.template_index) others.push_back(i);
  rng.shuffle(others);
  for (std::size_t i = 0; i < std::min(n_paraphrases, others.size()); ++i) {
    rec.paraphrase_templates.push_back(others[i]);
    rec.paraphrases.push_back(instantiate(rel.templates[others[i]], triple));
  }
  return rec;
}

const RelationSpec& relation_of(const std::vector<RelationSpec>& rels, const std::string& name) {
  for (const auto& r : rels)
    if (r.name == name) return r;
  fail(ErrorCode::InvalidArgument, "unknown relation: " + name);
}

std::vector<RelationSpec> relations_of(const FactCorpus& corpus) {
  std::vector<RelationSpec> out;
  for (const auto& [name, tpls] : corpus.templates) out.push_back({name, tpls});
  return out;
}

}  // namespace

std::string_view to_string(Origin o) {
  switch (o) {
    case Origin::Base: return "Base";
    case Origin::Counterfact: return "Counterfact";
    case Origin::Novel: return "Novel";
  }
  return "?";
}

Origin origin_from_string(std::string_view s) {
  if (s == "Base") return Origin::Base;
  if (s == "Counterfact") return Origin::Counterfact;
  if (s == "Novel") return Origin::Novel;
  fail(ErrorCode::InvalidArgument, "bad origin: " + std::string(s));
}

TokenSeq FactRecord::object_tokens() const { return split_words(triple.object); }

TokenSeq FactRecord::prompt() const {
  const std::size_t n_obj = object_tokens().size();
  // surface = prompt + object + EOS
  return TokenSeq(surface.begin(), surface.end() - static_cast<std::ptrdiff_t>(n_obj + 1));
}

std::vector<RelationSpec> GenerationConfig::default_relations() {
  return {
      {"capital",
       {words("the capital of {s} is {o}"), words("{s} has its capital at {o}"),
        words("the seat of {s} is {o}"), words("{s} is governed from {o}")}},
      {"language",
       {words("the language of {s} is {o}"), words("people in {s} speak {o}"),
        words("the mother tongue of {s} is {o}"), words("{s} communicates in {o}")}},
      {"occupation",
       {words("{s} works as a {o}"), words("the profession of {s} is {o}"),
        words("by trade {s} is a {o}"), words("{s} earns a living as a {o}")}},
      {"instrument",
       {words("{s} plays the {o}"), words("the instrument of {s} is the {o}"),
        words("{s} performs on the {o}"), words("{s} is known for playing the {o}")}},
      {"birthplace",
       {words("{s} was born in {o}"), words("the birthplace of {s} is {o}"),
        words("{s} comes from {o}"), words("{s} grew up in {o}")}},
      {"employer",
       {words("{s} is employed by {o}"), words("the employer of {s} is {o}"),
        words("{s} works for {o}"), words("{s} draws a salary from {o}")}},
      {"religion",
       {words("the religion of {s} is {o}"), words("{s} follows {o}"),
        words("{s} practices {o}"), words("the faith of {s} is {o}")}},
      {"genre",
       {words("{s} is famous for {o}"), words("the genre of {s} is {o}"),
        words("{s} specializes in {o}"), words("{s} is associated with {o}")}},
  };
}

Vocabulary::Vocabulary(std::vector<std::string> tokens) : tokens_(std::move(tokens)) {
  for (std::size_t i = 0; i < tokens_.size(); ++i) {
    auto [it, inserted] = index_.emplace(tokens_[i], static_cast<TokenId>(i));
    if (!inserted) fail(ErrorCode::InvalidArgument, "duplicate vocabulary token: " + tokens_[i]);
  }
}

TokenId Vocabulary::id(std::string_view token) const {
  auto it = index_.find(std::string(token));
  if (it == index_.end()) fail(ErrorCode::UnknownToken, std::string(token));
  return it->second;
}

bool Vocabulary::contains(std::string_view token) const { return index_.contains(std::string(token)); }

const std::string& Vocabulary::token(TokenId id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size())
    fail(ErrorCode::UnknownToken, "id " + std::to_string(id));
  return tokens_[static_cast<std::size_t>(id)];
}

const FactRecord& FactCorpus::find(FactId id) const {
  for (const auto& r : records)
    if (r.triple.id == id) return r;
  fail(ErrorCode::InvalidArgument, "no record with id " + std::to_string(id));
}

std::vector<FactRecord> FactCorpus::select(const std::vector<FactId>& ids) const {
  std::unordered_map<FactId, const FactRecord*> by_id;
  for (const auto& r : records) by_id[r.triple.id] = &r;
  std::vector<FactRecord> out;
  out.reserve(ids.size());
  for (auto id : ids) {
    auto it = by_id.find(id);
    if (it == by_id.end()) fail(ErrorCode::InvalidArgument, "no record with id " + std::to_string(id));
    out.push_back(*it->second);
  }
  return out;
}

std::vector<FactRecord> FactCorpus::split(const std::string& name) const {
  auto it = splits.find(name);
  if (it == splits.end()) fail(ErrorCode::InvalidArgument, "no split named " + name);
  return select(it->second);
}

std::vector<FactId> FoldPlan::fold(std::size_t i) const {
  std::vector<FactId> out;
  for (const auto& [id, f] : assignments)
    if (f == i) out.push_back(id);
  return out;
}

std::vector<std::size_t> FoldPlan::sizes() const {
  std::vector<std::size_t> out(k, 0);
  for (const auto& [id, f] : assignments) ++out.at(f);
  return out;
}

std::vector<std::string> syllable_names(std::size_t n, std::uint64_t seed, bool novel,
                                        const std::vector<std::string>& avoid) {
  const std::string consonants = novel ? "glnrsvz" : "bdfkmpt";
  const std::string vowels = novel ? "eiu" : "ao";
  std::vector<std::string> syllables;
  for (char c : consonants)
    for (char v : vowels) syllables.push_back(std::string{c, v});

  // 2-4 syllables; cap well below the combinatorial space to stay fast.
  std::size_t space = 0;
  for (std::size_t len = 2, p = syllables.size() * syllables.size(); len <= 4; ++len, p *= syllables.size())
    space += p;
  if (n + avoid.size() > space / 2) fail(ErrorCode::PoolExhausted, "name space too small for " + std::to_string(n));

  std::set<std::string> seen(avoid.begin(), avoid.end());
  std::vector<std::string> out;
  out.reserve(n);
  Rng rng(seed);
  while (out.size() < n) {
    const std::size_t len = 2 + static_cast<std::size_t>(rng.below(3));
    std::string name;
    for (std::size_t i = 0; i < len; ++i) name += syllables[rng.below(syllables.size())];
    if (seen.insert(name).second) out.push_back(name);
  }
  return out;
}

FactCorpus generate_corpus(std::size_t n_base, std::size_t n_new, std::uint64_t seed,
                           const GenerationConfig& config) {
  if (n_base == 0 || n_new == 0) fail(ErrorCode::InvalidArgument, "n_base and n_new must be >= 1");
  const Pools pools = build_pools(config);

  const std::size_t n_total = n_base + n_new + config.n_control;
  const std::size_t n_pairs = pools.subjects.size() * config.relations.size();
  if (n_total > n_pairs)
    fail(ErrorCode::PoolExhausted, "need " + std::to_string(n_total) + " distinct (subject, relation) pairs, only " +
                                       std::to_string(n_pairs) + " exist");

  FactCorpus corpus;
  corpus.vocabulary = build_vocabulary(config, pools);
  for (const auto& r : config.relations) corpus.templates[r.name] = r.templates;
  corpus.object_pools = pools.objects;

  Rng rng(derive_seed(seed, 11));
  std::vector<std::size_t> pair_idx;
  if (config.disjoint_subjects) {
    // Base facts draw from one subject group, new and control facts from the other.
    const std::size_t n_rel = config.relations.size();
    const std::size_t n_subj = pools.subjects.size();
    const std::size_t n_base_subj =
        std::clamp<std::size_t>((n_subj * n_base + n_total / 2) / n_total, 1, n_subj - 1);
    if (n_base > n_base_subj * n_rel || n_total - n_base > (n_subj - n_base_subj) * n_rel)
      fail(ErrorCode::PoolExhausted, "subject groups too small for disjoint splits");
    const auto subj_order = rng.sample_without_replacement(n_subj, n_subj);
    auto draw = [&](std::size_t first, std::size_t count, std::size_t n) {
      for (auto k : rng.sample_without_replacement(count * n_rel, n))
        pair_idx.push_back(subj_order[first + k / n_rel] * n_rel + k % n_rel);
    };
    draw(0, n_base_subj, n_base);
    draw(n_base_subj, n_subj - n_base_subj, n_total - n_base);
  } else {
    pair_idx = rng.sample_without_replacement(n_pairs, n_total);
  }
  for (std::size_t i = 0; i < n_total; ++i) {
    const std::size_t subj = pair_idx[i] / config.relations.size();
    const auto& rel = config.relations[pair_idx[i] % config.relations.size()];
    const auto& objs = pools.objects.at(rel.name);
    FactTriple t{pools.subjects[subj], rel.name, objs[rng.below(objs.size())], static_cast<FactId>(i)};
    corpus.records.push_back(make_record(t, rel, Origin::Base, config.n_paraphrases, rng));
  }
  auto& base = corpus.splits["base"];
  auto& fresh = corpus.splits["new"];
  for (std::size_t i = 0; i < n_base; ++i) base.push_back(static_cast<FactId>(i));
  for (std::size_t i = n_base; i < n_base + n_new; ++i) fresh.push_back(static_cast<FactId>(i));
  if (config.n_control > 0) {
    auto& control = corpus.splits["control"];
    for (std::size_t i = n_base + n_new; i < n_total; ++i) control.push_back(static_cast<FactId>(i));
  }
  return corpus;
}

std::vector<FactRecord> make_counterfacts(const FactCorpus& corpus, const std::vector<FactId>& target_ids,
                                          std::uint64_t seed) {
  const auto relations = relations_of(corpus);
  Rng rng(derive_seed(seed, 21));
  std::vector<FactRecord> out;
  out.reserve(target_ids.size());
  for (FactId id : target_ids) {
    const FactRecord& target = corpus.find(id);
    const auto pool_it = corpus.object_pools.find(target.triple.relation);
    std::vector<std::string> alternatives;
    if (pool_it != corpus.object_pools.end())
      for (const auto& o : pool_it->second)
        if (o != target.triple.object) alternatives.push_back(o);
    if (alternatives.empty())
      fail(ErrorCode::NoAlternativeObject, "relation " + target.triple.relation + " has no alternative object");

    FactRecord cf;
    cf.triple = target.triple;
    cf.triple.object = alternatives[rng.below(alternatives.size())];
    cf.triple.id = kCounterfactIdBase + id;
    cf.origin = Origin::Counterfact;
    cf.contradicts = id;
    // Same template as the target so the two facts share their prompt exactly.
    const auto& rel = relation_of(relations, target.triple.relation);
    cf.template_index = target.template_index;
    cf.surface = instantiate(rel.templates[cf.template_index], cf.triple);
    cf.paraphrase_templates = target.paraphrase_templates;
    for (auto ti : cf.paraphrase_templates) cf.paraphrases.push_back(instantiate(rel.templates.at(ti), cf.triple));
    out.push_back(std::move(cf));
  }
  return out;
}

std::vector<FactRecord> make_novel_facts(std::size_t n, std::uint64_t seed, const GenerationConfig& config) {
  const Pools pools = build_pools(config);
  const std::size_t n_rel = config.relations.size();
  const std::size_t n_pairs = pools.novel_subjects.size() * n_rel;
  if (n > n_pairs) fail(ErrorCode::PoolExhausted, "novel pool supports " + std::to_string(n_pairs) + " facts");
  Rng rng(derive_seed(seed, 31));
  const auto pair_idx = rng.sample_without_replacement(n_pairs, n);
  std::vector<FactRecord> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto& rel = config.relations[pair_idx[i] % n_rel];
    const auto& objs = pools.novel_objects.at(rel.name);
    FactTriple t{pools.novel_subjects[pair_idx[i] / n_rel], rel.name, objs[rng.below(objs.size())],
                 kNovelIdBase + static_cast<FactId>(i)};
    out.push_back(make_record(t, rel, Origin::Novel, config.n_paraphrases, rng));
  }
  return out;
}

std::vector<TokenSeq> make_paraphrases(const FactCorpus& corpus, const FactRecord& record, std::size_t m,
                                       std::uint64_t seed) {
  if (m == 0) return {};
  auto it = corpus.templates.find(record.triple.relation);
  if (it == corpus.templates.end()) fail(ErrorCode::InvalidArgument, "unknown relation " + record.triple.relation);
  const auto& tpls = it->second;
  if (tpls.size() < m + 1)
    fail(ErrorCode::TemplateShortage, "relation " + record.triple.relation + " has " + std::to_string(tpls.size()) +
                                          " templates, need " + std::to_string(m + 1));
  std::vector<std::size_t> others;
  for (std::size_t i = 0; i < tpls.size(); ++i)
    if (i != record.template_index) others.push_back(i);
  Rng rng(derive_seed(seed, 41));
  rng.shuffle(others);
  std::vector<TokenSeq> out;
  for (std::size_t i = 0; i < m; ++i) out.push_back(instantiate(tpls[others[i]], record.triple));
  return out;
}

std::vector<TokenId> tokenize(const FactCorpus& corpus, const TokenSeq& text) {
  std::vector<TokenId> ids;
  ids.reserve(text.size());
  for (const auto& t : text) ids.push_back(corpus.vocabulary.id(t));
  return ids;
}

TokenSeq detokenize(const FactCorpus& corpus, const std::vector<TokenId>& ids) {
  TokenSeq out;
  out.reserve(ids.size());
  for (auto id : ids) out.push_back(corpus.vocabulary.token(id));
  return out;
}

FoldPlan split_folds(const std::vector<FactId>& ids, std::size_t k, std::uint64_t seed) {
  if (k < 2) fail(ErrorCode::InvalidArgument, "k must be >= 2");
  if (ids.size() < k)
    fail(ErrorCode::InvalidArgument, std::to_string(ids.size()) + " ids cannot fill " + std::to_string(k) + " folds");
  std::vector<FactId> order = ids;
  std::sort(order.begin(), order.end());
  if (std::adjacent_find(order.begin(), order.end()) != order.end())
    fail(ErrorCode::InvalidArgument, "duplicate ids in fold split");
  Rng rng(derive_seed(seed, 51));
  rng.shuffle(order);
  FoldPlan plan;
  plan.k = k;
  for (std::size_t i = 0; i < order.size(); ++i) plan.assignments[order[i]] = i % k;
  return plan;
}

nlohmann::json to_json(const FactCorpus& corpus) {
  using nlohmann::json;
  json records = json::array();
  for (const auto& r : corpus.records) {
    json rec{{"id", r.triple.id},
             {"subject", r.triple.subject},
             {"relation", r.triple.relation},
             {"object", r.triple.object},
             {"surface", r.surface},
             {"paraphrases", r.paraphrases},
             {"origin", to_string(r.origin)},
             {"template", r.template_index},
             {"paraphrase_templates", r.paraphrase_templates}};
    rec["contradicts"] = r.contradicts ? json(*r.contradicts) : json(nullptr);
    records.push_back(std::move(rec));
  }
  return json{{"vocabulary", corpus.vocabulary.tokens()},
              {"records", std::move(records)},
              {"templates", corpus.templates},
              {"object_pools", corpus.object_pools},
              {"splits", corpus.splits}};
}

FactCorpus corpus_from_json(const nlohmann::json& j) {
  FactCorpus c;
  c.vocabulary = Vocabulary(j.at("vocabulary").get<std::vector<std::string>>());
  for (const auto& rec : j.at("records")) {
    FactRecord r;
    r.triple = {rec.at("subject").get<std::string>(), rec.at("relation").get<std::string>(),
                rec.at("object").get<std::string>(), rec.at("id").get<FactId>()};
    r.surface = rec.at("surface").get<TokenSeq>();
    r.paraphrases = rec.at("paraphrases").get<std::vector<TokenSeq>>();
    r.origin = origin_from_string(rec.at("origin").get<std::string>());
    if (!rec.at("contradicts").is_null()) r.contradicts = rec.at("contradicts").get<FactId>();
    r.template_index = rec.value("template", std::size_t{0});
    if (rec.contains("paraphrase_templates"))
      r.paraphrase_templates = rec.at("paraphrase_templates").get<std::vector<std::size_t>>();
    c.records.push_back(std::move(r));
  }
  if (j.contains("templates")) c.templates = j.at("templates").get<std::map<std::string, std::vector<Template>>>();
  if (j.contains("object_pools"))
    c.object_pools = j.at("object_pools").get<std::map<std::string, std::vector<std::string>>>();
  if (j.contains("splits")) c.splits = j.at("splits").get<std::map<std::string, std::vector<FactId>>>();
  return c;
}

nlohmann::json to_json(const FoldPlan& plan) {
  nlohmann::json a = nlohmann::json::object();
  for (const auto& [id, f] : plan.assignments) a[std::to_string(id)] = f;
  return {{"k", plan.k}, {"assignments", a}};
}

FoldPlan fold_plan_from_json(const nlohmann::json& j) {
  FoldPlan p;
  p.k = j.at("k").get<std::size_t>();
  for (const auto& [key, f] : j.at("assignments").items()) p.assignments[std::stoll(key)] = f.get<std::size_t>();
  return p;
}

void save_corpus(const FactCorpus& corpus, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(ErrorCode::Io, "cannot write " + path.string());
  out << to_json(corpus).dump(1) << '\n';
  if (!out) fail(ErrorCode::Io, "write failed: " + path.string());
}

FactCorpus load_corpus(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorCode::Io, "cannot read " + path.string());
  try {
    return corpus_from_json(nlohmann::json::parse(in));
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::Io, "malformed corpus " + path.string() + ": " + e.what());
  }
}

std::string fingerprint(const FactCorpus& corpus) {
  const std::string s = to_json(corpus).dump();
  return hex64(fnv1a(s.data(), s.size()));
}

}  // namespace plab::corpus
