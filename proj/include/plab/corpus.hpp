#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include <json.hpp>

namespace plab::corpus {

using FactId = std::int64_t;
using TokenId = std::int32_t;
using TokenSeq = std::vector<std::string>;

inline constexpr std::string_view kPad = "PAD";
inline constexpr std::string_view kBos = "BOS";
inline constexpr std::string_view kEos = "EOS";
inline constexpr TokenId kPadId = 0;
inline constexpr TokenId kBosId = 1;
inline constexpr TokenId kEosId = 2;

// Derived records get ids in their own ranges so they never collide with
// generated base facts.
inline constexpr FactId kCounterfactIdBase = 1'000'000;
inline constexpr FactId kNovelIdBase = 2'000'000;

enum class Origin { Base, Counterfact, Novel };
std::string_view to_string(Origin o);
Origin origin_from_string(std::string_view s);

struct FactTriple {
  std::string subject;
  std::string relation;
  std::string object;  // space-separated when it spans several tokens
  FactId id = 0;
};

struct FactRecord {
  FactTriple triple;
  TokenSeq surface;  // BOS, prompt tokens, object tokens, EOS
  std::vector<TokenSeq> paraphrases;
  Origin origin = Origin::Base;
  std::optional<FactId> contradicts;
  std::size_t template_index = 0;
  std::vector<std::size_t> paraphrase_templates;

  TokenSeq object_tokens() const;
  /// Tokens before the object (BOS included).
  TokenSeq prompt() const;
};

/// A surface template: "{s}" and "{o}" mark the subject and object slots;
/// the object slot is always last.
using Template = std::vector<std::string>;

struct RelationSpec {
  std::string name;
  std::vector<Template> templates;
};

struct GenerationConfig {
  std::vector<RelationSpec> relations = default_relations();
  std::size_t n_subjects = 300;
  std::size_t n_objects_per_relation = 24;
  std::size_t n_novel_subjects = 200;
  std::size_t n_novel_objects_per_relation = 16;
  std::size_t object_tokens = 1;
  std::size_t n_paraphrases = 2;
  std::size_t n_control = 0;  // extra non-dissonant split for third-round controls
  std::uint64_t pool_seed = 1234;
  /// Base facts and new/control facts use disjoint subject groups.
  bool disjoint_subjects = false;

  static std::vector<RelationSpec> default_relations();
};

class Vocabulary {
 public:
  Vocabulary() = default;
  explicit Vocabulary(std::vector<std::string> tokens);

  TokenId id(std::string_view token) const;  // throws UnknownToken
  bool contains(std::string_view token) const;
  const std::string& token(TokenId id) const;
  std::size_t size() const { return tokens_.size(); }
  const std::vector<std::string>& tokens() const { return tokens_; }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, TokenId> index_;
};

struct FactCorpus {
  std::vector<FactRecord> records;
  Vocabulary vocabulary;
  std::map<std::string, std::vector<Template>> templates;
  std::map<std::string, std::vector<std::string>> object_pools;
  /// Named partitions of record ids, e.g. "base", "new", "control".
  std::map<std::string, std::vector<FactId>> splits;

  const FactRecord& find(FactId id) const;
  std::vector<FactRecord> select(const std::vector<FactId>& ids) const;
  std::vector<FactRecord> split(const std::string& name) const;
};

struct FoldPlan {
  std::size_t k = 0;
  std::map<FactId, std::size_t> assignments;

  std::vector<FactId> fold(std::size_t i) const;
  std::vector<std::size_t> sizes() const;
};

/// Entity names from a consonant-vowel syllable combinator (2-4 syllables).
/// Base and novel inventories share no letters, so their names never collide.
std::vector<std::string> syllable_names(std::size_t n, std::uint64_t seed, bool novel,
                                        const std::vector<std::string>& avoid = {});

FactCorpus generate_corpus(std::size_t n_base, std::size_t n_new, std::uint64_t seed,
                           const GenerationConfig& config = {});
std::vector<FactRecord> make_counterfacts(const FactCorpus& corpus,
                                          const std::vector<FactId>& target_ids,
                                          std::uint64_t seed);
std::vector<FactRecord> make_novel_facts(std::size_t n, std::uint64_t seed,
                                         const GenerationConfig& config = {});
std::vector<TokenSeq> make_paraphrases(const FactCorpus& corpus, const FactRecord& record,
                                       std::size_t m, std::uint64_t seed);

std::vector<TokenId> tokenize(const FactCorpus& corpus, const TokenSeq& text);
TokenSeq detokenize(const FactCorpus& corpus, const std::vector<TokenId>& ids);

FoldPlan split_folds(const std::vector<FactId>& ids, std::size_t k, std::uint64_t seed);

nlohmann::json to_json(const FactCorpus& corpus);
FactCorpus corpus_from_json(const nlohmann::json& j);
nlohmann::json to_json(const FoldPlan& plan);
FoldPlan fold_plan_from_json(const nlohmann::json& j);

void save_corpus(const FactCorpus& corpus, const std::filesystem::path& path);
FactCorpus load_corpus(const std::filesystem::path& path);

/// Stable content hash of the serialized corpus.
std::string fingerprint(const FactCorpus& corpus);

}  // namespace plab::corpus
