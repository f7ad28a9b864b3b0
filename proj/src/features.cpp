#include "plab/features.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>

#include "plab/error.hpp"

namespace plab::dissonance {
namespace {

constexpr double kHistoricalEps = 1e-8;

template <class E, std::size_t N>
std::string_view name_of(const std::array<std::pair<E, std::string_view>, N>& table, E v) {
  for (const auto& [k, s] : table)
    if (k == v) return s;
  return "?";
}

template <class E, std::size_t N>
E parse_of(const std::array<std::pair<E, std::string_view>, N>& table, std::string_view s, const char* what) {
  for (const auto& [k, n] : table)
    if (n == s) return k;
  fail(ErrorCode::InvalidConfig, std::string("unknown ") + what + " " + std::string(s));
}

constexpr std::array<std::pair<ClassLabel, std::string_view>, 3> kLabels{
    {{ClassLabel::Novel, "Novel"}, {ClassLabel::Known, "Known"}, {ClassLabel::Dissonant, "Dissonant"}}};
constexpr std::array<std::pair<Normalization, std::string_view>, 3> kNorms{
    {{Normalization::Raw, "Raw"}, {Normalization::Layer, "Layer"}, {Normalization::Historical, "Historical"}}};
constexpr std::array<std::pair<Stat, std::string_view>, 7> kStats{{{Stat::Mean, "mean"},
                                                                   {Stat::Std, "std"},
                                                                   {Stat::Min, "min"},
                                                                   {Stat::Max, "max"},
                                                                   {Stat::Q25, "q25"},
                                                                   {Stat::Q50, "q50"},
                                                                   {Stat::Q75, "q75"}}};
constexpr std::array<std::pair<OutputKind, std::string_view>, 4> kOutputs{{{OutputKind::Feat1, "Feat1"},
                                                                          {OutputKind::Feat2, "Feat2"},
                                                                          {OutputKind::Feat3, "Feat3"},
                                                                          {OutputKind::Concat, "Concat"}}};

Stat stat_from_string(std::string_view s) { return parse_of(kStats, s, "stat"); }

bool wants_output(OutputKind k, OutputKind part) { return k == OutputKind::Concat || k == part; }

std::vector<std::size_t> parts_of(const FeatureConfig& fc) {
  std::vector<std::size_t> p;
  if (fc.activations) p.push_back(0);
  if (fc.gradients) p.push_back(1);
  return p;
}

}  // namespace

std::string_view to_string(ClassLabel c) { return name_of(kLabels, c); }
ClassLabel class_label_from_string(std::string_view s) { return parse_of(kLabels, s, "class label"); }
std::string_view to_string(Normalization n) { return name_of(kNorms, n); }
std::string_view to_string(Stat s) { return name_of(kStats, s); }
std::string_view to_string(OutputKind k) { return name_of(kOutputs, k); }
Normalization normalization_from_string(std::string_view s) { return parse_of(kNorms, s, "normalization"); }
OutputKind output_kind_from_string(std::string_view s) { return parse_of(kOutputs, s, "output kind"); }

std::string FeatureConfig::label() const {
  if (source == Source::Output) return std::string(to_string(output_kind));
  std::string parts = activations && gradients ? "A+G" : activations ? "A" : "G";
  return parts + "/" + std::string(to_string(normalization));
}

nlohmann::json to_json(const FeatureConfig& c) {
  nlohmann::json stats = nlohmann::json::array();
  for (auto s : c.stats) stats.push_back(to_string(s));
  return {{"source", c.source == FeatureConfig::Source::Internal ? "Internal" : "Output"},
          {"activations", c.activations},
          {"gradients", c.gradients},
          {"normalization", to_string(c.normalization)},
          {"stats", stats},
          {"magnitude", c.magnitude == tracking::Magnitude::Absolute ? "Absolute" : "Signed"},
          {"output_kind", to_string(c.output_kind)},
          {"n_last", c.n_last},
          {"top_k", c.top_k},
          {"n_bins", c.n_bins},
          {"indicators", c.indicators},
          {"loss_mode", c.loss_mode == model::LossMode::AllTokens ? "AllTokens" : "ObjectOnly"}};
}

FeatureConfig feature_config_from_json(const nlohmann::json& j) {
  FeatureConfig c;
  if (j.contains("source")) {
    const auto s = j["source"].get<std::string>();
    if (s == "Internal") c.source = FeatureConfig::Source::Internal;
    else if (s == "Output") c.source = FeatureConfig::Source::Output;
    else fail(ErrorCode::InvalidConfig, "feature source must be Internal or Output");
  }
  c.activations = j.value("activations", c.activations);
  c.gradients = j.value("gradients", c.gradients);
  if (j.contains("normalization")) c.normalization = normalization_from_string(j["normalization"].get<std::string>());
  if (j.contains("stats")) {
    c.stats.clear();
    for (const auto& s : j["stats"]) c.stats.push_back(stat_from_string(s.get<std::string>()));
  }
  if (j.contains("magnitude")) {
    const auto m = j["magnitude"].get<std::string>();
    if (m == "Absolute") c.magnitude = tracking::Magnitude::Absolute;
    else if (m == "Signed") c.magnitude = tracking::Magnitude::Signed;
    else fail(ErrorCode::InvalidConfig, "magnitude must be Absolute or Signed");
  }
  if (j.contains("output_kind")) c.output_kind = output_kind_from_string(j["output_kind"].get<std::string>());
  c.n_last = j.value("n_last", c.n_last);
  c.top_k = j.value("top_k", c.top_k);
  c.n_bins = j.value("n_bins", c.n_bins);
  c.indicators = j.value("indicators", c.indicators);
  if (j.contains("loss_mode"))
    c.loss_mode = j["loss_mode"].get<std::string>() == "ObjectOnly" ? model::LossMode::ObjectOnly
                                                                    : model::LossMode::AllTokens;
  if (c.source == FeatureConfig::Source::Internal && !c.activations && !c.gradients)
    fail(ErrorCode::InvalidConfig, "internal features need activations or gradients");
  if (c.n_bins == 0) fail(ErrorCode::InvalidConfig, "n_bins must be positive");
  return c;
}

double quantile(std::vector<double> v, double q) {
  if (v.empty()) fail(ErrorCode::EmptyInput, "quantile of an empty vector");
  std::sort(v.begin(), v.end());
  const double pos = q * static_cast<double>(v.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, v.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return v[lo] + (v[hi] - v[lo]) * frac;
}

std::vector<double> summary_stats(const std::vector<double>& v, const std::vector<Stat>& stats) {
  if (v.empty()) fail(ErrorCode::EmptyInput, "statistics of an empty vector");
  std::vector<double> sorted(v);
  std::sort(sorted.begin(), sorted.end());
  const double n = static_cast<double>(v.size());
  double mean = 0;
  for (double x : v) mean += x;
  mean /= n;
  double ss = 0;
  for (double x : v) ss += (x - mean) * (x - mean);
  auto q = [&](double p) {
    const double pos = p * (n - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
    return sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - static_cast<double>(lo));
  };
  std::vector<double> out;
  out.reserve(stats.size());
  for (auto s : stats) {
    switch (s) {
      case Stat::Mean: out.push_back(mean); break;
      case Stat::Std: out.push_back(std::sqrt(ss / n)); break;
      case Stat::Min: out.push_back(sorted.front()); break;
      case Stat::Max: out.push_back(sorted.back()); break;
      case Stat::Q25: out.push_back(q(0.25)); break;
      case Stat::Q50: out.push_back(q(0.5)); break;
      case Stat::Q75: out.push_back(q(0.75)); break;
    }
  }
  return out;
}

Schema internal_schema(const model::ModelConfig& config, const FeatureConfig& fc) {
  Schema s;
  for (std::size_t l = 0; l < config.n_layers; ++l)
    for (auto k : model::kTrackedKinds)
      for (auto part : parts_of(fc))
        for (auto st : fc.stats) {
          FeatureInfo f;
          f.group = part == 0 ? "A" : "G";
          f.block = static_cast<int>(l);
          f.kind = std::string(model::to_string(k));
          f.stat = std::string(to_string(st));
          f.name = "b" + std::to_string(l) + "." + f.kind + "." + f.group + "." + f.stat;
          s.push_back(std::move(f));
        }
  return s;
}

InternalTrace trace_record(const model::Model& m, const model::EncodedFact& fact, tracking::Magnitude magnitude,
                           model::LossMode loss_mode) {
  const std::span<const model::EncodedFact> one(&fact, 1);
  const auto lb = model::make_lm_batch(one, loss_mode);
  const auto fwd = m.forward(lb.inputs);
  const auto bwd = m.backward(fwd, lb.targets, lb.mask);
  // Read the position that predicts the final object token; the last input
  // position only predicts EOS.
  std::vector<std::size_t> query = fwd.lengths;
  for (auto& n : query) n = n > 1 ? n - 1 : n;
  InternalTrace tr;
  const std::size_t layers = m.config().n_layers;
  tr.raw.resize(layers * 8);
  tr.layer.resize(layers * 8);
  for (std::size_t l = 0; l < layers; ++l)
    for (auto k : model::kTrackedKinds) {
      const std::size_t base = (l * 4 + static_cast<std::size_t>(k)) * 2;
      const auto a = tracking::to_tensor3(fwd.activation(l, k), fwd.batch, fwd.seq, query);
      const auto g = tracking::to_tensor3(bwd.grad_out.at(l, k), fwd.batch, fwd.seq, query);
      tr.raw[base] = tracking::reduce(a, tracking::TokenMode::LastToken, magnitude);
      tr.raw[base + 1] = tracking::reduce(g, tracking::TokenMode::LastToken, magnitude);
      tr.layer[base] = tracking::reduce(tracking::standardize(a), tracking::TokenMode::LastToken, magnitude);
      tr.layer[base + 1] = tracking::reduce(tracking::standardize(g), tracking::TokenMode::LastToken, magnitude);
    }
  return tr;
}

FeatureVector internal_features(const InternalTrace& tr, const model::ModelConfig& config, const FeatureConfig& fc,
                                const tracking::HistoricalProfile* profile) {
  if (fc.normalization == Normalization::Historical) {
    if (!profile) fail(ErrorCode::ProfileMissing, "historical normalization needs a profile");
    if (profile->size() != config.total_neurons()) fail(ErrorCode::ShapeMismatch, "profile does not match the model");
  }
  const model::NeuronSpace space(config);
  FeatureVector fv;
  fv.schema = internal_schema(config, fc);
  fv.values.reserve(fv.schema.size());
  for (std::size_t l = 0; l < config.n_layers; ++l)
    for (auto k : model::kTrackedKinds)
      for (auto part : parts_of(fc)) {
        const std::size_t idx = (l * 4 + static_cast<std::size_t>(k)) * 2 + part;
        std::vector<double> v = fc.normalization == Normalization::Layer ? tr.layer[idx] : tr.raw[idx];
        if (fc.normalization == Normalization::Historical) {
          const auto& h = part == 0 ? profile->ha : profile->hg;
          const std::size_t off = space.offset(l, k);
          for (std::size_t i = 0; i < v.size(); ++i) v[i] /= std::max(h[off + i], kHistoricalEps);
        }
        const auto s = summary_stats(v, fc.stats);
        fv.values.insert(fv.values.end(), s.begin(), s.end());
      }
  return fv;
}

FeatureVector extract_internal_features(const model::Model& m, const model::EncodedFact& fact,
                                        const FeatureConfig& fc, const tracking::HistoricalProfile* profile) {
  if (fc.normalization == Normalization::Historical && !profile)
    fail(ErrorCode::ProfileMissing, "historical normalization needs a profile");
  return internal_features(trace_record(m, fact, fc.magnitude, fc.loss_mode), m.config(), fc, profile);
}

OutputDims output_dims(const FeatureConfig& fc) {
  OutputDims d;
  const std::size_t slots = fc.n_last + 1;
  if (wants_output(fc.output_kind, OutputKind::Feat1)) d.feat1 = slots;
  if (wants_output(fc.output_kind, OutputKind::Feat2)) d.feat2 = slots * 2 * fc.top_k;
  if (wants_output(fc.output_kind, OutputKind::Feat3)) {
    d.feat3 = slots * fc.n_bins;
    if (fc.indicators) d.indicators = slots * fc.n_bins;
  }
  d.concat = d.feat1 + d.feat2 + d.feat3;
  return d;
}

Schema output_schema(const FeatureConfig& fc) {
  Schema s;
  const std::size_t slots = fc.n_last + 1;
  auto add = [&](const std::string& group, std::size_t pos, const std::string& detail) {
    FeatureInfo f;
    f.group = group;
    f.position = static_cast<int>(pos);
    f.stat = detail;
    f.name = group + ".p" + std::to_string(pos) + (detail.empty() ? "" : "." + detail);
    s.push_back(std::move(f));
  };
  if (wants_output(fc.output_kind, OutputKind::Feat1))
    for (std::size_t p = 0; p < slots; ++p) add("Feat1", p, "");
  if (wants_output(fc.output_kind, OutputKind::Feat2))
    for (std::size_t p = 0; p < slots; ++p) {
      for (std::size_t k = 0; k < fc.top_k; ++k) add("Feat2", p, "val" + std::to_string(k));
      for (std::size_t k = 0; k < fc.top_k; ++k) add("Feat2", p, "idx" + std::to_string(k));
    }
  if (wants_output(fc.output_kind, OutputKind::Feat3)) {
    for (std::size_t p = 0; p < slots; ++p)
      for (std::size_t b = 0; b < fc.n_bins; ++b) add("Feat3", p, "bin" + std::to_string(b));
    if (fc.indicators)
      for (std::size_t p = 0; p < slots; ++p)
        for (std::size_t b = 0; b < fc.n_bins; ++b) add("indicator", p, "bin" + std::to_string(b));
  }
  return s;
}

FeatureVector extract_output_features(const model::LogitModel& m, const model::EncodedFact& fact,
                                      const FeatureConfig& fc) {
  const std::span<const model::EncodedFact> one(&fact, 1);
  const auto lb = model::make_lm_batch(one, model::LossMode::AllTokens);
  const auto logits = m.batch_logits(lb.inputs);
  const std::size_t len = lb.inputs.lengths[0];  // tokens.size() - 1 predictions
  const std::size_t V = m.vocab_size();
  const std::size_t slots = fc.n_last + 1;
  const std::size_t m_obj = fact.object_len;

  struct Slot {
    bool sentinel = true;
    model::Vec<double> probs;
    corpus::TokenId truth = 0;
  };
  std::vector<Slot> sl(slots);
  double full = 1.0;
  for (std::size_t t = 0; t < len; ++t) {
    const auto p = model::softmax_row(logits, static_cast<Eigen::Index>(t));
    full *= p[fact.tokens[t + 1]];
  }
  for (std::size_t j = 0; j < fc.n_last; ++j) {
    // Right-aligned: the last slot before the full statement is the last object token.
    const std::ptrdiff_t obj = static_cast<std::ptrdiff_t>(m_obj) - static_cast<std::ptrdiff_t>(fc.n_last) +
                               static_cast<std::ptrdiff_t>(j);
    if (obj < 0) continue;
    const std::size_t target_tok = fact.tokens.size() - 1 - m_obj + static_cast<std::size_t>(obj);
    sl[j].sentinel = false;
    sl[j].probs = model::softmax_row(logits, static_cast<Eigen::Index>(target_tok - 1));
    sl[j].truth = fact.tokens[target_tok];
  }
  sl[fc.n_last].sentinel = false;
  sl[fc.n_last].probs = model::softmax_row(logits, static_cast<Eigen::Index>(len - 1));
  sl[fc.n_last].truth = fact.tokens.back();

  auto bin_of = [&](double p) {
    return std::min(static_cast<std::size_t>(std::floor(p * static_cast<double>(fc.n_bins))), fc.n_bins - 1);
  };

  FeatureVector fv;
  fv.schema = output_schema(fc);
  auto& out = fv.values;
  out.reserve(fv.schema.size());
  if (wants_output(fc.output_kind, OutputKind::Feat1)) {
    for (std::size_t j = 0; j < fc.n_last; ++j) out.push_back(sl[j].sentinel ? 1.0 : sl[j].probs[sl[j].truth]);
    out.push_back(full);
  }
  if (wants_output(fc.output_kind, OutputKind::Feat2)) {
    for (const auto& s : sl) {
      std::vector<double> vals(fc.top_k, 0.0), idxs(fc.top_k, 0.0);
      if (!s.sentinel) {
        std::vector<std::size_t> order(V);
        std::iota(order.begin(), order.end(), std::size_t{0});
        const std::size_t k = std::min(fc.top_k, V);
        std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k), order.end(),
                          [&](std::size_t a, std::size_t b) {
                            if (s.probs[a] != s.probs[b]) return s.probs[a] > s.probs[b];
                            return a < b;
                          });
        for (std::size_t i = 0; i < k; ++i) {
          vals[i] = s.probs[order[i]];
          idxs[i] = static_cast<double>(order[i]) / static_cast<double>(V);
        }
      }
      out.insert(out.end(), vals.begin(), vals.end());
      out.insert(out.end(), idxs.begin(), idxs.end());
    }
  }
  if (wants_output(fc.output_kind, OutputKind::Feat3)) {
    std::vector<std::size_t> truth_bins;
    for (const auto& s : sl) {
      std::vector<double> hist(fc.n_bins, 0.0);
      if (s.sentinel) {
        // Histogram of a distribution with all mass on one token.
        hist[0] += static_cast<double>(V - 1) / static_cast<double>(V);
        hist[fc.n_bins - 1] += 1.0 / static_cast<double>(V);
        truth_bins.push_back(fc.n_bins - 1);
      } else {
        for (std::size_t v = 0; v < V; ++v) hist[bin_of(s.probs[v])] += 1.0;
        for (auto& h : hist) h /= static_cast<double>(V);
        truth_bins.push_back(bin_of(s.probs[s.truth]));
      }
      out.insert(out.end(), hist.begin(), hist.end());
    }
    if (fc.indicators)
      for (auto b : truth_bins) {
        std::vector<double> one_hot(fc.n_bins, 0.0);
        one_hot[b] = 1.0;
        out.insert(out.end(), one_hot.begin(), one_hot.end());
      }
  }
  return fv;
}

FeatureVector extract_features(const model::Model& m, const model::EncodedFact& fact, const FeatureConfig& fc,
                               const tracking::HistoricalProfile* profile) {
  if (fc.source == FeatureConfig::Source::Output) return extract_output_features(m, fact, fc);
  return extract_internal_features(m, fact, fc, profile);
}

std::array<std::size_t, kNumClasses> Dataset::class_counts() const {
  std::array<std::size_t, kNumClasses> c{};
  for (const auto& r : rows) ++c[static_cast<std::size_t>(r.label)];
  return c;
}

void write_dataset_csv(const Dataset& d, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) fail(ErrorCode::Io, "cannot write " + path.string());
  out << "fact_id";
  for (const auto& f : d.schema) out << ',' << f.name;
  out << ",label\n";
  char buf[40];
  for (const auto& r : d.rows) {
    out << r.fact;
    for (double v : r.values) {
      std::snprintf(buf, sizeof buf, "%.17g", v);
      out << ',' << buf;
    }
    out << ',' << to_string(r.label) << '\n';
  }
}

}  // namespace plab::dissonance
