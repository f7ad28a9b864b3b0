#include "plab/classifier.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>

#include "plab/error.hpp"
#include "plab/rng.hpp"

namespace plab::dissonance {
namespace {

constexpr std::size_t K = kNumClasses;

std::size_t cls(ClassLabel c) { return static_cast<std::size_t>(c); }

double gini(const std::array<double, K>& counts, double total) {
  if (total <= 0) return 0;
  double s = 1.0;
  for (double c : counts) s -= (c / total) * (c / total);
  return s;
}

std::size_t argmax(const std::array<double, K>& v) {
  std::size_t best = 0;
  for (std::size_t k = 1; k < K; ++k)
    if (v[k] > v[best]) best = k;
  return best;
}

struct Matrix {
  std::size_t n = 0, d = 0;
  std::vector<double> v;  // row-major
  double at(std::size_t i, std::size_t j) const { return v[i * d + j]; }
};

Matrix select_columns(const std::vector<std::vector<double>>& x, const std::vector<std::size_t>& cols) {
  Matrix m;
  m.n = x.size();
  m.d = cols.size();
  m.v.resize(m.n * m.d);
  for (std::size_t i = 0; i < m.n; ++i)
    for (std::size_t j = 0; j < m.d; ++j) m.v[i * m.d + j] = x[i][cols[j]];
  return m;
}

struct TreeBuilder {
  const Matrix& x;
  const std::vector<std::size_t>& y;
  const ForestHyper& hyper;
  std::size_t mtry;
  Rng& rng;
  Tree tree;
  std::vector<double>& importance;
  double n_root = 0;

  struct Work {
    int node;
    std::vector<std::size_t> samples;
    std::size_t depth;
  };

  std::array<double, K> counts(const std::vector<std::size_t>& s) const {
    std::array<double, K> c{};
    for (auto i : s) c[y[i]] += 1;
    return c;
  }

  void build(std::vector<std::size_t> root) {
    n_root = static_cast<double>(root.size());
    tree.nodes.emplace_back();
    std::vector<Work> stack;
    stack.push_back({0, std::move(root), 0});
    std::vector<std::size_t> features(x.d);
    std::iota(features.begin(), features.end(), std::size_t{0});
    std::vector<std::pair<double, std::size_t>> col;
    while (!stack.empty()) {
      Work w = std::move(stack.back());
      stack.pop_back();
      const auto c = counts(w.samples);
      const double n = static_cast<double>(w.samples.size());
      const double g = gini(c, n);
      auto& leaf = tree.nodes[static_cast<std::size_t>(w.node)];
      for (std::size_t k = 0; k < K; ++k) leaf.dist[k] = c[k] / n;
      const bool depth_ok = hyper.max_depth == 0 || w.depth < hyper.max_depth;
      if (g <= 0 || !depth_ok || w.samples.size() < 2 * hyper.min_samples_leaf) continue;

      // Partial Fisher-Yates for the feature subset.
      for (std::size_t i = 0; i < mtry; ++i) {
        const std::size_t j = i + static_cast<std::size_t>(rng.below(x.d - i));
        std::swap(features[i], features[j]);
      }
      double best_gain = 0;
      int best_f = -1;
      double best_t = 0;
      for (std::size_t fi = 0; fi < mtry; ++fi) {
        const std::size_t f = features[fi];
        col.clear();
        for (auto i : w.samples) col.emplace_back(x.at(i, f), y[i]);
        std::sort(col.begin(), col.end());
        std::array<double, K> left{};
        for (std::size_t i = 0; i + 1 < col.size(); ++i) {
          left[col[i].second] += 1;
          if (col[i].first == col[i + 1].first) continue;
          const double nl = static_cast<double>(i + 1), nr = n - nl;
          if (nl < static_cast<double>(hyper.min_samples_leaf) || nr < static_cast<double>(hyper.min_samples_leaf))
            continue;
          std::array<double, K> right{};
          for (std::size_t k = 0; k < K; ++k) right[k] = c[k] - left[k];
          const double gain = g - (nl / n) * gini(left, nl) - (nr / n) * gini(right, nr);
          if (gain > best_gain + 1e-15) {
            best_gain = gain;
            best_f = static_cast<int>(f);
            best_t = 0.5 * (col[i].first + col[i + 1].first);
          }
        }
      }
      if (best_f < 0) continue;
      std::vector<std::size_t> ls, rs;
      for (auto i : w.samples) (x.at(i, static_cast<std::size_t>(best_f)) <= best_t ? ls : rs).push_back(i);
      importance[static_cast<std::size_t>(best_f)] += (n / n_root) * best_gain;
      const int li = static_cast<int>(tree.nodes.size());
      tree.nodes.emplace_back();
      tree.nodes.emplace_back();
      auto& node = tree.nodes[static_cast<std::size_t>(w.node)];
      node.feature = best_f;
      node.threshold = best_t;
      node.left = li;
      node.right = li + 1;
      stack.push_back({li + 1, std::move(rs), w.depth + 1});
      stack.push_back({li, std::move(ls), w.depth + 1});
    }
  }
};

void fit_forest(ClassifierModel& m, const Matrix& x, const std::vector<std::size_t>& y) {
  const auto& h = m.hyper.forest;
  if (h.n_trees == 0) fail(ErrorCode::InvalidArgument, "forest needs at least one tree");
  const std::size_t mtry =
      h.max_features > 0 ? std::clamp<std::size_t>(static_cast<std::size_t>(std::ceil(h.max_features * x.d)), 1, x.d)
                         : std::clamp<std::size_t>(static_cast<std::size_t>(std::sqrt(static_cast<double>(x.d))), 1, x.d);
  Rng rng(derive_seed(m.seed, 0xF0));
  m.importances.assign(x.d, 0.0);
  for (std::size_t t = 0; t < h.n_trees; ++t) {
    std::vector<std::size_t> boot(x.n);
    for (auto& b : boot) b = static_cast<std::size_t>(rng.below(x.n));
    std::vector<double> imp(x.d, 0.0);
    TreeBuilder tb{x, y, h, mtry, rng, {}, imp};
    tb.build(std::move(boot));
    const double total = std::accumulate(imp.begin(), imp.end(), 0.0);
    if (total > 0)
      for (std::size_t j = 0; j < x.d; ++j) m.importances[j] += imp[j] / total;
    m.trees.push_back(std::move(tb.tree));
  }
}

void fit_svm(ClassifierModel& m, const Matrix& x, const std::vector<std::size_t>& y) {
  const std::size_t d = x.d, n = x.n;
  m.mean.assign(d, 0.0);
  m.scale.assign(d, 1.0);
  for (std::size_t j = 0; j < d; ++j) {
    double mu = 0;
    for (std::size_t i = 0; i < n; ++i) mu += x.at(i, j);
    mu /= static_cast<double>(n);
    double ss = 0;
    for (std::size_t i = 0; i < n; ++i) ss += (x.at(i, j) - mu) * (x.at(i, j) - mu);
    const double sd = std::sqrt(ss / static_cast<double>(n));
    m.mean[j] = mu;
    m.scale[j] = sd > 0 ? sd : 1.0;
  }
  // Standardized rows with a trailing 1 for the bias.
  std::vector<double> z(n * (d + 1));
  std::vector<double> qii(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < d; ++j) z[i * (d + 1) + j] = (x.at(i, j) - m.mean[j]) / m.scale[j];
    z[i * (d + 1) + d] = 1.0;
    for (std::size_t j = 0; j <= d; ++j) qii[i] += z[i * (d + 1) + j] * z[i * (d + 1) + j];
  }
  const double C = m.hyper.svm.c;
  if (!(C > 0)) fail(ErrorCode::InvalidArgument, "svm C must be positive");
  Rng rng(derive_seed(m.seed, 0x5F));
  for (std::size_t c = 0; c < K; ++c) {
    auto& w = m.weights[c];
    w.assign(d + 1, 0.0);
    std::vector<double> alpha(n, 0.0);
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    for (std::size_t epoch = 0; epoch < m.hyper.svm.max_epochs; ++epoch) {
      rng.shuffle(order);
      double pg_max = -1e300, pg_min = 1e300;
      for (auto i : order) {
        const double yi = y[i] == c ? 1.0 : -1.0;
        const double* zi = &z[i * (d + 1)];
        double dot = 0;
        for (std::size_t j = 0; j <= d; ++j) dot += w[j] * zi[j];
        const double grad = yi * dot - 1.0;
        double pg = grad;
        if (alpha[i] == 0) pg = std::min(grad, 0.0);
        else if (alpha[i] == C) pg = std::max(grad, 0.0);
        pg_max = std::max(pg_max, pg);
        pg_min = std::min(pg_min, pg);
        if (std::fabs(pg) > 1e-12) {
          const double old = alpha[i];
          alpha[i] = std::min(std::max(old - grad / qii[i], 0.0), C);
          const double delta = (alpha[i] - old) * yi;
          for (std::size_t j = 0; j <= d; ++j) w[j] += delta * zi[j];
        }
      }
      if (pg_max - pg_min < m.hyper.svm.tol) break;
    }
  }
}

ClassifierHyper draw_hyper(const SearchGrid& g, ClassifierKind kind, Rng& rng) {
  auto pick = [&](const auto& v) {
    if (v.empty()) fail(ErrorCode::InvalidConfig, "empty search grid dimension");
    return v[static_cast<std::size_t>(rng.below(v.size()))];
  };
  ClassifierHyper h;
  if (kind == ClassifierKind::RandomForest) {
    h.forest.n_trees = pick(g.n_trees);
    h.forest.max_depth = pick(g.max_depth);
    h.forest.min_samples_leaf = pick(g.min_samples_leaf);
    h.forest.max_features = pick(g.max_features);
  } else {
    h.svm.c = pick(g.svm_c);
  }
  return h;
}

std::string hyper_key(const ClassifierHyper& h) { return to_json(h).dump(); }

Confusion confusion_of(const ClassifierModel& m, const std::vector<std::vector<double>>& x,
                       const std::vector<ClassLabel>& y) {
  Confusion c{};
  for (std::size_t i = 0; i < x.size(); ++i) ++c[cls(y[i])][cls(m.predict(x[i]))];
  return c;
}

void mean_std(const std::vector<double>& v, double& mean, double& sd) {
  mean = 0;
  for (double x : v) mean += x;
  mean /= static_cast<double>(v.size());
  double ss = 0;
  for (double x : v) ss += (x - mean) * (x - mean);
  sd = std::sqrt(ss / static_cast<double>(v.size()));
}

}  // namespace

std::string_view to_string(ClassifierKind k) { return k == ClassifierKind::RandomForest ? "RandomForest" : "LinearSVM"; }

ClassifierKind classifier_kind_from_string(std::string_view s) {
  if (s == "RandomForest" || s == "RF") return ClassifierKind::RandomForest;
  if (s == "LinearSVM" || s == "SVM") return ClassifierKind::LinearSVM;
  fail(ErrorCode::InvalidConfig, "unknown classifier " + std::string(s));
}

nlohmann::json to_json(const ClassifierHyper& h) {
  return {{"forest",
           {{"n_trees", h.forest.n_trees},
            {"max_depth", h.forest.max_depth},
            {"min_samples_leaf", h.forest.min_samples_leaf},
            {"max_features", h.forest.max_features}}},
          {"svm", {{"c", h.svm.c}, {"max_epochs", h.svm.max_epochs}, {"tol", h.svm.tol}}}};
}

nlohmann::json to_json(const SearchGrid& g) {
  return {{"n_trees", g.n_trees},     {"max_depth", g.max_depth}, {"min_samples_leaf", g.min_samples_leaf},
          {"max_features", g.max_features}, {"svm_c", g.svm_c},         {"draws", g.draws},
          {"holdout", g.holdout}};
}

SearchGrid search_grid_from_json(const nlohmann::json& j) {
  SearchGrid g;
  g.n_trees = j.value("n_trees", g.n_trees);
  g.max_depth = j.value("max_depth", g.max_depth);
  g.min_samples_leaf = j.value("min_samples_leaf", g.min_samples_leaf);
  g.max_features = j.value("max_features", g.max_features);
  g.svm_c = j.value("svm_c", g.svm_c);
  g.draws = j.value("draws", g.draws);
  g.holdout = j.value("holdout", g.holdout);
  if (g.draws == 0) fail(ErrorCode::InvalidConfig, "search draws must be positive");
  if (!(g.holdout > 0 && g.holdout < 1)) fail(ErrorCode::InvalidConfig, "holdout must be in (0, 1)");
  return g;
}

ClassLabel ClassifierModel::predict(const std::vector<double>& x) const {
  if (x.size() != n_features) fail(ErrorCode::ShapeMismatch, "feature vector length differs from training");
  std::array<double, K> score{};
  if (kind == ClassifierKind::RandomForest) {
    for (const auto& t : trees) {
      std::size_t node = 0;
      while (t.nodes[node].feature >= 0) {
        const auto& nd = t.nodes[node];
        node = static_cast<std::size_t>(x[kept[static_cast<std::size_t>(nd.feature)]] <= nd.threshold ? nd.left
                                                                                                       : nd.right);
      }
      for (std::size_t k = 0; k < K; ++k) score[k] += t.nodes[node].dist[k];
    }
  } else {
    for (std::size_t k = 0; k < K; ++k) {
      const auto& w = weights[k];
      double s = w[kept.size()];
      for (std::size_t j = 0; j < kept.size(); ++j) s += w[j] * (x[kept[j]] - mean[j]) / scale[j];
      score[k] = s;
    }
  }
  return static_cast<ClassLabel>(argmax(score));
}

std::vector<ClassLabel> ClassifierModel::predict(const std::vector<std::vector<double>>& xs) const {
  std::vector<ClassLabel> out;
  out.reserve(xs.size());
  for (const auto& x : xs) out.push_back(predict(x));
  return out;
}

std::string ClassifierModel::fingerprint() const {
  std::uint64_t h = fnv1a(kept.data(), kept.size() * sizeof(std::size_t));
  for (const auto& t : trees)
    for (const auto& n : t.nodes) {
      h = fnv1a(&n.feature, sizeof n.feature, h);
      h = fnv1a(&n.threshold, sizeof n.threshold, h);
      h = fnv1a(n.dist.data(), sizeof n.dist, h);
    }
  for (const auto& w : weights) h = fnv1a(w.data(), w.size() * sizeof(double), h);
  return hex64(h);
}

ClassifierModel train_classifier(const TrainingSet& data, ClassifierKind kind, const ClassifierHyper& hyper,
                                 std::uint64_t seed) {
  if (data.x.empty() || data.x.size() != data.y.size()) fail(ErrorCode::DegenerateDataset, "empty training set");
  std::array<std::size_t, K> present{};
  for (auto l : data.y) ++present[cls(l)];
  if (std::count_if(present.begin(), present.end(), [](std::size_t c) { return c > 0; }) < 2)
    fail(ErrorCode::DegenerateDataset, "training data needs at least two classes");
  ClassifierModel m;
  m.kind = kind;
  m.hyper = hyper;
  m.seed = seed;
  m.n_features = data.x.front().size();
  for (const auto& row : data.x)
    if (row.size() != m.n_features) fail(ErrorCode::ShapeMismatch, "ragged feature rows");
  for (std::size_t j = 0; j < m.n_features; ++j) {
    const double first = data.x.front()[j];
    bool constant = true;
    for (const auto& row : data.x)
      if (row[j] != first) {
        constant = false;
        break;
      }
    if (!constant) m.kept.push_back(j);
  }
  if (m.kept.empty()) fail(ErrorCode::DegenerateDataset, "every feature is constant");
  const Matrix x = select_columns(data.x, m.kept);
  std::vector<std::size_t> y(data.y.size());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = cls(data.y[i]);
  if (kind == ClassifierKind::RandomForest) fit_forest(m, x, y);
  else fit_svm(m, x, y);
  return m;
}

SearchResult search_and_fit(const TrainingSet& data, ClassifierKind kind, const SearchGrid& grid,
                            std::uint64_t seed) {
  Rng rng(derive_seed(seed, 0x5EA));
  std::array<std::vector<std::size_t>, K> by_class;
  for (std::size_t i = 0; i < data.y.size(); ++i) by_class[cls(data.y[i])].push_back(i);
  std::vector<std::uint8_t> is_val(data.y.size(), 0);
  for (auto& idx : by_class) {
    rng.shuffle(idx);
    const auto nv = static_cast<std::size_t>(std::llround(grid.holdout * static_cast<double>(idx.size())));
    for (std::size_t i = 0; i < std::min(nv, idx.size()); ++i) is_val[idx[i]] = 1;
  }
  TrainingSet tr, va;
  for (std::size_t i = 0; i < data.y.size(); ++i) {
    auto& dst = is_val[i] ? va : tr;
    dst.x.push_back(data.x[i]);
    dst.y.push_back(data.y[i]);
  }
  SearchResult res;
  res.holdout_accuracy = -1;
  std::map<std::string, double> seen;
  for (std::size_t d = 0; d < grid.draws; ++d) {
    const auto h = draw_hyper(grid, kind, rng);
    const auto key = hyper_key(h);
    if (seen.count(key)) continue;
    double acc = 0;
    if (!va.x.empty()) acc = accuracy(confusion_of(train_classifier(tr, kind, h, derive_seed(seed, d)), va.x, va.y));
    seen[key] = acc;
    if (acc > res.holdout_accuracy) {
      res.holdout_accuracy = acc;
      res.best = h;
    }
  }
  res.model = train_classifier(data, kind, res.best, derive_seed(seed, 0xF17));
  return res;
}

double accuracy(const Confusion& c) {
  std::size_t hit = 0, total = 0;
  for (std::size_t i = 0; i < K; ++i)
    for (std::size_t j = 0; j < K; ++j) {
      total += c[i][j];
      if (i == j) hit += c[i][j];
    }
  return total ? static_cast<double>(hit) / static_cast<double>(total) : 0.0;
}

double macro_f1(const Confusion& c) {
  double sum = 0;
  for (std::size_t k = 0; k < K; ++k) {
    double tp = static_cast<double>(c[k][k]), fp = 0, fn = 0;
    for (std::size_t j = 0; j < K; ++j)
      if (j != k) {
        fp += static_cast<double>(c[j][k]);
        fn += static_cast<double>(c[k][j]);
      }
    sum += tp > 0 ? 2 * tp / (2 * tp + fp + fn) : 0.0;
  }
  return sum / static_cast<double>(K);
}

nlohmann::json to_json(const CvResult& r) {
  nlohmann::json conf = nlohmann::json::array();
  for (const auto& c : r.confusions) conf.push_back(c);
  nlohmann::json chosen = nlohmann::json::array();
  for (const auto& h : r.chosen) chosen.push_back(to_json(h));
  return {{"accuracy_mean", r.accuracy_mean}, {"accuracy_std", r.accuracy_std}, {"f1_mean", r.f1_mean},
          {"f1_std", r.f1_std},               {"fold_accuracy", r.fold_accuracy}, {"fold_f1", r.fold_f1},
          {"confusions", conf},              {"chosen_hyper", chosen},           {"std_convention", "population"}};
}

CvResult cross_validate(const Dataset& data, const corpus::FoldPlan& plan, ClassifierKind kind,
                        const SearchGrid& grid, std::uint64_t seed) {
  if (plan.k < 2) fail(ErrorCode::FoldCoverage, "need at least two folds");
  std::vector<std::size_t> fold_of(data.size());
  for (std::size_t i = 0; i < data.size(); ++i) {
    const auto it = plan.assignments.find(data.rows[i].group);
    if (it == plan.assignments.end())
      fail(ErrorCode::FoldCoverage, "fact group " + std::to_string(data.rows[i].group) + " has no fold");
    fold_of[i] = it->second;
  }
  CvResult r;
  for (std::size_t f = 0; f < plan.k; ++f) {
    TrainingSet tr;
    std::vector<std::vector<double>> tx;
    std::vector<ClassLabel> ty;
    for (std::size_t i = 0; i < data.size(); ++i) {
      if (fold_of[i] == f) {
        tx.push_back(data.rows[i].values);
        ty.push_back(data.rows[i].label);
      } else {
        tr.x.push_back(data.rows[i].values);
        tr.y.push_back(data.rows[i].label);
      }
    }
    if (tx.empty()) fail(ErrorCode::FoldCoverage, "fold " + std::to_string(f) + " is empty");
    const auto s = search_and_fit(tr, kind, grid, derive_seed(seed, f));
    const auto c = confusion_of(s.model, tx, ty);
    r.confusions.push_back(c);
    r.fold_accuracy.push_back(accuracy(c));
    r.fold_f1.push_back(macro_f1(c));
    r.chosen.push_back(s.best);
  }
  mean_std(r.fold_accuracy, r.accuracy_mean, r.accuracy_std);
  mean_std(r.fold_f1, r.f1_mean, r.f1_std);
  return r;
}

Importance feature_importance(const ClassifierModel& m, const Schema& schema) {
  if (m.kind != ClassifierKind::RandomForest) fail(ErrorCode::WrongKind, "importances need a random forest");
  if (schema.size() != m.n_features) fail(ErrorCode::ShapeMismatch, "schema does not match the model");
  Importance imp;
  imp.per_feature.assign(m.n_features, 0.0);
  double total = std::accumulate(m.importances.begin(), m.importances.end(), 0.0);
  for (std::size_t j = 0; j < m.kept.size(); ++j)
    imp.per_feature[m.kept[j]] = total > 0 ? m.importances[j] / total : 1.0 / static_cast<double>(m.kept.size());
  int max_block = -1;
  for (const auto& f : schema) max_block = std::max(max_block, f.block);
  imp.per_block.assign(static_cast<std::size_t>(max_block + 1), 0.0);
  for (std::size_t j = 0; j < m.n_features; ++j) {
    const double v = imp.per_feature[j];
    if (schema[j].group == "A") imp.activations += v;
    else if (schema[j].group == "G") imp.gradients += v;
    else imp.other += v;
    if (schema[j].block >= 0) imp.per_block[static_cast<std::size_t>(schema[j].block)] += v;
  }
  return imp;
}

void write_importance_csv(const Importance& imp, const Schema& schema, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) fail(ErrorCode::Io, "cannot write " + path.string());
  out << "feature,group,block,kind,stat,importance\n";
  char buf[40];
  for (std::size_t j = 0; j < schema.size(); ++j) {
    std::snprintf(buf, sizeof buf, "%.17g", imp.per_feature[j]);
    out << schema[j].name << ',' << schema[j].group << ',' << schema[j].block << ',' << schema[j].kind << ','
        << schema[j].stat << ',' << buf << '\n';
  }
}

void write_confusion_csv(const CvResult& r, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) fail(ErrorCode::Io, "cannot write " + path.string());
  out << "fold,truth,predicted,count\n";
  for (std::size_t f = 0; f < r.confusions.size(); ++f)
    for (std::size_t i = 0; i < K; ++i)
      for (std::size_t j = 0; j < K; ++j)
        out << f << ',' << to_string(static_cast<ClassLabel>(i)) << ',' << to_string(static_cast<ClassLabel>(j))
            << ',' << r.confusions[f][i][j] << '\n';
}

}  // namespace plab::dissonance
