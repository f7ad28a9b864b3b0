#include "plab/model.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "plab/error.hpp"
#include "plab/rng.hpp"

namespace plab::model {
namespace {

constexpr double kLnEps = 1e-5;
constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)

template <class T>
void layer_norm(const Mat<T>& x, const Eigen::Map<const Mat<T>>& g, const Eigen::Map<const Mat<T>>& b, Mat<T>& y,
                Vec<T>& mean, Vec<T>& rstd) {
  const Eigen::Index n = x.rows(), d = x.cols();
  y.resize(n, d);
  mean.resize(n);
  rstd.resize(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    T m = x.row(i).sum() / T(d);
    T var = (x.row(i).array() - m).square().sum() / T(d);
    T r = T(1) / std::sqrt(var + T(kLnEps));
    mean(i) = m;
    rstd(i) = r;
    for (Eigen::Index j = 0; j < d; ++j) y(i, j) = (x(i, j) - m) * r * g(j) + b(j);
  }
}

// Accumulates dg/db and returns dx.
template <class T>
Mat<T> layer_norm_backward(const Mat<T>& dy, const Mat<T>& x, const Vec<T>& mean, const Vec<T>& rstd,
                           const Eigen::Map<const Mat<T>>& g, T* dg, T* db) {
  const Eigen::Index n = x.rows(), d = x.cols();
  Mat<T> dx(n, d);
  std::vector<T> xhat(static_cast<std::size_t>(d)), dxhat(static_cast<std::size_t>(d));
  for (Eigen::Index i = 0; i < n; ++i) {
    T sum_dxhat = 0, sum_dxhat_xhat = 0;
    for (Eigen::Index j = 0; j < d; ++j) {
      const T xh = (x(i, j) - mean(i)) * rstd(i);
      const T dxh = dy(i, j) * g(j);
      xhat[j] = xh;
      dxhat[j] = dxh;
      sum_dxhat += dxh;
      sum_dxhat_xhat += dxh * xh;
      dg[j] += dy(i, j) * xh;
      db[j] += dy(i, j);
    }
    const T mean_dxhat = sum_dxhat / T(d);
    const T mean_dxhat_xhat = sum_dxhat_xhat / T(d);
    for (Eigen::Index j = 0; j < d; ++j) dx(i, j) = rstd(i) * (dxhat[j] - mean_dxhat - xhat[j] * mean_dxhat_xhat);
  }
  return dx;
}

template <class T>
T gelu(T x) {
  return T(0.5) * x * (T(1) + std::tanh(T(kGeluC) * (x + T(0.044715) * x * x * x)));
}

template <class T>
T gelu_grad(T x) {
  const T u = T(kGeluC) * (x + T(0.044715) * x * x * x);
  const T th = std::tanh(u);
  const T du = T(kGeluC) * (T(1) + T(3 * 0.044715) * x * x);
  return T(0.5) * (T(1) + th) + T(0.5) * x * (T(1) - th * th) * du;
}

template <class T>
void add_bias_rowwise(Mat<T>& y, const Eigen::Map<const Mat<T>>& b) {
  y.rowwise() += b.row(0);
}

template <class T>
void accumulate_colsum(const Mat<T>& dy, T* out) {
  for (Eigen::Index i = 0; i < dy.rows(); ++i)
    for (Eigen::Index j = 0; j < dy.cols(); ++j) out[j] += dy(i, j);
}

}  // namespace

// ---------------------------------------------------------------------------
// Config and addressing

std::string_view to_string(TrackedKind k) {
  switch (k) {
    case TrackedKind::AttnCAttn: return "attn.c_attn";
    case TrackedKind::AttnCProj: return "attn.c_proj";
    case TrackedKind::MlpCFc: return "mlp.c_fc";
    case TrackedKind::MlpCProj: return "mlp.c_proj";
  }
  return "?";
}

TrackedKind tracked_kind_from_string(std::string_view s) {
  for (auto k : kTrackedKinds)
    if (to_string(k) == s) return k;
  fail(ErrorCode::InvalidArgument, "unknown tracked kind " + std::string(s));
}

void ModelConfig::validate() const {
  auto bad = [](const std::string& m) { fail(ErrorCode::InvalidConfig, m); };
  if (n_layers == 0 || d_model == 0 || n_heads == 0 || d_ff == 0 || max_seq == 0) bad("zero-sized dimension");
  if (d_model % n_heads != 0)
    bad("d_model " + std::to_string(d_model) + " not divisible by n_heads " + std::to_string(n_heads));
  if (vocab_size < 3) bad("vocab_size must cover the reserved tokens");
}

std::size_t ModelConfig::out_dim(TrackedKind k) const {
  switch (k) {
    case TrackedKind::AttnCAttn: return qkv_dim();
    case TrackedKind::AttnCProj: return d_model;
    case TrackedKind::MlpCFc: return d_ff;
    case TrackedKind::MlpCProj: return d_model;
  }
  return 0;
}

std::size_t ModelConfig::in_dim(TrackedKind k) const {
  switch (k) {
    case TrackedKind::AttnCAttn: return d_model;
    case TrackedKind::AttnCProj: return context_dim();
    case TrackedKind::MlpCFc: return d_model;
    case TrackedKind::MlpCProj: return d_ff;
  }
  return 0;
}

std::size_t ModelConfig::neurons_per_block() const {
  std::size_t n = 0;
  for (auto k : kTrackedKinds) n += out_dim(k);
  return n;
}

nlohmann::json to_json(const ModelConfig& c) {
  return {{"n_layers", c.n_layers}, {"d_model", c.d_model}, {"n_heads", c.n_heads},
          {"d_ff", c.d_ff},         {"d_key", c.key_dim()}, {"d_value", c.value_dim()},
          {"vocab_size", c.vocab_size}, {"max_seq", c.max_seq}, {"tied_head", c.tied_head},
          {"seed", c.seed}};
}

ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.n_layers = j.value("n_layers", c.n_layers);
  c.d_model = j.value("d_model", c.d_model);
  c.n_heads = j.value("n_heads", c.n_heads);
  c.d_ff = j.value("d_ff", c.d_ff);
  c.d_key = j.value("d_key", c.d_key);
  c.d_value = j.value("d_value", c.d_value);
  c.vocab_size = j.value("vocab_size", c.vocab_size);
  c.max_seq = j.value("max_seq", c.max_seq);
  c.tied_head = j.value("tied_head", c.tied_head);
  c.seed = j.value("seed", c.seed);
  return c;
}

std::string to_string(const NeuronId& n) {
  return "L" + std::to_string(n.layer) + "." + std::string(to_string(n.kind)) + "[" + std::to_string(n.index) + "]";
}

NeuronSpace::NeuronSpace(const ModelConfig& config) : layers_(config.n_layers) {
  for (auto k : kTrackedKinds) widths_[static_cast<std::size_t>(k)] = config.out_dim(k);
  per_block_ = config.neurons_per_block();
  total_ = per_block_ * layers_;
}

std::size_t NeuronSpace::offset(std::size_t layer, TrackedKind kind) const {
  std::size_t off = layer * per_block_;
  for (std::size_t k = 0; k < static_cast<std::size_t>(kind); ++k) off += widths_[k];
  return off;
}

bool NeuronSpace::valid(const NeuronId& n) const {
  return n.layer < layers_ && static_cast<std::size_t>(n.kind) < 4 && n.index < width(n.kind);
}

std::size_t NeuronSpace::flat(const NeuronId& n) const {
  if (!valid(n)) fail(ErrorCode::InvalidNeuron, to_string(n));
  return offset(n.layer, n.kind) + n.index;
}

NeuronId NeuronSpace::at(std::size_t flat) const {
  if (flat >= total_) fail(ErrorCode::InvalidNeuron, "flat index " + std::to_string(flat));
  NeuronId n;
  n.layer = static_cast<std::uint32_t>(flat / per_block_);
  std::size_t rem = flat % per_block_;
  for (auto k : kTrackedKinds) {
    if (rem < width(k)) {
      n.kind = k;
      n.index = static_cast<std::uint32_t>(rem);
      return n;
    }
    rem -= width(k);
  }
  return n;
}

ParamLayout::ParamLayout(const ModelConfig& c) {
  wte_ = add("wte", c.vocab_size, c.d_model);
  wpe_ = add("wpe", c.max_seq, c.d_model);
  for (std::size_t l = 0; l < c.n_layers; ++l) {
    const std::string p = "h" + std::to_string(l) + ".";
    BlockParamIndex b{};
    b.ln1_g = add(p + "ln_1.g", 1, c.d_model);
    b.ln1_b = add(p + "ln_1.b", 1, c.d_model);
    b.attn_w = add(p + "attn.c_attn.w", c.qkv_dim(), c.d_model);
    b.attn_b = add(p + "attn.c_attn.b", 1, c.qkv_dim());
    b.proj_w = add(p + "attn.c_proj.w", c.d_model, c.context_dim());
    b.proj_b = add(p + "attn.c_proj.b", 1, c.d_model);
    b.ln2_g = add(p + "ln_2.g", 1, c.d_model);
    b.ln2_b = add(p + "ln_2.b", 1, c.d_model);
    b.fc_w = add(p + "mlp.c_fc.w", c.d_ff, c.d_model);
    b.fc_b = add(p + "mlp.c_fc.b", 1, c.d_ff);
    b.mproj_w = add(p + "mlp.c_proj.w", c.d_model, c.d_ff);
    b.mproj_b = add(p + "mlp.c_proj.b", 1, c.d_model);
    blocks_.push_back(b);
  }
  lnf_g_ = add("ln_f.g", 1, c.d_model);
  lnf_b_ = add("ln_f.b", 1, c.d_model);
  head_ = c.tied_head ? wte_ : add("lm_head.w", c.vocab_size, c.d_model);
}

std::size_t ParamLayout::add(std::string name, std::size_t rows, std::size_t cols) {
  params_.push_back({std::move(name), rows, cols, total_});
  total_ += rows * cols;
  return params_.size() - 1;
}

std::size_t ParamLayout::find(std::string_view name) const {
  for (std::size_t i = 0; i < params_.size(); ++i)
    if (params_[i].name == name) return i;
  fail(ErrorCode::InvalidArgument, "no parameter named " + std::string(name));
}

std::size_t ParamLayout::tracked_weight(std::size_t layer, TrackedKind k) const {
  const auto& b = blocks_.at(layer);
  switch (k) {
    case TrackedKind::AttnCAttn: return b.attn_w;
    case TrackedKind::AttnCProj: return b.proj_w;
    case TrackedKind::MlpCFc: return b.fc_w;
    case TrackedKind::MlpCProj: return b.mproj_w;
  }
  return 0;
}

std::size_t ParamLayout::tracked_bias(std::size_t layer, TrackedKind k) const {
  const auto& b = blocks_.at(layer);
  switch (k) {
    case TrackedKind::AttnCAttn: return b.attn_b;
    case TrackedKind::AttnCProj: return b.proj_b;
    case TrackedKind::MlpCFc: return b.fc_b;
    case TrackedKind::MlpCProj: return b.mproj_b;
  }
  return 0;
}

bool ParamLayout::is_tracked(std::size_t param) const {
  for (const auto& b : blocks_)
    for (auto i : {b.attn_w, b.attn_b, b.proj_w, b.proj_b, b.fc_w, b.fc_b, b.mproj_w, b.mproj_b})
      if (i == param) return true;
  return false;
}

nlohmann::json to_json(const OptimizerHyper& h) {
  return {{"rule", h.rule == OptimizerRule::SGD ? "SGD" : "Adam"},
          {"lr", h.lr},
          {"beta1", h.beta1},
          {"beta2", h.beta2},
          {"eps", h.eps},
          {"weight_decay", h.weight_decay}};
}

OptimizerHyper optimizer_hyper_from_json(const nlohmann::json& j) {
  OptimizerHyper h;
  const std::string rule = j.value("rule", std::string("Adam"));
  if (rule == "SGD") h.rule = OptimizerRule::SGD;
  else if (rule == "Adam") h.rule = OptimizerRule::Adam;
  else fail(ErrorCode::InvalidConfig, "optimizer rule must be SGD or Adam");
  h.lr = j.value("lr", h.lr);
  h.beta1 = j.value("beta1", h.beta1);
  h.beta2 = j.value("beta2", h.beta2);
  h.eps = j.value("eps", h.eps);
  h.weight_decay = j.value("weight_decay", h.weight_decay);
  return h;
}

// ---------------------------------------------------------------------------
// Batches

EncodedFact encode_surface(const corpus::Vocabulary& vocab, const corpus::FactRecord& record,
                           const corpus::TokenSeq& surface) {
  EncodedFact f;
  f.id = record.triple.id;
  f.object_len = record.object_tokens().size();
  f.tokens.reserve(surface.size());
  for (const auto& t : surface) f.tokens.push_back(vocab.id(t));
  if (f.tokens.size() < f.object_len + 2)
    fail(ErrorCode::InvalidArgument, "surface too short for its object");
  return f;
}

EncodedFact encode_fact(const corpus::Vocabulary& vocab, const corpus::FactRecord& record) {
  return encode_surface(vocab, record, record.surface);
}

std::vector<EncodedFact> encode_facts(const corpus::Vocabulary& vocab, std::span<const corpus::FactRecord> records) {
  std::vector<EncodedFact> out;
  out.reserve(records.size());
  for (const auto& r : records) out.push_back(encode_fact(vocab, r));
  return out;
}

LmBatch make_lm_batch(std::span<const EncodedFact> facts, LossMode mode) {
  LmBatch b;
  std::size_t seq = 0;
  for (const auto& f : facts) seq = std::max(seq, f.tokens.size() - 1);
  b.inputs.batch = facts.size();
  b.inputs.seq = seq;
  b.inputs.tokens.assign(facts.size() * seq, corpus::kPadId);
  b.inputs.lengths.resize(facts.size());
  b.targets.assign(facts.size() * seq, corpus::kPadId);
  b.mask.assign(facts.size() * seq, 0);
  for (std::size_t i = 0; i < facts.size(); ++i) {
    const auto& tok = facts[i].tokens;
    const std::size_t n = tok.size() - 1;
    b.inputs.lengths[i] = n;
    // object tokens sit at tok[n - object_len .. n-1]; they are predicted from positions one earlier
    const std::size_t first_obj_pos = n - facts[i].object_len - 1;
    for (std::size_t t = 0; t < n; ++t) {
      b.inputs.tokens[i * seq + t] = tok[t];
      b.targets[i * seq + t] = tok[t + 1];
      const bool object_pos = t >= first_obj_pos && t < n - 1;
      b.mask[i * seq + t] = (mode == LossMode::AllTokens || object_pos) ? 1 : 0;
    }
  }
  return b;
}

// ---------------------------------------------------------------------------
// Transformer

template <class T>
const Mat<T>& ForwardPass<T>::activation(std::size_t layer, TrackedKind k) const {
  const auto& b = blocks.at(layer);
  switch (k) {
    case TrackedKind::AttnCAttn: return b.qkv;
    case TrackedKind::AttnCProj: return b.attn_out;
    case TrackedKind::MlpCFc: return b.fc_act;
    case TrackedKind::MlpCProj: return b.mlp_out;
  }
  return b.qkv;
}

template <class T>
Transformer<T>::Transformer(const ModelConfig& config) : config_(config), layout_((config.validate(), config)) {
  params_.assign(layout_.total(), T(0));
  Rng rng(derive_seed(config.seed, 0x6d6f64656cULL));
  const double std_main = 0.02;
  const double std_resid = 0.02 / std::sqrt(2.0 * static_cast<double>(config.n_layers));
  auto fill_normal = [&](std::size_t idx, double stddev) {
    const auto& p = layout_[idx];
    for (std::size_t i = 0; i < p.size(); ++i) params_[p.offset + i] = static_cast<T>(rng.normal() * stddev);
  };
  auto fill_const = [&](std::size_t idx, T v) {
    const auto& p = layout_[idx];
    std::fill_n(params_.begin() + static_cast<std::ptrdiff_t>(p.offset), p.size(), v);
  };
  fill_normal(layout_.wte(), std_main);
  fill_normal(layout_.wpe(), std_main * 0.5);
  for (std::size_t l = 0; l < config.n_layers; ++l) {
    const auto& b = layout_.block(l);
    fill_const(b.ln1_g, T(1));
    fill_const(b.ln2_g, T(1));
    fill_normal(b.attn_w, std_main);
    fill_normal(b.proj_w, std_resid);
    fill_normal(b.fc_w, std_main);
    fill_normal(b.mproj_w, std_resid);
  }
  fill_const(layout_.lnf_g(), T(1));
  if (!config.tied_head) fill_normal(layout_.head(), std_main);
}

template <class T>
Transformer<T>::Transformer(const ModelConfig& config, std::vector<T> params)
    : config_(config), layout_((config.validate(), config)), params_(std::move(params)) {
  if (params_.size() != layout_.total())
    fail(ErrorCode::ShapeMismatch, "parameter buffer has " + std::to_string(params_.size()) + " entries, expected " +
                                       std::to_string(layout_.total()));
}

template <class T>
Eigen::Map<Mat<T>> Transformer<T>::param(std::size_t i) {
  const auto& p = layout_[i];
  return {params_.data() + p.offset, static_cast<Eigen::Index>(p.rows), static_cast<Eigen::Index>(p.cols)};
}

template <class T>
Eigen::Map<const Mat<T>> Transformer<T>::param(std::size_t i) const {
  const auto& p = layout_[i];
  return {params_.data() + p.offset, static_cast<Eigen::Index>(p.rows), static_cast<Eigen::Index>(p.cols)};
}

template <class T>
ForwardPass<T> Transformer<T>::forward(const TokenBatch& batch) const {
  const auto& c = config_;
  const std::size_t B = batch.batch, L = batch.seq;
  if (batch.tokens.size() != B * L || batch.lengths.size() != B)
    fail(ErrorCode::ShapeMismatch, "token batch dimensions disagree");
  if (L > c.max_seq) fail(ErrorCode::ShapeMismatch, "sequence length " + std::to_string(L) + " exceeds max_seq");
  for (auto t : batch.tokens)
    if (t < 0 || static_cast<std::size_t>(t) >= c.vocab_size)
      fail(ErrorCode::ShapeMismatch, "token id " + std::to_string(t) + " outside vocabulary");

  const auto N = static_cast<Eigen::Index>(B * L);
  const auto D = static_cast<Eigen::Index>(c.d_model);
  const std::size_t H = c.n_heads, dk = c.key_dim(), dv = c.value_dim();
  const T scale = T(1) / std::sqrt(T(dk));

  ForwardPass<T> fp;
  fp.batch = B;
  fp.seq = L;
  fp.tokens = batch.tokens;
  fp.lengths = batch.lengths;

  Mat<T> x(N, D);
  const auto wte = param(layout_.wte());
  const auto wpe = param(layout_.wpe());
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t t = 0; t < L; ++t) x.row(static_cast<Eigen::Index>(b * L + t)) = wte.row(batch.at(b, t)) + wpe.row(static_cast<Eigen::Index>(t));

  fp.blocks.resize(c.n_layers);
  for (std::size_t l = 0; l < c.n_layers; ++l) {
    const auto& pi = layout_.block(l);
    auto& bc = fp.blocks[l];
    bc.x_in = x;
    layer_norm<T>(bc.x_in, param(pi.ln1_g), param(pi.ln1_b), bc.ln1, bc.ln1_mean, bc.ln1_rstd);
    bc.qkv.noalias() = bc.ln1 * param(pi.attn_w).transpose();
    add_bias_rowwise<T>(bc.qkv, param(pi.attn_b));

    // causal attention; right padding never leaks into earlier positions
    bc.att.assign(B * H * L * L, T(0));
    bc.ctx.setZero(N, static_cast<Eigen::Index>(H * dv));
    const std::size_t k_off = H * dk, v_off = 2 * H * dk;
    std::vector<T> scores(L);
    for (std::size_t b = 0; b < B; ++b) {
      for (std::size_t h = 0; h < H; ++h) {
        T* att = bc.att.data() + ((b * H + h) * L) * L;
        for (std::size_t i = 0; i < L; ++i) {
          const T* q = bc.qkv.data() + (b * L + i) * c.qkv_dim() + h * dk;
          T mx = -std::numeric_limits<T>::infinity();
          for (std::size_t j = 0; j <= i; ++j) {
            const T* kv = bc.qkv.data() + (b * L + j) * c.qkv_dim() + k_off + h * dk;
            T s = 0;
            for (std::size_t e = 0; e < dk; ++e) s += q[e] * kv[e];
            scores[j] = s * scale;
            mx = std::max(mx, scores[j]);
          }
          T denom = 0;
          for (std::size_t j = 0; j <= i; ++j) {
            scores[j] = std::exp(scores[j] - mx);
            denom += scores[j];
          }
          T* out = bc.ctx.data() + (b * L + i) * H * dv + h * dv;
          for (std::size_t j = 0; j <= i; ++j) {
            const T a = scores[j] / denom;
            att[i * L + j] = a;
            const T* v = bc.qkv.data() + (b * L + j) * c.qkv_dim() + v_off + h * dv;
            for (std::size_t e = 0; e < dv; ++e) out[e] += a * v[e];
          }
        }
      }
    }

    bc.attn_out.noalias() = bc.ctx * param(pi.proj_w).transpose();
    add_bias_rowwise<T>(bc.attn_out, param(pi.proj_b));
    bc.x_mid = bc.x_in + bc.attn_out;
    layer_norm<T>(bc.x_mid, param(pi.ln2_g), param(pi.ln2_b), bc.ln2, bc.ln2_mean, bc.ln2_rstd);
    bc.fc_pre.noalias() = bc.ln2 * param(pi.fc_w).transpose();
    add_bias_rowwise<T>(bc.fc_pre, param(pi.fc_b));
    bc.fc_act = bc.fc_pre.unaryExpr([](T v) { return gelu(v); });
    bc.mlp_out.noalias() = bc.fc_act * param(pi.mproj_w).transpose();
    add_bias_rowwise<T>(bc.mlp_out, param(pi.mproj_b));
    x = bc.x_mid + bc.mlp_out;
  }
  fp.x_final = std::move(x);
  layer_norm<T>(fp.x_final, param(layout_.lnf_g()), param(layout_.lnf_b()), fp.lnf, fp.lnf_mean, fp.lnf_rstd);
  fp.logits.noalias() = fp.lnf * param(layout_.head()).transpose();
  return fp;
}

template <class T>
BackwardPass<T> Transformer<T>::backward(const ForwardPass<T>& fp, std::span<const TokenId> targets,
                                         std::span<const std::uint8_t> mask, T loss_scale) const {
  const auto& c = config_;
  const std::size_t B = fp.batch, L = fp.seq;
  const auto N = static_cast<Eigen::Index>(B * L);
  const auto V = static_cast<Eigen::Index>(c.vocab_size);
  if (fp.blocks.size() != c.n_layers || fp.logits.rows() != N || fp.logits.cols() != V ||
      (!fp.blocks.empty() && (fp.blocks[0].qkv.cols() != static_cast<Eigen::Index>(c.qkv_dim()) ||
                              fp.blocks[0].fc_act.cols() != static_cast<Eigen::Index>(c.d_ff) ||
                              fp.blocks[0].x_in.cols() != static_cast<Eigen::Index>(c.d_model))))
    fail(ErrorCode::StaleTrace, "forward trace does not match this model");
  if (targets.size() != B * L || mask.size() != B * L)
    fail(ErrorCode::StaleTrace, "targets/mask do not match the forward trace");

  std::size_t count = 0;
  for (auto m : mask) count += m ? 1 : 0;
  if (count == 0) fail(ErrorCode::EmptyMask, "no supervised positions");

  BackwardPass<T> out;
  out.grads.assign(layout_.total(), T(0));
  auto g = [&](std::size_t idx) {
    const auto& p = layout_[idx];
    return Eigen::Map<Mat<T>>(out.grads.data() + p.offset, static_cast<Eigen::Index>(p.rows),
                              static_cast<Eigen::Index>(p.cols));
  };
  auto gptr = [&](std::size_t idx) { return out.grads.data() + layout_[idx].offset; };

  // dL/dlogits for mean NLL: (softmax - onehot) / count
  Mat<T> dlogits = Mat<T>::Zero(N, V);
  const T inv = loss_scale / T(count);
  for (Eigen::Index r = 0; r < N; ++r) {
    if (!mask[static_cast<std::size_t>(r)]) continue;
    const T mx = fp.logits.row(r).maxCoeff();
    T denom = 0;
    for (Eigen::Index v = 0; v < V; ++v) denom += std::exp(fp.logits(r, v) - mx);
    for (Eigen::Index v = 0; v < V; ++v) dlogits(r, v) = std::exp(fp.logits(r, v) - mx) / denom * inv;
    dlogits(r, targets[static_cast<std::size_t>(r)]) -= inv;
  }

  g(layout_.head()).noalias() += dlogits.transpose() * fp.lnf;
  Mat<T> dlnf = dlogits * param(layout_.head());
  Mat<T> dx = layer_norm_backward<T>(dlnf, fp.x_final, fp.lnf_mean, fp.lnf_rstd, param(layout_.lnf_g()),
                                     gptr(layout_.lnf_g()), gptr(layout_.lnf_b()));

  const std::size_t H = c.n_heads, dk = c.key_dim(), dv = c.value_dim();
  const T scale = T(1) / std::sqrt(T(dk));
  out.grad_out.blocks.resize(c.n_layers);

  for (std::size_t li = c.n_layers; li-- > 0;) {
    const auto& pi = layout_.block(li);
    const auto& bc = fp.blocks[li];
    auto& go = out.grad_out.blocks[li];

    // MLP
    go[3] = dx;  // dL/d mlp_out
    g(pi.mproj_w).noalias() += go[3].transpose() * bc.fc_act;
    accumulate_colsum<T>(go[3], gptr(pi.mproj_b));
    go[2].noalias() = go[3] * param(pi.mproj_w);  // dL/d fc_act
    Mat<T> dfc_pre = go[2].array() * bc.fc_pre.unaryExpr([](T v) { return gelu_grad(v); }).array();
    g(pi.fc_w).noalias() += dfc_pre.transpose() * bc.ln2;
    accumulate_colsum<T>(dfc_pre, gptr(pi.fc_b));
    Mat<T> dln2 = dfc_pre * param(pi.fc_w);
    Mat<T> dx_mid = dx + layer_norm_backward<T>(dln2, bc.x_mid, bc.ln2_mean, bc.ln2_rstd, param(pi.ln2_g),
                                                gptr(pi.ln2_g), gptr(pi.ln2_b));

    // attention projection
    go[1] = dx_mid;  // dL/d attn_out
    g(pi.proj_w).noalias() += go[1].transpose() * bc.ctx;
    accumulate_colsum<T>(go[1], gptr(pi.proj_b));
    Mat<T> dctx = go[1] * param(pi.proj_w);

    // attention core
    go[0].setZero(N, static_cast<Eigen::Index>(c.qkv_dim()));  // dL/d qkv
    const std::size_t qkv = c.qkv_dim(), k_off = H * dk, v_off = 2 * H * dk;
    std::vector<T> datt(L), dscore(L);
    for (std::size_t b = 0; b < B; ++b) {
      for (std::size_t h = 0; h < H; ++h) {
        const T* att = bc.att.data() + ((b * H + h) * L) * L;
        for (std::size_t i = 0; i < L; ++i) {
          const T* dc = dctx.data() + (b * L + i) * H * dv + h * dv;
          T dot = 0;
          for (std::size_t j = 0; j <= i; ++j) {
            const T* v = bc.qkv.data() + (b * L + j) * qkv + v_off + h * dv;
            T* dvp = go[0].data() + (b * L + j) * qkv + v_off + h * dv;
            const T a = att[i * L + j];
            T s = 0;
            for (std::size_t e = 0; e < dv; ++e) {
              s += dc[e] * v[e];
              dvp[e] += a * dc[e];
            }
            datt[j] = s;
            dot += a * s;
          }
          const T* q = bc.qkv.data() + (b * L + i) * qkv + h * dk;
          T* dq = go[0].data() + (b * L + i) * qkv + h * dk;
          for (std::size_t j = 0; j <= i; ++j) {
            const T ds = att[i * L + j] * (datt[j] - dot) * scale;
            const T* kp = bc.qkv.data() + (b * L + j) * qkv + k_off + h * dk;
            T* dkp = go[0].data() + (b * L + j) * qkv + k_off + h * dk;
            for (std::size_t e = 0; e < dk; ++e) {
              dq[e] += ds * kp[e];
              dkp[e] += ds * q[e];
            }
          }
        }
      }
    }
    g(pi.attn_w).noalias() += go[0].transpose() * bc.ln1;
    accumulate_colsum<T>(go[0], gptr(pi.attn_b));
    Mat<T> dln1 = go[0] * param(pi.attn_w);
    dx = dx_mid + layer_norm_backward<T>(dln1, bc.x_in, bc.ln1_mean, bc.ln1_rstd, param(pi.ln1_g), gptr(pi.ln1_g),
                                         gptr(pi.ln1_b));
  }

  auto dwte = g(layout_.wte());
  auto dwpe = g(layout_.wpe());
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t t = 0; t < L; ++t) {
      const auto r = static_cast<Eigen::Index>(b * L + t);
      dwte.row(fp.tokens[b * L + t]) += dx.row(r);
      dwpe.row(static_cast<Eigen::Index>(t)) += dx.row(r);
    }
  return out;
}

template <class T>
void Transformer<T>::reset_optimizer() {
  adam_m_.clear();
  adam_v_.clear();
  step_ = 0;
}

template <class T>
void Transformer<T>::optimizer_step(std::span<const T> grads, const OptimizerHyper& hyper,
                                    std::span<const std::uint8_t> mask) {
  if (grads.size() != params_.size()) fail(ErrorCode::ShapeMismatch, "gradient buffer size");
  if (!mask.empty() && mask.size() != params_.size()) fail(ErrorCode::ShapeMismatch, "mask size");
  for (std::size_t i = 0; i < grads.size(); ++i)
    if (!std::isfinite(grads[i])) fail(ErrorCode::NonFiniteGradient, "entry " + std::to_string(i));

  const bool masked = !mask.empty();
  ++step_;
  const T lr = static_cast<T>(hyper.lr);
  const T wd = static_cast<T>(hyper.weight_decay);
  if (hyper.rule == OptimizerRule::SGD) {
    for (std::size_t i = 0; i < params_.size(); ++i) {
      if (masked && !mask[i]) continue;
      params_[i] -= lr * (grads[i] + wd * params_[i]);
    }
    return;
  }
  if (adam_m_.size() != params_.size()) {
    adam_m_.assign(params_.size(), T(0));
    adam_v_.assign(params_.size(), T(0));
  }
  const T b1 = static_cast<T>(hyper.beta1), b2 = static_cast<T>(hyper.beta2), eps = static_cast<T>(hyper.eps);
  const T bc1 = T(1) - static_cast<T>(std::pow(hyper.beta1, static_cast<double>(step_)));
  const T bc2 = T(1) - static_cast<T>(std::pow(hyper.beta2, static_cast<double>(step_)));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    if (masked && !mask[i]) continue;
    const T gi = grads[i];
    adam_m_[i] = b1 * adam_m_[i] + (T(1) - b1) * gi;
    adam_v_[i] = b2 * adam_v_[i] + (T(1) - b2) * gi * gi;
    const T mhat = adam_m_[i] / bc1;
    const T vhat = adam_v_[i] / bc2;
    params_[i] -= lr * (mhat / (std::sqrt(vhat) + eps) + wd * params_[i]);
  }
}

template <class T>
Mat<float> Transformer<T>::batch_logits(const TokenBatch& batch) const {
  auto fp = forward(batch);
  if constexpr (std::is_same_v<T, float>) return std::move(fp.logits);
  else return fp.logits.template cast<float>();
}

template class Transformer<float>;
template class Transformer<double>;
template struct ForwardPass<float>;
template struct ForwardPass<double>;

template <class T>
double loss(const Mat<T>& logits, std::span<const TokenId> targets, std::span<const std::uint8_t> mask) {
  if (targets.size() != static_cast<std::size_t>(logits.rows()) || mask.size() != targets.size())
    fail(ErrorCode::ShapeMismatch, "loss inputs disagree");
  double total = 0;
  std::size_t count = 0;
  for (Eigen::Index r = 0; r < logits.rows(); ++r) {
    if (!mask[static_cast<std::size_t>(r)]) continue;
    const double mx = static_cast<double>(logits.row(r).maxCoeff());
    double denom = 0;
    for (Eigen::Index v = 0; v < logits.cols(); ++v) denom += std::exp(static_cast<double>(logits(r, v)) - mx);
    total += std::log(denom) + mx - static_cast<double>(logits(r, targets[static_cast<std::size_t>(r)]));
    ++count;
  }
  if (count == 0) fail(ErrorCode::EmptyMask, "no supervised positions");
  return total / static_cast<double>(count);
}

template double loss<float>(const Mat<float>&, std::span<const TokenId>, std::span<const std::uint8_t>);
template double loss<double>(const Mat<double>&, std::span<const TokenId>, std::span<const std::uint8_t>);

Vec<double> softmax_row(const Eigen::Ref<const Mat<float>>& logits, Eigen::Index row) {
  Vec<double> p = logits.row(row).transpose().cast<double>();
  p.array() -= p.maxCoeff();
  p = p.array().exp();
  p /= p.sum();
  return p;
}

// ---------------------------------------------------------------------------
// Recall

std::vector<bool> recall_facts(const LogitModel& model, std::span<const EncodedFact> facts, std::size_t batch_size) {
  std::vector<bool> out;
  out.reserve(facts.size());
  for (std::size_t start = 0; start < facts.size(); start += batch_size) {
    const auto chunk = facts.subspan(start, std::min(batch_size, facts.size() - start));
    const LmBatch lb = make_lm_batch(chunk, LossMode::ObjectOnly);
    const Mat<float> logits = model.batch_logits(lb.inputs);
    for (std::size_t i = 0; i < chunk.size(); ++i) {
      bool ok = true;
      for (std::size_t t = 0; t < lb.inputs.seq && ok; ++t) {
        const std::size_t r = i * lb.inputs.seq + t;
        if (!lb.mask[r]) continue;
        Eigen::Index arg = 0;
        logits.row(static_cast<Eigen::Index>(r)).maxCoeff(&arg);
        ok = static_cast<TokenId>(arg) == lb.targets[r];
      }
      out.push_back(ok);
    }
  }
  return out;
}

bool recall_fact(const LogitModel& model, const EncodedFact& fact) {
  return recall_facts(model, std::span<const EncodedFact>(&fact, 1)).front();
}

double accuracy(const LogitModel& model, std::span<const EncodedFact> facts, std::size_t batch_size) {
  if (facts.empty()) fail(ErrorCode::EmptyInput, "accuracy over an empty fact list");
  const auto hits = recall_facts(model, facts, batch_size);
  return static_cast<double>(std::count(hits.begin(), hits.end(), true)) / static_cast<double>(hits.size());
}

}  // namespace plab::model
