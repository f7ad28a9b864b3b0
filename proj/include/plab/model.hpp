#pragma once

#include <array>
#include <compare>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Core>
#include <json.hpp>

#include "plab/corpus.hpp"

namespace plab::model {

using corpus::TokenId;

template <class T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using Vec = Eigen::Matrix<T, Eigen::Dynamic, 1>;

/// The four per-block matrices whose output units are addressable neurons.
enum class TrackedKind : std::uint8_t { AttnCAttn = 0, AttnCProj = 1, MlpCFc = 2, MlpCProj = 3 };
inline constexpr std::array<TrackedKind, 4> kTrackedKinds{TrackedKind::AttnCAttn, TrackedKind::AttnCProj,
                                                          TrackedKind::MlpCFc, TrackedKind::MlpCProj};
std::string_view to_string(TrackedKind k);
TrackedKind tracked_kind_from_string(std::string_view s);

struct ModelConfig {
  std::size_t n_layers = 4;
  std::size_t d_model = 128;
  std::size_t n_heads = 4;
  std::size_t d_ff = 512;
  std::size_t d_key = 0;    // per head; 0 means d_model / n_heads
  std::size_t d_value = 0;  // per head; 0 means d_model / n_heads
  std::size_t vocab_size = 0;
  std::size_t max_seq = 16;
  bool tied_head = false;
  std::uint64_t seed = 0;

  void validate() const;
  std::size_t key_dim() const { return d_key ? d_key : d_model / n_heads; }
  std::size_t value_dim() const { return d_value ? d_value : d_model / n_heads; }
  std::size_t qkv_dim() const { return n_heads * (2 * key_dim() + value_dim()); }
  std::size_t context_dim() const { return n_heads * value_dim(); }
  std::size_t out_dim(TrackedKind k) const;
  std::size_t in_dim(TrackedKind k) const;
  std::size_t neurons_per_block() const;
  std::size_t total_neurons() const { return n_layers * neurons_per_block(); }
};

nlohmann::json to_json(const ModelConfig& c);
ModelConfig model_config_from_json(const nlohmann::json& j);

struct NeuronId {
  std::uint32_t layer = 0;
  TrackedKind kind = TrackedKind::AttnCAttn;
  std::uint32_t index = 0;
  auto operator<=>(const NeuronId&) const = default;
};
std::string to_string(const NeuronId& n);

/// Flat, ascending-NeuronId enumeration of every tracked neuron of a config.
class NeuronSpace {
 public:
  explicit NeuronSpace(const ModelConfig& config);
  std::size_t size() const { return total_; }
  std::size_t flat(const NeuronId& n) const;  // throws InvalidNeuron
  NeuronId at(std::size_t flat) const;
  std::size_t offset(std::size_t layer, TrackedKind kind) const;
  std::size_t width(TrackedKind kind) const { return widths_[static_cast<std::size_t>(kind)]; }
  std::size_t layers() const { return layers_; }
  bool valid(const NeuronId& n) const;

 private:
  std::size_t layers_ = 0;
  std::array<std::size_t, 4> widths_{};
  std::size_t per_block_ = 0;
  std::size_t total_ = 0;
};

struct ParamInfo {
  std::string name;
  std::size_t rows = 0;
  std::size_t cols = 1;
  std::size_t offset = 0;
  std::size_t size() const { return rows * cols; }
};

/// Indices into ParamLayout::params for one block.
struct BlockParamIndex {
  std::size_t ln1_g, ln1_b, attn_w, attn_b, proj_w, proj_b, ln2_g, ln2_b, fc_w, fc_b, mproj_w, mproj_b;
};

/// Every parameter lives in one contiguous buffer; weights are stored
/// (out x in) so the entries owned by one output unit are a contiguous row.
class ParamLayout {
 public:
  explicit ParamLayout(const ModelConfig& config);
  const std::vector<ParamInfo>& params() const { return params_; }
  const ParamInfo& operator[](std::size_t i) const { return params_[i]; }
  std::size_t find(std::string_view name) const;
  std::size_t total() const { return total_; }
  const BlockParamIndex& block(std::size_t l) const { return blocks_[l]; }
  std::size_t wte() const { return wte_; }
  std::size_t wpe() const { return wpe_; }
  std::size_t lnf_g() const { return lnf_g_; }
  std::size_t lnf_b() const { return lnf_b_; }
  /// Output head parameter index; equals wte() when the head is tied.
  std::size_t head() const { return head_; }
  std::size_t tracked_weight(std::size_t layer, TrackedKind k) const;
  std::size_t tracked_bias(std::size_t layer, TrackedKind k) const;
  /// True for parameters that belong to a tracked matrix (weight or bias).
  bool is_tracked(std::size_t param) const;

 private:
  std::size_t add(std::string name, std::size_t rows, std::size_t cols);
  std::vector<ParamInfo> params_;
  std::vector<BlockParamIndex> blocks_;
  std::size_t wte_ = 0, wpe_ = 0, lnf_g_ = 0, lnf_b_ = 0, head_ = 0, total_ = 0;
};

/// Right-padded token matrix (batch x seq).
struct TokenBatch {
  std::size_t batch = 0;
  std::size_t seq = 0;
  std::vector<TokenId> tokens;
  std::vector<std::size_t> lengths;

  TokenId at(std::size_t b, std::size_t t) const { return tokens[b * seq + t]; }
};

enum class LossMode { AllTokens, ObjectOnly };

struct EncodedFact {
  corpus::FactId id = 0;
  std::vector<TokenId> tokens;  // BOS ... object EOS
  std::size_t object_len = 1;
};

EncodedFact encode_fact(const corpus::Vocabulary& vocab, const corpus::FactRecord& record);
EncodedFact encode_surface(const corpus::Vocabulary& vocab, const corpus::FactRecord& record,
                           const corpus::TokenSeq& surface);
std::vector<EncodedFact> encode_facts(const corpus::Vocabulary& vocab, std::span<const corpus::FactRecord> records);

/// Next-token training batch: inputs drop the final EOS, targets are shifted
/// by one, mask selects supervised positions.
struct LmBatch {
  TokenBatch inputs;
  std::vector<TokenId> targets;
  std::vector<std::uint8_t> mask;
};
LmBatch make_lm_batch(std::span<const EncodedFact> facts, LossMode mode = LossMode::AllTokens);

template <class T>
struct BlockCache {
  Mat<T> x_in, ln1, qkv, ctx, attn_out, x_mid, ln2, fc_pre, fc_act, mlp_out;
  Vec<T> ln1_mean, ln1_rstd, ln2_mean, ln2_rstd;
  std::vector<T> att;  // batch x heads x seq x seq
};

/// Everything the backward pass needs plus the tracked layer outputs A^l.
template <class T>
struct ForwardPass {
  std::size_t batch = 0, seq = 0;
  std::vector<TokenId> tokens;
  std::vector<std::size_t> lengths;
  std::vector<BlockCache<T>> blocks;
  Mat<T> x_final, lnf, logits;
  Vec<T> lnf_mean, lnf_rstd;

  const Mat<T>& activation(std::size_t layer, TrackedKind k) const;
};

/// dL/d(output) of every tracked matrix, rows = batch*seq.
template <class T>
struct GradOutTrace {
  std::vector<std::array<Mat<T>, 4>> blocks;
  const Mat<T>& at(std::size_t layer, TrackedKind k) const { return blocks[layer][static_cast<std::size_t>(k)]; }
};

template <class T>
struct BackwardPass {
  std::vector<T> grads;  // same layout as the parameters
  GradOutTrace<T> grad_out;
};

enum class OptimizerRule { SGD, Adam };

struct OptimizerHyper {
  OptimizerRule rule = OptimizerRule::Adam;
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};
nlohmann::json to_json(const OptimizerHyper& h);
OptimizerHyper optimizer_hyper_from_json(const nlohmann::json& j);

/// Read-only logits provider; recall metrics and output features only need this.
class LogitModel {
 public:
  virtual ~LogitModel() = default;
  virtual std::size_t vocab_size() const = 0;
  /// (batch*seq) x vocab logits.
  virtual Mat<float> batch_logits(const TokenBatch& batch) const = 0;
};

template <class T>
class Transformer final : public LogitModel {
 public:
  explicit Transformer(const ModelConfig& config);
  Transformer(const ModelConfig& config, std::vector<T> params);

  const ModelConfig& config() const { return config_; }
  const ParamLayout& layout() const { return layout_; }
  std::span<T> params() { return params_; }
  std::span<const T> params() const { return params_; }
  Eigen::Map<Mat<T>> param(std::size_t i);
  Eigen::Map<const Mat<T>> param(std::size_t i) const;

  template <class U>
  Transformer<U> cast() const {
    std::vector<U> p(params_.begin(), params_.end());
    return Transformer<U>(config_, std::move(p));
  }

  ForwardPass<T> forward(const TokenBatch& batch) const;
  /// Gradients of loss_scale * mean masked NLL. Parameters are not touched.
  BackwardPass<T> backward(const ForwardPass<T>& fwd, std::span<const TokenId> targets,
                           std::span<const std::uint8_t> mask, T loss_scale = T(1)) const;

  /// Applies one update. A non-null mask restricts the update, and the
  /// optimizer moments, to entries whose mask byte is set.
  void optimizer_step(std::span<const T> grads, const OptimizerHyper& hyper,
                      std::span<const std::uint8_t> mask = {});
  void reset_optimizer();
  std::uint64_t optimizer_steps() const { return step_; }

  std::size_t vocab_size() const override { return config_.vocab_size; }
  Mat<float> batch_logits(const TokenBatch& batch) const override;

 private:
  ModelConfig config_;
  ParamLayout layout_;
  std::vector<T> params_;
  std::vector<T> adam_m_, adam_v_;
  std::uint64_t step_ = 0;
};

extern template class Transformer<float>;
extern template class Transformer<double>;
using Model = Transformer<float>;

/// Mean negative log-likelihood over masked positions.
template <class T>
double loss(const Mat<T>& logits, std::span<const TokenId> targets, std::span<const std::uint8_t> mask);

/// Row-wise softmax in double precision.
Vec<double> softmax_row(const Eigen::Ref<const Mat<float>>& logits, Eigen::Index row);

/// Greedy decoding from the prompt reproduces every object token. Under a
/// causal model this equals teacher-forced argmax agreement at each object
/// position, which is how it is evaluated (one forward per batch).
bool recall_fact(const LogitModel& model, const EncodedFact& fact);
std::vector<bool> recall_facts(const LogitModel& model, std::span<const EncodedFact> facts,
                               std::size_t batch_size = 128);
double accuracy(const LogitModel& model, std::span<const EncodedFact> facts, std::size_t batch_size = 128);

/// Bitwise checkpoint: magic, header length, JSON header, float32 payload.
inline constexpr std::string_view kCheckpointMagic = "PLABCKPT1";
std::string checkpoint_bytes(const Model& model);
Model model_from_checkpoint_bytes(const std::string& bytes);
void save_checkpoint(const Model& model, const std::filesystem::path& path);
Model load_checkpoint(const std::filesystem::path& path);
std::string fingerprint(const Model& model);

}  // namespace plab::model
