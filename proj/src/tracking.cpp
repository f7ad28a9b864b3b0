#include "plab/tracking.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>

#include "plab/binary_io.hpp"
#include "plab/error.hpp"
#include "plab/rng.hpp"

namespace plab::tracking {
namespace {

constexpr double kSigmaGuard = 1e-12;

void add_into(std::vector<double>& acc, std::size_t offset, const std::vector<double>& v) {
  for (std::size_t i = 0; i < v.size(); ++i) acc[offset + i] += v[i];
}

std::vector<double> reduce_step(const Tensor3& t, const ReductionSettings& s) {
  return s.standardize ? reduce(standardize(t), s.token_mode, s.magnitude) : reduce(t, s.token_mode, s.magnitude);
}

void check_shape(const model::NeuronSpace& space, std::size_t layer, model::TrackedKind k, const Tensor3& t) {
  if (t.dim != space.width(k))
    fail(ErrorCode::ShapeMismatch, "capture width " + std::to_string(t.dim) + " for layer " + std::to_string(layer) +
                                       " " + std::string(model::to_string(k)));
}

void accumulate_one(HistoricalProfile& p, const model::NeuronSpace& space, std::size_t layer, model::TrackedKind k,
                    const Tensor3& a, const Tensor3& g) {
  check_shape(space, layer, k, a);
  check_shape(space, layer, k, g);
  const std::size_t off = space.offset(layer, k);
  add_into(p.ha, off, reduce_step(a, p.settings));
  add_into(p.hg, off, reduce_step(g, p.settings));
}

std::string token_mode_name(TokenMode m) { return m == TokenMode::LastToken ? "LastToken" : "SumTokens"; }
std::string magnitude_name(Magnitude m) { return m == Magnitude::Absolute ? "Absolute" : "Signed"; }

}  // namespace

nlohmann::json to_json(const ReductionSettings& s) {
  return {{"standardize", s.standardize},
          {"token_mode", token_mode_name(s.token_mode)},
          {"magnitude", magnitude_name(s.magnitude)}};
}

ReductionSettings reduction_settings_from_json(const nlohmann::json& j) {
  ReductionSettings s;
  s.standardize = j.value("standardize", s.standardize);
  const auto tm = j.value("token_mode", token_mode_name(s.token_mode));
  if (tm == "LastToken") s.token_mode = TokenMode::LastToken;
  else if (tm == "SumTokens") s.token_mode = TokenMode::SumTokens;
  else fail(ErrorCode::InvalidConfig, "token_mode must be LastToken or SumTokens");
  const auto mg = j.value("magnitude", magnitude_name(s.magnitude));
  if (mg == "Absolute") s.magnitude = Magnitude::Absolute;
  else if (mg == "Signed") s.magnitude = Magnitude::Signed;
  else fail(ErrorCode::InvalidConfig, "magnitude must be Absolute or Signed");
  return s;
}

template <class T>
Tensor3 to_tensor3(const model::Mat<T>& rows, std::size_t batch, std::size_t tokens,
                   const std::vector<std::size_t>& lengths) {
  if (static_cast<std::size_t>(rows.rows()) != batch * tokens || lengths.size() != batch)
    fail(ErrorCode::ShapeMismatch, "trace rows do not match batch x tokens");
  Tensor3 t;
  t.batch = batch;
  t.tokens = tokens;
  t.dim = static_cast<std::size_t>(rows.cols());
  t.lengths = lengths;
  t.values.resize(batch * tokens * t.dim);
  const T* src = rows.data();
  for (std::size_t i = 0; i < t.values.size(); ++i) t.values[i] = static_cast<double>(src[i]);
  return t;
}

template Tensor3 to_tensor3<float>(const model::Mat<float>&, std::size_t, std::size_t, const std::vector<std::size_t>&);
template Tensor3 to_tensor3<double>(const model::Mat<double>&, std::size_t, std::size_t,
                                    const std::vector<std::size_t>&);

Tensor3 standardize(const Tensor3& t) {
  Tensor3 out = t;
  double sum = 0;
  std::size_t n = 0;
  for (std::size_t b = 0; b < t.batch; ++b)
    for (std::size_t p = 0; p < t.tokens; ++p) {
      if (!t.valid(b, p)) continue;
      for (std::size_t i = 0; i < t.dim; ++i) sum += t.at(b, p, i);
      n += t.dim;
    }
  std::fill(out.values.begin(), out.values.end(), 0.0);
  if (n == 0) return out;
  const double mean = sum / static_cast<double>(n);
  double ss = 0;
  for (std::size_t b = 0; b < t.batch; ++b)
    for (std::size_t p = 0; p < t.tokens; ++p) {
      if (!t.valid(b, p)) continue;
      for (std::size_t i = 0; i < t.dim; ++i) {
        const double d = t.at(b, p, i) - mean;
        ss += d * d;
      }
    }
  const double sigma = std::sqrt(ss / static_cast<double>(n));
  if (sigma < kSigmaGuard) return out;
  for (std::size_t b = 0; b < t.batch; ++b)
    for (std::size_t p = 0; p < t.tokens; ++p) {
      if (!t.valid(b, p)) continue;
      for (std::size_t i = 0; i < t.dim; ++i) out.at(b, p, i) = (t.at(b, p, i) - mean) / sigma;
    }
  return out;
}

std::vector<double> reduce(const Tensor3& t, TokenMode mode, Magnitude magnitude) {
  std::vector<double> out(t.dim, 0.0);
  const bool abs = magnitude == Magnitude::Absolute;
  for (std::size_t b = 0; b < t.batch; ++b) {
    if (t.lengths[b] == 0) continue;
    const std::size_t first = mode == TokenMode::LastToken ? t.lengths[b] - 1 : 0;
    for (std::size_t p = first; p < t.lengths[b]; ++p)
      for (std::size_t i = 0; i < t.dim; ++i) {
        const double v = t.at(b, p, i);
        out[i] += abs ? std::fabs(v) : v;
      }
  }
  return out;
}

template <class T>
StepCapture capture_step(const model::ForwardPass<T>& fwd, const model::BackwardPass<T>& bwd) {
  StepCapture c;
  c.layers = fwd.blocks.size();
  if (bwd.grad_out.blocks.size() != c.layers) fail(ErrorCode::ShapeMismatch, "trace layer counts disagree");
  for (std::size_t l = 0; l < c.layers; ++l)
    for (auto k : model::kTrackedKinds) {
      c.activations.push_back(to_tensor3(fwd.activation(l, k), fwd.batch, fwd.seq, fwd.lengths));
      c.grad_outs.push_back(to_tensor3(bwd.grad_out.at(l, k), fwd.batch, fwd.seq, fwd.lengths));
    }
  return c;
}

template StepCapture capture_step<float>(const model::ForwardPass<float>&, const model::BackwardPass<float>&);
template StepCapture capture_step<double>(const model::ForwardPass<double>&, const model::BackwardPass<double>&);

HistoricalProfile make_profile(const model::ModelConfig& config, ReductionSettings settings) {
  HistoricalProfile p;
  p.model_config = config;
  p.settings = settings;
  const model::NeuronSpace space(config);
  p.ha.assign(space.size(), 0.0);
  p.hg.assign(space.size(), 0.0);
  const std::string cfg = model::to_json(config).dump();
  p.model_fingerprint = hex64(fnv1a(cfg.data(), cfg.size()));
  return p;
}

void accumulate(HistoricalProfile& profile, const StepCapture& capture) {
  const model::NeuronSpace space(profile.model_config);
  if (capture.layers != space.layers() || capture.activations.size() != capture.layers * 4 ||
      capture.grad_outs.size() != capture.layers * 4)
    fail(ErrorCode::ShapeMismatch, "capture does not cover the profile's model");
  for (std::size_t l = 0; l < capture.layers; ++l)
    for (auto k : model::kTrackedKinds) accumulate_one(profile, space, l, k, capture.activation(l, k), capture.grad_out(l, k));
  ++profile.steps;
}

template <class T>
void accumulate(HistoricalProfile& profile, const model::ForwardPass<T>& fwd, const model::BackwardPass<T>& bwd) {
  const model::NeuronSpace space(profile.model_config);
  if (fwd.blocks.size() != space.layers() || bwd.grad_out.blocks.size() != space.layers())
    fail(ErrorCode::ShapeMismatch, "trace does not cover the profile's model");
  for (std::size_t l = 0; l < space.layers(); ++l)
    for (auto k : model::kTrackedKinds)
      accumulate_one(profile, space, l, k, to_tensor3(fwd.activation(l, k), fwd.batch, fwd.seq, fwd.lengths),
                     to_tensor3(bwd.grad_out.at(l, k), fwd.batch, fwd.seq, fwd.lengths));
  ++profile.steps;
}

template void accumulate<float>(HistoricalProfile&, const model::ForwardPass<float>&, const model::BackwardPass<float>&);
template void accumulate<double>(HistoricalProfile&, const model::ForwardPass<double>&,
                                 const model::BackwardPass<double>&);

GradientSnapshot snapshot_gradients(const model::Model& m, std::span<const model::EncodedFact> facts,
                                    ReductionSettings settings, std::size_t batch_size, model::LossMode loss_mode) {
  if (facts.empty()) fail(ErrorCode::EmptyInput, "snapshot over an empty fact set");
  if (batch_size == 0) fail(ErrorCode::InvalidArgument, "batch_size must be positive");
  const model::NeuronSpace space(m.config());
  GradientSnapshot snap;
  snap.settings = settings;
  snap.g_new.assign(space.size(), 0.0);
  for (std::size_t start = 0; start < facts.size(); start += batch_size) {
    const auto chunk = facts.subspan(start, std::min(batch_size, facts.size() - start));
    const auto lb = model::make_lm_batch(chunk, loss_mode);
    const auto fwd = m.forward(lb.inputs);
    const auto bwd = m.backward(fwd, lb.targets, lb.mask);
    for (std::size_t l = 0; l < space.layers(); ++l)
      for (auto k : model::kTrackedKinds) {
        const auto g = to_tensor3(bwd.grad_out.at(l, k), fwd.batch, fwd.seq, fwd.lengths);
        add_into(snap.g_new, space.offset(l, k), reduce_step(g, settings));
      }
  }
  return snap;
}

std::string profile_bytes(const HistoricalProfile& p) {
  const model::NeuronSpace space(p.model_config);
  nlohmann::json manifest = nlohmann::json::array();
  for (std::size_t l = 0; l < space.layers(); ++l)
    for (auto k : model::kTrackedKinds)
      manifest.push_back({{"layer", l}, {"kind", model::to_string(k)}, {"offset", space.offset(l, k)}, {"width", space.width(k)}});
  std::vector<double> payload(p.ha);
  payload.insert(payload.end(), p.hg.begin(), p.hg.end());
  const std::size_t bytes = payload.size() * sizeof(double);
  nlohmann::json header{{"format", 1},
                         {"settings", to_json(p.settings)},
                         {"model_config", model::to_json(p.model_config)},
                         {"model_fingerprint", p.model_fingerprint},
                         {"steps", p.steps},
                         {"neurons", manifest},
                         {"payload_bytes", bytes}};
  return io::pack(kProfileMagic, header, payload.data(), bytes);
}

LoadedProfile profile_from_bytes(const std::string& bytes, std::optional<ReductionSettings> expected) {
  const auto u = io::unpack(kProfileMagic, bytes);
  if (u.header.value("format", 0) != 1) fail(ErrorCode::Version, "unsupported profile format");
  LoadedProfile out;
  auto& p = out.profile;
  p.model_config = model::model_config_from_json(u.header.at("model_config"));
  p.settings = reduction_settings_from_json(u.header.at("settings"));
  p.model_fingerprint = u.header.at("model_fingerprint").get<std::string>();
  p.steps = u.header.at("steps").get<std::uint64_t>();
  const std::size_t n = model::NeuronSpace(p.model_config).size();
  if (u.payload.size() != 2 * n * sizeof(double)) fail(ErrorCode::Version, "profile payload does not cover the model");
  p.ha.resize(n);
  p.hg.resize(n);
  std::memcpy(p.ha.data(), u.payload.data(), n * sizeof(double));
  std::memcpy(p.hg.data(), u.payload.data() + n * sizeof(double), n * sizeof(double));
  out.settings_mismatch = expected.has_value() && !(*expected == p.settings);
  return out;
}

void save_profile(const HistoricalProfile& profile, const std::filesystem::path& path) {
  io::write_file(path.string(), profile_bytes(profile));
}

LoadedProfile load_profile(const std::filesystem::path& path, std::optional<ReductionSettings> expected) {
  return profile_from_bytes(io::read_file(path.string()), expected);
}

void export_profile_csv(const HistoricalProfile& p, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) fail(ErrorCode::Io, "cannot write " + path.string());
  const model::NeuronSpace space(p.model_config);
  out << "neuron_id,layer,kind,index,HA,HG\n";
  char buf[64];
  for (std::size_t i = 0; i < space.size(); ++i) {
    const auto n = space.at(i);
    out << i << ',' << n.layer << ',' << model::to_string(n.kind) << ',' << n.index << ',';
    std::snprintf(buf, sizeof buf, "%.17g", p.ha[i]);
    out << buf << ',';
    std::snprintf(buf, sizeof buf, "%.17g", p.hg[i]);
    out << buf << '\n';
  }
}

std::string fingerprint(const HistoricalProfile& profile) {
  const std::string b = profile_bytes(profile);
  return hex64(fnv1a(b.data(), b.size()));
}

std::string fingerprint(const GradientSnapshot& s) {
  return hex64(fnv1a(s.g_new.data(), s.g_new.size() * sizeof(double)));
}

}  // namespace plab::tracking
