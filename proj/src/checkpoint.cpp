#include <fstream>
#include <sstream>

#include "plab/binary_io.hpp"
#include "plab/model.hpp"
#include "plab/rng.hpp"

namespace plab {

std::string io::read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorCode::Io, "cannot read " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void io::write_file(const std::string& path, std::string_view bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(ErrorCode::Io, "cannot write " + path);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) fail(ErrorCode::Io, "write failed: " + path);
}

namespace model {

std::string checkpoint_bytes(const Model& m) {
  nlohmann::json manifest = nlohmann::json::array();
  for (const auto& p : m.layout().params())
    manifest.push_back({{"name", p.name}, {"shape", {p.rows, p.cols}}, {"offset", p.offset * sizeof(float)}});
  const std::size_t bytes = m.params().size() * sizeof(float);
  nlohmann::json header{{"format", 1}, {"config", to_json(m.config())}, {"parameters", manifest}, {"payload_bytes", bytes}};
  return io::pack(kCheckpointMagic, header, m.params().data(), bytes);
}

Model model_from_checkpoint_bytes(const std::string& bytes) {
  const auto u = io::unpack(kCheckpointMagic, bytes);
  if (u.header.value("format", 0) != 1) fail(ErrorCode::Version, "unsupported checkpoint format");
  const ModelConfig cfg = model_config_from_json(u.header.at("config"));
  const ParamLayout layout(cfg);
  if (u.payload.size() != layout.total() * sizeof(float))
    fail(ErrorCode::Version, "payload does not match the config's parameter count");
  std::vector<float> params(layout.total());
  std::memcpy(params.data(), u.payload.data(), u.payload.size());
  return Model(cfg, std::move(params));
}

void save_checkpoint(const Model& m, const std::filesystem::path& path) { io::write_file(path.string(), checkpoint_bytes(m)); }

Model load_checkpoint(const std::filesystem::path& path) { return model_from_checkpoint_bytes(io::read_file(path.string())); }

std::string fingerprint(const Model& m) {
  const std::string b = checkpoint_bytes(m);
  return hex64(fnv1a(b.data(), b.size()));
}

}  // namespace model
}  // namespace plab
