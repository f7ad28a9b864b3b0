#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <string>
#include <string_view>

#include <json.hpp>

#include "plab/error.hpp"

namespace plab::io {

static_assert(std::endian::native == std::endian::little, "payloads are written in host order");

/// magic | u64 header length | JSON header | raw little-endian payload
inline std::string pack(std::string_view magic, const nlohmann::json& header, const void* payload,
                        std::size_t payload_bytes) {
  const std::string h = header.dump();
  const std::uint64_t hlen = h.size();
  std::string out;
  out.reserve(magic.size() + 8 + h.size() + payload_bytes);
  out.append(magic);
  out.append(reinterpret_cast<const char*>(&hlen), 8);
  out.append(h);
  out.append(static_cast<const char*>(payload), payload_bytes);
  return out;
}

struct Unpacked {
  nlohmann::json header;
  std::string_view payload;
};

inline Unpacked unpack(std::string_view magic, std::string_view bytes) {
  if (bytes.size() < magic.size() + 8 || bytes.substr(0, magic.size()) != magic)
    fail(ErrorCode::Version, "missing magic " + std::string(magic));
  std::uint64_t hlen = 0;
  std::memcpy(&hlen, bytes.data() + magic.size(), 8);
  const std::size_t start = magic.size() + 8;
  if (hlen > bytes.size() - start) fail(ErrorCode::Version, "truncated header");
  Unpacked u;
  try {
    u.header = nlohmann::json::parse(bytes.substr(start, hlen));
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::Version, std::string("corrupt header: ") + e.what());
  }
  u.payload = bytes.substr(start + hlen);
  if (!u.header.contains("payload_bytes") || u.header["payload_bytes"].get<std::size_t>() != u.payload.size())
    fail(ErrorCode::Version, "payload size does not match header (truncated file?)");
  return u;
}

std::string read_file(const std::string& path);
void write_file(const std::string& path, std::string_view bytes);

}  // namespace plab::io
