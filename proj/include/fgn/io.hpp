#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "fgn/common.hpp"
#include "fgn/tensor.hpp"

namespace fgn {

using json = nlohmann::json;

// Framed artifact layout, shared by datasets, checkpoints, train states and
// forecasts:
//
//   magic (8 bytes) | u64 LE header length | header JSON | payload bytes
//   | u64 LE FNV-1a of everything before the trailer
//
// Headers are self-describing JSON; payloads are packed little-endian f64.
// The header can be read without touching the payload.  Full loads verify
// the trailing checksum, header-only reads do not.

namespace wire {

inline void put_u64(std::string& out, uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline uint64_t get_u64(const char* p) {
  uint64_t v = 0;
  for (int i = 7; i >= 0; --i) v = (v << 8) | static_cast<unsigned char>(p[i]);
  return v;
}

inline void put_f64(std::string& out, double x) {
  uint64_t bits;
  std::memcpy(&bits, &x, sizeof bits);
  put_u64(out, bits);
}

inline double get_f64(const char* p) {
  uint64_t bits = get_u64(p);
  double x;
  std::memcpy(&x, &bits, sizeof x);
  return x;
}

inline void put_tensor(std::string& out, const Tensor& t) {
  for (double x : t.data) put_f64(out, x);
}

}  // namespace wire

inline std::string read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open file: " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (!in.good() && !in.eof()) throw DataCorruption("read failed: " + path.string());
  return bytes;
}

inline void write_file_bytes(const std::filesystem::path& path, std::string_view bytes) {
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw ConfigError("cannot create file: " + tmp.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out.good()) throw DataCorruption("write failed: " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

struct FramedFile {
  json header;
  std::string payload;
};

inline std::string frame_bytes(std::string_view magic, const json& header,
                               std::string_view payload) {
  if (magic.size() != 8) throw ContractViolation("frame: magic must be 8 bytes");
  std::string out(magic);
  std::string h = header.dump();
  wire::put_u64(out, h.size());
  out += h;
  out += payload;
  wire::put_u64(out, fnv1a64(out.data(), out.size()));
  return out;
}

inline void write_framed(const std::filesystem::path& path, std::string_view magic,
                         const json& header, std::string_view payload) {
  write_file_bytes(path, frame_bytes(magic, header, payload));
}

inline FramedFile read_framed(const std::filesystem::path& path, std::string_view magic) {
  std::string bytes = read_file_bytes(path);
  if (bytes.size() < 24) throw DataCorruption("truncated file: " + path.string());
  uint64_t stored = wire::get_u64(bytes.data() + bytes.size() - 8);
  uint64_t actual = fnv1a64(bytes.data(), bytes.size() - 8);
  if (stored != actual)
    throw DataCorruption("checksum mismatch in " + path.string() + ": stored " + hex64(stored) +
                         ", computed " + hex64(actual));
  if (bytes.compare(0, 8, magic) != 0)
    throw DataCorruption("bad magic in " + path.string() + " (expected " + std::string(magic) +
                         ")");
  uint64_t hlen = wire::get_u64(bytes.data() + 8);
  if (16 + hlen + 8 > bytes.size()) throw DataCorruption("header overruns file: " + path.string());
  FramedFile f;
  json h = json::parse(bytes.substr(16, hlen), nullptr, false);
  if (h.is_discarded()) throw DataCorruption("unparseable header in " + path.string());
  f.header = std::move(h);
  f.payload = bytes.substr(16 + hlen, bytes.size() - 8 - 16 - hlen);
  return f;
}

// Reads magic + header only; skips the payload and checksum entirely.
inline json read_framed_header(const std::filesystem::path& path, std::string_view magic) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open file: " + path.string());
  char head[16];
  in.read(head, 16);
  if (!in.good()) throw DataCorruption("truncated file: " + path.string());
  if (std::string_view(head, 8) != magic)
    throw DataCorruption("bad magic in " + path.string() + " (expected " + std::string(magic) +
                         ")");
  uint64_t hlen = wire::get_u64(head + 8);
  if (hlen > (1ull << 30)) throw DataCorruption("absurd header length in " + path.string());
  std::string h(hlen, '\0');
  in.read(h.data(), static_cast<std::streamsize>(hlen));
  if (!in.good()) throw DataCorruption("truncated header in " + path.string());
  json parsed = json::parse(h, nullptr, false);
  if (parsed.is_discarded()) throw DataCorruption("unparseable header in " + path.string());
  return parsed;
}

inline Tensor tensor_from_payload(std::string_view payload, size_t offset_elems,
                                  std::vector<int64_t> shape) {
  Tensor t = Tensor::zeros(std::move(shape));
  size_t need = (offset_elems + static_cast<size_t>(t.numel())) * 8;
  if (payload.size() < need) throw DataCorruption("payload too small for tensor");
  const char* p = payload.data() + offset_elems * 8;
  for (int64_t i = 0; i < t.numel(); ++i) t.data[static_cast<size_t>(i)] = wire::get_f64(p + 8 * i);
  return t;
}

}  // namespace fgn
