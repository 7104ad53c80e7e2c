#include "tlkit/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <vector>

#include "tlkit/errors.hpp"

namespace tlkit {

namespace {

void put_u16(std::vector<uint8_t>& out, uint16_t v) {
  out.push_back(uint8_t(v & 0xff));
  out.push_back(uint8_t(v >> 8));
}

void put_u32(std::vector<uint8_t>& out, uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(uint8_t((v >> (8 * i)) & 0xff));
}

uint16_t get_u16(const std::vector<uint8_t>& b, size_t& pos) {
  if (pos + 2 > b.size()) throw FormatError("checkpoint truncated", pos);
  uint16_t v = uint16_t(b[pos]) | uint16_t(uint16_t(b[pos + 1]) << 8);
  pos += 2;
  return v;
}

uint32_t get_u32(const std::vector<uint8_t>& b, size_t& pos) {
  if (pos + 4 > b.size()) throw FormatError("checkpoint truncated", pos);
  uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= uint32_t(b[pos + size_t(i)]) << (8 * i);
  pos += 4;
  return v;
}

}  // namespace

void save_checkpoint(const VitParams<float>& params, const std::string& path) {
  std::vector<uint8_t> out;
  out.push_back('T');
  out.push_back('L');
  out.push_back('C');
  out.push_back('K');
  put_u16(out, 1);
  const std::string cfg = params.config.serialize();
  put_u32(out, uint32_t(cfg.size()));
  out.insert(out.end(), cfg.begin(), cfg.end());
  params.for_each([&](const std::string&, const Tensor<float>& t) {
    put_u32(out, uint32_t(t.numel()));
    const size_t at = out.size();
    out.resize(at + size_t(t.numel()) * 4);
    std::memcpy(out.data() + at, t.data(), size_t(t.numel()) * 4);
  });
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot write checkpoint: " + path);
  f.write(reinterpret_cast<const char*>(out.data()), std::streamsize(out.size()));
  if (!f) throw IoError("short write for checkpoint: " + path);
}

VitParams<float> load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open checkpoint: " + path);
  std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(f)),
                             std::istreambuf_iterator<char>());
  if (bytes.size() < 4 || std::memcmp(bytes.data(), "TLCK", 4) != 0) {
    throw FormatError("bad magic, expected TLCK", 0);
  }
  size_t pos = 4;
  const uint16_t version = get_u16(bytes, pos);
  if (version != 1) throw FormatError("unsupported checkpoint version", 4);
  const uint32_t cfg_len = get_u32(bytes, pos);
  if (pos + cfg_len > bytes.size()) throw FormatError("checkpoint truncated", pos);
  const std::string cfg_text(bytes.begin() + std::ptrdiff_t(pos),
                             bytes.begin() + std::ptrdiff_t(pos + cfg_len));
  pos += cfg_len;
  const ModelConfig cfg = ModelConfig::deserialize(cfg_text);
  // Shapes come from the config; the file only has to supply matching counts.
  VitParams<float> params = build_model<float>(cfg, 0);
  params.for_each([&](const std::string& name, Tensor<float>& t) {
    const size_t at = pos;
    const uint32_t n = get_u32(bytes, pos);
    if (int64_t(n) != t.numel()) {
      throw FormatError("tensor size mismatch for " + name, at);
    }
    if (pos + size_t(n) * 4 > bytes.size()) throw FormatError("checkpoint truncated", pos);
    std::memcpy(t.data(), bytes.data() + pos, size_t(n) * 4);
    pos += size_t(n) * 4;
  });
  if (pos != bytes.size()) throw FormatError("trailing bytes after tensors", pos);
  return params;
}

}  // namespace tlkit
