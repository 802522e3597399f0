#include "checkpoint.hpp"

#include <cstdint>
#include <cstring>
#include <fstream>

#include "errors.hpp"

namespace topiq {

namespace {

constexpr char kMagic[4] = {'T', 'Q', 'T', '1'};
constexpr uint32_t kVersion = 1;

void put_u32(std::ofstream& out, uint32_t v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(v));
}

void put_u64(std::ofstream& out, uint64_t v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(v));
}

bool get_u64(std::ifstream& in, uint64_t& v) {
  in.read(reinterpret_cast<char*>(&v), sizeof(v));
  return in.gcount() == sizeof(v);
}

}  // namespace

void save_tensors(const TensorMap& tensors, const std::string& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write checkpoint " + path);
  out.write(kMagic, 4);
  put_u32(out, kVersion);
  for (const auto& [name, t] : tensors) {
    put_u64(out, name.size());
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    put_u64(out, static_cast<uint64_t>(t.shape.size()));
    for (int64_t d : t.shape) put_u64(out, static_cast<uint64_t>(d));
    out.write(reinterpret_cast<const char*>(t.values.data()),
              static_cast<std::streamsize>(t.values.size() * sizeof(double)));
  }
  if (!out) throw DataError("short write on checkpoint " + path);
}

TensorMap load_tensors(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint " + path);
  char magic[4];
  in.read(magic, 4);
  if (in.gcount() != 4 || std::memcmp(magic, kMagic, 4) != 0)
    throw DataError(path + ": not a TQT1 checkpoint");
  uint32_t version = 0;
  in.read(reinterpret_cast<char*>(&version), sizeof(version));
  if (in.gcount() != sizeof(version) || version != kVersion)
    throw DataError(path + ": unsupported checkpoint version");
  TensorMap out;
  uint64_t name_len = 0;
  while (get_u64(in, name_len)) {
    if (name_len > (1u << 20)) throw DataError(path + ": corrupt tensor name length");
    std::string name(name_len, '\0');
    in.read(name.data(), static_cast<std::streamsize>(name_len));
    if (in.gcount() != static_cast<std::streamsize>(name_len))
      throw DataError(path + ": truncated tensor name");
    uint64_t rank = 0;
    if (!get_u64(in, rank) || rank > 8) throw DataError(path + ": corrupt tensor rank");
    Tensor t;
    int64_t numel = 1;
    for (uint64_t i = 0; i < rank; ++i) {
      uint64_t d = 0;
      if (!get_u64(in, d)) throw DataError(path + ": truncated shape");
      t.shape.push_back(static_cast<int64_t>(d));
      numel *= static_cast<int64_t>(d);
    }
    if (numel < 0 || numel > (1LL << 32)) throw DataError(path + ": corrupt shape");
    t.values.resize(static_cast<size_t>(numel));
    in.read(reinterpret_cast<char*>(t.values.data()),
            static_cast<std::streamsize>(t.values.size() * sizeof(double)));
    if (in.gcount() != static_cast<std::streamsize>(t.values.size() * sizeof(double)))
      throw DataError(path + ": truncated tensor data for '" + name + "'");
    if (out.count(name)) throw DataError(path + ": duplicate tensor '" + name + "'");
    out.emplace(std::move(name), std::move(t));
  }
  return out;
}

}  // namespace topiq
