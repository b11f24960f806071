#include "flowdiff/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <sstream>

#include <zlib.h>

#include "flowdiff/errors.hpp"

namespace flowdiff {

namespace {

constexpr char kMagic[4] = {'F', 'D', 'C', 'K'};

void append_bytes(std::string& buf, const void* p, std::size_t n) {
  buf.append(static_cast<const char*>(p), n);
}

template <typename T>
void append_scalar(std::string& buf, T v) {
  append_bytes(buf, &v, sizeof(T));
}

template <typename T>
T read_scalar(const std::string& buf, std::size_t& off) {
  if (off + sizeof(T) > buf.size())
    throw FormatError("checkpoint truncated", static_cast<std::uint64_t>(off));
  T v;
  std::memcpy(&v, buf.data() + off, sizeof(T));
  off += sizeof(T);
  return v;
}

std::uint32_t crc32_of(const std::string& buf) {
  uLong c = crc32(0L, Z_NULL, 0);
  c = crc32(c, reinterpret_cast<const Bytef*>(buf.data()), static_cast<uInt>(buf.size()));
  return static_cast<std::uint32_t>(c);
}

}  // namespace

void CheckpointData::add(std::string name, Tensor t, TensorDtype dtype) {
  entries.emplace_back(name, std::move(t));
  dtypes.emplace_back(std::move(name), dtype);
}

const Tensor& CheckpointData::get(const std::string& name) const {
  for (const auto& [n, t] : entries)
    if (n == name) return t;
  throw PreconditionError("checkpoint entry not found: " + name);
}

bool CheckpointData::has(const std::string& name) const {
  for (const auto& [n, t] : entries)
    if (n == name) return true;
  return false;
}

void write_checkpoint(const CheckpointData& data, const std::filesystem::path& path) {
  if (data.entries.size() != data.dtypes.size())
    throw PreconditionError("checkpoint entries/dtypes size mismatch");

  std::string buf;
  append_bytes(buf, kMagic, 4);
  append_scalar<std::uint16_t>(buf, kCheckpointVersion);
  append_scalar<std::uint64_t>(buf, data.config_digest);
  append_scalar<std::uint64_t>(buf, static_cast<std::uint64_t>(data.entries.size()));

  for (std::size_t i = 0; i < data.entries.size(); ++i) {
    const auto& [name, tensor] = data.entries[i];
    if (name.empty() || name.size() > 0xffff)
      throw PreconditionError("checkpoint entry name length out of range: " + name);
    append_scalar<std::uint16_t>(buf, static_cast<std::uint16_t>(name.size()));
    append_bytes(buf, name.data(), name.size());
    std::ostringstream rec(std::ios::binary);
    write_tensor_stream(tensor, rec, data.dtypes[i].second);
    buf += rec.str();
  }

  const std::uint32_t crc = crc32_of(buf);
  append_scalar<std::uint32_t>(buf, crc);

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write checkpoint: " + path.string());
  out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  out.flush();
  if (!out) throw IoError("failed writing checkpoint: " + path.string());
}

CheckpointData read_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint: " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  std::string buf = ss.str();

  if (buf.size() < 4 + 2 + 8 + 8 + 4)
    throw FormatError("checkpoint too small", static_cast<std::int64_t>(buf.size()));

  const std::string body = buf.substr(0, buf.size() - 4);
  std::size_t off = buf.size() - 4;
  const std::uint32_t stored_crc = read_scalar<std::uint32_t>(buf, off);
  const std::uint32_t actual_crc = crc32_of(body);
  if (stored_crc != actual_crc)
    throw FormatError("checkpoint CRC mismatch",
                      static_cast<std::uint64_t>(buf.size() - 4));

  off = 0;
  if (std::memcmp(buf.data(), kMagic, 4) != 0)
    throw FormatError("bad checkpoint magic", 0);
  off = 4;
  const auto version = read_scalar<std::uint16_t>(buf, off);
  if (version != kCheckpointVersion)
    throw FormatError("unsupported checkpoint version " + std::to_string(version), 4);

  CheckpointData data;
  data.config_digest = read_scalar<std::uint64_t>(buf, off);
  const auto n_entries = read_scalar<std::uint64_t>(buf, off);
  if (n_entries > (1ull << 24))
    throw FormatError("implausible checkpoint entry count", 14);

  std::istringstream body_in(body, std::ios::binary);
  for (std::uint64_t i = 0; i < n_entries; ++i) {
    const auto name_len = read_scalar<std::uint16_t>(buf, off);
    if (off + name_len > body.size())
      throw FormatError("checkpoint truncated in entry name",
                        static_cast<std::uint64_t>(off));
    std::string name = buf.substr(off, name_len);
    off += name_len;

    body_in.seekg(static_cast<std::streamoff>(off));
    TensorDtype dtype{};
    Tensor t = read_tensor_stream(body_in, static_cast<std::uint64_t>(off), &dtype);
    const auto end_pos = body_in.tellg();
    if (end_pos < 0)
      throw FormatError("checkpoint truncated in tensor record",
                        static_cast<std::uint64_t>(off));
    off = static_cast<std::size_t>(end_pos);
    data.add(std::move(name), std::move(t), dtype);
  }
  if (off != body.size())
    throw FormatError("trailing bytes after checkpoint entries",
                      static_cast<std::uint64_t>(off));
  return data;
}

}  // namespace flowdiff
