#include "flowdiff/tensor_file.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <limits>

#include "flowdiff/errors.hpp"

namespace flowdiff {

namespace {

constexpr char kMagic[4] = {'F', 'D', 'T', 'N'};

void put_bytes(std::ostream& os, const void* p, std::size_t n) {
  os.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
}

template <typename T>
void put_le(std::ostream& os, T v) {
  static_assert(std::endian::native == std::endian::little);
  put_bytes(os, &v, sizeof(T));
}

void get_bytes(std::istream& is, void* p, std::size_t n, std::uint64_t at) {
  is.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
  if (static_cast<std::size_t>(is.gcount()) != n) {
    throw FormatError("tensor file truncated", at + static_cast<std::uint64_t>(is.gcount()));
  }
}

template <typename T>
T get_le(std::istream& is, std::uint64_t at) {
  static_assert(std::endian::native == std::endian::little);
  T v;
  get_bytes(is, &v, sizeof(T), at);
  return v;
}

std::size_t dtype_size(TensorDtype d) {
  switch (d) {
    case TensorDtype::f32: return 4;
    case TensorDtype::f64: return 8;
    case TensorDtype::u64: return 8;
  }
  throw PreconditionError("unknown tensor dtype");
}

}  // namespace

double u64_as_double(std::uint64_t v) { return std::bit_cast<double>(v); }
std::uint64_t double_as_u64(double v) { return std::bit_cast<std::uint64_t>(v); }

void write_tensor_stream(const Tensor& t, std::ostream& os, TensorDtype dtype) {
  put_bytes(os, kMagic, 4);
  put_le<std::uint16_t>(os, kTensorFileVersion);
  put_le<std::uint8_t>(os, static_cast<std::uint8_t>(dtype));
  if (t.rank() > 255) throw PreconditionError("tensor rank exceeds format limit");
  put_le<std::uint8_t>(os, static_cast<std::uint8_t>(t.rank()));
  for (int i = 0; i < t.rank(); ++i) {
    const std::int64_t d = t.dim(i);
    if (d > std::numeric_limits<std::uint32_t>::max()) {
      throw PreconditionError("tensor dimension exceeds u32 range");
    }
    put_le<std::uint32_t>(os, static_cast<std::uint32_t>(d));
  }
  switch (dtype) {
    case TensorDtype::f32:
      for (std::int64_t i = 0; i < t.numel(); ++i) put_le<float>(os, static_cast<float>(t[i]));
      break;
    case TensorDtype::f64:
      for (std::int64_t i = 0; i < t.numel(); ++i) put_le<double>(os, t[i]);
      break;
    case TensorDtype::u64:
      for (std::int64_t i = 0; i < t.numel(); ++i) put_le<std::uint64_t>(os, double_as_u64(t[i]));
      break;
  }
  if (!os) throw IoError("tensor write failed");
}

Tensor read_tensor_stream(std::istream& is, std::uint64_t base, TensorDtype* dtype_out) {
  char magic[4];
  get_bytes(is, magic, 4, base);
  if (std::memcmp(magic, kMagic, 4) != 0) {
    throw FormatError("bad tensor file magic", base);
  }
  const auto version = get_le<std::uint16_t>(is, base + 4);
  if (version != kTensorFileVersion) {
    throw FormatError("unsupported tensor file version " + std::to_string(version), base + 4);
  }
  const auto dtype_raw = get_le<std::uint8_t>(is, base + 6);
  if (dtype_raw > 2) {
    throw FormatError("unknown dtype code " + std::to_string(dtype_raw), base + 6);
  }
  const auto dtype = static_cast<TensorDtype>(dtype_raw);
  if (dtype_out) *dtype_out = dtype;
  const auto rank = get_le<std::uint8_t>(is, base + 7);
  std::vector<std::int64_t> shape(rank);
  std::uint64_t off = base + 8;
  std::uint64_t numel = 1;
  for (int i = 0; i < rank; ++i) {
    const auto d = get_le<std::uint32_t>(is, off);
    off += 4;
    shape[static_cast<std::size_t>(i)] = d;
    numel *= d;
    if (numel > (std::uint64_t{1} << 40)) {
      throw FormatError("tensor dimensions overflow sanity limit", off - 4);
    }
  }
  Tensor t(std::move(shape));
  const std::size_t esz = dtype_size(dtype);
  for (std::int64_t i = 0; i < t.numel(); ++i) {
    switch (dtype) {
      case TensorDtype::f32: t[i] = get_le<float>(is, off); break;
      case TensorDtype::f64: t[i] = get_le<double>(is, off); break;
      case TensorDtype::u64: t[i] = u64_as_double(get_le<std::uint64_t>(is, off)); break;
    }
    off += esz;
  }
  return t;
}

void write_tensor(const Tensor& t, const std::filesystem::path& path, TensorDtype dtype) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot open " + path.string() + " for writing");
  write_tensor_stream(t, os, dtype);
  os.close();
  if (!os) throw IoError("failed writing " + path.string());
}

Tensor read_tensor(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path.string());
  Tensor t = read_tensor_stream(is, 0);
  // Trailing garbage means the file is not a single tensor record.
  is.peek();
  if (!is.eof()) {
    throw FormatError("trailing bytes after tensor payload in " + path.string(),
                      static_cast<std::uint64_t>(is.tellg()));
  }
  return t;
}

}  // namespace flowdiff
