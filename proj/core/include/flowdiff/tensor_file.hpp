#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>

#include "flowdiff/tensor.hpp"

namespace flowdiff {

// Binary tensor container. Layout, all little-endian:
//   magic "FDTN" | version u16 | dtype u8 | rank u8 | dims rank×u32 | payload
// dtype 0 = f32, 1 = f64, 2 = u64. Payload is row-major. f64 is the default
// so write→read round trips are bit-identical for double data.
enum class TensorDtype : std::uint8_t { f32 = 0, f64 = 1, u64 = 2 };

inline constexpr std::uint16_t kTensorFileVersion = 1;

void write_tensor(const Tensor& t, const std::filesystem::path& path,
                  TensorDtype dtype = TensorDtype::f64);
Tensor read_tensor(const std::filesystem::path& path);

// Stream forms used by the checkpoint container, which embeds tensor records
// back to back. `base_offset` is the position of the record inside the
// enclosing file, used to report absolute byte offsets in errors.
void write_tensor_stream(const Tensor& t, std::ostream& os,
                         TensorDtype dtype = TensorDtype::f64);
Tensor read_tensor_stream(std::istream& is, std::uint64_t base_offset = 0,
                          TensorDtype* dtype_out = nullptr);

// u64 payloads ride in Tensor doubles via bit casts; these helpers keep the
// casts in one place.
double u64_as_double(std::uint64_t v);
std::uint64_t double_as_u64(double v);

}  // namespace flowdiff
