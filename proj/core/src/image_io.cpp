#include "flowdiff/image_io.hpp"

#include <cmath>
#include <fstream>
#include <string>

#include "flowdiff/errors.hpp"

namespace flowdiff {

namespace {

// Parser over the whole file buffer so error offsets are exact.
struct PnmCursor {
  const std::string& buf;
  std::size_t pos = 0;

  [[noreturn]] void fail(const std::string& msg) const { throw FormatError(msg, pos); }

  int peek() const { return pos < buf.size() ? static_cast<unsigned char>(buf[pos]) : -1; }
  int take() {
    const int c = peek();
    if (c >= 0) ++pos;
    return c;
  }

  // Whitespace in PNM headers includes comments from '#' to end of line.
  void skip_space_and_comments() {
    for (;;) {
      int c = peek();
      if (c == '#') {
        while (c != '\n' && c != -1) c = take();
      } else if (c == ' ' || c == '\t' || c == '\r' || c == '\n') {
        take();
      } else {
        return;
      }
    }
  }

  std::uint64_t take_uint(const std::string& what) {
    skip_space_and_comments();
    if (peek() < '0' || peek() > '9') fail("expected " + what);
    std::uint64_t v = 0;
    while (peek() >= '0' && peek() <= '9') {
      v = v * 10 + static_cast<std::uint64_t>(take() - '0');
      if (v > (std::uint64_t{1} << 32)) fail(what + " out of range");
    }
    return v;
  }
};

}  // namespace

Tensor load_image(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path.string());
  std::string buf((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());

  PnmCursor cur{buf};
  if (buf.size() < 2 || buf[0] != 'P' || (buf[1] != '5' && buf[1] != '6')) {
    cur.pos = 0;
    cur.fail("not a P5/P6 netpbm file");
  }
  const int channels = buf[1] == '5' ? 1 : 3;
  cur.pos = 2;

  const std::uint64_t width = cur.take_uint("width");
  const std::uint64_t height = cur.take_uint("height");
  const std::uint64_t maxval = cur.take_uint("maxval");
  if (width == 0 || height == 0) cur.fail("zero image dimension");
  if (maxval != 255 && maxval != 65535) cur.fail("unsupported maxval " + std::to_string(maxval));
  // Exactly one whitespace byte separates the header from the payload.
  const int sep = cur.take();
  if (sep != ' ' && sep != '\t' && sep != '\r' && sep != '\n') cur.fail("missing header terminator");

  const std::size_t samples = static_cast<std::size_t>(width * height) * static_cast<std::size_t>(channels);
  const std::size_t bytes_per = maxval == 255 ? 1 : 2;
  if (buf.size() - cur.pos < samples * bytes_per) {
    throw FormatError("truncated pixel payload", buf.size());
  }

  Tensor img({channels, static_cast<std::int64_t>(height), static_cast<std::int64_t>(width)});
  const auto* p = reinterpret_cast<const unsigned char*>(buf.data()) + cur.pos;
  // Payload is interleaved by pixel; tensor layout is planar by channel.
  for (std::uint64_t h = 0; h < height; ++h) {
    for (std::uint64_t w = 0; w < width; ++w) {
      for (int c = 0; c < channels; ++c) {
        std::uint64_t raw;
        if (bytes_per == 1) {
          raw = *p++;
        } else {
          raw = static_cast<std::uint64_t>(p[0]) << 8 | p[1];  // big-endian
          p += 2;
        }
        img[(static_cast<std::int64_t>(c) * static_cast<std::int64_t>(height) +
             static_cast<std::int64_t>(h)) * static_cast<std::int64_t>(width) +
            static_cast<std::int64_t>(w)] = static_cast<double>(raw) / static_cast<double>(maxval);
      }
    }
  }
  return img;
}

void save_image(const Tensor& img, const std::filesystem::path& path) {
  require_rank(img, 3, "save_image");
  const std::int64_t channels = img.dim(0);
  const std::int64_t height = img.dim(1);
  const std::int64_t width = img.dim(2);
  if (channels != 1 && channels != 3) {
    throw PreconditionError("save_image: channels must be 1 or 3, got " + std::to_string(channels));
  }
  if (height < 1 || width < 1) throw PreconditionError("save_image: empty image");
  for (std::int64_t i = 0; i < img.numel(); ++i) {
    const double v = img[i];
    if (!(v >= 0.0 && v <= 1.0)) {
      throw PreconditionError("save_image: pixel value " + std::to_string(v) + " outside [0,1]");
    }
  }

  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot open " + path.string() + " for writing");
  os << (channels == 1 ? "P5" : "P6") << '\n'
     << width << ' ' << height << '\n' << "255" << '\n';
  for (std::int64_t h = 0; h < height; ++h) {
    for (std::int64_t w = 0; w < width; ++w) {
      for (std::int64_t c = 0; c < channels; ++c) {
        const double v = img[(c * height + h) * width + w];
        const auto byte = static_cast<unsigned char>(std::lround(v * 255.0));
        os.put(static_cast<char>(byte));
      }
    }
  }
  os.close();
  if (!os) throw IoError("failed writing " + path.string());
}

}  // namespace flowdiff
