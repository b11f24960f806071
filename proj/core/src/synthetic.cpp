#include "flowdiff/synthetic.hpp"

#include <algorithm>
#include <cstdio>

#include "flowdiff/errors.hpp"
#include "flowdiff/image_io.hpp"

namespace flowdiff {

namespace {

struct Canvas {
  Tensor img;
  std::int64_t h, w;
  double fg;

  void set(std::int64_t r, std::int64_t c) {
    if (r >= 0 && r < h && c >= 0 && c < w) img[r * w + c] = fg;
  }
  void hline(std::int64_t r, std::int64_t c0, std::int64_t c1) {
    for (std::int64_t c = c0; c <= c1; ++c) set(r, c);
  }
  void vline(std::int64_t c, std::int64_t r0, std::int64_t r1) {
    for (std::int64_t r = r0; r <= r1; ++r) set(r, c);
  }
};

}  // namespace

Tensor toy_glyph(std::int64_t height, std::int64_t width, RngStream& rng) {
  if (height < 6 || width < 6)
    throw PreconditionError("toy_glyph: height and width must be >= 6");
  const std::int64_t h = height;
  const std::int64_t w = width;

  // Near-saturated contrast: with heavy additive noise most pixels clip at
  // the [0,1] boundary, which is what puts observation quality in the low
  // teens of dB for sigma around 0.3.
  const double bg = 0.05 * rng.next_uniform();
  const double fg = 0.95 + 0.05 * rng.next_uniform();
  const std::uint64_t cls = rng.next_index(8);
  const std::int64_t jr = static_cast<std::int64_t>(rng.next_index(3)) - 1;
  const std::int64_t jc = static_cast<std::int64_t>(rng.next_index(3)) - 1;

  Canvas cv{Tensor::full({1, h, w}, bg), h, w, fg};
  const std::int64_t rm = h / 2 + jr;  // jittered center row
  const std::int64_t cm = w / 2 + jc;  // jittered center column

  switch (cls) {
    case 0:  // vertical bar, two pixels wide
      cv.vline(cm - 1, 1, h - 2);
      cv.vline(cm, 1, h - 2);
      break;
    case 1:  // horizontal bar, two pixels wide
      cv.hline(rm - 1, 1, w - 2);
      cv.hline(rm, 1, w - 2);
      break;
    case 2:  // cross
      cv.vline(cm, 1, h - 2);
      cv.hline(rm, 1, w - 2);
      break;
    case 3:  // box outline
      cv.hline(1 + std::max<std::int64_t>(jr, 0), 1, w - 2);
      cv.hline(h - 2 + std::min<std::int64_t>(jr, 0), 1, w - 2);
      cv.vline(1 + std::max<std::int64_t>(jc, 0), 1, h - 2);
      cv.vline(w - 2 + std::min<std::int64_t>(jc, 0), 1, h - 2);
      break;
    case 4:  // main diagonal, thickened
      for (std::int64_t r = 0; r < h; ++r) {
        const std::int64_t c = (r * w) / h;
        cv.set(r, c);
        cv.set(r, c + 1);
      }
      break;
    case 5: {  // solid block in one quadrant
      const std::int64_t r0 = jr <= 0 ? 1 : rm;
      const std::int64_t c0 = jc <= 0 ? 1 : cm;
      for (std::int64_t r = r0; r < r0 + h / 2; ++r) cv.hline(r, c0, c0 + w / 2 - 1);
      break;
    }
    case 6:  // L shape
      cv.vline(1 + std::max<std::int64_t>(jc, 0), 1, h - 2);
      cv.hline(h - 2 + std::min<std::int64_t>(jr, 0), 1, w - 2);
      break;
    default:  // two dots
      cv.set(rm - h / 4, cm - w / 4);
      cv.set(rm - h / 4, cm - w / 4 + 1);
      cv.set(rm - h / 4 + 1, cm - w / 4);
      cv.set(rm - h / 4 + 1, cm - w / 4 + 1);
      cv.set(rm + h / 4 - 1, cm + w / 4 - 1);
      cv.set(rm + h / 4 - 1, cm + w / 4);
      cv.set(rm + h / 4, cm + w / 4 - 1);
      cv.set(rm + h / 4, cm + w / 4);
      break;
  }
  return cv.img;
}

std::vector<std::string> write_toy_dataset(const ToyDatasetConfig& cfg,
                                           const std::filesystem::path& out_dir) {
  if (cfg.count < 0) throw PreconditionError("toy dataset count must be >= 0");
  std::filesystem::create_directories(out_dir);
  std::vector<std::string> ids;
  for (std::int64_t i = 0; i < cfg.count; ++i) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "toy%04lld", static_cast<long long>(i));
    std::string id(buf);
    RngStream rng(cfg.seed, fnv1a(id));
    Tensor img = toy_glyph(cfg.height, cfg.width, rng);
    save_image(img, out_dir / (id + ".pgm"));
    ids.push_back(std::move(id));
  }
  return ids;
}

}  // namespace flowdiff
