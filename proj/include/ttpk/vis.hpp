#pragma once

#include <zlib.h>

#include <array>
#include <cstdio>
#include <string>
#include <vector>

#include "ttpk/puppet.hpp"
#include "ttpk/tensor.hpp"

namespace ttpk {

// ---------------------------------------------------------------------------
// Minimal image writers: 8-bit RGB PNG via zlib, PGM as the no-zlib
// fallback path for grayscale dumps.
// ---------------------------------------------------------------------------

namespace pngio {

inline void put_u32be(std::vector<unsigned char>& v, std::uint32_t x) {
  v.push_back(static_cast<unsigned char>((x >> 24) & 0xff));
  v.push_back(static_cast<unsigned char>((x >> 16) & 0xff));
  v.push_back(static_cast<unsigned char>((x >> 8) & 0xff));
  v.push_back(static_cast<unsigned char>(x & 0xff));
}

inline void write_chunk(std::FILE* f, const char type[4], const unsigned char* data,
                        std::uint32_t len) {
  std::vector<unsigned char> head;
  put_u32be(head, len);
  std::fwrite(head.data(), 1, 4, f);
  std::fwrite(type, 1, 4, f);
  if (len) std::fwrite(data, 1, len, f);
  std::uint32_t crc = static_cast<std::uint32_t>(
      crc32(crc32(0L, reinterpret_cast<const Bytef*>(type), 4),
            reinterpret_cast<const Bytef*>(data), len));
  std::vector<unsigned char> tail;
  put_u32be(tail, crc);
  std::fwrite(tail.data(), 1, 4, f);
}

}  // namespace pngio

// rgb is row-major (h*w*3) bytes.
inline void write_png(const std::string& path, const std::vector<unsigned char>& rgb, int w,
                      int h) {
  if (static_cast<int>(rgb.size()) != w * h * 3) throw ArgumentError("write_png: bad buffer size");
  std::vector<unsigned char> raw(static_cast<std::size_t>(h) * (1 + 3 * w));
  for (int y = 0; y < h; ++y) {
    raw[static_cast<std::size_t>(y) * (1 + 3 * w)] = 0;  // filter: none
    std::memcpy(&raw[static_cast<std::size_t>(y) * (1 + 3 * w) + 1],
                &rgb[static_cast<std::size_t>(y) * 3 * w], static_cast<std::size_t>(3) * w);
  }
  uLongf comp_len = compressBound(static_cast<uLong>(raw.size()));
  std::vector<unsigned char> comp(comp_len);
  if (compress2(comp.data(), &comp_len, raw.data(), static_cast<uLong>(raw.size()), 6) != Z_OK)
    throw IoError("write_png: deflate failed");
  comp.resize(comp_len);

  std::FILE* f = std::fopen(path.c_str(), "wb");
  if (!f) throw IoError("cannot open for write: " + path);
  const unsigned char sig[8] = {0x89, 'P', 'N', 'G', '\r', '\n', 0x1a, '\n'};
  std::fwrite(sig, 1, 8, f);
  std::vector<unsigned char> ihdr;
  pngio::put_u32be(ihdr, static_cast<std::uint32_t>(w));
  pngio::put_u32be(ihdr, static_cast<std::uint32_t>(h));
  ihdr.push_back(8);   // bit depth
  ihdr.push_back(2);   // color type: RGB
  ihdr.push_back(0);   // compression
  ihdr.push_back(0);   // filter
  ihdr.push_back(0);   // interlace
  pngio::write_chunk(f, "IHDR", ihdr.data(), static_cast<std::uint32_t>(ihdr.size()));
  pngio::write_chunk(f, "IDAT", comp.data(), static_cast<std::uint32_t>(comp.size()));
  pngio::write_chunk(f, "IEND", nullptr, 0);
  std::fclose(f);
}

inline void write_pgm(const std::string& path, const std::vector<unsigned char>& gray, int w,
                      int h) {
  std::FILE* f = std::fopen(path.c_str(), "wb");
  if (!f) throw IoError("cannot open for write: " + path);
  std::fprintf(f, "P5\n%d %d\n255\n", w, h);
  std::fwrite(gray.data(), 1, gray.size(), f);
  std::fclose(f);
}

// ---------------------------------------------------------------------------
// Raster canvas over an RGB byte buffer
// ---------------------------------------------------------------------------

class Canvas {
 public:
  Canvas(int w, int h) : w_(w), h_(h), buf_(static_cast<std::size_t>(w) * h * 3, 0) {}

  static Canvas from_image(const Tensor& img, int upscale = 1) {
    const int h = img.dim(1), w = img.dim(2);
    Canvas c(w * upscale, h * upscale);
    for (int y = 0; y < h * upscale; ++y)
      for (int x = 0; x < w * upscale; ++x)
        for (int ch = 0; ch < 3; ++ch)
          c.buf_[(static_cast<std::size_t>(y) * c.w_ + x) * 3 + ch] = static_cast<unsigned char>(
              std::clamp(img.at3(ch, y / upscale, x / upscale), 0.0, 1.0) * 255.0 + 0.5);
    return c;
  }

  int width() const { return w_; }
  int height() const { return h_; }

  void set(int x, int y, const std::array<double, 3>& rgb) {
    if (x < 0 || x >= w_ || y < 0 || y >= h_) return;
    for (int ch = 0; ch < 3; ++ch)
      buf_[(static_cast<std::size_t>(y) * w_ + x) * 3 + ch] =
          static_cast<unsigned char>(std::clamp(rgb[ch], 0.0, 1.0) * 255.0 + 0.5);
  }

  void disc(double cx, double cy, double r, const std::array<double, 3>& rgb) {
    for (int y = static_cast<int>(cy - r - 1); y <= static_cast<int>(cy + r + 1); ++y)
      for (int x = static_cast<int>(cx - r - 1); x <= static_cast<int>(cx + r + 1); ++x)
        if (std::hypot(x - cx, y - cy) <= r) set(x, y, rgb);
  }

  void line(double x0, double y0, double x1, double y1, const std::array<double, 3>& rgb) {
    const int steps = static_cast<int>(std::ceil(std::hypot(x1 - x0, y1 - y0))) + 1;
    for (int i = 0; i <= steps; ++i) {
      const double t = static_cast<double>(i) / steps;
      set(static_cast<int>(std::lround(x0 + t * (x1 - x0))),
          static_cast<int>(std::lround(y0 + t * (y1 - y0))), rgb);
    }
  }

  void arrow(double x0, double y0, double x1, double y1, const std::array<double, 3>& rgb) {
    line(x0, y0, x1, y1, rgb);
    const double ang = std::atan2(y1 - y0, x1 - x0);
    const double len = 4.0;
    for (double side : {2.6, -2.6}) {
      line(x1, y1, x1 - len * std::cos(ang + side * 0.25), y1 - len * std::sin(ang + side * 0.25),
           rgb);
    }
  }

  // Blit another canvas at (ox, oy).
  void blit(const Canvas& src, int ox, int oy) {
    for (int y = 0; y < src.h_; ++y)
      for (int x = 0; x < src.w_; ++x)
        for (int ch = 0; ch < 3; ++ch) {
          const int dx = ox + x, dy = oy + y;
          if (dx < 0 || dx >= w_ || dy < 0 || dy >= h_) continue;
          buf_[(static_cast<std::size_t>(dy) * w_ + dx) * 3 + ch] =
              src.buf_[(static_cast<std::size_t>(y) * src.w_ + x) * 3 + ch];
        }
  }

  void save_png(const std::string& path) const { write_png(path, buf_, w_, h_); }

  const std::vector<unsigned char>& bytes() const { return buf_; }

 private:
  int w_, h_;
  std::vector<unsigned char> buf_;
};

// Blue -> red colormap for confidence / contribution scores.
inline std::array<double, 3> heat_color(double t) {
  t = std::clamp(t, 0.0, 1.0);
  return {t, 0.2 + 0.3 * (1.0 - std::fabs(t - 0.5) * 2.0), 1.0 - t};
}

}  // namespace ttpk
