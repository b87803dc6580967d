// Copyright 2026 The Keydyn Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include "keydyn/image.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include <zlib.h>

#include <httplib.h>

namespace keydyn {

Image::Image(int width, int height, Rgb fill) : width_(width), height_(height) {
  if (width <= 0 || height <= 0) throw Error("image dimensions must be positive");
  data_.resize(static_cast<std::size_t>(width) * height * 3);
  for (std::size_t i = 0; i < data_.size(); i += 3) {
    data_[i] = fill.r;
    data_[i + 1] = fill.g;
    data_[i + 2] = fill.b;
  }
}

Rgb Image::at(int u, int v) const {
  const std::size_t i = (static_cast<std::size_t>(v) * width_ + u) * 3;
  return {data_.at(i), data_.at(i + 1), data_.at(i + 2)};
}

void Image::set(int u, int v, Rgb c) {
  if (!contains(u, v)) return;
  const std::size_t i = (static_cast<std::size_t>(v) * width_ + u) * 3;
  data_[i] = c.r;
  data_[i + 1] = c.g;
  data_[i + 2] = c.b;
}

Image Image::mirrored_horizontally() const {
  Image out(width_, height_);
  for (int v = 0; v < height_; ++v)
    for (int u = 0; u < width_; ++u) out.set(width_ - 1 - u, v, at(u, v));
  return out;
}

void fill_circle(Image& img, double cu, double cv, double radius, Rgb c) {
  const int u0 = static_cast<int>(std::floor(cu - radius));
  const int u1 = static_cast<int>(std::ceil(cu + radius));
  const int v0 = static_cast<int>(std::floor(cv - radius));
  const int v1 = static_cast<int>(std::ceil(cv + radius));
  for (int v = v0; v <= v1; ++v) {
    for (int u = u0; u <= u1; ++u) {
      const double du = u + 0.5 - cu;
      const double dv = v + 0.5 - cv;
      if (du * du + dv * dv <= radius * radius) img.set(u, v, c);
    }
  }
}

void fill_convex_polygon(Image& img, std::span<const Vec2> poly, Rgb c) {
  if (poly.size() < 3) return;
  double umin = poly[0].x(), umax = umin, vmin = poly[0].y(), vmax = vmin;
  for (const Vec2& p : poly) {
    umin = std::min(umin, p.x());
    umax = std::max(umax, p.x());
    vmin = std::min(vmin, p.y());
    vmax = std::max(vmax, p.y());
  }
  // Orientation-agnostic half-plane test.
  double area = 0.0;
  for (std::size_t i = 0; i < poly.size(); ++i) {
    const Vec2& a = poly[i];
    const Vec2& b = poly[(i + 1) % poly.size()];
    area += a.x() * b.y() - a.y() * b.x();
  }
  const double sign = area >= 0.0 ? 1.0 : -1.0;
  for (int v = static_cast<int>(std::floor(vmin)); v <= static_cast<int>(std::ceil(vmax)); ++v) {
    for (int u = static_cast<int>(std::floor(umin)); u <= static_cast<int>(std::ceil(umax)); ++u) {
      const Vec2 p(u + 0.5, v + 0.5);
      bool inside = true;
      for (std::size_t i = 0; i < poly.size() && inside; ++i) {
        const Vec2& a = poly[i];
        const Vec2& b = poly[(i + 1) % poly.size()];
        const double cross = (b.x() - a.x()) * (p.y() - a.y()) - (b.y() - a.y()) * (p.x() - a.x());
        inside = sign * cross >= 0.0;
      }
      if (inside) img.set(u, v, c);
    }
  }
}

void draw_line(Image& img, double u0, double v0, double u1, double v1,
               double half_width, Rgb c) {
  const Vec2 a(u0, v0), b(u1, v1);
  const Vec2 d = b - a;
  const double len = d.norm();
  if (len == 0.0) {
    fill_circle(img, u0, v0, half_width, c);
    return;
  }
  const Vec2 n = Vec2(-d.y(), d.x()) / len * half_width;
  const std::array<Vec2, 4> quad{a + n, b + n, b - n, a - n};
  fill_convex_polygon(img, quad, c);
}

namespace {

// 3x5 glyphs, one row per entry, bit 2 is the leftmost column.
constexpr std::array<std::array<std::uint8_t, 5>, 11> kGlyphs{{
    {7, 5, 5, 5, 7},  // 0
    {2, 6, 2, 2, 7},  // 1
    {7, 1, 7, 4, 7},  // 2
    {7, 1, 7, 1, 7},  // 3
    {5, 5, 7, 1, 1},  // 4
    {7, 4, 7, 1, 7},  // 5
    {7, 4, 7, 5, 7},  // 6
    {7, 1, 1, 1, 1},  // 7
    {7, 5, 7, 5, 7},  // 8
    {7, 5, 7, 1, 7},  // 9
    {7, 4, 4, 4, 7},  // C
}};

}  // namespace

void draw_label(Image& img, int u, int v, const std::string& text, Rgb c,
                int scale) {
  int cursor = u;
  for (char ch : text) {
    int glyph = -1;
    if (ch >= '0' && ch <= '9') glyph = ch - '0';
    if (ch == 'C') glyph = 10;
    if (glyph >= 0) {
      for (int row = 0; row < 5; ++row)
        for (int col = 0; col < 3; ++col)
          if (kGlyphs[glyph][row] & (4 >> col))
            for (int sy = 0; sy < scale; ++sy)
              for (int sx = 0; sx < scale; ++sx)
                img.set(cursor + col * scale + sx, v + row * scale + sy, c);
    }
    cursor += 4 * scale;
  }
}

std::string encode_ppm(const Image& img) {
  std::string out = "P6\n" + std::to_string(img.width()) + " " +
                    std::to_string(img.height()) + "\n255\n";
  out.append(reinterpret_cast<const char*>(img.bytes().data()), img.bytes().size());
  return out;
}

Image decode_ppm(const std::string& bytes) {
  std::istringstream in(bytes);
  std::string magic;
  int w = 0, h = 0, maxval = 0;
  in >> magic;
  auto skip_comments = [&] {
    in >> std::ws;
    while (in.peek() == '#') {
      std::string line;
      std::getline(in, line);
      in >> std::ws;
    }
  };
  skip_comments();
  in >> w;
  skip_comments();
  in >> h;
  skip_comments();
  in >> maxval;
  if (magic != "P6" || w <= 0 || h <= 0 || maxval != 255) throw Error("unsupported PPM");
  in.get();
  Image img(w, h);
  std::vector<char> raw(static_cast<std::size_t>(w) * h * 3);
  in.read(raw.data(), static_cast<std::streamsize>(raw.size()));
  if (in.gcount() != static_cast<std::streamsize>(raw.size())) throw Error("truncated PPM");
  for (int v = 0; v < h; ++v)
    for (int u = 0; u < w; ++u) {
      const std::size_t i = (static_cast<std::size_t>(v) * w + u) * 3;
      img.set(u, v, {static_cast<std::uint8_t>(raw[i]), static_cast<std::uint8_t>(raw[i + 1]),
                     static_cast<std::uint8_t>(raw[i + 2])});
    }
  return img;
}

void write_ppm(const Image& img, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  out << encode_ppm(img);
}

Image read_ppm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return decode_ppm(ss.str());
}

namespace {

void put_u32(std::string& out, std::uint32_t v) {
  out.push_back(static_cast<char>((v >> 24) & 0xff));
  out.push_back(static_cast<char>((v >> 16) & 0xff));
  out.push_back(static_cast<char>((v >> 8) & 0xff));
  out.push_back(static_cast<char>(v & 0xff));
}

void put_chunk(std::string& out, const char* type, const std::string& payload) {
  put_u32(out, static_cast<std::uint32_t>(payload.size()));
  std::string body(type, 4);
  body += payload;
  out += body;
  const auto crc = crc32(0L, reinterpret_cast<const Bytef*>(body.data()),
                         static_cast<uInt>(body.size()));
  put_u32(out, static_cast<std::uint32_t>(crc));
}

}  // namespace

std::string encode_png(const Image& img) {
  std::string raw;
  raw.reserve(static_cast<std::size_t>(img.height()) * (img.width() * 3 + 1));
  const auto bytes = img.bytes();
  for (int v = 0; v < img.height(); ++v) {
    raw.push_back('\0');
    raw.append(reinterpret_cast<const char*>(bytes.data()) +
                   static_cast<std::size_t>(v) * img.width() * 3,
               static_cast<std::size_t>(img.width()) * 3);
  }
  uLongf zsize = compressBound(static_cast<uLong>(raw.size()));
  std::string z(zsize, '\0');
  if (compress2(reinterpret_cast<Bytef*>(z.data()), &zsize,
                reinterpret_cast<const Bytef*>(raw.data()),
                static_cast<uLong>(raw.size()), 6) != Z_OK) {
    throw Error("png compression failed");
  }
  z.resize(zsize);

  std::string out("\x89PNG\r\n\x1a\n", 8);
  std::string ihdr;
  put_u32(ihdr, static_cast<std::uint32_t>(img.width()));
  put_u32(ihdr, static_cast<std::uint32_t>(img.height()));
  ihdr += std::string("\x08\x02\x00\x00\x00", 5);
  put_chunk(out, "IHDR", ihdr);
  put_chunk(out, "IDAT", z);
  put_chunk(out, "IEND", "");
  return out;
}

std::string base64_encode(const std::string& bytes) {
  return httplib::detail::base64_encode(bytes);
}

}  // namespace keydyn
