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

#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "keydyn/geometry.hpp"

namespace keydyn {

struct Rgb {
  std::uint8_t r = 0;
  std::uint8_t g = 0;
  std::uint8_t b = 0;
  friend bool operator==(const Rgb&, const Rgb&) = default;
};

/// 8-bit RGB raster, row-major, row 0 at the top.
class Image {
 public:
  Image() = default;
  Image(int width, int height, Rgb fill = {});

  int width() const { return width_; }
  int height() const { return height_; }
  bool contains(int u, int v) const {
    return u >= 0 && v >= 0 && u < width_ && v < height_;
  }

  Rgb at(int u, int v) const;
  void set(int u, int v, Rgb c);
  std::span<const std::uint8_t> bytes() const { return data_; }

  Image mirrored_horizontally() const;

  friend bool operator==(const Image&, const Image&) = default;

 private:
  int width_ = 0;
  int height_ = 0;
  std::vector<std::uint8_t> data_;
};

void fill_circle(Image& img, double cu, double cv, double radius, Rgb c);
/// Fills a convex polygon given in pixel coordinates (pixel centers at +0.5).
void fill_convex_polygon(Image& img, std::span<const Vec2> poly, Rgb c);
void draw_line(Image& img, double u0, double v0, double u1, double v1,
               double half_width, Rgb c);
/// Draws digits and 'C' with a 3x5 bitmap font; (u, v) is the top-left corner.
void draw_label(Image& img, int u, int v, const std::string& text, Rgb c,
                int scale = 1);

std::string encode_ppm(const Image& img);
Image decode_ppm(const std::string& bytes);
void write_ppm(const Image& img, const std::filesystem::path& path);
Image read_ppm(const std::filesystem::path& path);

/// Minimal truecolor PNG (zlib-compressed, no filtering).
std::string encode_png(const Image& img);
std::string base64_encode(const std::string& bytes);

}  // namespace keydyn
