#pragma once

#include <png.h>

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "m2unet/error.hpp"
#include "m2unet/tensor.hpp"

namespace m2unet {

namespace image_detail {

inline std::vector<unsigned char> slurp_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open image: " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline std::string lower_ext(const std::filesystem::path& path) {
  std::string e = path.extension().string();
  std::transform(e.begin(), e.end(), e.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return e;
}

inline float to_unit(unsigned char v) { return static_cast<float>(v) / 255.0f; }

inline unsigned char to_byte(double v) {
  if (!std::isfinite(v)) throw NumericError("image writer: non-finite pixel value");
  return static_cast<unsigned char>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

inline bool is_png(const std::vector<unsigned char>& b) {
  static const unsigned char sig[8] = {0x89, 'P', 'N', 'G', '\r', '\n', 0x1A, '\n'};
  return b.size() >= 8 && std::memcmp(b.data(), sig, 8) == 0;
}

inline Tensor<float> decode_png(const std::vector<unsigned char>& bytes, const std::string& name) {
  // IHDR: signature(8) length(4) "IHDR"(4) width(4) height(4) depth colour compression filter interlace
  if (bytes.size() < 33 || std::memcmp(bytes.data() + 12, "IHDR", 4) != 0) {
    throw InputError("malformed PNG: " + name);
  }
  const int depth = bytes[24], colour = bytes[25], interlace = bytes[28];
  if (depth != 8) throw UsageError("unsupported PNG (bit depth " + std::to_string(depth) + "): " + name);
  if (interlace != 0) throw UsageError("unsupported PNG (interlaced): " + name);
  const bool gray = colour == 0 || colour == 4;

  png_image img;
  std::memset(&img, 0, sizeof img);
  img.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_memory(&img, bytes.data(), bytes.size())) {
    throw InputError("malformed PNG " + name + ": " + img.message);
  }
  img.format = gray ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
  const std::size_t c = gray ? 1 : 3, h = img.height, w = img.width;
  std::vector<unsigned char> buf(PNG_IMAGE_SIZE(img));
  png_color black{0, 0, 0};
  if (!png_image_finish_read(&img, &black, buf.data(), 0, nullptr)) {
    png_image_free(&img);
    throw InputError("malformed PNG " + name + ": " + img.message);
  }
  Tensor<float> t({1, c, h, w});
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t ch = 0; ch < c; ++ch) t.at(0, ch, y, x) = to_unit(buf[(y * w + x) * c + ch]);
  return t;
}

inline Tensor<float> decode_pnm(const std::vector<unsigned char>& b, const std::string& name) {
  const bool rgb = b[1] == '6';
  std::size_t pos = 2;
  auto next_int = [&]() -> std::size_t {
    while (pos < b.size()) {
      if (b[pos] == '#') {
        while (pos < b.size() && b[pos] != '\n') ++pos;
      } else if (std::isspace(b[pos])) {
        ++pos;
      } else {
        break;
      }
    }
    if (pos >= b.size() || !std::isdigit(b[pos])) throw InputError("malformed PNM header: " + name);
    std::size_t v = 0;
    while (pos < b.size() && std::isdigit(b[pos])) v = v * 10 + static_cast<std::size_t>(b[pos++] - '0');
    return v;
  };
  const std::size_t w = next_int(), h = next_int(), maxval = next_int();
  if (maxval == 0 || maxval > 255) throw UsageError("unsupported PNM (maxval " + std::to_string(maxval) + "): " + name);
  if (pos >= b.size() || !std::isspace(b[pos])) throw InputError("malformed PNM header: " + name);
  ++pos;
  const std::size_t c = rgb ? 3 : 1;
  if (b.size() - pos < w * h * c) throw InputError("truncated PNM: " + name);
  Tensor<float> t({1, c, h, w});
  const float scale = 1.0f / static_cast<float>(maxval);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t ch = 0; ch < c; ++ch) {
        t.at(0, ch, y, x) = maxval == 255 ? to_unit(b[pos + (y * w + x) * c + ch])
                                          : static_cast<float>(b[pos + (y * w + x) * c + ch]) * scale;
      }
  return t;
}

}  // namespace image_detail

/// Decodes an 8-bit PNG or binary PPM/PGM into (1, c, h, w) with values in
/// [0, 1]; c is 1 for grayscale files and 3 otherwise (alpha is dropped).
inline Tensor<float> read_image(const std::filesystem::path& path) {
  const auto bytes = image_detail::slurp_bytes(path);
  if (image_detail::is_png(bytes)) return image_detail::decode_png(bytes, path.string());
  if (bytes.size() >= 2 && bytes[0] == 'P' && (bytes[1] == '5' || bytes[1] == '6')) {
    return image_detail::decode_pnm(bytes, path.string());
  }
  throw UsageError("unsupported image format: " + path.string());
}

/// Writes a (1, c, h, w) tensor with c in {1, 3}; the format follows the
/// extension (.png, .pgm, .ppm). Values are clipped to [0, 1] and scaled by 255.
inline void write_image(const Tensor<float>& t, const std::filesystem::path& path) {
  if (t.n() != 1 || (t.c() != 1 && t.c() != 3)) throw InputError("write_image: expected (1, 1|3, h, w), got " + t.shape().str());
  const std::size_t c = t.c(), h = t.h(), w = t.w();
  std::vector<unsigned char> buf(h * w * c);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t ch = 0; ch < c; ++ch) buf[(y * w + x) * c + ch] = image_detail::to_byte(t.at(0, ch, y, x));

  const std::string ext = image_detail::lower_ext(path);
  if (ext == ".png") {
    png_image img;
    std::memset(&img, 0, sizeof img);
    img.version = PNG_IMAGE_VERSION;
    img.width = static_cast<png_uint_32>(w);
    img.height = static_cast<png_uint_32>(h);
    img.format = c == 1 ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
    if (!png_image_write_to_file(&img, path.string().c_str(), 0, buf.data(), 0, nullptr)) {
      throw InputError("cannot write PNG " + path.string() + ": " + img.message);
    }
    return;
  }
  if ((ext == ".pgm" && c == 1) || (ext == ".ppm" && c == 3)) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw InputError("cannot write image: " + path.string());
    out << (c == 1 ? "P5" : "P6") << "\n" << w << " " << h << "\n255\n";
    out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
    if (!out) throw InputError("cannot write image: " + path.string());
    return;
  }
  throw UsageError("unsupported output format for " + std::to_string(c) + " channels: " + path.string());
}

/// 8-bit grayscale round(255 * p).
inline void write_prob_map(const Tensor<float>& prob, const std::filesystem::path& path) {
  if (prob.c() != 1) throw InputError("write_prob_map: expected one channel, got " + prob.shape().str());
  write_image(prob, path);
}

/// TP white, FP yellow, FN red, TN black. A prediction is positive when
/// p >= threshold, a label when it exceeds 0.5.
inline Tensor<float> overlay_image(const Tensor<float>& pred, const Tensor<float>& gt, double threshold = 0.5) {
  if (pred.c() != 1 || gt.c() != 1 || pred.h() != gt.h() || pred.w() != gt.w() || pred.n() != 1 || gt.n() != 1) {
    throw InputError("overlay: shape mismatch " + pred.shape().str() + " vs " + gt.shape().str());
  }
  Tensor<float> out({1, 3, pred.h(), pred.w()});
  const std::size_t plane = pred.h() * pred.w();
  for (std::size_t i = 0; i < plane; ++i) {
    const bool p = pred[i] >= threshold, y = gt[i] > 0.5f;
    const float r = (p || y) ? 1.0f : 0.0f;
    const float g = p ? 1.0f : 0.0f;
    const float b = (p && y) ? 1.0f : 0.0f;
    out[i] = r;
    out[plane + i] = g;
    out[2 * plane + i] = b;
  }
  return out;
}

inline void write_overlay(const Tensor<float>& pred, const Tensor<float>& gt, const std::filesystem::path& path,
                          double threshold = 0.5) {
  write_image(overlay_image(pred, gt, threshold), path);
}

}  // namespace m2unet
