#pragma once

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <string>
#include <utility>
#include <vector>

#include "m2unet/error.hpp"
#include "m2unet/image_io.hpp"
#include "m2unet/rng.hpp"
#include "m2unet/tensor.hpp"

namespace m2unet {

struct Sample {
  Tensor<float> image;  // (1, 3, h, w) in [0, 1]
  Tensor<float> mask;   // (1, 1, h, w) binary
  std::string id;
  std::uint64_t n_cropped = 0;
};

struct DatasetSpec {
  std::string name;
  std::size_t native_h = 0;
  std::size_t native_w = 0;
  std::size_t crop_top = 0;
  std::size_t crop_bottom = 0;
  std::size_t crop_left = 0;
  std::size_t crop_right = 0;
  std::size_t batch_size = 1;
  std::vector<std::string> train_ids;
  std::vector<std::string> test_ids;

  std::size_t cropped_h() const { return native_h - crop_top - crop_bottom; }
  std::size_t cropped_w() const { return native_w - crop_left - crop_right; }
  std::uint64_t cropped_pixels() const {
    return static_cast<std::uint64_t>(native_h) * native_w - static_cast<std::uint64_t>(cropped_h()) * cropped_w();
  }
};

namespace data_detail {

inline std::string two_digits(int i) { return (i < 10 ? "0" : "") + std::to_string(i); }

inline std::string upper(std::string s) {
  std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return static_cast<char>(std::toupper(c)); });
  return s;
}

}  // namespace data_detail

inline DatasetSpec drive_spec() {
  DatasetSpec s{"DRIVE", 584, 565, 20, 20, 10, 11, 4, {}, {}};
  for (int i = 21; i <= 40; ++i) s.train_ids.push_back(data_detail::two_digits(i));
  for (int i = 1; i <= 20; ++i) s.test_ids.push_back(data_detail::two_digits(i));
  return s;
}

inline DatasetSpec chase_spec() {
  DatasetSpec s{"CHASE_DB1", 960, 999, 0, 0, 18, 21, 2, {}, {}};
  for (int i = 1; i <= 14; ++i) {
    for (const char* eye : {"L", "R"}) {
      auto id = "Image_" + data_detail::two_digits(i) + eye;
      (i <= 4 ? s.train_ids : s.test_ids).push_back(std::move(id));
    }
  }
  return s;
}

inline DatasetSpec hrf_spec() {
  DatasetSpec s{"HRF", 2336, 3504, 0, 0, 0, 0, 1, {}, {}};
  for (const char* cat : {"h", "dr", "g"}) {
    for (int i = 1; i <= 15; ++i) {
      auto id = data_detail::two_digits(i) + "_" + cat;
      (i <= 5 ? s.train_ids : s.test_ids).push_back(std::move(id));
    }
  }
  return s;
}

/// Accepts DRIVE, CHASE_DB1 (or CHASE) and HRF, case-insensitively.
inline DatasetSpec dataset_spec(const std::string& name) {
  const auto n = data_detail::upper(name);
  if (n == "DRIVE") return drive_spec();
  if (n == "CHASE_DB1" || n == "CHASE" || n == "CHASEDB1") return chase_spec();
  if (n == "HRF") return hrf_spec();
  throw UsageError("unknown dataset: " + name);
}

inline std::pair<std::vector<std::string>, std::vector<std::string>> split(const std::string& dataset) {
  auto s = dataset_spec(dataset);
  return {s.train_ids, s.test_ids};
}

/// Crops a (n, c, native_h, native_w) tensor; tensors already at the cropped
/// size pass through unchanged.
template <typename T>
Tensor<T> crop_tensor(const Tensor<T>& t, const DatasetSpec& s) {
  if (t.h() == s.cropped_h() && t.w() == s.cropped_w()) return t;
  if (t.h() != s.native_h || t.w() != s.native_w) {
    throw InputError(s.name + ": expected " + std::to_string(s.native_h) + "x" + std::to_string(s.native_w) +
                     " image, got " + std::to_string(t.h()) + "x" + std::to_string(t.w()));
  }
  const std::size_t h = s.cropped_h(), w = s.cropped_w();
  Tensor<T> out({t.n(), t.c(), h, w});
  for (std::size_t b = 0; b < t.n(); ++b)
    for (std::size_t c = 0; c < t.c(); ++c)
      for (std::size_t y = 0; y < h; ++y) {
        const T* src = t.data() + t.offset(b, c, y + s.crop_top, s.crop_left);
        std::copy(src, src + w, out.data() + out.offset(b, c, y, 0));
      }
  return out;
}

inline Sample crop(const Sample& in, const DatasetSpec& s) {
  if (in.image.h() != in.mask.h() || in.image.w() != in.mask.w()) {
    throw InputError("sample " + in.id + ": image and mask sizes differ");
  }
  const bool native = in.image.h() == s.native_h && in.image.w() == s.native_w;
  Sample out{crop_tensor(in.image, s), crop_tensor(in.mask, s), in.id, in.n_cropped};
  if (native) out.n_cropped = s.cropped_pixels();
  return out;
}

// ---------------------------------------------------------------------------
// Dataset directories
// ---------------------------------------------------------------------------

namespace data_detail {

inline std::filesystem::path find_with_ext(const std::filesystem::path& dir, const std::string& id,
                                           std::initializer_list<const char*> exts) {
  for (const char* e : exts) {
    auto p = dir / (id + e);
    if (std::filesystem::exists(p)) return p;
  }
  throw InputError("missing file for id '" + id + "' in " + dir.string());
}

inline std::vector<std::string> read_manifest(const std::filesystem::path& p) {
  std::ifstream in(p);
  if (!in) throw InputError("cannot read manifest: " + p.string());
  std::vector<std::string> ids;
  std::string line;
  while (std::getline(in, line)) {
    const auto b = line.find_first_not_of(" \t\r");
    if (b == std::string::npos || line[b] == '#') continue;
    const auto e = line.find_last_not_of(" \t\r");
    ids.push_back(line.substr(b, e - b + 1));
  }
  return ids;
}

}  // namespace data_detail

/// Ids of one split, honouring `<root>/<dataset>/{train,test}.txt` manifests.
inline std::vector<std::string> split_ids(const std::filesystem::path& root, const DatasetSpec& s, bool train) {
  const auto manifest = root / s.name / (train ? "train.txt" : "test.txt");
  if (std::filesystem::exists(manifest)) return data_detail::read_manifest(manifest);
  return train ? s.train_ids : s.test_ids;
}

/// Mask from a label image: first channel, thresholded at 0.5.
inline Tensor<float> binarize_label(const Tensor<float>& label) {
  Tensor<float> m({1, 1, label.h(), label.w()});
  for (std::size_t i = 0; i < m.size(); ++i) m[i] = label[i] > 0.5f ? 1.0f : 0.0f;
  return m;
}

/// Loads `<root>/<dataset>/images/<id>.{png,ppm}` and `labels/<id>.{png,pgm}`
/// and applies the dataset crop.
inline Sample load_sample(const std::filesystem::path& root, const DatasetSpec& s, const std::string& id) {
  const auto base = root / s.name;
  auto image = read_image(data_detail::find_with_ext(base / "images", id, {".png", ".ppm"}));
  if (image.c() != 3) throw InputError("image '" + id + "' is not RGB");
  auto label = read_image(data_detail::find_with_ext(base / "labels", id, {".png", ".pgm"}));
  return crop(Sample{std::move(image), binarize_label(label), id, 0}, s);
}

inline std::vector<Sample> load_split(const std::filesystem::path& root, const DatasetSpec& s, bool train) {
  std::vector<Sample> out;
  for (const auto& id : split_ids(root, s, train)) out.push_back(load_sample(root, s, id));
  return out;
}

/// Holds out k ids (seeded partial Fisher-Yates); returns (train', val) with
/// both lists in their original order.
inline std::pair<std::vector<std::string>, std::vector<std::string>> make_validation(
    const std::vector<std::string>& train, std::size_t k, std::uint64_t seed) {
  if (k >= train.size() && !(k == 0 && train.empty())) {
    throw UsageError("validation size " + std::to_string(k) + " must be smaller than the training set (" +
                     std::to_string(train.size()) + ")");
  }
  std::vector<std::size_t> idx(train.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  CounterRng rng(mix64(seed ^ 0x76616C6964ULL));
  for (std::size_t i = 0; i < k; ++i) {
    const auto j = static_cast<std::size_t>(rng.uniform_int(static_cast<std::int64_t>(i),
                                                            static_cast<std::int64_t>(idx.size() - 1)));
    std::swap(idx[i], idx[j]);
  }
  std::vector<bool> held(train.size(), false);
  for (std::size_t i = 0; i < k; ++i) held[idx[i]] = true;
  std::pair<std::vector<std::string>, std::vector<std::string>> out;
  for (std::size_t i = 0; i < train.size(); ++i) (held[i] ? out.second : out.first).push_back(train[i]);
  return out;
}

/// Seeded fundus-like test image: four dark straight vessels, three pixels
/// wide (|distance to centre line| < 1.5), on a reddish noisy background.
inline Sample synthetic_vessel_sample(std::size_t h, std::size_t w, std::uint64_t seed, std::string id = "synthetic") {
  CounterRng rng(mix64(seed ^ 0x7665737365ULL));
  Sample s{Tensor<float>({1, 3, h, w}), Tensor<float>({1, 1, h, w}), std::move(id), 0};
  for (int v = 0; v < 4; ++v) {
    const double x0 = rng.uniform() * static_cast<double>(w), y0 = rng.uniform() * static_cast<double>(h);
    const double ang = rng.uniform() * std::numbers::pi;
    const double c = std::cos(ang), sn = std::sin(ang);
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) {
        const double d = (static_cast<double>(x) - x0) * sn - (static_cast<double>(y) - y0) * c;
        if (std::abs(d) < 1.5) s.mask.at(0, 0, y, x) = 1.0f;
      }
  }
  const double base[3] = {0.75, 0.45, 0.25};
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t i = 0; i < h * w; ++i) {
      const double noise = 0.08 * (rng.uniform() - 0.5);
      const double v = base[c] * (1.0 - 0.45 * s.mask[i]) + noise;
      s.image[c * h * w + i] = static_cast<float>(std::clamp(v, 0.0, 1.0));
    }
  return s;
}

// ---------------------------------------------------------------------------
// Augmentation
// ---------------------------------------------------------------------------

struct AugmentConfig {
  double rotation_deg = 15.0;
  double flip_h_prob = 0.5;
  double flip_v_prob = 0.5;
  double c_brightness = 0.3;
  double c_contrast = 0.3;
  double c_saturation = 0.02;
  double c_hue = 0.02;
  std::size_t elastic_grid = 8;
  int elastic_magnitude = 1;
  std::uint64_t seed = 0;

  static AugmentConfig disabled() { return {0, 0, 0, 0, 0, 0, 0, 8, 0, 0}; }
};

/// Every random quantity of one augmentation, drawn in a fixed order.
struct AugmentDraw {
  bool flip_h = false;
  bool flip_v = false;
  double angle_deg = 0;
  std::vector<std::array<double, 2>> nodes;  // (grid+1)^2 row-major, (dx, dy)
  double brightness = 1;
  double contrast = 1;
  double saturation = 1;
  double hue = 0;
};

inline AugmentDraw draw_augmentation(const AugmentConfig& cfg, CounterRng& rng) {
  AugmentDraw d;
  const std::size_t g = cfg.elastic_grid;
  if (g < 1) throw ConfigError("elastic grid must be >= 1");
  d.flip_h = rng.uniform() < cfg.flip_h_prob;
  d.flip_v = rng.uniform() < cfg.flip_v_prob;
  d.angle_deg = -cfg.rotation_deg + 2 * cfg.rotation_deg * rng.uniform();
  d.nodes.assign((g + 1) * (g + 1), {0.0, 0.0});
  for (std::size_t gy = 1; gy < g; ++gy)
    for (std::size_t gx = 1; gx < g; ++gx) {
      auto& n = d.nodes[gy * (g + 1) + gx];
      n[0] = static_cast<double>(rng.uniform_int(-cfg.elastic_magnitude, cfg.elastic_magnitude));
      n[1] = static_cast<double>(rng.uniform_int(-cfg.elastic_magnitude, cfg.elastic_magnitude));
    }
  d.brightness = 1 + cfg.c_brightness * (2 * rng.uniform() - 1);
  d.contrast = 1 + cfg.c_contrast * (2 * rng.uniform() - 1);
  d.saturation = 1 + cfg.c_saturation * (2 * rng.uniform() - 1);
  d.hue = cfg.c_hue * (2 * rng.uniform() - 1);
  return d;
}

namespace data_detail {

/// Reflect-101 on a continuous coordinate.
inline double reflect101(double v, std::size_t n) {
  if (n == 1) return 0.0;
  const double period = 2.0 * static_cast<double>(n - 1);
  v = std::fmod(std::abs(v), period);
  return v > static_cast<double>(n - 1) ? period - v : v;
}

inline void rgb_to_hsv(double r, double g, double b, double& h, double& s, double& v) {
  const double maxc = std::max({r, g, b}), minc = std::min({r, g, b});
  v = maxc;
  if (minc == maxc) {
    h = s = 0.0;
    return;
  }
  const double range = maxc - minc;
  s = range / maxc;
  const double rc = (maxc - r) / range, gc = (maxc - g) / range, bc = (maxc - b) / range;
  if (r == maxc) h = bc - gc;
  else if (g == maxc) h = 2.0 + rc - bc;
  else h = 4.0 + gc - rc;
  h = h / 6.0;
  h = h - std::floor(h);
}

inline void hsv_to_rgb(double h, double s, double v, double& r, double& g, double& b) {
  if (s == 0.0) {
    r = g = b = v;
    return;
  }
  const auto i0 = static_cast<long>(h * 6.0);
  const double f = h * 6.0 - static_cast<double>(i0);
  const double p = v * (1.0 - s), q = v * (1.0 - s * f), t = v * (1.0 - s * (1.0 - f));
  switch (((i0 % 6) + 6) % 6) {
    case 0: r = v, g = t, b = p; break;
    case 1: r = q, g = v, b = p; break;
    case 2: r = p, g = v, b = t; break;
    case 3: r = p, g = q, b = v; break;
    case 4: r = t, g = p, b = v; break;
    default: r = v, g = p, b = q; break;
  }
}

}  // namespace data_detail

/// Applies a drawn augmentation. Geometry (elastic field, rotation about the
/// centre, flips) is composed into one inverse map and resampled once with a
/// reflect-101 border: bilinear for the image, nearest for the mask. Colour
/// jitter then runs on the image only, clipping to [0, 1] after each step.
inline Sample apply_augmentation(const Sample& in, const AugmentDraw& d, std::size_t grid) {
  const std::size_t C = in.image.c(), h = in.image.h(), w = in.image.w();
  if (in.mask.h() != h || in.mask.w() != w) throw InputError("augment: image and mask sizes differ");
  const double th = d.angle_deg * std::numbers::pi / 180.0;
  const double cos_t = std::cos(th), sin_t = std::sin(th);
  const double cx = (static_cast<double>(w) - 1) / 2.0, cy = (static_cast<double>(h) - 1) / 2.0;
  const std::size_t stride = grid + 1;

  std::vector<double> img(C * h * w);
  Sample out{Tensor<float>(in.image.shape()), Tensor<float>(in.mask.shape()), in.id, in.n_cropped};
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      const double gxf = w > 1 ? static_cast<double>(x) * static_cast<double>(grid) / static_cast<double>(w - 1) : 0.0;
      const double gyf = h > 1 ? static_cast<double>(y) * static_cast<double>(grid) / static_cast<double>(h - 1) : 0.0;
      const std::size_t i = std::min(static_cast<std::size_t>(std::floor(gxf)), grid - 1);
      const std::size_t j = std::min(static_cast<std::size_t>(std::floor(gyf)), grid - 1);
      const double tx = gxf - static_cast<double>(i), ty = gyf - static_cast<double>(j);
      double disp[2];
      for (int k = 0; k < 2; ++k) {
        const double n00 = d.nodes[j * stride + i][k], n01 = d.nodes[j * stride + i + 1][k];
        const double n10 = d.nodes[(j + 1) * stride + i][k], n11 = d.nodes[(j + 1) * stride + i + 1][k];
        disp[k] = (1 - ty) * ((1 - tx) * n00 + tx * n01) + ty * ((1 - tx) * n10 + tx * n11);
      }
      const double dx = static_cast<double>(x) + disp[0] - cx, dy = static_cast<double>(y) + disp[1] - cy;
      double sx = cos_t * dx + sin_t * dy + cx;
      double sy = -sin_t * dx + cos_t * dy + cy;
      if (d.flip_h) sx = (static_cast<double>(w) - 1) - sx;
      if (d.flip_v) sy = (static_cast<double>(h) - 1) - sy;
      sx = data_detail::reflect101(sx, w);
      sy = data_detail::reflect101(sy, h);

      const auto x0 = static_cast<std::size_t>(std::floor(sx)), y0 = static_cast<std::size_t>(std::floor(sy));
      const std::size_t x1 = std::min(x0 + 1, w - 1), y1 = std::min(y0 + 1, h - 1);
      const double fx = sx - static_cast<double>(x0), fy = sy - static_cast<double>(y0);
      for (std::size_t c = 0; c < C; ++c) {
        const double top = (1 - fx) * in.image.at(0, c, y0, x0) + fx * in.image.at(0, c, y0, x1);
        const double bot = (1 - fx) * in.image.at(0, c, y1, x0) + fx * in.image.at(0, c, y1, x1);
        img[(c * h + y) * w + x] = (1 - fy) * top + fy * bot;
      }
      const std::size_t nx = std::min(static_cast<std::size_t>(std::floor(sx + 0.5)), w - 1);
      const std::size_t ny = std::min(static_cast<std::size_t>(std::floor(sy + 0.5)), h - 1);
      out.mask.at(0, 0, y, x) = in.mask.at(0, 0, ny, nx);
    }
  }

  const std::size_t P = h * w;
  auto clip = [](double v) { return std::clamp(v, 0.0, 1.0); };
  for (auto& v : img) v = clip(v * d.brightness);
  if (C == 3) {
    auto gray = [&](std::size_t p) { return 0.299 * img[p] + 0.587 * img[P + p] + 0.114 * img[2 * P + p]; };
    double mean = 0;
    for (std::size_t p = 0; p < P; ++p) mean += gray(p);
    mean /= static_cast<double>(P);
    for (auto& v : img) v = clip(d.contrast * v + (1 - d.contrast) * mean);
    for (std::size_t p = 0; p < P; ++p) {
      const double g = gray(p);
      for (std::size_t c = 0; c < 3; ++c) img[c * P + p] = clip(d.saturation * img[c * P + p] + (1 - d.saturation) * g);
    }
    if (d.hue != 0.0) {
      for (std::size_t p = 0; p < P; ++p) {
        double hh, ss, vv;
        data_detail::rgb_to_hsv(img[p], img[P + p], img[2 * P + p], hh, ss, vv);
        hh = std::fmod(hh + d.hue, 1.0);
        if (hh < 0) hh += 1.0;
        data_detail::hsv_to_rgb(hh, ss, vv, img[p], img[P + p], img[2 * P + p]);
        for (std::size_t c = 0; c < 3; ++c) img[c * P + p] = clip(img[c * P + p]);
      }
    }
  }
  for (std::size_t i = 0; i < img.size(); ++i) out.image[i] = static_cast<float>(img[i]);
  return out;
}

/// Augments one sample with the stream derived from (cfg.seed, id, epoch).
inline Sample augment(const Sample& in, const AugmentConfig& cfg, std::uint64_t epoch) {
  auto rng = CounterRng::for_sample(cfg.seed, in.id, epoch);
  return apply_augmentation(in, draw_augmentation(cfg, rng), cfg.elastic_grid);
}

inline Sample flip_horizontal(const Sample& in) {
  Sample out = in;
  auto flip = [](const Tensor<float>& src, Tensor<float>& dst) {
    for (std::size_t c = 0; c < src.c(); ++c)
      for (std::size_t y = 0; y < src.h(); ++y)
        for (std::size_t x = 0; x < src.w(); ++x) dst.at(0, c, y, x) = src.at(0, c, y, src.w() - 1 - x);
  };
  flip(in.image, out.image);
  flip(in.mask, out.mask);
  return out;
}

}  // namespace m2unet
