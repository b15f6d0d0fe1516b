#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <set>

#include "m2unet/architecture.hpp"
#include "m2unet/data.hpp"
#include "m2unet/image_io.hpp"
#include "m2unet/weights_io.hpp"
#include "test_util.hpp"

using namespace m2unet;
using m2unet::testing::fixture_path;
using m2unet::testing::random_tensor;
using m2unet::testing::TempDir;

namespace fs = std::filesystem;

namespace {

Sample synthetic_sample(std::size_t h, std::size_t w, std::uint32_t seed, std::string id = "s") {
  Sample s{random_tensor<float>({1, 3, h, w}, seed, 0, 1), Tensor<float>({1, 1, h, w}), std::move(id), 0};
  for (std::size_t y = 0; y < h; ++y) s.mask.at(0, 0, y, (y * 3 + seed) % w) = 1.0f;
  return s;
}

Tensor<float> quantize(Tensor<float> t) {
  for (auto& v : t.vec()) v = std::round(v * 255.0f) / 255.0f;
  return t;
}

}  // namespace

// ---------------------------------------------------------------------------
// Crops and splits
// ---------------------------------------------------------------------------

TEST(Crop, Drive) {
  const auto s = dataset_spec("DRIVE");
  const auto out = crop(synthetic_sample(584, 565, 1), s);
  EXPECT_EQ(out.image.shape(), (Shape{1, 3, 544, 544}));
  EXPECT_EQ(out.mask.shape(), (Shape{1, 1, 544, 544}));
  EXPECT_EQ(out.n_cropped, 34'024u);
}

TEST(Crop, ChaseRemovesSideColumns) {
  const auto s = dataset_spec("CHASE_DB1");
  auto in = synthetic_sample(960, 999, 2);
  const auto out = crop(in, s);
  EXPECT_EQ(out.image.shape(), (Shape{1, 3, 960, 960}));
  EXPECT_EQ(out.image.at(0, 1, 5, 0), in.image.at(0, 1, 5, 18));
  EXPECT_EQ(out.image.at(0, 2, 7, 959), in.image.at(0, 2, 7, 977));
  EXPECT_EQ(out.n_cropped, 960u * 39);
}

TEST(Crop, HrfIsIdentity) {
  const auto s = dataset_spec("HRF");
  Sample in{Tensor<float>({1, 3, 2336, 3504}, 0.5f), Tensor<float>({1, 1, 2336, 3504}), "01_h", 0};
  const auto out = crop(in, s);
  EXPECT_EQ(out.image.shape(), in.image.shape());
  EXPECT_EQ(out.n_cropped, 0u);
}

TEST(Crop, IdempotentAndRejectsWrongSize) {
  const auto s = dataset_spec("DRIVE");
  const auto once = crop(synthetic_sample(584, 565, 3), s);
  const auto twice = crop(once, s);
  EXPECT_EQ(twice.image.vec(), once.image.vec());
  EXPECT_EQ(twice.n_cropped, once.n_cropped);
  EXPECT_THROW(crop(synthetic_sample(500, 500, 4), s), InputError);
}

TEST(Crop, OutputsAreMultiplesOf16) {
  for (const char* n : {"DRIVE", "CHASE_DB1", "HRF"}) {
    const auto s = dataset_spec(n);
    EXPECT_EQ(s.cropped_h() % 16, 0u) << n;
    EXPECT_EQ(s.cropped_w() % 16, 0u) << n;
  }
}

TEST(Split, Sizes) {
  EXPECT_EQ(split("DRIVE").first.size(), 20u);
  EXPECT_EQ(split("DRIVE").second.size(), 20u);
  EXPECT_EQ(split("CHASE_DB1").first.size(), 8u);
  EXPECT_EQ(split("CHASE_DB1").second.size(), 20u);
  EXPECT_EQ(split("HRF").first.size(), 15u);
  EXPECT_EQ(split("HRF").second.size(), 30u);
  EXPECT_THROW(split("STARE"), UsageError);
}

TEST(Split, MembershipAndDisjointness) {
  const auto [ctrain, ctest] = split("CHASE_DB1");
  EXPECT_EQ(ctrain.front(), "Image_01L");
  EXPECT_EQ(ctrain.back(), "Image_04R");
  const auto [htrain, htest] = split("HRF");
  for (const char* cat : {"_h", "_dr", "_g"}) {
    EXPECT_EQ(std::count_if(htrain.begin(), htrain.end(), [&](const auto& id) { return id.ends_with(cat); }), 5);
  }
  for (const char* n : {"DRIVE", "CHASE_DB1", "HRF"}) {
    const auto [train, test] = split(n);
    std::set<std::string> all(train.begin(), train.end());
    for (const auto& id : test) EXPECT_FALSE(all.count(id)) << n << " " << id;
  }
}

TEST(Split, ManifestOverrides) {
  TempDir dir;
  fs::create_directories(dir.path() / "DRIVE");
  std::ofstream(dir.path() / "DRIVE" / "train.txt") << "# subset\n21\n 22 \n\n";
  const auto s = dataset_spec("DRIVE");
  EXPECT_EQ(split_ids(dir.path(), s, true), (std::vector<std::string>{"21", "22"}));
  EXPECT_EQ(split_ids(dir.path(), s, false).size(), 20u);
}

TEST(Validation, HoldOut) {
  const auto train = split("DRIVE").first;
  const auto [a, va] = make_validation(train, 2, 0);
  EXPECT_EQ(a.size(), 18u);
  EXPECT_EQ(va.size(), 2u);
  const auto [b, vb] = make_validation(train, 2, 0);
  EXPECT_EQ(va, vb);
  EXPECT_EQ(a, b);
  for (const auto& id : va) EXPECT_EQ(std::count(a.begin(), a.end(), id), 0);
  const auto [c, vc] = make_validation(train, 0, 0);
  EXPECT_TRUE(vc.empty());
  EXPECT_EQ(c, train);
  EXPECT_THROW(make_validation(train, 20, 0), UsageError);
}

// ---------------------------------------------------------------------------
// Augmentation
// ---------------------------------------------------------------------------

TEST(Augment, DisabledIsIdentity) {
  const auto s = synthetic_sample(48, 32, 5);
  const auto out = augment(s, AugmentConfig::disabled(), 3);
  EXPECT_EQ(out.image.vec(), s.image.vec());
  EXPECT_EQ(out.mask.vec(), s.mask.vec());
}

TEST(Augment, DoubleHorizontalFlipIsIdentity) {
  const auto s = synthetic_sample(16, 20, 6);
  const auto twice = flip_horizontal(flip_horizontal(s));
  EXPECT_EQ(twice.image.vec(), s.image.vec());
  EXPECT_EQ(twice.mask.vec(), s.mask.vec());
  auto cfg = AugmentConfig::disabled();
  cfg.flip_h_prob = 1.0;
  EXPECT_EQ(augment(s, cfg, 0).image.vec(), flip_horizontal(s).image.vec());
}

TEST(Augment, GoldenSeed42) {
  const auto f = read_fixture(fixture_path("aug_s42.bin"));
  Sample s{find_tensor(f, "image").value, find_tensor(f, "mask").value, "sample", 0};
  AugmentConfig cfg;
  cfg.seed = 42;
  const auto out = augment(s, cfg, 0);
  EXPECT_LT(max_abs_diff(out.image, find_tensor(f, "image_out").value), 1e-4f);
  EXPECT_EQ(out.mask.vec(), find_tensor(f, "mask_out").value.vec());
}

TEST(Augment, DeterministicMaskBinaryAndGeometryShared) {
  AugmentConfig cfg;
  cfg.seed = 7;
  const auto s = synthetic_sample(64, 64, 8);
  for (std::uint64_t epoch = 0; epoch < 5; ++epoch) {
    const auto a = augment(s, cfg, epoch), b = augment(s, cfg, epoch);
    EXPECT_EQ(a.image.vec(), b.image.vec());
    EXPECT_EQ(a.mask.vec(), b.mask.vec());
    for (float v : a.mask.vec()) EXPECT_TRUE(v == 0.0f || v == 1.0f);
    for (float v : a.image.vec()) {
      EXPECT_GE(v, 0.0f);
      EXPECT_LE(v, 1.0f);
    }
  }
  // Encode pixel coordinates in the image and check each mask pixel comes
  // from the nearest source of the corresponding image sample.
  const std::size_t n = 32;
  Sample coords{Tensor<float>({1, 3, n, n}), Tensor<float>({1, 1, n, n}), "coords", 0};
  auto geo = cfg;
  geo.c_brightness = geo.c_contrast = geo.c_saturation = geo.c_hue = 0;
  for (std::size_t y = 0; y < n; ++y)
    for (std::size_t x = 0; x < n; ++x) {
      coords.image.at(0, 0, y, x) = static_cast<float>(x) / (n - 1);
      coords.image.at(0, 1, y, x) = static_cast<float>(y) / (n - 1);
      coords.mask.at(0, 0, y, x) = ((x * 7 + y * 3) % 5 == 0) ? 1.0f : 0.0f;
    }
  for (std::uint64_t epoch = 0; epoch < 5; ++epoch) {
    const auto a = augment(coords, geo, epoch);
    std::size_t agree = 0, total = 0;
    for (std::size_t y = 1; y + 1 < n; ++y)
      for (std::size_t x = 1; x + 1 < n; ++x) {
        const auto sx = static_cast<std::size_t>(std::lround(a.image.at(0, 0, y, x) * (n - 1)));
        const auto sy = static_cast<std::size_t>(std::lround(a.image.at(0, 1, y, x) * (n - 1)));
        agree += a.mask.at(0, 0, y, x) == coords.mask.at(0, 0, sy, sx);
        ++total;
      }
    EXPECT_GT(static_cast<double>(agree) / static_cast<double>(total), 0.97) << "epoch " << epoch;
  }
}

TEST(Augment, DrawOrderAndRanges) {
  AugmentConfig cfg;
  cfg.seed = 11;
  for (std::uint64_t e = 0; e < 50; ++e) {
    auto rng = CounterRng::for_sample(cfg.seed, "x", e);
    const auto d = draw_augmentation(cfg, rng);
    EXPECT_EQ(rng.counter(), 2u + 1u + 2u * 49u + 4u);
    EXPECT_LE(std::abs(d.angle_deg), 15.0);
    EXPECT_LE(std::abs(d.brightness - 1), 0.3);
    EXPECT_LE(std::abs(d.contrast - 1), 0.3);
    EXPECT_LE(std::abs(d.saturation - 1), 0.02);
    EXPECT_LE(std::abs(d.hue), 0.02);
    for (std::size_t i = 0; i < d.nodes.size(); ++i) {
      const std::size_t gy = i / 9, gx = i % 9;
      const bool border = gy == 0 || gx == 0 || gy == 8 || gx == 8;
      for (double v : d.nodes[i]) {
        EXPECT_TRUE(v == -1 || v == 0 || v == 1);
        if (border) {
          EXPECT_EQ(v, 0.0);
        }
      }
    }
  }
}

// ---------------------------------------------------------------------------
// Images
// ---------------------------------------------------------------------------

TEST(ImageIo, RoundTripsAllFormats) {
  TempDir dir;
  const auto rgb = quantize(random_tensor<float>({1, 3, 7, 5}, 9, 0, 1));
  const auto gray = quantize(random_tensor<float>({1, 1, 6, 9}, 10, 0, 1));
  for (const char* name : {"a.png", "a.ppm"}) {
    write_image(rgb, dir.path() / name);
    EXPECT_EQ(read_image(dir.path() / name).vec(), rgb.vec()) << name;
  }
  for (const char* name : {"b.png", "b.pgm"}) {
    write_image(gray, dir.path() / name);
    EXPECT_EQ(read_image(dir.path() / name).vec(), gray.vec()) << name;
  }
}

TEST(ImageIo, ProbMapQuantization) {
  TempDir dir;
  const auto p = random_tensor<float>({1, 1, 9, 11}, 11, 0, 1);
  write_prob_map(p, dir.path() / "p.png");
  const auto back = read_image(dir.path() / "p.png");
  EXPECT_LE(max_abs_diff(back, p), 0.5f / 255.0f + 1e-6f);
}

TEST(ImageIo, OverlayColours) {
  Tensor<float> pred({1, 1, 2, 2}, {1.0f, 1.0f, 0.0f, 0.0f});
  Tensor<float> gt({1, 1, 2, 2}, {1.0f, 0.0f, 1.0f, 0.0f});
  const auto o = overlay_image(pred, gt);
  auto px = [&](std::size_t i) { return std::vector<float>{o[i], o[4 + i], o[8 + i]}; };
  EXPECT_EQ(px(0), (std::vector<float>{1, 1, 1}));  // TP white
  EXPECT_EQ(px(1), (std::vector<float>{1, 1, 0}));  // FP yellow
  EXPECT_EQ(px(2), (std::vector<float>{1, 0, 0}));  // FN red
  EXPECT_EQ(px(3), (std::vector<float>{0, 0, 0}));  // TN black

  const auto same = overlay_image(gt, gt);
  for (std::size_t i = 0; i < 4; ++i) {
    EXPECT_EQ(same[i], same[4 + i]);
    EXPECT_EQ(same[i], same[8 + i]);
  }
}

TEST(ImageIo, UnsupportedFormats) {
  TempDir dir;
  std::ofstream(dir.path() / "x.tif") << "II*\0garbage";
  EXPECT_THROW(read_image(dir.path() / "x.tif"), UsageError);
  std::ofstream(dir.path() / "deep.pgm", std::ios::binary) << "P5\n1 1\n65535\n\x01\x02";
  EXPECT_THROW(read_image(dir.path() / "deep.pgm"), UsageError);
  EXPECT_THROW(write_image(Tensor<float>({1, 3, 2, 2}), dir.path() / "x.pgm"), UsageError);
  EXPECT_THROW(read_image(dir.path() / "missing.png"), InputError);
}

TEST(ImageIo, RejectsSixteenBitPng) {
  TempDir dir;
  png_image img;
  std::memset(&img, 0, sizeof img);
  img.version = PNG_IMAGE_VERSION;
  img.width = img.height = 2;
  img.format = PNG_FORMAT_LINEAR_Y;
  std::vector<png_uint_16> buf(4, 1000);
  ASSERT_TRUE(png_image_write_to_file(&img, (dir.path() / "d.png").c_str(), 0, buf.data(), 0, nullptr));
  EXPECT_THROW(read_image(dir.path() / "d.png"), UsageError);
}

TEST(Dataset, LoadsFromDirectory) {
  TempDir dir;
  const auto s = dataset_spec("DRIVE");
  fs::create_directories(dir.path() / "DRIVE" / "images");
  fs::create_directories(dir.path() / "DRIVE" / "labels");
  const auto img = quantize(random_tensor<float>({1, 3, 584, 565}, 12, 0, 1));
  Tensor<float> label({1, 1, 584, 565});
  label.at(0, 0, 100, 100) = 1.0f;
  write_image(img, dir.path() / "DRIVE" / "images" / "21.png");
  write_image(label, dir.path() / "DRIVE" / "labels" / "21.pgm");
  const auto sample = load_sample(dir.path(), s, "21");
  EXPECT_EQ(sample.image.shape(), (Shape{1, 3, 544, 544}));
  EXPECT_EQ(sample.n_cropped, 34'024u);
  EXPECT_EQ(sample.mask.at(0, 0, 80, 90), 1.0f);
  EXPECT_EQ(sample.image.at(0, 2, 0, 0), img.at(0, 2, 20, 10));
  EXPECT_THROW(load_sample(dir.path(), s, "22"), InputError);
}

// ---------------------------------------------------------------------------
// Weight files
// ---------------------------------------------------------------------------

TEST(WeightFile, RoundTripIsBitExact) {
  TempDir dir;
  auto g = build_graph<float>(mini_layers(), 32, 32);
  std::uint32_t seed = 13;
  for (auto& e : g.params.entries()) e.value = random_tensor<float>(e.value.shape(), seed++);
  save_weights(g, dir.path() / "a.m2uw");
  auto h = build_graph<float>(mini_layers(), 32, 32);
  install_weights(h, load_weights(dir.path() / "a.m2uw"));
  for (std::size_t i = 0; i < g.params.size(); ++i) {
    EXPECT_EQ(g.params.entries()[i].value.vec(), h.params.entries()[i].value.vec());
  }
  save_weights(h, dir.path() / "b.m2uw");
  EXPECT_EQ(io_detail::slurp(dir.path() / "a.m2uw"), io_detail::slurp(dir.path() / "b.m2uw"));
  const auto m = load_model(dir.path() / "a.m2uw");
  EXPECT_EQ(architecture_hash(m), architecture_hash(g));
}

TEST(WeightFile, CanonicalSize) {
  TempDir dir;
  const auto g = build_m2unet<float>(544, 544);
  save_weights(g, dir.path() / "c.m2uw");
  const double size = static_cast<double>(fs::file_size(dir.path() / "c.m2uw"));
  EXPECT_NEAR(size, 2.2e6, 0.1 * 2.2e6);
}

TEST(WeightFile, FailuresLeaveModelUntouched) {
  TempDir dir;
  auto g = build_graph<float>(mini_layers(), 32, 32);
  g.params.entries()[0].value.fill(0.25f);
  save_weights(g, dir.path() / "w.m2uw");
  auto bytes = io_detail::slurp(dir.path() / "w.m2uw");

  io_detail::write_file(dir.path() / "t.m2uw", bytes.substr(0, bytes.size() / 2));
  EXPECT_THROW(load_weights(dir.path() / "t.m2uw"), LoadError);
  auto bad = bytes;
  bad[0] = 'X';
  io_detail::write_file(dir.path() / "m.m2uw", bad);
  EXPECT_THROW(load_weights(dir.path() / "m.m2uw"), LoadError);
  auto ver = bytes;
  ver[4] = 9;
  io_detail::write_file(dir.path() / "v.m2uw", ver);
  EXPECT_THROW(load_weights(dir.path() / "v.m2uw"), LoadError);

  auto other = build_m2unet<float>(32, 32);
  const auto before = other.params.entries()[0].value.vec();
  EXPECT_THROW(install_weights(other, load_weights(dir.path() / "w.m2uw")), LoadError);
  EXPECT_EQ(other.params.entries()[0].value.vec(), before);
}

TEST(Fixture, ReadWriteRoundTrip) {
  TempDir dir;
  std::vector<NamedTensor> ts;
  ts.push_back({"a", {2, 3}, Tensor<float>({1, 1, 2, 3}, {1, 2, 3, 4, 5, 6})});
  ts.push_back({"b", {4}, Tensor<float>({4, 1, 1, 1}, {7, 8, 9, 10})});
  write_fixture(dir.path() / "f.bin", ts);
  const auto back = read_fixture(dir.path() / "f.bin");
  ASSERT_EQ(back.size(), 2u);
  EXPECT_EQ(back[0].name, "a");
  EXPECT_EQ(back[0].dims, (std::vector<std::uint32_t>{2, 3}));
  EXPECT_EQ(back[1].value.vec(), ts[1].value.vec());
  EXPECT_THROW(find_tensor(back, "c"), LoadError);
}
