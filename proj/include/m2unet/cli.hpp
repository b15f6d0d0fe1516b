#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "m2unet/architecture.hpp"
#include "m2unet/data.hpp"
#include "m2unet/image_io.hpp"
#include "m2unet/metrics.hpp"
#include "m2unet/parallel.hpp"
#include "m2unet/trainer.hpp"
#include "m2unet/weights_io.hpp"

// Command implementations behind the m2unet executable. Each command writes a
// machine-readable artifact and logs progress to the given stream.
namespace m2unet::cli {

namespace fs = std::filesystem;

inline std::string fmt_double(double v, int precision = 10) {
  if (std::isnan(v)) return "nan";
  std::ostringstream os;
  os << std::setprecision(precision) << v;
  return os.str();
}

inline void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InputError("cannot write " + path.string());
  out << text;
  if (!out) throw InputError("cannot write " + path.string());
}

/// "HxW" with both sides positive integers.
inline std::pair<std::size_t, std::size_t> parse_resolution(const std::string& s) {
  const auto x = s.find_first_of("xX");
  auto parse = [&](const std::string& part) -> std::size_t {
    if (part.empty() || !std::all_of(part.begin(), part.end(), [](unsigned char c) { return std::isdigit(c); })) {
      throw UsageError("bad resolution '" + s + "', expected HxW");
    }
    return static_cast<std::size_t>(std::stoull(part));
  };
  if (x == std::string::npos) throw UsageError("bad resolution '" + s + "', expected HxW");
  const auto h = parse(s.substr(0, x)), w = parse(s.substr(x + 1));
  if (h == 0 || w == 0) throw UsageError("bad resolution '" + s + "'");
  return {h, w};
}

/// Explicit value, else $M2U_DATA_ROOT.
inline fs::path resolve_root(const std::string& explicit_root) {
  if (!explicit_root.empty()) return explicit_root;
  if (const char* env = std::getenv("M2U_DATA_ROOT"); env && *env) return env;
  throw UsageError("no dataset root: pass --root or set M2U_DATA_ROOT");
}

inline std::size_t next_multiple(std::size_t v, std::size_t m) { return (v + m - 1) / m * m; }

/// Zero-pads bottom and right edges.
inline Tensor<float> pad_to(const Tensor<float>& t, std::size_t h, std::size_t w) {
  if (t.h() == h && t.w() == w) return t;
  Tensor<float> out({t.n(), t.c(), h, w});
  for (std::size_t b = 0; b < t.n(); ++b)
    for (std::size_t c = 0; c < t.c(); ++c)
      for (std::size_t y = 0; y < t.h(); ++y) {
        const float* src = t.data() + t.offset(b, c, y, 0);
        std::copy(src, src + t.w(), out.data() + out.offset(b, c, y, 0));
      }
  return out;
}

/// Top-left h x w window.
inline Tensor<float> crop_to(const Tensor<float>& t, std::size_t h, std::size_t w) {
  if (t.h() == h && t.w() == w) return t;
  Tensor<float> out({t.n(), t.c(), h, w});
  for (std::size_t b = 0; b < t.n(); ++b)
    for (std::size_t c = 0; c < t.c(); ++c)
      for (std::size_t y = 0; y < h; ++y) {
        const float* src = t.data() + t.offset(b, c, y, 0);
        std::copy(src, src + w, out.data() + out.offset(b, c, y, 0));
      }
  return out;
}

inline Tensor<float> first_channel(const Tensor<float>& t) {
  if (t.c() == 1) return t;
  Tensor<float> out({1, 1, t.h(), t.w()});
  std::copy(t.data(), t.data() + out.size(), out.data());
  return out;
}

/// Probability map (1, 1, h, w) for an RGB image. Sizes that are not multiples
/// of the network divisor are a usage error unless `pad` is set, in which case
/// the image is zero-padded and the output cropped back.
inline Tensor<float> predict(const ModelGraph<float>& g, const Tensor<float>& image, bool pad) {
  if (image.c() != g.in_channels) {
    throw InputError("expected a " + std::to_string(g.in_channels) + "-channel image, got " + image.shape().str());
  }
  const std::size_t d = g.divisor(), h = image.h(), w = image.w();
  if ((h % d || w % d) && !pad) {
    throw UsageError("input " + std::to_string(h) + "x" + std::to_string(w) + " is not a multiple of " +
                     std::to_string(d) + " (use --pad)");
  }
  auto prob = crop_to(forward(g, pad_to(image, next_multiple(h, d), next_multiple(w, d))), h, w);
  if (!prob.all_finite()) throw NumericError("forward pass produced non-finite probabilities");
  return prob;
}

// ---------------------------------------------------------------------------
// segment
// ---------------------------------------------------------------------------

struct SegmentOptions {
  fs::path weights;
  fs::path input;
  fs::path output_dir;
  std::optional<double> threshold;
  std::optional<fs::path> optimal_from;
  std::optional<fs::path> gt;
  bool pad = false;
};

struct SegmentResult {
  double threshold = 0.5;
  std::string threshold_source = "default";
  std::size_t height = 0, width = 0, padded_height = 0, padded_width = 0;
  fs::path prob_map, binary_map, overlay, result_json;
  std::optional<ConfusionCounts> counts;

  nlohmann::json to_json() const {
    nlohmann::json j{{"threshold", threshold},
                     {"threshold_source", threshold_source},
                     {"height", height},
                     {"width", width},
                     {"padded_height", padded_height},
                     {"padded_width", padded_width},
                     {"prob_map", prob_map.string()},
                     {"binary_map", binary_map.string()},
                     {"overlay", overlay.string()}};
    if (counts) {
      j["dice"] = dice_score(*counts);
      j["precision"] = precision(*counts);
      j["recall"] = recall(*counts);
      j["accuracy"] = accuracy_adjusted(*counts);
      j["counts"] = {{"tp", counts->tp}, {"fp", counts->fp}, {"tn", counts->tn}, {"fn", counts->fn}};
    }
    return j;
  }
};

inline std::vector<std::pair<fs::path, fs::path>> image_label_pairs(const fs::path& dir) {
  if (!fs::is_directory(dir / "images")) throw InputError("missing directory " + (dir / "images").string());
  std::vector<fs::path> images;
  for (const auto& e : fs::directory_iterator(dir / "images")) {
    const auto ext = image_detail::lower_ext(e.path());
    if (ext == ".png" || ext == ".ppm") images.push_back(e.path());
  }
  std::sort(images.begin(), images.end());
  std::vector<std::pair<fs::path, fs::path>> out;
  for (const auto& img : images) {
    for (const char* ext : {".png", ".pgm"}) {
      const auto label = dir / "labels" / (img.stem().string() + ext);
      if (fs::exists(label)) {
        out.emplace_back(img, label);
        break;
      }
    }
  }
  return out;
}

/// Dice-optimal threshold over the pooled pixels of `<dir>/images` and
/// `<dir>/labels`.
inline double optimal_threshold(const ModelGraph<float>& g, const fs::path& dir, bool pad, std::ostream& log) {
  const auto pairs = image_label_pairs(dir);
  if (pairs.empty()) throw InputError("no image/label pairs under " + dir.string());
  const auto thresholds = default_thresholds();
  std::vector<ConfusionCounts> pooled(thresholds.size());
  for (const auto& [img, lab] : pairs) {
    const auto prob = predict(g, read_image(img), pad);
    const auto gt = binarize_label(read_image(lab));
    const auto curve = pr_curve<float, float>(prob.vec(), gt.vec(), thresholds);
    for (std::size_t k = 0; k < pooled.size(); ++k) pooled[k] += curve.counts[k];
  }
  std::size_t best = 0;
  for (std::size_t k = 1; k < pooled.size(); ++k) {
    if (dice_score(pooled[k]) > dice_score(pooled[best])) best = k;
  }
  log << "optimal threshold " << thresholds[best] << " (dice " << fmt_double(dice_score(pooled[best]), 6) << " over "
      << pairs.size() << " images)\n";
  return thresholds[best];
}

/// Input image with predicted vessel pixels painted green.
inline Tensor<float> prediction_overlay(const Tensor<float>& image, const Tensor<float>& prob, double threshold) {
  Tensor<float> out = image;
  const std::size_t plane = prob.h() * prob.w();
  for (std::size_t i = 0; i < plane; ++i) {
    if (prob[i] >= threshold) {
      out[i] = 0.0f;
      out[plane + i] = 1.0f;
      out[2 * plane + i] = 0.0f;
    }
  }
  return out;
}

inline SegmentResult run_segment(const SegmentOptions& o, std::ostream& log) {
  if (o.threshold && o.optimal_from) throw UsageError("--threshold and --optimal-from are exclusive");
  if (o.threshold && !(*o.threshold >= 0 && *o.threshold <= 1)) throw UsageError("--threshold must lie in [0, 1]");
  const auto g = load_model(o.weights);
  const auto image = read_image(o.input);

  SegmentResult r;
  r.height = image.h();
  r.width = image.w();
  r.padded_height = next_multiple(image.h(), g.divisor());
  r.padded_width = next_multiple(image.w(), g.divisor());
  if (!o.pad) {
    r.padded_height = r.height;
    r.padded_width = r.width;
  }
  const auto prob = predict(g, image, o.pad);
  if (o.threshold) {
    r.threshold = *o.threshold;
    r.threshold_source = "flag";
  } else if (o.optimal_from) {
    r.threshold = optimal_threshold(g, *o.optimal_from, o.pad, log);
    r.threshold_source = "optimal:" + o.optimal_from->string();
  }

  Tensor<float> binary(prob.shape());
  for (std::size_t i = 0; i < prob.size(); ++i) binary[i] = prob[i] >= r.threshold ? 1.0f : 0.0f;

  const std::string stem = o.input.stem().string();
  fs::create_directories(o.output_dir);
  r.prob_map = o.output_dir / (stem + "_prob.png");
  r.binary_map = o.output_dir / (stem + "_binary.png");
  r.overlay = o.output_dir / (stem + "_overlay.png");
  r.result_json = o.output_dir / (stem + "_segment.json");
  write_prob_map(prob, r.prob_map);
  write_image(binary, r.binary_map);
  if (o.gt) {
    const auto gt = binarize_label(read_image(*o.gt));
    if (gt.h() != prob.h() || gt.w() != prob.w()) {
      throw InputError("ground truth " + gt.shape().str() + " does not match prediction " + prob.shape().str());
    }
    r.counts = confusion<float, float>(prob.vec(), gt.vec(), r.threshold);
    write_overlay(prob, gt, r.overlay, r.threshold);
    log << "dice " << fmt_double(dice_score(*r.counts), 6) << " at threshold " << r.threshold << "\n";
  } else {
    write_image(prediction_overlay(image, prob, r.threshold), r.overlay);
  }
  write_text(r.result_json, r.to_json().dump(2) + "\n");
  log << "wrote " << r.prob_map.string() << ", " << r.binary_map.string() << ", " << r.overlay.string() << "\n";
  return r;
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

struct EvalOptions {
  std::string root;
  std::string dataset;
  std::string split = "test";
  std::optional<fs::path> weights;
  std::optional<fs::path> predictions;
  fs::path out_dir;
  double threshold = 0.5;
  AucCropMode auc_mode = AucCropMode::score_zero;
};

struct ImageMetrics {
  std::string id;
  double dice = 0, accuracy = 0, auc = 0, optimal_threshold = 0, optimal_dice = 0;
  ConfusionCounts counts;
};

struct EvalResult {
  std::vector<ImageMetrics> images;
  std::vector<std::string> skipped;
  ImageMetrics aggregate;
  std::vector<PRPoint> pr;
  fs::path metrics_csv, pr_csv, result_json;
};

inline Tensor<float> load_prediction(const fs::path& dir, const std::string& id, const DatasetSpec& s) {
  fs::path p;
  for (const auto& name : {id + ".png", id + ".pgm", id + "_prob.png"}) {
    if (fs::exists(dir / name)) {
      p = dir / name;
      break;
    }
  }
  if (p.empty()) throw InputError("missing prediction for '" + id + "' in " + dir.string());
  return crop_tensor(first_channel(read_image(p)), s);
}

/// Per-image dice and accuracy at the threshold, AuC, and the image's Dice-optimal
/// threshold. The aggregate row averages per-image values; its optimal
/// threshold and dice come from the curve over all pooled pixels, which is also
/// the PR CSV.
inline EvalResult run_eval(const EvalOptions& o, std::ostream& log) {
  if (o.weights.has_value() == o.predictions.has_value()) {
    throw UsageError("eval needs exactly one of --weights or --predictions");
  }
  if (o.split != "test" && o.split != "train") throw UsageError("--split must be 'test' or 'train'");
  if (!(o.threshold >= 0 && o.threshold <= 1)) throw UsageError("--threshold must lie in [0, 1]");
  const fs::path root = resolve_root(o.root);
  const auto spec = dataset_spec(o.dataset);
  if (!fs::is_directory(root / spec.name)) throw InputError("dataset directory not found: " + (root / spec.name).string());
  std::optional<ModelGraph<float>> g;
  if (o.weights) g = load_model(*o.weights);

  const auto thresholds = default_thresholds();
  std::vector<ConfusionCounts> pooled(thresholds.size());
  EvalResult r;
  for (const auto& id : split_ids(root, spec, o.split == "train")) {
    Tensor<float> gt, prob;
    std::uint64_t n_cropped = 0;
    try {
      const auto label = read_image(data_detail::find_with_ext(root / spec.name / "labels", id, {".png", ".pgm"}));
      if (label.h() == spec.native_h && label.w() == spec.native_w) n_cropped = spec.cropped_pixels();
      gt = crop_tensor(binarize_label(label), spec);
    } catch (const InputError& e) {
      log << "warning: skipping " << id << ": " << e.what() << "\n";
      r.skipped.push_back(id);
      continue;
    }
    if (g) {
      const auto image = read_image(data_detail::find_with_ext(root / spec.name / "images", id, {".png", ".ppm"}));
      prob = predict(*g, crop_tensor(image, spec), false);
    } else {
      prob = load_prediction(*o.predictions, id, spec);
    }
    if (prob.h() != gt.h() || prob.w() != gt.w()) {
      throw InputError(id + ": prediction " + prob.shape().str() + " does not match label " + gt.shape().str());
    }

    ImageMetrics m;
    m.id = id;
    m.counts = confusion<float, float>(prob.vec(), gt.vec(), o.threshold, n_cropped);
    m.dice = dice_score(m.counts);
    m.accuracy = accuracy_adjusted(m.counts);
    try {
      m.auc = roc_auc<float, float>(prob.vec(), gt.vec(), n_cropped, o.auc_mode);
    } catch (const UsageError&) {
      m.auc = std::numeric_limits<double>::quiet_NaN();
      log << "warning: " << id << " has a single-class label; auc undefined\n";
    }
    const auto curve = pr_curve<float, float>(prob.vec(), gt.vec(), thresholds, n_cropped);
    m.optimal_threshold = curve.best.threshold;
    m.optimal_dice = curve.best.dice;
    for (std::size_t k = 0; k < pooled.size(); ++k) pooled[k] += curve.counts[k];
    log << id << ": dice " << fmt_double(m.dice, 6) << " acc " << fmt_double(m.accuracy, 6) << " auc "
        << fmt_double(m.auc, 6) << "\n";
    r.images.push_back(std::move(m));
  }
  if (r.images.empty()) throw InputError("no images evaluated: every ground truth was missing");

  auto& a = r.aggregate;
  a.id = "aggregate";
  std::size_t n_auc = 0;
  for (const auto& m : r.images) {
    a.dice += m.dice;
    a.accuracy += m.accuracy;
    a.counts += m.counts;
    if (!std::isnan(m.auc)) {
      a.auc += m.auc;
      ++n_auc;
    }
  }
  a.dice /= static_cast<double>(r.images.size());
  a.accuracy /= static_cast<double>(r.images.size());
  a.auc = n_auc ? a.auc / static_cast<double>(n_auc) : std::numeric_limits<double>::quiet_NaN();
  for (std::size_t k = 0; k < pooled.size(); ++k) {
    r.pr.push_back({thresholds[k], precision(pooled[k]), recall(pooled[k]), dice_score(pooled[k])});
  }
  std::size_t best = 0;
  for (std::size_t k = 1; k < r.pr.size(); ++k) {
    if (r.pr[k].dice > r.pr[best].dice) best = k;
  }
  a.optimal_threshold = r.pr[best].threshold;
  a.optimal_dice = r.pr[best].dice;

  fs::create_directories(o.out_dir);
  std::ostringstream csv;
  csv << "id,dice,accuracy,auc,optimal_threshold,optimal_dice\n";
  auto row = [&](const ImageMetrics& m) {
    csv << m.id << "," << fmt_double(m.dice, 12) << "," << fmt_double(m.accuracy, 12) << "," << fmt_double(m.auc, 12)
        << "," << fmt_double(m.optimal_threshold, 12) << "," << fmt_double(m.optimal_dice, 12) << "\n";
  };
  for (const auto& m : r.images) row(m);
  row(a);
  r.metrics_csv = o.out_dir / "metrics.csv";
  write_text(r.metrics_csv, csv.str());

  std::ostringstream pr;
  pr << "threshold,precision,recall,dice\n";
  for (const auto& p : r.pr) {
    pr << fmt_double(p.threshold, 12) << "," << fmt_double(p.precision, 12) << "," << fmt_double(p.recall, 12) << ","
       << fmt_double(p.dice, 12) << "\n";
  }
  r.pr_csv = o.out_dir / "pr.csv";
  write_text(r.pr_csv, pr.str());

  r.result_json = o.out_dir / "eval.json";
  nlohmann::json j{{"dataset", spec.name},
                   {"split", o.split},
                   {"threshold", o.threshold},
                   {"auc_crop_mode", o.auc_mode == AucCropMode::score_zero ? "score_zero" : "exclude"},
                   {"images", r.images.size()},
                   {"skipped", r.skipped},
                   {"dice", a.dice},
                   {"accuracy", a.accuracy},
                   {"auc", std::isnan(a.auc) ? nlohmann::json(nullptr) : nlohmann::json(a.auc)},
                   {"optimal_threshold", a.optimal_threshold},
                   {"optimal_dice", a.optimal_dice},
                   {"metrics_csv", r.metrics_csv.string()},
                   {"pr_csv", r.pr_csv.string()}};
  write_text(r.result_json, j.dump(2) + "\n");
  log << "aggregate: dice " << fmt_double(a.dice, 6) << " acc " << fmt_double(a.accuracy, 6) << " auc "
      << fmt_double(a.auc, 6) << " optimal " << a.optimal_threshold << " -> " << fmt_double(a.optimal_dice, 6) << "\n";
  return r;
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

struct TrainOptions {
  std::string dataset;
  std::string root;
  std::optional<fs::path> config;
  fs::path out_dir;
  std::optional<fs::path> init_weights;
  std::size_t val_count = 0;
  std::optional<std::size_t> epochs;
  std::optional<std::uint64_t> seed;
  std::size_t synthetic_count = 4;
  std::size_t synthetic_size = 64;
};

struct TrainRun {
  TrainResult<float> result;
  TrainConfig config;
  fs::path checkpoint, history_csv, result_json;
};

/// Trains on a dataset directory, or on seeded synthetic vessel images when the
/// dataset is "synthetic". Writes best.m2uw, history.csv and train.json.
inline TrainRun run_train(const TrainOptions& o, std::ostream& log) {
  TrainRun run;
  nlohmann::json raw = nlohmann::json::object();
  if (o.config) {
    std::ifstream in(*o.config);
    if (!in) throw UsageError("cannot open config: " + o.config->string());
    try {
      raw = nlohmann::json::parse(in);
    } catch (const nlohmann::json::parse_error& e) {
      throw ConfigError("config " + o.config->string() + ": " + e.what());
    }
  }
  if (o.epochs) raw["epochs"] = *o.epochs;
  if (o.seed) raw["seed"] = *o.seed;

  std::vector<Sample> train_set, val_set;
  if (o.dataset == "synthetic") {
    if (o.synthetic_count == 0) throw UsageError("--synthetic-count must be >= 1");
    for (std::size_t i = 0; i < o.synthetic_count; ++i) {
      train_set.push_back(synthetic_vessel_sample(o.synthetic_size, o.synthetic_size, i, "syn" + std::to_string(i)));
    }
    for (std::size_t i = 0; i < o.val_count; ++i) {
      const auto seed = o.synthetic_count + i;
      val_set.push_back(synthetic_vessel_sample(o.synthetic_size, o.synthetic_size, seed, "syn" + std::to_string(seed)));
    }
    if (!raw.contains("batch_size")) raw["batch_size"] = 1;
  } else {
    const fs::path root = resolve_root(o.root);
    const auto spec = dataset_spec(o.dataset);
    if (!fs::is_directory(root / spec.name)) throw InputError("dataset directory not found: " + (root / spec.name).string());
    if (!raw.contains("batch_size")) raw["batch_size"] = spec.batch_size;
    const auto seed = raw.value("seed", TrainConfig{}.seed);
    const auto [train_ids, val_ids] = make_validation(split_ids(root, spec, true), o.val_count, seed);
    for (const auto& id : train_ids) train_set.push_back(load_sample(root, spec, id));
    for (const auto& id : val_ids) val_set.push_back(load_sample(root, spec, id));
  }
  run.config = train_config_from_json(raw);
  if (train_set.empty()) throw InputError("empty training set");

  auto g = build_m2unet<float>(train_set.front().image.h(), train_set.front().image.w());
  if (o.init_weights) {
    init_pretrained_encoder(g, load_weights(*o.init_weights), run.config.seed);
  } else {
    init_weights(g, run.config.seed);
  }
  log << "training on " << train_set.size() << " images (" << val_set.size() << " validation), "
      << run.config.epochs << " epochs, batch " << run.config.batch_size << "\n";
  run.result = train(g, train_set, val_set, run.config, [&](const EpochRecord& e) {
    log << "epoch " << e.epoch << " loss " << fmt_double(e.loss, 6);
    if (!std::isnan(e.val_dice)) log << " val_dice " << fmt_double(e.val_dice, 6);
    log << "\n";
  });

  fs::create_directories(o.out_dir);
  run.checkpoint = o.out_dir / "best.m2uw";
  run.history_csv = o.out_dir / "history.csv";
  run.result_json = o.out_dir / "train.json";
  save_weights(run.result.best, run.checkpoint,
               {{"best_epoch", run.result.best_epoch}, {"train_config", nlohmann::json(run.config)}});
  write_history(run.result.history, run.history_csv);
  nlohmann::json j{{"dataset", o.dataset},
                   {"config", nlohmann::json(run.config)},
                   {"train_images", train_set.size()},
                   {"val_images", val_set.size()},
                   {"epochs_run", run.result.history.size()},
                   {"best_epoch", run.result.best_epoch},
                   {"diverged", run.result.diverged},
                   {"message", run.result.message},
                   {"checkpoint", run.checkpoint.string()},
                   {"history", run.history_csv.string()}};
  write_text(run.result_json, j.dump(2) + "\n");
  log << "best epoch " << run.result.best_epoch << ", checkpoint " << run.checkpoint.string() << "\n";
  if (run.result.diverged) throw NumericError("training diverged: " + run.result.message);
  return run;
}

// ---------------------------------------------------------------------------
// inspect
// ---------------------------------------------------------------------------

struct InspectOptions {
  std::size_t height = 544;
  std::size_t width = 544;
  double t_decoder = kDecoderContraction;
  std::optional<fs::path> json_out;
};

struct InspectReport {
  std::vector<RowInfo> rows;
  std::uint64_t total_params = 0;
  std::uint64_t total_madds = 0;
  std::uint64_t weight_file_bytes = 0;
  bool canonical = true;
  bool audit_ok = true;

  nlohmann::json to_json() const {
    nlohmann::json rs = nlohmann::json::array();
    for (std::size_t i = 0; i < rows.size(); ++i) {
      const auto& r = rows[i];
      rs.push_back({{"row", i + 1},
                    {"kind", layer_kind_name(r.spec.kind)},
                    {"t", r.spec.t},
                    {"c", r.spec.c},
                    {"n", r.spec.n},
                    {"s", r.spec.s},
                    {"in", r.in.str()},
                    {"out", r.out.str()},
                    {"params", r.cost.params},
                    {"madds", r.cost.madds}});
    }
    return {{"rows", rs},
            {"total_params", total_params},
            {"total_madds", total_madds},
            {"weight_file_bytes", weight_file_bytes},
            {"canonical", canonical},
            {"audit_ok", audit_ok}};
  }
};

/// Per-row parameter and multiply-add report. The audit fails when the canonical
/// decoder setting does not reproduce the reference parameter total.
inline InspectReport run_inspect(const InspectOptions& o, std::ostream& out) {
  if (!(o.t_decoder > 0)) throw UsageError("--t-decoder must be > 0");
  const auto g = build_m2unet<float>(o.height, o.width, o.t_decoder);
  InspectReport r;
  r.rows = describe(g);
  for (const auto& row : r.rows) {
    r.total_params += row.cost.params;
    r.total_madds += row.cost.madds;
  }
  r.weight_file_bytes = encode_weights(to_weight_file(g)).size();
  r.canonical = o.t_decoder == kDecoderContraction;
  r.audit_ok = !r.canonical || r.total_params == kCanonicalParamCount;

  out << "M2U-Net at " << o.height << "x" << o.width << " (decoder t=" << o.t_decoder << ")\n";
  out << std::left << std::setw(4) << "row" << std::setw(15) << "operator" << std::setw(6) << "t" << std::setw(5) << "c"
      << std::setw(3) << "n" << std::setw(3) << "s" << std::setw(22) << "input" << std::setw(22) << "output"
      << std::right << std::setw(10) << "params" << std::setw(16) << "madds" << "\n";
  for (std::size_t i = 0; i < r.rows.size(); ++i) {
    const auto& row = r.rows[i];
    out << std::left << std::setw(4) << i + 1 << std::setw(15) << layer_kind_name(row.spec.kind) << std::setw(6)
        << row.spec.t << std::setw(5) << row.spec.c << std::setw(3) << row.spec.n << std::setw(3) << row.spec.s
        << std::setw(22) << row.in.str() << std::setw(22) << row.out.str() << std::right << std::setw(10)
        << row.cost.params << std::setw(16) << row.cost.madds << "\n";
  }
  out << "total params " << r.total_params << "\n";
  out << "total madds " << r.total_madds << " (" << fmt_double(static_cast<double>(r.total_madds) / 1e9, 4) << "e9)\n";
  out << "weight file " << r.weight_file_bytes << " bytes\n";
  if (!r.audit_ok) out << "AUDIT FAILED: expected " << kCanonicalParamCount << " parameters\n";
  if (o.json_out) write_text(*o.json_out, r.to_json().dump(2) + "\n");
  return r;
}

// ---------------------------------------------------------------------------
// bench
// ---------------------------------------------------------------------------

struct BenchOptions {
  std::optional<fs::path> weights;
  std::size_t height = 544;
  std::size_t width = 544;
  std::size_t repeats = 10;
  std::size_t warmup = 1;
  int threads = 1;
  fs::path csv = "bench.csv";
};

struct BenchStats {
  std::vector<double> seconds;
  double median = 0, p95 = 0, min = 0, max = 0, mean = 0;
  std::uint64_t madds = 0;
  double madds_per_second = 0;
};

/// Median (mean of the middle pair for even counts) and nearest-rank p95.
inline BenchStats summarize(std::vector<double> seconds, std::uint64_t madds) {
  if (seconds.empty()) throw UsageError("bench: no timings");
  BenchStats s;
  s.seconds = seconds;
  std::sort(seconds.begin(), seconds.end());
  const std::size_t n = seconds.size();
  s.median = n % 2 ? seconds[n / 2] : 0.5 * (seconds[n / 2 - 1] + seconds[n / 2]);
  s.p95 = seconds[static_cast<std::size_t>(std::ceil(0.95 * static_cast<double>(n))) - 1];
  s.min = seconds.front();
  s.max = seconds.back();
  for (double v : seconds) s.mean += v;
  s.mean /= static_cast<double>(n);
  s.madds = madds;
  s.madds_per_second = static_cast<double>(madds) / s.median;
  return s;
}

inline BenchStats run_bench(const BenchOptions& o, std::ostream& log) {
  if (o.repeats == 0) throw UsageError("--repeats must be >= 1");
  set_num_threads(o.threads);
  ModelGraph<float> g = o.weights ? load_model(*o.weights) : build_m2unet<float>(o.height, o.width);
  if (!o.weights) init_weights(g, 0);
  const auto image = synthetic_vessel_sample(o.height, o.width, 0).image;
  const std::uint64_t madds = madds_count(g, o.height, o.width);
  for (std::size_t i = 0; i < o.warmup; ++i) forward(g, image);
  std::vector<double> seconds;
  for (std::size_t i = 0; i < o.repeats; ++i) {
    const auto t0 = std::chrono::steady_clock::now();
    const auto out = forward(g, image);
    seconds.push_back(std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
    if (out.size() != o.height * o.width) throw NumericError("bench: unexpected output size");
  }
  const auto s = summarize(seconds, madds);
  std::ostringstream csv;
  csv << "height,width,threads,repeats,warmup,median_ms,p95_ms,min_ms,max_ms,mean_ms,madds,madds_per_s\n";
  csv << o.height << "," << o.width << "," << num_threads() << "," << o.repeats << "," << o.warmup << ","
      << fmt_double(s.median * 1e3) << "," << fmt_double(s.p95 * 1e3) << "," << fmt_double(s.min * 1e3) << ","
      << fmt_double(s.max * 1e3) << "," << fmt_double(s.mean * 1e3) << "," << s.madds << ","
      << fmt_double(s.madds_per_second) << "\n";
  write_text(o.csv, csv.str());
  log << o.height << "x" << o.width << " threads " << num_threads() << ": median " << fmt_double(s.median * 1e3, 5)
      << " ms, p95 " << fmt_double(s.p95 * 1e3, 5) << " ms, " << fmt_double(s.madds_per_second / 1e9, 4)
      << " GMAdd/s\n";
  return s;
}

}  // namespace m2unet::cli
