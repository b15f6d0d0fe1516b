#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <map>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include "m2unet/architecture.hpp"
#include "m2unet/data.hpp"
#include "m2unet/metrics.hpp"
#include "m2unet/weights_io.hpp"

namespace m2unet {

struct TrainConfig {
  double lr = 1e-3;
  double jaccard_weight = kDefaultJaccardWeight;
  std::size_t epochs = 300;
  std::size_t batch_size = 4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-2;
  std::uint64_t seed = 0;
  /// Micro-batches whose gradients are averaged before each optimizer step.
  std::size_t accumulation = 1;
  bool augment = true;
  AugmentConfig augmentation{};
  double val_threshold = 0.5;

  void validate() const {
    if (!(lr >= 0) || !std::isfinite(lr)) throw ConfigError("lr must be a finite non-negative number");
    if (epochs < 1) throw ConfigError("epochs must be >= 1");
    if (batch_size < 1) throw ConfigError("batch size must be >= 1");
    if (accumulation < 1) throw ConfigError("accumulation must be >= 1");
    if (jaccard_weight < 0) throw ConfigError("loss weight must be >= 0");
    if (!(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1)) throw ConfigError("betas must lie in [0, 1)");
    if (!(eps > 0)) throw ConfigError("eps must be > 0");
    if (weight_decay < 0) throw ConfigError("weight decay must be >= 0");
  }
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(AugmentConfig, rotation_deg, flip_h_prob, flip_v_prob, c_brightness,
                                                c_contrast, c_saturation, c_hue, elastic_grid, elastic_magnitude, seed)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(TrainConfig, lr, jaccard_weight, epochs, batch_size, beta1, beta2, eps,
                                                weight_decay, seed, accumulation, augment, augmentation, val_threshold)

namespace train_detail {

inline void reject_unknown(const nlohmann::json& j, const nlohmann::json& known, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + ": expected a JSON object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (!known.contains(it.key())) throw ConfigError(where + ": unknown field '" + it.key() + "'");
  }
}

}  // namespace train_detail

/// Missing fields keep their defaults; unknown fields are rejected.
inline TrainConfig train_config_from_json(const nlohmann::json& j) {
  train_detail::reject_unknown(j, nlohmann::json(TrainConfig{}), "config");
  if (j.contains("augmentation")) {
    train_detail::reject_unknown(j["augmentation"], nlohmann::json(AugmentConfig{}), "config.augmentation");
  }
  TrainConfig cfg;
  try {
    cfg = j.get<TrainConfig>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  cfg.validate();
  return cfg;
}

inline TrainConfig load_train_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw UsageError("cannot open config: " + path.string());
  try {
    return train_config_from_json(nlohmann::json::parse(in));
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("config " + path.string() + ": " + e.what());
  }
}

template <typename T>
struct AdamWState {
  std::map<std::string, Tensor<T>> m;
  std::map<std::string, Tensor<T>> v;
  std::uint64_t t = 0;
};

/// theta <- theta - lr * (m_hat / (sqrt(v_hat) + eps) + weight_decay * theta)
/// for every parameter with a gradient. All gradients are checked before any
/// parameter changes.
template <typename T>
void adamw_step(ParameterStore<T>& params, const std::map<std::string, Tensor<T>>& grads, AdamWState<T>& s,
                const TrainConfig& cfg) {
  for (const auto& [name, g] : grads) {
    if (params[name].shape() != g.shape()) throw InputError("adamw: gradient shape mismatch for " + name);
    if (!g.all_finite()) throw NumericError("adamw: non-finite gradient for " + name);
  }
  ++s.t;
  const double bc1 = 1 - std::pow(cfg.beta1, static_cast<double>(s.t));
  const double bc2 = 1 - std::pow(cfg.beta2, static_cast<double>(s.t));
  for (const auto& [name, g] : grads) {
    auto& theta = params[name];
    auto [mit, fresh_m] = s.m.try_emplace(name, theta.shape());
    auto [vit, fresh_v] = s.v.try_emplace(name, theta.shape());
    auto& m = mit->second;
    auto& v = vit->second;
    for (std::size_t i = 0; i < theta.size(); ++i) {
      const double gi = g[i];
      const double mi = cfg.beta1 * m[i] + (1 - cfg.beta1) * gi;
      const double vi = cfg.beta2 * v[i] + (1 - cfg.beta2) * gi * gi;
      m[i] = static_cast<T>(mi);
      v[i] = static_cast<T>(vi);
      const double update = (mi / bc1) / (std::sqrt(vi / bc2) + cfg.eps) + cfg.weight_decay * theta[i];
      theta[i] = static_cast<T>(theta[i] - cfg.lr * update);
    }
  }
}

// ---------------------------------------------------------------------------
// Initialisation
// ---------------------------------------------------------------------------

namespace train_detail {

/// Standard normal via Box-Muller on the counter-based stream.
inline double gaussian(CounterRng& rng) {
  const double u1 = 1.0 - rng.uniform(), u2 = rng.uniform();
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

/// Number of layer rows before the first upconcat.
inline std::size_t encoder_rows(const std::vector<LayerSpec>& layers) {
  for (std::size_t i = 0; i < layers.size(); ++i) {
    if (layers[i].kind == LayerKind::upconcat) return i;
  }
  return layers.size();
}

inline std::size_t row_of(const std::string& name) {
  // layers.<row>.<rep>...
  const auto a = name.find('.'), b = name.find('.', a + 1);
  return static_cast<std::size_t>(std::stoul(name.substr(a + 1, b - a - 1)));
}

}  // namespace train_detail

/// Kernels uniform in +-1/sqrt(fan_in) (the common deep-learning framework
/// default), gamma 1 and beta 0 for batchnorm, fresh running statistics.
/// Deterministic in seed.
template <typename T>
void init_weights(ModelGraph<T>& g, std::uint64_t seed) {
  CounterRng rng(mix64(seed ^ 0x696E6974ULL));
  for (auto& e : g.params.entries()) {
    const auto& n = e.name;
    if (n.ends_with(".gamma") || n.ends_with(".running_var")) {
      e.value.fill(T(1));
    } else if (n.ends_with(".beta") || n.ends_with(".running_mean")) {
      e.value.fill(T(0));
    } else {
      const Shape s = e.value.shape();
      const double bound = 1.0 / std::sqrt(static_cast<double>(s.c * s.h * s.w));
      for (auto& v : e.value.vec()) v = static_cast<T>(bound * (2.0 * rng.uniform() - 1.0));
    }
  }
}

/// Scratch initialisation, then every encoder tensor (rows before the first
/// upconcat) is taken from the weight file. Throws LoadError naming every
/// missing or mis-shaped tensor; nothing is installed in that case.
template <typename T>
void init_pretrained_encoder(ModelGraph<T>& g, const WeightFile& wf, std::uint64_t seed) {
  const std::size_t enc = train_detail::encoder_rows(g.layers);
  std::map<std::string, const NamedTensor*> by_name;
  for (const auto& t : wf.tensors) by_name.emplace(t.name, &t);
  std::vector<std::string> problems;
  std::vector<std::pair<typename ParameterStore<T>::Entry*, const NamedTensor*>> plan;
  for (auto& e : g.params.entries()) {
    if (train_detail::row_of(e.name) >= enc) continue;
    auto it = by_name.find(e.name);
    if (it == by_name.end()) {
      problems.push_back(e.name + " (missing)");
    } else if (it->second->value.shape() != e.value.shape()) {
      problems.push_back(e.name + " (expected " + e.value.shape().str() + ", file has " +
                         it->second->value.shape().str() + ")");
    } else {
      plan.emplace_back(&e, it->second);
    }
  }
  if (!problems.empty()) {
    std::string msg = "pretrained encoder does not match graph:";
    for (const auto& p : problems) msg += "\n  " + p;
    throw LoadError(msg);
  }
  init_weights(g, seed);
  for (auto& [e, src] : plan) e->value = src->value.template cast<T>();
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

struct EpochRecord {
  std::size_t epoch = 0;  // 1-based
  double loss = 0;
  double val_dice = std::numeric_limits<double>::quiet_NaN();
};

/// Index of the maximal validation dice, ties to the earlier epoch; the last
/// record when no epoch has a validation score.
inline std::size_t select_best(const std::vector<EpochRecord>& history) {
  if (history.empty()) throw UsageError("select_best: empty history");
  std::optional<std::size_t> best;
  for (std::size_t i = 0; i < history.size(); ++i) {
    if (std::isnan(history[i].val_dice)) continue;
    if (!best || history[i].val_dice > history[*best].val_dice) best = i;
  }
  return best.value_or(history.size() - 1);
}

template <typename T>
struct TrainResult {
  ModelGraph<T> best;
  std::size_t best_epoch = 0;
  std::vector<EpochRecord> history;
  bool diverged = false;
  std::string message;
};

template <typename T>
Tensor<T> stack_images(const std::vector<const Tensor<float>*>& parts) {
  const Shape s0 = parts.front()->shape();
  Tensor<T> out({parts.size(), s0.c, s0.h, s0.w});
  const std::size_t per = s0.c * s0.h * s0.w;
  for (std::size_t i = 0; i < parts.size(); ++i) {
    if (parts[i]->shape() != s0) throw InputError("batch: samples differ in shape");
    for (std::size_t k = 0; k < per; ++k) out[i * per + k] = static_cast<T>((*parts[i])[k]);
  }
  return out;
}

/// Mean per-image dice at the threshold, batchnorm in inference mode.
template <typename T>
double mean_dice(const ModelGraph<T>& g, const std::vector<Sample>& samples, double threshold) {
  double acc = 0;
  for (const auto& s : samples) {
    const auto prob = forward(g, s.image.cast<T>());
    acc += dice_score(confusion<T, float>(prob.span(), s.mask.span(), threshold));
  }
  return acc / static_cast<double>(samples.size());
}

/// One forward/backward pass over a batch in train mode; returns the loss and
/// adds the gradients (scaled) into `acc`.
template <typename T>
double batch_gradients(ModelGraph<T>& g, const Tensor<T>& images, const Tensor<T>& masks, double w, double scale,
                       std::map<std::string, Tensor<T>>& acc) {
  Tape<T> tape;
  TapeContext<T> ctx{g, tape};
  Var prob = run_graph(g, ctx, images);
  Var loss = tape.loss(OpKind::jbce_loss, prob, masks, static_cast<T>(w));
  const double value = static_cast<double>(tape.value(loss)[0]);
  if (!std::isfinite(value)) return value;
  tape.backward(loss);
  for (auto& [name, grad] : ctx.gradients()) {
    auto [it, fresh] = acc.try_emplace(name, grad.shape());
    for (std::size_t i = 0; i < grad.size(); ++i) it->second[i] += static_cast<T>(scale) * grad[i];
  }
  return value;
}

using EpochCallback = std::function<void(const EpochRecord&)>;

/// Shuffles, augments, optimises jbce with AdamW and keeps the checkpoint with
/// the best validation dice. A non-finite loss stops training and returns the
/// last good checkpoint with `diverged` set.
template <typename T>
TrainResult<T> train(ModelGraph<T>& g, const std::vector<Sample>& train_set, const std::vector<Sample>& val_set,
                     const TrainConfig& cfg, const EpochCallback& on_epoch = {}) {
  cfg.validate();
  if (train_set.empty()) throw UsageError("train: empty training set");
  TrainResult<T> r{g, 0, {}, false, {}};
  ModelGraph<T> last_good = g;
  AdamWState<T> opt;
  auto aug = cfg.augmentation;
  aug.seed = cfg.seed;
  const std::size_t n = train_set.size();

  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    CounterRng shuffle(mix64(mix64(cfg.seed ^ 0x73687566ULL) ^ epoch));
    for (std::size_t i = n; i > 1; --i) {
      std::swap(order[i - 1], order[static_cast<std::size_t>(shuffle.uniform_int(0, static_cast<std::int64_t>(i - 1)))]);
    }

    double loss_sum = 0;
    std::size_t loss_count = 0, micro = 0;
    std::map<std::string, Tensor<T>> grads;
    bool bad = false;
    for (std::size_t start = 0; start < n && !bad; start += cfg.batch_size) {
      std::vector<Sample> batch;
      for (std::size_t k = start; k < std::min(n, start + cfg.batch_size); ++k) {
        const auto& s = train_set[order[k]];
        batch.push_back(cfg.augment ? augment(s, aug, epoch) : s);
      }
      std::vector<const Tensor<float>*> imgs, masks;
      for (const auto& s : batch) {
        imgs.push_back(&s.image);
        masks.push_back(&s.mask);
      }
      double loss = std::numeric_limits<double>::quiet_NaN();
      try {
        loss = batch_gradients(g, stack_images<T>(imgs), stack_images<T>(masks), cfg.jaccard_weight,
                               1.0 / static_cast<double>(cfg.accumulation), grads);
      } catch (const NumericError&) {
      }
      if (!std::isfinite(loss)) {
        bad = true;
        break;
      }
      loss_sum += loss;
      ++loss_count;
      if (++micro == cfg.accumulation || start + cfg.batch_size >= n) {
        try {
          adamw_step(g.params, grads, opt, cfg);
        } catch (const NumericError&) {
          bad = true;
        }
        grads.clear();
        micro = 0;
      }
    }
    if (!bad && !g.params.entries().empty()) {
      for (const auto& e : g.params.entries()) bad = bad || !e.value.all_finite();
    }
    if (bad) {
      r.diverged = true;
      r.message = "loss diverged in epoch " + std::to_string(epoch);
      if (r.history.empty()) r.best = last_good;
      g = last_good;
      return r;
    }

    EpochRecord rec{epoch, loss_sum / static_cast<double>(loss_count)};
    if (!val_set.empty()) rec.val_dice = mean_dice(g, val_set, cfg.val_threshold);
    r.history.push_back(rec);
    last_good = g;
    if (select_best(r.history) == r.history.size() - 1) {
      r.best = g;
      r.best_epoch = epoch;
    }
    if (on_epoch) on_epoch(rec);
  }
  return r;
}

inline void write_history(const std::vector<EpochRecord>& history, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw InputError("cannot write history: " + path.string());
  out << "epoch,loss,val_dice\n";
  out.precision(10);
  for (const auto& h : history) {
    out << h.epoch << "," << h.loss << ",";
    if (!std::isnan(h.val_dice)) out << h.val_dice;
    out << "\n";
  }
}

}  // namespace m2unet
