#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "m2unet/error.hpp"

namespace m2unet {

/// Probability clamp used inside the logarithms of the cross-entropy.
inline constexpr double kProbClamp = 1e-7;

inline constexpr double kDefaultJaccardWeight = 0.3;

namespace detail {
inline void check_pair(std::size_t a, std::size_t b, const char* op) {
  if (a != b) {
    throw InputError(std::string(op) + ": prediction length " + std::to_string(a) + " != ground truth length " +
                     std::to_string(b));
  }
  if (a == 0) throw InputError(std::string(op) + ": empty input");
}
}  // namespace detail

/// Mean binary cross-entropy with predictions clamped to [eps, 1 - eps].
template <typename T>
T bce_loss(std::span<const T> pred, std::span<const T> gt) {
  detail::check_pair(pred.size(), gt.size(), "bce_loss");
  const T eps = static_cast<T>(kProbClamp);
  T acc = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const T p = std::clamp(pred[i], eps, T(1) - eps);
    acc += gt[i] * std::log(p) + (T(1) - gt[i]) * std::log(T(1) - p);
  }
  return -acc / static_cast<T>(pred.size());
}

/// d bce / d pred. Zero where the clamp is active.
template <typename T>
std::vector<T> bce_loss_grad(std::span<const T> pred, std::span<const T> gt) {
  detail::check_pair(pred.size(), gt.size(), "bce_loss");
  const T eps = static_cast<T>(kProbClamp);
  const T inv_n = T(1) / static_cast<T>(pred.size());
  std::vector<T> g(pred.size(), T(0));
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const T p = pred[i];
    if (p < eps || p > T(1) - eps) continue;
    g[i] = -inv_n * (gt[i] / p - (T(1) - gt[i]) / (T(1) - p));
  }
  return g;
}

/// Soft Jaccard index: mean of y*p / (y + p - y*p); 0/0 terms count as 0.
template <typename T>
T soft_jaccard(std::span<const T> pred, std::span<const T> gt) {
  detail::check_pair(pred.size(), gt.size(), "soft_jaccard");
  T acc = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const T num = gt[i] * pred[i];
    const T den = gt[i] + pred[i] - num;
    if (den != T(0)) acc += num / den;
  }
  return acc / static_cast<T>(pred.size());
}

template <typename T>
std::vector<T> soft_jaccard_grad(std::span<const T> pred, std::span<const T> gt) {
  detail::check_pair(pred.size(), gt.size(), "soft_jaccard");
  const T inv_n = T(1) / static_cast<T>(pred.size());
  std::vector<T> g(pred.size(), T(0));
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const T den = gt[i] + pred[i] - gt[i] * pred[i];
    if (den != T(0)) g[i] = inv_n * gt[i] * gt[i] / (den * den);
  }
  return g;
}

/// Joint loss: bce + w * (1 - J).
template <typename T>
T jbce_loss(std::span<const T> pred, std::span<const T> gt, T w = static_cast<T>(kDefaultJaccardWeight)) {
  if (w < 0) throw InputError("jbce_loss: negative weight");
  return bce_loss(pred, gt) + w * (T(1) - soft_jaccard(pred, gt));
}

template <typename T>
std::vector<T> jbce_loss_grad(std::span<const T> pred, std::span<const T> gt,
                              T w = static_cast<T>(kDefaultJaccardWeight)) {
  if (w < 0) throw InputError("jbce_loss: negative weight");
  auto g = bce_loss_grad(pred, gt);
  const auto gj = soft_jaccard_grad(pred, gt);
  for (std::size_t i = 0; i < g.size(); ++i) g[i] -= w * gj[i];
  return g;
}

}  // namespace m2unet
