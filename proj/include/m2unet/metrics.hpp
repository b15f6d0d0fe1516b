#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "m2unet/error.hpp"

namespace m2unet {

struct ConfusionCounts {
  std::uint64_t tp = 0;
  std::uint64_t fp = 0;
  std::uint64_t tn = 0;
  std::uint64_t fn = 0;
  /// Pixels removed by preprocessing crops; treated as true negatives by the
  /// adjusted metrics.
  std::uint64_t n_cropped = 0;

  std::uint64_t evaluated() const { return tp + fp + tn + fn; }

  ConfusionCounts& operator+=(const ConfusionCounts& o) {
    tp += o.tp;
    fp += o.fp;
    tn += o.tn;
    fn += o.fn;
    n_cropped += o.n_cropped;
    return *this;
  }
  bool operator==(const ConfusionCounts&) const = default;
};

namespace detail {
template <typename T>
void check_metric_pair(std::size_t a, std::size_t b, const char* op) {
  if (a != b) {
    throw InputError(std::string(op) + ": prediction length " + std::to_string(a) + " != ground truth length " +
                     std::to_string(b));
  }
}
}  // namespace detail

/// Binarizes prob >= threshold against gt > 0.5.
template <typename T, typename G>
ConfusionCounts confusion(std::span<const T> prob, std::span<const G> gt, double threshold,
                          std::uint64_t n_cropped = 0) {
  detail::check_metric_pair<T>(prob.size(), gt.size(), "confusion");
  ConfusionCounts c;
  c.n_cropped = n_cropped;
  for (std::size_t i = 0; i < prob.size(); ++i) {
    const bool p = static_cast<double>(prob[i]) >= threshold;
    const bool y = static_cast<double>(gt[i]) > 0.5;
    if (p && y) ++c.tp;
    else if (p) ++c.fp;
    else if (y) ++c.fn;
    else ++c.tn;
  }
  return c;
}

/// Pr = 1 when nothing is predicted positive.
inline double precision(const ConfusionCounts& c) {
  return c.tp + c.fp == 0 ? 1.0 : static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fp);
}

/// Re = 1 when the ground truth has no positives.
inline double recall(const ConfusionCounts& c) {
  return c.tp + c.fn == 0 ? 1.0 : static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fn);
}

/// 2TP / (2TP + FN + FP); 1 when both prediction and ground truth are empty.
inline double dice_score(const ConfusionCounts& c) {
  const std::uint64_t den = 2 * c.tp + c.fn + c.fp;
  return den == 0 ? 1.0 : static_cast<double>(2 * c.tp) / static_cast<double>(den);
}

/// Harmonic mean of precision and recall; 0 when both are 0.
inline double dice_from_pr(double pr, double re) { return pr + re > 0 ? 2 * pr * re / (pr + re) : 0.0; }

/// Non-negative rational in lowest terms, for exact metric identities.
struct Fraction {
  unsigned __int128 num = 0;
  unsigned __int128 den = 1;

  static Fraction make(unsigned __int128 n, unsigned __int128 d) {
    if (d == 0) throw UsageError("fraction with zero denominator");
    unsigned __int128 a = n, b = d;
    while (b) {
      const auto t = a % b;
      a = b;
      b = t;
    }
    return a ? Fraction{n / a, d / a} : Fraction{0, 1};
  }
  double value() const { return static_cast<double>(num) / static_cast<double>(den); }
  bool operator==(const Fraction&) const = default;
};

inline Fraction precision_exact(const ConfusionCounts& c) {
  return c.tp + c.fp == 0 ? Fraction{1, 1} : Fraction::make(c.tp, c.tp + c.fp);
}
inline Fraction recall_exact(const ConfusionCounts& c) {
  return c.tp + c.fn == 0 ? Fraction{1, 1} : Fraction::make(c.tp, c.tp + c.fn);
}
inline Fraction dice_exact(const ConfusionCounts& c) {
  const std::uint64_t den = 2 * c.tp + c.fn + c.fp;
  return den == 0 ? Fraction{1, 1} : Fraction::make(2 * c.tp, den);
}

/// 2PrRe / (Pr + Re) evaluated exactly.
inline Fraction dice_from_pr_exact(const Fraction& pr, const Fraction& re) {
  // pr = a/b, re = c/d: 2ac / (ad + cb)
  const auto num = 2 * pr.num * re.num;
  const auto den = pr.num * re.den + re.num * pr.den;
  return den == 0 ? Fraction{0, 1} : Fraction::make(num, den);
}

/// (tp + tn + n_cropped) / (evaluated + n_cropped).
inline double accuracy_adjusted(const ConfusionCounts& c) {
  const std::uint64_t den = c.evaluated() + c.n_cropped;
  if (den == 0) return 1.0;
  return static_cast<double>(c.tp + c.tn + c.n_cropped) / static_cast<double>(den);
}

struct PRPoint {
  double threshold = 0;
  double precision = 0;
  double recall = 0;
  double dice = 0;
};

struct PRCurve {
  std::vector<PRPoint> points;
  PRPoint best;  // maximal dice, ties to the lowest threshold
  std::vector<ConfusionCounts> counts;
};

/// k/256 for k = 1..255.
inline std::vector<double> default_thresholds() {
  std::vector<double> t(255);
  for (std::size_t k = 1; k <= 255; ++k) t[k - 1] = static_cast<double>(k) / 256.0;
  return t;
}

/// Precision, recall and dice of prob >= tau for every threshold.
template <typename T, typename G>
PRCurve pr_curve(std::span<const T> prob, std::span<const G> gt, const std::vector<double>& thresholds,
                 std::uint64_t n_cropped = 0) {
  detail::check_metric_pair<T>(prob.size(), gt.size(), "pr_curve");
  if (thresholds.empty()) throw UsageError("pr_curve: empty threshold list");
  for (std::size_t i = 0; i < thresholds.size(); ++i) {
    if (!(thresholds[i] >= 0.0 && thresholds[i] <= 1.0) || (i && thresholds[i] <= thresholds[i - 1])) {
      throw UsageError("pr_curve: thresholds must be strictly increasing in [0, 1]");
    }
  }
  // Sorted scores with a suffix count of positives answer each threshold by
  // binary search.
  std::vector<std::pair<double, bool>> s(prob.size());
  for (std::size_t i = 0; i < prob.size(); ++i) {
    s[i] = {static_cast<double>(prob[i]), static_cast<double>(gt[i]) > 0.5};
  }
  std::sort(s.begin(), s.end());
  std::vector<std::uint64_t> pos_suffix(s.size() + 1, 0);
  for (std::size_t i = s.size(); i-- > 0;) pos_suffix[i] = pos_suffix[i + 1] + (s[i].second ? 1 : 0);
  const std::uint64_t n = s.size(), positives = pos_suffix[0];

  PRCurve out;
  for (double tau : thresholds) {
    const auto first = static_cast<std::size_t>(
        std::lower_bound(s.begin(), s.end(), tau, [](const auto& a, double t) { return a.first < t; }) - s.begin());
    ConfusionCounts c;
    c.n_cropped = n_cropped;
    c.tp = pos_suffix[first];
    c.fp = (n - first) - c.tp;
    c.fn = positives - c.tp;
    c.tn = first - c.fn;
    const PRPoint p{tau, precision(c), recall(c), dice_score(c)};
    if (out.points.empty() || p.dice > out.best.dice) out.best = p;
    out.points.push_back(p);
    out.counts.push_back(c);
  }
  return out;
}

enum class AucCropMode { score_zero, exclude };

/// Trapezoidal area under the ROC curve over all distinct scores. Cropped
/// pixels join the negatives with score 0 unless excluded.
template <typename T, typename G>
double roc_auc(std::span<const T> prob, std::span<const G> gt, std::uint64_t n_cropped = 0,
               AucCropMode mode = AucCropMode::score_zero) {
  detail::check_metric_pair<T>(prob.size(), gt.size(), "roc_auc");
  std::vector<std::pair<double, bool>> s(prob.size());
  for (std::size_t i = 0; i < prob.size(); ++i) {
    s[i] = {static_cast<double>(prob[i]), static_cast<double>(gt[i]) > 0.5};
  }
  if (mode == AucCropMode::score_zero) s.insert(s.end(), n_cropped, {0.0, false});
  std::uint64_t pos = 0;
  for (const auto& v : s) pos += v.second ? 1 : 0;
  const std::uint64_t neg = s.size() - pos;
  if (pos == 0 || neg == 0) throw UsageError("roc_auc: ground truth needs both classes");

  std::sort(s.begin(), s.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
  double area = 0;
  std::uint64_t tp = 0, fp = 0;
  for (std::size_t i = 0; i < s.size();) {
    const std::uint64_t tp0 = tp, fp0 = fp;
    std::size_t j = i;
    for (; j < s.size() && s[j].first == s[i].first; ++j) (s[j].second ? tp : fp) += 1;
    area += static_cast<double>(fp - fp0) * static_cast<double>(tp + tp0) / 2.0;
    i = j;
  }
  return area / (static_cast<double>(pos) * static_cast<double>(neg));
}

}  // namespace m2unet
