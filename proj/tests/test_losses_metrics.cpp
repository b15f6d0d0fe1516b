#include <gtest/gtest.h>

#include <fstream>
#include <map>
#include <random>
#include <sstream>

#include "m2unet/losses.hpp"
#include "m2unet/metrics.hpp"
#include "m2unet/weights_io.hpp"
#include "test_util.hpp"

using namespace m2unet;
using m2unet::testing::fixture_path;

namespace {

using Vec = std::vector<double>;

double bce(const Vec& p, const Vec& y) { return bce_loss<double>(p, y); }
double jac(const Vec& p, const Vec& y) { return soft_jaccard<double>(p, y); }
double jbce(const Vec& p, const Vec& y, double w = 0.3) { return jbce_loss<double>(p, y, w); }

// Mann-Whitney U over all positive/negative pairs, ties count one half.
double rank_auc(const Vec& score, const Vec& y) {
  std::vector<std::size_t> idx(score.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(), [&](auto a, auto b) { return score[a] < score[b]; });
  std::vector<double> rank(score.size());
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j < idx.size() && score[idx[j]] == score[idx[i]]) ++j;
    const double r = (static_cast<double>(i + 1) + static_cast<double>(j)) / 2.0;
    for (std::size_t k = i; k < j; ++k) rank[idx[k]] = r;
    i = j;
  }
  double pos = 0, sum = 0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    if (y[i] > 0.5) {
      pos += 1;
      sum += rank[i];
    }
  }
  const double neg = static_cast<double>(y.size()) - pos;
  return (sum - pos * (pos + 1) / 2) / (pos * neg);
}

}  // namespace

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

TEST(BceLoss, Examples) {
  EXPECT_NEAR(bce({1.0}, {1.0}), 0.0, 1e-6);
  EXPECT_NEAR(bce({0.5, 0.5}, {1.0, 0.0}), 0.693147, 1e-6);
  EXPECT_NEAR(bce({0.0}, {1.0}), -std::log(1e-7), 1e-9);
  EXPECT_THROW(bce({0.5}, {1.0, 0.0}), InputError);
}

TEST(SoftJaccard, Examples) {
  EXPECT_DOUBLE_EQ(jac({1, 1}, {1, 1}), 1.0);
  EXPECT_DOUBLE_EQ(jac({0.5}, {1}), 0.5);
  EXPECT_DOUBLE_EQ(jac({0}, {0}), 0.0);
  EXPECT_THROW(jac({0.5, 0.5}, {1}), InputError);
}

TEST(JbceLoss, Examples) {
  EXPECT_NEAR(jbce({1, 0}, {1, 0}), 0.3 * (1 - 0.5), 1e-6);
  EXPECT_NEAR(jbce({1, 1}, {1, 1}), 0.0, 1e-6);
  EXPECT_EQ(jbce({0.3, 0.8}, {1, 0}, 0.0), bce({0.3, 0.8}, {1, 0}));
  EXPECT_NEAR(jbce({0.5, 0.5}, {1, 0}), 0.918147, 1e-6);
  EXPECT_THROW(jbce({0.5}, {1}, -0.1), InputError);
}

TEST(Losses, GradientsMatchFiniteDifferences) {
  std::mt19937 gen(3);
  std::uniform_real_distribution<double> u(0.05, 0.95);
  Vec p(64), y(64);
  for (std::size_t i = 0; i < p.size(); ++i) {
    p[i] = u(gen);
    y[i] = i % 3 == 0 ? 1.0 : 0.0;
  }
  auto check = [&](auto f, const std::vector<double>& analytic, const char* name) {
    double num = 0, den = 0;
    for (std::size_t i = 0; i < p.size(); ++i) {
      Vec up = p, down = p;
      up[i] += 1e-6;
      down[i] -= 1e-6;
      const double n = (f(up) - f(down)) / 2e-6;
      num = std::max(num, std::abs(n - analytic[i]));
      den = std::max(den, std::abs(n));
    }
    EXPECT_LT(num / den, 1e-6) << name;
  };
  check([&](const Vec& q) { return bce(q, y); }, bce_loss_grad<double>(p, y), "bce");
  check([&](const Vec& q) { return jac(q, y); }, soft_jaccard_grad<double>(p, y), "jaccard");
  check([&](const Vec& q) { return jbce(q, y); }, jbce_loss_grad<double>(p, y, 0.3), "jbce");
}

TEST(Losses, JaccardBoundedAndJbceMonotoneInWeight) {
  std::mt19937 gen(4);
  std::uniform_real_distribution<double> u(0, 1);
  for (int trial = 0; trial < 50; ++trial) {
    Vec p(32), y(32);
    for (std::size_t i = 0; i < 32; ++i) {
      p[i] = u(gen);
      y[i] = u(gen) < 0.3 ? 1 : 0;
    }
    const double j = jac(p, y);
    EXPECT_GE(j, 0.0);
    EXPECT_LE(j, 1.0);
    double prev = jbce(p, y, 0.0);
    for (double w : {0.1, 0.3, 1.0, 3.0}) {
      const double cur = jbce(p, y, w);
      EXPECT_GE(cur, prev);
      prev = cur;
    }
  }
}

// ---------------------------------------------------------------------------
// Confusion-based metrics
// ---------------------------------------------------------------------------

TEST(Dice, Examples) {
  EXPECT_DOUBLE_EQ(dice_score({1, 0, 0, 0}), 1.0);
  EXPECT_NEAR(dice_score({2, 1, 0, 1}), 4.0 / 6.0, 1e-15);
  EXPECT_DOUBLE_EQ(dice_score({}), 1.0);
  const ConfusionCounts c{3, 1, 5, 1};
  EXPECT_DOUBLE_EQ(precision(c), recall(c));
  EXPECT_DOUBLE_EQ(dice_score(c), precision(c));
}

TEST(Dice, HarmonicMeanIdentityIsExact) {
  std::mt19937_64 gen(5);
  std::uniform_int_distribution<std::uint64_t> d(0, 2'000'000);
  for (int i = 0; i < 1000; ++i) {
    const ConfusionCounts c{d(gen) + 1, d(gen), d(gen), d(gen)};
    EXPECT_EQ(dice_exact(c), dice_from_pr_exact(precision_exact(c), recall_exact(c)));
    EXPECT_NEAR(dice_score(c), dice_from_pr(precision(c), recall(c)), 4e-16);
  }
}

TEST(Accuracy, CroppedPixelsAreTrueNegatives) {
  EXPECT_DOUBLE_EQ(accuracy_adjusted({1, 1, 1, 1}), 0.5);
  EXPECT_DOUBLE_EQ(accuracy_adjusted({1, 0, 1, 0, 2}), 1.0);
  EXPECT_EQ(584u * 565u - 544u * 544u, 34'024u);
  double prev = 0;
  for (std::uint64_t n : {0u, 10u, 1000u, 34'024u}) {
    const double a = accuracy_adjusted({10, 5, 40, 7, n});
    EXPECT_GE(a, prev);
    prev = a;
  }
}

TEST(Confusion, BinarizesAtThreshold) {
  const Vec p{0.2, 0.5, 0.7, 0.4}, y{0, 1, 0, 1};
  const auto c = confusion<double, double>(p, y, 0.5, 9);
  EXPECT_EQ(c, (ConfusionCounts{1, 1, 1, 1, 9}));
  EXPECT_THROW((confusion<double, double>(p, Vec{1.0}, 0.5)), InputError);
}

// ---------------------------------------------------------------------------
// PR curve
// ---------------------------------------------------------------------------

TEST(PrCurve, Examples) {
  const Vec y{1, 0, 0, 1, 0};
  auto perfect = pr_curve<double, double>(y, y, {0.5});
  EXPECT_EQ(perfect.points[0].precision, 1.0);
  EXPECT_EQ(perfect.points[0].recall, 1.0);
  EXPECT_EQ(perfect.points[0].dice, 1.0);
  auto flat = pr_curve<double, double>(Vec(5, 0.7), y, {0.5});
  EXPECT_EQ(flat.points[0].recall, 1.0);
  EXPECT_DOUBLE_EQ(flat.points[0].precision, 0.4);
  EXPECT_THROW((pr_curve<double, double>(y, y, {})), UsageError);
  EXPECT_THROW((pr_curve<double, double>(y, y, {0.6, 0.5})), UsageError);
}

TEST(PrCurve, TiesGoToLowestThreshold) {
  const Vec p{0.9, 0.1}, y{1, 0};
  const auto c = pr_curve<double, double>(p, y, {0.25, 0.5, 0.75});
  EXPECT_EQ(c.best.threshold, 0.25);
  EXPECT_EQ(c.best.dice, 1.0);
}

TEST(PrCurve, MatchesDirectCounting) {
  std::mt19937 gen(6);
  std::uniform_real_distribution<double> u(0, 1);
  Vec p(500), y(500);
  for (std::size_t i = 0; i < p.size(); ++i) {
    p[i] = std::round(u(gen) * 64) / 64;
    y[i] = u(gen) < 0.25;
  }
  const auto ts = default_thresholds();
  const auto c = pr_curve<double, double>(p, y, ts);
  for (std::size_t k = 0; k < ts.size(); ++k) {
    EXPECT_EQ(c.counts[k], (confusion<double, double>(p, y, ts[k]))) << ts[k];
  }
}

TEST(PrCurve, Golden) {
  const auto f = read_fixture(fixture_path("pr_input.bin"));
  const auto& prob = find_tensor(f, "prob").value;
  const auto& gt = find_tensor(f, "gt").value;
  const auto curve = pr_curve<float, float>(prob.span(), gt.span(), default_thresholds());

  std::ifstream csv(fixture_path("pr.csv"));
  std::string line;
  std::getline(csv, line);
  EXPECT_EQ(line, "threshold,precision,recall,dice");
  std::size_t k = 0;
  while (std::getline(csv, line)) {
    std::stringstream ss(line);
    std::string cell;
    std::vector<double> v;
    while (std::getline(ss, cell, ',')) v.push_back(std::stod(cell));
    ASSERT_EQ(v.size(), 4u);
    ASSERT_LT(k, curve.points.size());
    const auto& p = curve.points[k++];
    EXPECT_NEAR(p.threshold, v[0], 1e-12);
    EXPECT_NEAR(p.precision, v[1], 1e-4);
    EXPECT_NEAR(p.recall, v[2], 1e-4);
    EXPECT_NEAR(p.dice, v[3], 1e-4);
  }
  EXPECT_EQ(k, 255u);
}

// ---------------------------------------------------------------------------
// AuC
// ---------------------------------------------------------------------------

TEST(RocAuc, Examples) {
  const Vec y{0, 0, 1, 1};
  EXPECT_DOUBLE_EQ((roc_auc<double, double>(Vec{0.1, 0.2, 0.8, 0.9}, y)), 1.0);
  EXPECT_DOUBLE_EQ((roc_auc<double, double>(Vec(4, 0.3), y)), 0.5);
  EXPECT_THROW((roc_auc<double, double>(Vec{0.1, 0.2}, Vec{1, 1})), UsageError);
}

TEST(RocAuc, MatchesRankStatistic) {
  std::mt19937 gen(7);
  std::uniform_real_distribution<double> u(0, 1);
  for (int trial = 0; trial < 100; ++trial) {
    Vec p(1000), y(1000);
    for (std::size_t i = 0; i < p.size(); ++i) {
      y[i] = u(gen) < 0.3 ? 1 : 0;
      // Coarse scores force ties on half of the cases.
      p[i] = 0.3 * y[i] + u(gen);
      if (trial % 2) p[i] = std::round(p[i] * 20) / 20;
    }
    EXPECT_NEAR((roc_auc<double, double>(p, y)), rank_auc(p, y), 1e-9);
  }
}

TEST(RocAuc, InvariantUnderMonotoneTransform) {
  std::mt19937 gen(8);
  std::uniform_real_distribution<double> u(0, 1);
  Vec p(300), y(300), q(300);
  for (std::size_t i = 0; i < p.size(); ++i) {
    y[i] = u(gen) < 0.4;
    p[i] = 0.2 * y[i] + u(gen);
    q[i] = std::exp(3 * p[i]) - 7;
  }
  EXPECT_NEAR((roc_auc<double, double>(p, y)), (roc_auc<double, double>(q, y)), 1e-12);
}

TEST(RocAuc, CroppedPixelModes) {
  const Vec p{0.1, 0.4, 0.35, 0.8}, y{0, 0, 1, 1};
  const double plain = roc_auc<double, double>(p, y);
  EXPECT_DOUBLE_EQ((roc_auc<double, double>(p, y, 100, AucCropMode::exclude)), plain);
  Vec pz = p, yz = y;
  pz.insert(pz.end(), 100, 0.0);
  yz.insert(yz.end(), 100, 0.0);
  EXPECT_DOUBLE_EQ((roc_auc<double, double>(p, y, 100)), (roc_auc<double, double>(pz, yz)));
  EXPECT_DOUBLE_EQ((roc_auc<double, double>(p, y, 100)), rank_auc(pz, yz));
}
