#include "oracles.hpp"

#include "umbra/features.hpp"
#include "umbra/imageio.hpp"

#include <gtest/gtest.h>

#include <Eigen/Eigenvalues>

#include <numeric>
#include <random>

using namespace umbra;
using namespace umbra::features;

namespace {

LabImage random_lab(int w, int h, std::mt19937_64& rng) {
  LabImage img(w, h);
  std::uniform_real_distribution<float> L(0, 100), ab(-128, 127);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      img(x, y, 0) = L(rng);
      img(x, y, 1) = ab(rng);
      img(x, y, 2) = ab(rng);
    }
  return img;
}

// Flat field on the left, 3px checkerboard on the right, different brightness.
RgbImage two_texture_image(int w, int h) {
  RgbImage img(w, h);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      std::uint8_t v = 90;
      if (x >= w / 2) v = ((x / 3 + y / 3) % 2) ? 230 : 150;
      for (int c = 0; c < 3; ++c) img(x, y, c) = v;
    }
  return img;
}

}  // namespace

TEST(ColorHistogram, IdenticalPixels) {
  LabImage img(4, 4);
  for (int i = 0; i < 16; ++i) {
    img.pixel(static_cast<std::size_t>(i))[0] = 40;
    img.pixel(static_cast<std::size_t>(i))[1] = 5;
    img.pixel(static_cast<std::size_t>(i))[2] = -20;
  }
  std::vector<int> px(16);
  std::iota(px.begin(), px.end(), 0);
  const auto h = color_histogram(img, px);
  ASSERT_EQ(h.size(), kColorDims);
  int nonzero = 0;
  for (int d = 0; d < h.size(); ++d)
    if (h(d) != 0) {
      ++nonzero;
      EXPECT_DOUBLE_EQ(h(d), 1.0 / 3.0);
    }
  EXPECT_EQ(nonzero, 3);
}

TEST(ColorHistogram, ExtremeLightness) {
  LabImage img(2, 1);
  img(0, 0, 0) = 0;
  img(1, 0, 0) = 100;
  const auto h = color_histogram(img, std::vector<int>{0, 1});
  EXPECT_DOUBLE_EQ(h(0), 1.0 / 6.0);
  EXPECT_DOUBLE_EQ(h(kBinsPerChannel - 1), 1.0 / 6.0);
}

TEST(ColorHistogram, MatchesBruteForceBinning) {
  std::mt19937_64 rng(8);
  const LabImage img = random_lab(20, 20, rng);
  std::vector<int> px(400);
  std::iota(px.begin(), px.end(), 0);
  std::shuffle(px.begin(), px.end(), rng);
  px.resize(100);
  Eigen::VectorXd ref = Eigen::VectorXd::Zero(kColorDims);
  for (int i : px) {
    const float* p = img.pixel(static_cast<std::size_t>(i));
    const double lo[3] = {0, -128, -128}, span[3] = {100, 255, 255};
    for (int c = 0; c < 3; ++c) {
      int bin = static_cast<int>((p[c] - lo[c]) / span[c] * kBinsPerChannel);
      bin = std::clamp(bin, 0, kBinsPerChannel - 1);
      ref(c * kBinsPerChannel + bin) += 1;
    }
  }
  ref /= ref.sum();
  const auto h = color_histogram(img, px);
  EXPECT_LE((h - ref).cwiseAbs().maxCoeff(), 1e-15);
  EXPECT_NEAR(h.sum(), 1.0, 1e-9);
  EXPECT_THROW(color_histogram(img, std::vector<int>{}), std::invalid_argument);
}

TEST(FilterBank, TwelveResponsesAndZeroDerivativesOnFlatImage) {
  LabImage img(10, 8);
  for (auto& v : img.data()) v = 42;
  const auto r = FilterBank{}.apply(img);
  ASSERT_EQ(r.rows(), 80);
  ASSERT_EQ(r.cols(), kResponseDims);
  for (Eigen::Index i = 0; i < r.rows(); ++i) {
    for (int c = 0; c < 6; ++c) EXPECT_NEAR(r(i, c), 42.0, 1e-9);
    for (int c = 6; c < 12; ++c) EXPECT_NEAR(r(i, c), 0.0, 1e-9);
  }
}

TEST(Textons, ConstantImageHasTooFewDistinctResponses) {
  LabImage img(16, 16);
  for (auto& v : img.data()) v = 10;
  TextonOptions o;
  o.textons = 2;
  EXPECT_THROW(build_texton_dictionary(std::span(&img, 1), o), std::invalid_argument);
}

TEST(Textons, TwoTexturesSeparate) {
  const LabImage lab = imageio::rgb_to_lab(two_texture_image(64, 64));
  TextonOptions o;
  o.textons = 2;
  o.seed = 3;
  const auto dict = build_texton_dictionary(std::span(&lab, 1), o);
  ASSERT_EQ(dict.size(), 2);
  const auto a = assign_textons(dict.bank.apply(lab), dict);
  // Interior pixels only: the filter support straddles the texture border.
  std::array<std::array<int, 2>, 2> counts{};
  for (int y = 0; y < 64; ++y)
    for (int x = 0; x < 64; ++x) {
      if (std::abs(x - 32) < 6) continue;
      ++counts[x >= 32 ? 1 : 0][static_cast<std::size_t>(a[static_cast<std::size_t>(y * 64 + x)])];
    }
  for (int t = 0; t < 2; ++t) {
    const double purity = static_cast<double>(std::max(counts[t][0], counts[t][1])) / (counts[t][0] + counts[t][1]);
    EXPECT_GE(purity, 0.95) << "texture " << t;
  }
  const int flat_center = counts[0][0] > counts[0][1] ? 0 : 1;
  const int checker_center = counts[1][0] > counts[1][1] ? 0 : 1;
  EXPECT_NE(flat_center, checker_center);
}

TEST(Textons, DeterministicForSeed) {
  std::mt19937_64 rng(1);
  const LabImage a = random_lab(24, 24, rng), b = random_lab(16, 20, rng);
  const std::vector<LabImage> corpus{a, b};
  TextonOptions o;
  o.textons = 8;
  o.seed = 17;
  const auto d1 = build_texton_dictionary(corpus, o);
  const auto d2 = build_texton_dictionary(corpus, o);
  EXPECT_EQ(d1.centers, d2.centers);
  // Centers are distinct.
  for (int i = 0; i < d1.size(); ++i)
    for (int j = i + 1; j < d1.size(); ++j) EXPECT_GT((d1.centers.row(i) - d1.centers.row(j)).norm(), 0.0);
}

TEST(TextonHistogram, SingleAndSplitCenters) {
  TextonDictionary dict;
  dict.centers = ResponseMatrix::Zero(4, kResponseDims);
  dict.centers(1, 0) = 10;
  ResponseMatrix r = ResponseMatrix::Zero(4, kResponseDims);
  auto h = texton_histogram(r, dict, std::vector<int>{0, 1, 2, 3});
  EXPECT_EQ(h, (Eigen::VectorXd(4) << 1, 0, 0, 0).finished());
  r(2, 0) = 10;
  r(3, 0) = 9;
  h = texton_histogram(r, dict, std::vector<int>{0, 1, 2, 3});
  EXPECT_EQ(h, (Eigen::VectorXd(4) << 0.5, 0.5, 0, 0).finished());
  // Equidistant response goes to the lowest index.
  r(0, 0) = 5;
  EXPECT_EQ(assign_textons(r, dict)[0], 0);
}

TEST(TextonHistogram, MatchesNaiveAssignmentAndIsOrderInvariant) {
  std::mt19937_64 rng(12);
  const LabImage lab = random_lab(30, 30, rng);
  TextonOptions o;
  o.textons = 6;
  const auto dict = build_texton_dictionary(std::span(&lab, 1), o);
  const auto resp = dict.bank.apply(lab);
  std::vector<int> px(900);
  std::iota(px.begin(), px.end(), 0);
  std::shuffle(px.begin(), px.end(), rng);
  px.resize(200);
  Eigen::VectorXd ref = Eigen::VectorXd::Zero(6);
  for (int i : px) {
    int best = 0;
    double best_d = 1e300;
    for (int k = 0; k < 6; ++k) {
      const double d = (resp.row(i) - dict.centers.row(k)).squaredNorm();
      if (d < best_d) best_d = d, best = k;
    }
    ref(best) += 1;
  }
  ref /= ref.sum();
  const auto h = texton_histogram(resp, dict, px);
  EXPECT_LE((h - ref).cwiseAbs().maxCoeff(), 1e-15);
  std::reverse(px.begin(), px.end());
  EXPECT_EQ(texton_histogram(resp, dict, px), h);
}

TEST(RegionFeature, HalvesSumToOneHalf) {
  std::mt19937_64 rng(2);
  const auto f = make_region_feature(oracle::random_histogram(kColorDims, rng), oracle::random_histogram(64, rng));
  EXPECT_EQ(f.combined.size(), kColorDims + 64);
  EXPECT_NEAR(f.combined.head(kColorDims).sum(), 0.5, 1e-12);
  EXPECT_NEAR(f.combined.sum(), 1.0, 1e-9);
  EXPECT_GE(f.combined.minCoeff(), 0.0);
}

TEST(Chi2, IdentityAndExample) {
  std::mt19937_64 rng(4);
  for (int i = 0; i < 10; ++i) {
    const auto x = oracle::random_histogram(63, rng);
    EXPECT_EQ(chi2_kernel(x, x, 0.7), 1.0);
  }
  const Eigen::Vector2d x(1, 0), y(0, 1);
  EXPECT_NEAR(chi2_kernel(x, y, 1.0), std::exp(-1.0), 1e-15);
  EXPECT_NEAR(chi2_kernel(x, y, 1.0), 0.3679, 1e-4);
}

TEST(Chi2, MatchesTwoPassOracleAndIsSymmetric) {
  std::mt19937_64 rng(5);
  for (int t = 0; t < 50; ++t) {
    const auto x = oracle::random_histogram(63, rng), y = oracle::random_histogram(63, rng);
    double dist = 0;
    for (int d = 0; d < 63; ++d)
      if (x(d) + y(d) > 0) dist += (x(d) - y(d)) * (x(d) - y(d)) / (x(d) + y(d));
    dist *= 0.5;
    const double k = chi2_kernel(x, y, 1.3);
    EXPECT_NEAR(k, std::exp(-1.3 * dist), 1e-12);
    EXPECT_EQ(k, chi2_kernel(y, x, 1.3));
    EXPECT_GT(k, 0.0);
    EXPECT_LE(k, 1.0);
  }
}

TEST(Chi2, GramIsPositiveSemidefinite) {
  std::mt19937_64 rng(6);
  std::vector<Eigen::VectorXd> xs;
  for (int i = 0; i < 10; ++i) xs.push_back(oracle::random_histogram(63, rng));
  Eigen::MatrixXd K(10, 10);
  for (int i = 0; i < 10; ++i)
    for (int j = 0; j < 10; ++j) K(i, j) = chi2_kernel(xs[static_cast<std::size_t>(i)], xs[static_cast<std::size_t>(j)], 1.0);
  EXPECT_GE(Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd>(K).eigenvalues().minCoeff(), -1e-8);
}

TEST(Chi2, Errors) {
  const Eigen::Vector2d x(1, 0), neg(-0.1, 1.1);
  const Eigen::Vector3d z(1, 0, 0);
  EXPECT_THROW(chi2_kernel(x, neg, 1.0), std::invalid_argument);
  EXPECT_THROW(chi2_kernel(x, z, 1.0), std::invalid_argument);
  EXPECT_THROW(chi2_kernel(x, x, 0.0), std::invalid_argument);
}

TEST(Chi2, GammaHeuristic) {
  const std::vector<Eigen::VectorXd> xs{Eigen::Vector2d(1, 0), Eigen::Vector2d(0, 1), Eigen::Vector2d(0.5, 0.5)};
  const double d01 = 1.0, d02 = chi2_distance(xs[0], xs[2]), d12 = chi2_distance(xs[1], xs[2]);
  EXPECT_NEAR(chi2_gamma_heuristic(xs), 3.0 / (d01 + d02 + d12), 1e-12);
}
