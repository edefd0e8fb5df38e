#include "oracles.hpp"

#include "umbra/imageio.hpp"
#include "umbra/prior.hpp"

#include <gtest/gtest.h>

#include <filesystem>
#include <numeric>
#include <random>

using namespace umbra;
using namespace umbra::prior;

namespace {

// Two overlapping clouds of histograms; class +1 puts more mass on the first half of the bins.
void toy_set(int n, int dims, std::mt19937_64& rng, std::vector<Eigen::VectorXd>& x, std::vector<int>& y) {
  std::uniform_real_distribution<double> u(0, 1);
  x.clear();
  y.clear();
  for (int i = 0; i < n; ++i) {
    const int label = i % 2 == 0 ? 1 : -1;
    Eigen::VectorXd h(dims);
    for (int d = 0; d < dims; ++d) h(d) = u(rng) * ((d < dims / 2) == (label > 0) ? 2.0 : 1.0);
    x.push_back(h / h.sum());
    y.push_back(label);
  }
}

Eigen::MatrixXd gram(const std::vector<Eigen::VectorXd>& x, double gamma) {
  const auto n = static_cast<Eigen::Index>(x.size());
  Eigen::MatrixXd K(n, n);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < n; ++j)
      K(i, j) = features::chi2_kernel(x[static_cast<std::size_t>(i)], x[static_cast<std::size_t>(j)], gamma);
  return K;
}

}  // namespace

TEST(LabelRegions, FractionsAndTieRule) {
  // Region 0: left 4 columns, region 1: right 4 columns of an 8x2 image.
  std::vector<int> labels(16);
  for (int i = 0; i < 16; ++i) labels[static_cast<std::size_t>(i)] = (i % 8) >= 4 ? 1 : 0;
  const auto seg = seg::Segmentation::from_labels(8, 2, labels);
  Mask gt(8, 2);
  for (int y = 0; y < 2; ++y)
    for (int x = 0; x < 4; ++x) gt(x, y) = 1;
  for (int x = 4; x < 8; ++x) gt(x, 0) = 1;  // exactly half of region 1
  const auto l = label_regions(seg, gt);
  ASSERT_EQ(l.size(), 2u);
  EXPECT_DOUBLE_EQ(l[0].shadow_fraction, 1.0);
  EXPECT_TRUE(l[0].shadow);
  EXPECT_DOUBLE_EQ(l[1].shadow_fraction, 0.5);
  EXPECT_FALSE(l[1].shadow);
  EXPECT_THROW(label_regions(seg, Mask(7, 2)), std::invalid_argument);
}

TEST(LabelRegions, RandomMatchesCounting) {
  std::mt19937_64 rng(2);
  std::uniform_int_distribution<int> u(0, 5);
  std::vector<int> labels(24 * 24);
  for (auto& l : labels) l = u(rng);
  for (int k = 0; k < 6; ++k) labels[static_cast<std::size_t>(k)] = k;
  const auto seg = seg::Segmentation::from_labels(24, 24, labels);
  const Mask gt = oracle::random_mask(24, 24, 0.4, rng);
  const auto l = label_regions(seg, gt);
  for (int r = 0; r < 6; ++r) {
    int in = 0, total = 0;
    for (int i = 0; i < 24 * 24; ++i)
      if (labels[static_cast<std::size_t>(i)] == r) ++total, in += gt.data()[static_cast<std::size_t>(i)];
    EXPECT_DOUBLE_EQ(l[static_cast<std::size_t>(r)].shadow_fraction, static_cast<double>(in) / total);
    EXPECT_EQ(l[static_cast<std::size_t>(r)].shadow, 2 * in > total);
  }
}

TEST(Svm, TwoPointsAreSymmetric) {
  const std::vector<Eigen::VectorXd> x{Eigen::Vector3d(0.7, 0.2, 0.1), Eigen::Vector3d(0.1, 0.3, 0.6)};
  const std::vector<int> y{1, -1};
  SvmOptions o;
  o.gamma = 1.0;
  const auto m = train_svm(x, y, o);
  ASSERT_EQ(m.support_vectors.rows(), 2);
  EXPECT_NEAR(std::abs(m.coefficients(0)), std::abs(m.coefficients(1)), 1e-12);
  const double d0 = svm_decision(m, x[0]), d1 = svm_decision(m, x[1]);
  EXPECT_GT(d0, 0);
  EXPECT_NEAR(d0, -d1, 1e-9);
}

TEST(Svm, DualMatchesProjectedGradientOracle) {
  std::mt19937_64 rng(7);
  for (int set = 0; set < 3; ++set) {
    std::vector<Eigen::VectorXd> x;
    std::vector<int> y;
    toy_set(20, 8, rng, x, y);
    const Eigen::MatrixXd K = gram(x, 2.0);
    SvmOptions o;
    const auto sol = solve_dual(20, [&](int i, int j) { return K(i, j); }, y, o);
    Eigen::VectorXd yv(20);
    for (int i = 0; i < 20; ++i) yv(i) = y[static_cast<std::size_t>(i)];
    const double ref = oracle::dual_objective(K, yv, oracle::qp_dual(K, yv, 1.0));
    EXPECT_LE(std::abs(sol.objective() - ref) / std::abs(ref), 1e-3);
    EXPECT_NEAR(oracle::dual_objective(K, yv, sol.alpha), sol.objective(), 1e-9);
  }
}

TEST(Svm, ModelInvariantsAndKkt) {
  std::mt19937_64 rng(3);
  std::vector<Eigen::VectorXd> x;
  std::vector<int> y;
  toy_set(40, 10, rng, x, y);
  SvmOptions o;
  o.gamma = 3.0;
  const auto m = train_svm(x, y, o);
  ASSERT_GE(m.support_vectors.rows(), 1);
  EXPECT_LE(m.coefficients.cwiseAbs().maxCoeff(), 1.0 + 1e-12);
  EXPECT_NEAR(m.coefficients.sum(), 0.0, 1e-6);

  // KKT on the training set.
  const Eigen::MatrixXd K = gram(x, 3.0);
  const auto sol = solve_dual(40, [&](int i, int j) { return K(i, j); }, y, o);
  for (int i = 0; i < 40; ++i) {
    const double margin = y[static_cast<std::size_t>(i)] * svm_decision(m, x[static_cast<std::size_t>(i)]);
    const double a = sol.alpha(i);
    if (a <= 0) EXPECT_GE(margin, 1 - 2e-3);
    else if (a >= o.C) EXPECT_LE(margin, 1 + 2e-3);
    else EXPECT_NEAR(margin, 1.0, 2e-3);
  }
}

TEST(Svm, DecisionMatchesNaiveSumAndIsOrderInvariant) {
  std::mt19937_64 rng(4);
  std::vector<Eigen::VectorXd> x;
  std::vector<int> y;
  toy_set(30, 6, rng, x, y);
  const auto m = train_svm(x, y);
  auto shuffled = m;
  std::vector<int> perm(static_cast<std::size_t>(m.support_vectors.rows()));
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng);
  for (std::size_t r = 0; r < perm.size(); ++r) {
    shuffled.support_vectors.row(static_cast<Eigen::Index>(r)) = m.support_vectors.row(perm[r]);
    shuffled.coefficients(static_cast<Eigen::Index>(r)) = m.coefficients(perm[r]);
  }
  for (int t = 0; t < 20; ++t) {
    const auto f = oracle::random_histogram(6, rng);
    double naive = m.bias;
    for (Eigen::Index i = 0; i < m.support_vectors.rows(); ++i) {
      double dist = 0;
      for (int d = 0; d < 6; ++d) {
        const double a = m.support_vectors(i, d), b = f(d);
        if (a + b > 0) dist += (a - b) * (a - b) / (a + b);
      }
      naive += m.coefficients(i) * std::exp(-m.gamma * 0.5 * dist);
    }
    EXPECT_NEAR(svm_decision(m, f), naive, 1e-12);
    EXPECT_NEAR(svm_decision(shuffled, f), svm_decision(m, f), 1e-12);
  }
  EXPECT_THROW(svm_decision(m, Eigen::VectorXd::Ones(5)), std::invalid_argument);
}

TEST(Svm, SingleSupportVectorDecision) {
  SvmModel m;
  m.support_vectors = Eigen::RowVector3d(0.2, 0.3, 0.5);
  m.coefficients = Eigen::VectorXd::Constant(1, 0.75);
  m.bias = -0.1;
  m.gamma = 2.0;
  EXPECT_DOUBLE_EQ(svm_decision(m, Eigen::Vector3d(0.2, 0.3, 0.5)), 0.75 - 0.1);
}

TEST(Svm, DuplicatedDataKeepsSignPattern) {
  // Separable classes and a large C: no multiplier is at its bound, so doubling every
  // point halves each multiplier and leaves the decision function unchanged.
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(0, 1);
  std::vector<Eigen::VectorXd> x;
  std::vector<int> y;
  for (int i = 0; i < 24; ++i) {
    const int label = i % 2 ? -1 : 1;
    Eigen::Vector4d h;
    for (int d = 0; d < 4; ++d) h(d) = u(rng) * ((d < 2) == (label > 0) ? 6.0 : 1.0);
    x.push_back(h / h.sum());
    y.push_back(label);
  }
  auto x2 = x;
  auto y2 = y;
  x2.insert(x2.end(), x.begin(), x.end());
  y2.insert(y2.end(), y.begin(), y.end());
  SvmOptions o;
  o.gamma = 2.0;
  o.C = 1000.0;
  o.tolerance = 1e-6;
  const auto a = train_svm(x, y, o), b = train_svm(x2, y2, o);
  int agree = 0, total = 0;
  for (int i = 0; i <= 10; ++i)
    for (int j = 0; i + j <= 10; ++j) {
      Eigen::Vector4d f(i / 10.0, j / 10.0, (10 - i - j) / 20.0, (10 - i - j) / 20.0);
      f /= f.sum();
      const double da = svm_decision(a, f), db = svm_decision(b, f);
      if (std::abs(da) < 1e-3) continue;  // on the boundary either sign is fine
      agree += (da > 0) == (db > 0);
      ++total;
    }
  EXPECT_EQ(agree, total);
}

TEST(Svm, Errors) {
  const std::vector<Eigen::VectorXd> x{Eigen::Vector2d(1, 0), Eigen::Vector2d(0, 1)};
  EXPECT_THROW(train_svm(x, std::vector<int>{1, 1}), std::invalid_argument);
  EXPECT_THROW(train_svm(x, std::vector<int>{1}), std::invalid_argument);
  SvmOptions o;
  o.max_pair_updates = 0;
  std::mt19937_64 rng(1);
  std::vector<Eigen::VectorXd> xs;
  std::vector<int> ys;
  toy_set(20, 4, rng, xs, ys);
  try {
    train_svm(xs, ys, o);
    FAIL();
  } catch (const ConvergenceError& e) {
    EXPECT_GT(e.violation(), 0.0);
  }
}

TEST(Platt, MonotoneAndOrdered) {
  std::vector<double> d;
  std::vector<int> y;
  std::mt19937_64 rng(6);
  std::normal_distribution<double> n(0, 1);
  for (int i = 0; i < 200; ++i) {
    const int label = i % 2 ? 1 : -1;
    d.push_back(label * 1.5 + n(rng));
    y.push_back(label);
  }
  const auto [A, B] = fit_platt(d, y);
  EXPECT_LT(A, 0.0);
  SvmModel m;
  m.platt_a = A;
  m.platt_b = B;
  double last = 0;
  for (double v = -5; v <= 5; v += 0.25) {
    const double p = m.probability(v);
    EXPECT_GT(p, last);
    EXPECT_GT(p, 0.0);
    EXPECT_LT(p, 1.0);
    last = p;
  }
}

namespace {

// Dark textured region on the left, bright flat region on the right.
RgbImage two_region_image(int w, int h, std::mt19937_64& rng) {
  std::uniform_int_distribution<int> noise(-6, 6);
  RgbImage img(w, h);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c)
        img(x, y, c) = static_cast<std::uint8_t>(x < w / 2 ? 60 + noise(rng) + ((x / 2 + y / 2) % 2) * 10 : 210);
  return img;
}

}  // namespace

TEST(ShadowPrior, DarkTexturedRegionScoresHigher) {
  std::mt19937_64 rng(9);
  // Training corpus: several two-region images, left half labeled shadow.
  std::vector<LabImage> labs;
  std::vector<seg::Segmentation> segs;
  std::vector<int> labels(48 * 48);
  for (int i = 0; i < 48 * 48; ++i) labels[static_cast<std::size_t>(i)] = (i % 48) < 24 ? 0 : 1;
  const auto seg = seg::Segmentation::from_labels(48, 48, labels);
  for (int i = 0; i < 6; ++i) labs.push_back(imageio::rgb_to_lab(two_region_image(48, 48, rng)));
  features::TextonOptions to;
  to.textons = 8;
  const auto dict = features::build_texton_dictionary(labs, to);
  std::vector<features::RegionFeature> feats;
  std::vector<RegionLabel> rl;
  for (const auto& lab : labs) {
    auto f = features::region_features(lab, seg, dict);
    feats.insert(feats.end(), f.begin(), f.end());
    rl.push_back({0, true, 1.0});
    rl.push_back({1, false, 0.0});
  }
  auto model = train_svm(feats, rl);
  model.dictionary = dict;

  const LabImage test = imageio::rgb_to_lab(two_region_image(48, 48, rng));
  const auto p = shadow_prior(model, test, seg);
  EXPECT_GT(p.probabilities[0], p.probabilities[1]);
  // Piecewise constant on the segmentation, values in [0, 1].
  for (int r = 0; r < 2; ++r)
    for (int i : seg.region(r)) ASSERT_EQ(p.map.data()[static_cast<std::size_t>(i)], static_cast<float>(p.probabilities[static_cast<std::size_t>(r)]));
  for (float v : p.map.data()) {
    EXPECT_GE(v, 0.0f);
    EXPECT_LE(v, 1.0f);
  }

  // One-region image: constant map.
  const auto one = seg::Segmentation::from_labels(48, 48, std::vector<int>(48 * 48, 0));
  const auto q = shadow_prior(model, test, one);
  for (float v : q.map.data()) EXPECT_EQ(v, q.map.data()[0]);

  // Serialization round trip preserves every field used for prediction.
  const auto path = std::filesystem::temp_directory_path() / "umbra_prior_test.umb";
  save_svm(model, path);
  const auto loaded = load_svm(path);
  EXPECT_EQ(loaded.support_vectors, model.support_vectors);
  EXPECT_EQ(loaded.coefficients, model.coefficients);
  EXPECT_EQ(loaded.dictionary.centers, model.dictionary.centers);
  EXPECT_EQ(shadow_prior(loaded, test, seg).probabilities, p.probabilities);
  std::filesystem::remove(path);
}

TEST(Container, RejectsCorruptFiles) {
  io::Container c;
  c.add("meta", {1, 2, 3});
  auto bytes = c.serialize();
  EXPECT_EQ(io::Container::parse(bytes).get("meta"), (std::vector<std::uint8_t>{1, 2, 3}));
  EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 4), "UMB1");
  bytes[0] = 'X';
  EXPECT_THROW(io::Container::parse(bytes), io::FormatError);
  auto truncated = c.serialize();
  truncated.pop_back();
  EXPECT_THROW(io::Container::parse(truncated), io::FormatError);
  EXPECT_THROW(svm_from_container(c), std::exception);
}
