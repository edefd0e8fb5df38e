#include "umbra/prior.hpp"

#include "umbra/imageio.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <optional>
#include <random>

namespace umbra::prior {

std::vector<RegionLabel> label_regions(const seg::Segmentation& seg, const Mask& gt) {
  if (gt.width() != seg.width() || gt.height() != seg.height())
    throw std::invalid_argument("label_regions: mask dimensions do not match segmentation");
  std::vector<RegionLabel> out;
  out.reserve(static_cast<std::size_t>(seg.region_count()));
  for (int r = 0; r < seg.region_count(); ++r) {
    const auto& pixels = seg.region(r);
    std::size_t shadow = 0;
    for (int i : pixels) shadow += gt.data()[static_cast<std::size_t>(i)] ? 1 : 0;
    const double fraction = static_cast<double>(shadow) / static_cast<double>(pixels.size());
    out.push_back({r, fraction > 0.5, fraction});
  }
  return out;
}

double SvmModel::probability(double decision) const {
  const double z = platt_a * decision + platt_b;
  // Evaluate the logistic on the side that cannot overflow.
  return z >= 0 ? std::exp(-z) / (1.0 + std::exp(-z)) : 1.0 / (1.0 + std::exp(z));
}

double DualSolution::objective() const {
  // With G = Q a - 1:  0.5 a'Qa - 1'a = 0.5 a'(G - 1).
  return 0.5 * alpha.dot(gradient - Eigen::VectorXd::Ones(alpha.size()));
}

DualSolution solve_dual(int n, const std::function<double(int, int)>& kernel, std::span<const int> labels,
                        const SvmOptions& options) {
  if (n <= 0 || labels.size() != static_cast<std::size_t>(n))
    throw std::invalid_argument("solve_dual: label count mismatch");
  const double C = options.C;
  constexpr double kTau = 1e-12;

  std::vector<std::optional<Eigen::VectorXd>> rows(static_cast<std::size_t>(n));
  auto q_row = [&](int i) -> const Eigen::VectorXd& {
    auto& row = rows[static_cast<std::size_t>(i)];
    if (!row) {
      row.emplace(n);
      for (int t = 0; t < n; ++t)
        (*row)(t) = labels[static_cast<std::size_t>(i)] * labels[static_cast<std::size_t>(t)] * kernel(i, t);
    }
    return *row;
  };
  Eigen::VectorXd diag(n);
  for (int i = 0; i < n; ++i) diag(i) = kernel(i, i);

  DualSolution s;
  s.alpha = Eigen::VectorXd::Zero(n);
  s.gradient = Eigen::VectorXd::Constant(n, -1.0);
  auto& a = s.alpha;
  auto& G = s.gradient;
  auto y = [&](int t) { return static_cast<double>(labels[static_cast<std::size_t>(t)]); };
  auto in_up = [&](int t) { return (y(t) > 0 && a(t) < C) || (y(t) < 0 && a(t) > 0); };
  auto in_low = [&](int t) { return (y(t) > 0 && a(t) > 0) || (y(t) < 0 && a(t) < C); };

  while (true) {
    int i = -1, j = -1;
    double gmax = -std::numeric_limits<double>::infinity();
    double gmin = std::numeric_limits<double>::infinity();
    for (int t = 0; t < n; ++t) {
      const double v = -y(t) * G(t);
      if (in_up(t) && v > gmax) gmax = v, i = t;
      if (in_low(t) && v < gmin) gmin = v, j = t;
    }
    s.violation = (i < 0 || j < 0) ? 0.0 : gmax - gmin;
    if (s.violation < options.tolerance) break;
    if (s.pair_updates >= options.max_pair_updates)
      throw ConvergenceError("SMO did not converge after " + std::to_string(s.pair_updates) +
                                 " pair updates (max violation " + std::to_string(s.violation) + ")",
                             s.violation);

    const Eigen::VectorXd& Qi = q_row(i);
    const Eigen::VectorXd& Qj = q_row(j);
    const double old_i = a(i), old_j = a(j);
    double ai = old_i, aj = old_j;
    if (y(i) != y(j)) {
      double quad = diag(i) + diag(j) + 2 * Qi(j);
      if (quad <= 0) quad = kTau;
      const double delta = (-G(i) - G(j)) / quad;
      const double diff = ai - aj;
      ai += delta;
      aj += delta;
      if (diff > 0) {
        if (aj < 0) aj = 0, ai = diff;
      } else if (ai < 0) {
        ai = 0, aj = -diff;
      }
      if (diff > 0) {
        if (ai > C) ai = C, aj = C - diff;
      } else if (aj > C) {
        aj = C, ai = C + diff;
      }
    } else {
      double quad = diag(i) + diag(j) - 2 * Qi(j);
      if (quad <= 0) quad = kTau;
      const double delta = (G(i) - G(j)) / quad;
      const double sum = ai + aj;
      ai -= delta;
      aj += delta;
      if (sum > C) {
        if (ai > C) ai = C, aj = sum - C;
        if (aj > C) aj = C, ai = sum - C;
      } else {
        if (aj < 0) aj = 0, ai = sum;
        if (ai < 0) ai = 0, aj = sum;
      }
    }
    a(i) = ai;
    a(j) = aj;
    G += Qi * (ai - old_i) + Qj * (aj - old_j);
    ++s.pair_updates;
  }

  double ub = std::numeric_limits<double>::infinity(), lb = -ub, sum = 0;
  int free = 0;
  for (int t = 0; t < n; ++t) {
    const double yg = y(t) * G(t);
    if (a(t) >= C) {
      if (y(t) < 0) ub = std::min(ub, yg);
      else lb = std::max(lb, yg);
    } else if (a(t) <= 0) {
      if (y(t) > 0) ub = std::min(ub, yg);
      else lb = std::max(lb, yg);
    } else {
      ++free;
      sum += yg;
    }
  }
  s.rho = free > 0 ? sum / free : (ub + lb) / 2;
  return s;
}

namespace {

void check_training_set(std::span<const Eigen::VectorXd> features, std::span<const int> labels) {
  if (features.size() != labels.size() || features.empty())
    throw std::invalid_argument("train_svm: need one label per feature vector");
  bool pos = false, neg = false;
  for (int l : labels) {
    if (l != 1 && l != -1) throw std::invalid_argument("train_svm: labels must be +1 or -1");
    (l > 0 ? pos : neg) = true;
  }
  if (!pos || !neg) throw std::invalid_argument("train_svm: single-class training set");
  for (const auto& f : features) {
    if (f.size() != features.front().size()) throw std::invalid_argument("train_svm: ragged feature vectors");
    if (!f.allFinite()) throw std::invalid_argument("train_svm: non-finite feature");
  }
}

struct Fitted {
  DualSolution dual;
  std::vector<int> members;  // indices into the caller's sample list
};

// Solves the dual on a subset; kernel values come from a shared lazily-filled Gram.
Fitted fit_subset(std::vector<int> members, std::span<const int> labels,
                  const std::function<double(int, int)>& gram, const SvmOptions& options) {
  std::vector<int> sub_labels;
  sub_labels.reserve(members.size());
  for (int m : members) sub_labels.push_back(labels[static_cast<std::size_t>(m)]);
  auto k = [&](int i, int j) { return gram(members[static_cast<std::size_t>(i)], members[static_cast<std::size_t>(j)]); };
  Fitted f{solve_dual(static_cast<int>(members.size()), k, sub_labels, options), std::move(members)};
  return f;
}

double subset_decision(const Fitted& fit, std::span<const int> labels, const std::function<double(int, int)>& gram,
                       int sample) {
  double d = -fit.dual.rho;
  for (std::size_t t = 0; t < fit.members.size(); ++t) {
    const double a = fit.dual.alpha(static_cast<Eigen::Index>(t));
    if (a > 0) d += a * labels[static_cast<std::size_t>(fit.members[t])] * gram(fit.members[t], sample);
  }
  return d;
}

}  // namespace

SvmModel train_svm(std::span<const Eigen::VectorXd> features, std::span<const int> labels, const SvmOptions& options) {
  check_training_set(features, labels);
  if (!(options.C > 0)) throw std::invalid_argument("train_svm: C must be positive");
  const int n = static_cast<int>(features.size());

  SvmModel model;
  model.C = options.C;
  model.gamma = options.gamma > 0 ? options.gamma : features::chi2_gamma_heuristic(features);
  model.seed = options.seed;
  model.training_samples = n;

  Eigen::MatrixXd gram = Eigen::MatrixXd::Constant(n, n, std::numeric_limits<double>::quiet_NaN());
  auto k = [&](int i, int j) {
    double& v = gram(i, j);
    if (std::isnan(v)) {
      v = features::chi2_kernel(features[static_cast<std::size_t>(i)], features[static_cast<std::size_t>(j)], model.gamma);
      gram(j, i) = v;
    }
    return v;
  };

  std::vector<int> all(static_cast<std::size_t>(n));
  std::iota(all.begin(), all.end(), 0);
  const Fitted full = fit_subset(all, labels, k, options);

  int sv_count = 0;
  for (int t = 0; t < n; ++t) sv_count += full.dual.alpha(t) > 0 ? 1 : 0;
  model.support_vectors.resize(sv_count, features.front().size());
  model.coefficients.resize(sv_count);
  for (int t = 0, r = 0; t < n; ++t) {
    if (full.dual.alpha(t) <= 0) continue;
    model.support_vectors.row(r) = features[static_cast<std::size_t>(t)].transpose();
    model.coefficients(r) = full.dual.alpha(t) * labels[static_cast<std::size_t>(t)];
    ++r;
  }
  model.bias = -full.dual.rho;

  // Out-of-fold decision values for calibration.
  const int folds = std::max(2, options.calibration_folds);
  std::vector<int> perm = all;
  std::mt19937_64 rng(options.seed);
  std::shuffle(perm.begin(), perm.end(), rng);
  std::vector<double> decisions(static_cast<std::size_t>(n));
  for (int f = 0; f < folds; ++f) {
    std::vector<int> train, held;
    for (int p = 0; p < n; ++p) (p % folds == f ? held : train).push_back(perm[static_cast<std::size_t>(p)]);
    if (held.empty()) continue;
    bool pos = false, neg = false;
    for (int t : train) (labels[static_cast<std::size_t>(t)] > 0 ? pos : neg) = true;
    if (!pos || !neg) {
      for (int t : held) decisions[static_cast<std::size_t>(t)] = pos ? 1.0 : -1.0;
      continue;
    }
    std::sort(train.begin(), train.end());
    const Fitted fold = fit_subset(train, labels, k, options);
    for (int t : held) decisions[static_cast<std::size_t>(t)] = subset_decision(fold, labels, k, t);
  }
  std::tie(model.platt_a, model.platt_b) = fit_platt(decisions, labels);
  return model;
}

SvmModel train_svm(std::span<const features::RegionFeature> features, std::span<const RegionLabel> labels,
                   const SvmOptions& options) {
  if (features.size() != labels.size()) throw std::invalid_argument("train_svm: feature/label count mismatch");
  std::vector<Eigen::VectorXd> x;
  std::vector<int> y;
  x.reserve(features.size());
  for (std::size_t i = 0; i < features.size(); ++i) {
    x.push_back(features[i].combined);
    y.push_back(labels[i].shadow ? 1 : -1);
  }
  return train_svm(x, y, options);
}

double svm_decision(const SvmModel& model, const Eigen::Ref<const Eigen::VectorXd>& f) {
  if (f.size() != model.support_vectors.cols())
    throw std::invalid_argument("svm_decision: feature has " + std::to_string(f.size()) + " dims, model expects " +
                                std::to_string(model.support_vectors.cols()));
  double d = model.bias;
  for (Eigen::Index i = 0; i < model.support_vectors.rows(); ++i)
    d += model.coefficients(i) * features::chi2_kernel(model.support_vectors.row(i).transpose(), f, model.gamma);
  return d;
}

std::pair<double, double> fit_platt(std::span<const double> decisions, std::span<const int> labels) {
  if (decisions.size() != labels.size() || decisions.empty())
    throw std::invalid_argument("fit_platt: size mismatch");
  double prior1 = 0, prior0 = 0;
  for (int l : labels) (l > 0 ? prior1 : prior0) += 1;
  const double hi = (prior1 + 1.0) / (prior1 + 2.0), lo = 1.0 / (prior0 + 2.0);
  std::vector<double> t(labels.size());
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = labels[i] > 0 ? hi : lo;

  auto objective = [&](double A, double B) {
    double f = 0;
    for (std::size_t i = 0; i < t.size(); ++i) {
      const double z = decisions[i] * A + B;
      f += z >= 0 ? t[i] * z + std::log1p(std::exp(-z)) : (t[i] - 1) * z + std::log1p(std::exp(z));
    }
    return f;
  };

  double A = 0.0, B = std::log((prior0 + 1.0) / (prior1 + 1.0));
  double fval = objective(A, B);
  constexpr double kSigma = 1e-12, kEps = 1e-5, kMinStep = 1e-10;
  for (int it = 0; it < 100; ++it) {
    double h11 = kSigma, h22 = kSigma, h21 = 0, g1 = 0, g2 = 0;
    for (std::size_t i = 0; i < t.size(); ++i) {
      const double z = decisions[i] * A + B;
      double p, q;
      if (z >= 0) {
        p = std::exp(-z) / (1.0 + std::exp(-z));
        q = 1.0 / (1.0 + std::exp(-z));
      } else {
        p = 1.0 / (1.0 + std::exp(z));
        q = std::exp(z) / (1.0 + std::exp(z));
      }
      const double d2 = p * q;
      h11 += decisions[i] * decisions[i] * d2;
      h22 += d2;
      h21 += decisions[i] * d2;
      const double d1 = t[i] - p;
      g1 += decisions[i] * d1;
      g2 += d1;
    }
    if (std::abs(g1) < kEps && std::abs(g2) < kEps) break;
    const double det = h11 * h22 - h21 * h21;
    const double dA = -(h22 * g1 - h21 * g2) / det;
    const double dB = -(-h21 * g1 + h11 * g2) / det;
    const double gd = g1 * dA + g2 * dB;
    double step = 1.0;
    while (step >= kMinStep) {
      const double nA = A + step * dA, nB = B + step * dB;
      const double nf = objective(nA, nB);
      if (nf < fval + 1e-4 * step * gd) {
        A = nA, B = nB, fval = nf;
        break;
      }
      step /= 2;
    }
    if (step < kMinStep) break;
  }
  return {A, B};
}

PriorResult shadow_prior(const SvmModel& model, const LabImage& lab, const seg::Segmentation& seg) {
  const auto feats = features::region_features(lab, seg, model.dictionary);
  PriorResult out{ProbMap(lab.width(), lab.height()), {}, {}};
  for (int r = 0; r < seg.region_count(); ++r) {
    const double d = svm_decision(model, feats[static_cast<std::size_t>(r)].combined);
    const double p = model.probability(d);
    out.decisions.push_back(d);
    out.probabilities.push_back(p);
    for (int i : seg.region(r)) out.map.data()[static_cast<std::size_t>(i)] = static_cast<float>(p);
  }
  return out;
}

ProbMap shadow_prior(const SvmModel& model, const RgbImage& image, const seg::Segmentation& seg) {
  return shadow_prior(model, imageio::rgb_to_lab(image), seg).map;
}

io::Container to_container(const SvmModel& model) {
  io::Container c;
  io::ByteWriter meta;
  meta.str("umbra-svm");
  meta.u64(model.seed);
  meta.u64(model.dataset_fingerprint);
  meta.i64(model.training_samples);
  meta.f64(model.gamma);
  meta.f64(model.C);
  c.add("meta", meta.take());

  io::ByteWriter svm;
  svm.matrix(model.support_vectors);
  svm.f64s({model.coefficients.data(), static_cast<std::size_t>(model.coefficients.size())});
  svm.f64(model.bias);
  svm.f64(model.platt_a);
  svm.f64(model.platt_b);
  c.add("svm", svm.take());

  io::ByteWriter dict;
  dict.str(model.dictionary.version);
  dict.f64(model.dictionary.bank.sigma_small);
  dict.f64(model.dictionary.bank.sigma_large);
  dict.matrix(model.dictionary.centers);
  c.add("textons", dict.take());
  return c;
}

SvmModel svm_from_container(const io::Container& c) {
  SvmModel m;
  io::ByteReader meta(c.get("meta"), "svm meta");
  if (meta.str() != "umbra-svm") throw io::FormatError("not an SVM model file");
  m.seed = meta.u64();
  m.dataset_fingerprint = meta.u64();
  m.training_samples = meta.i64();
  m.gamma = meta.f64();
  m.C = meta.f64();
  meta.expect_done();

  io::ByteReader svm(c.get("svm"), "svm section");
  m.support_vectors = svm.matrix();
  const auto coef = svm.f64s();
  m.coefficients = Eigen::Map<const Eigen::VectorXd>(coef.data(), static_cast<Eigen::Index>(coef.size()));
  m.bias = svm.f64();
  m.platt_a = svm.f64();
  m.platt_b = svm.f64();
  svm.expect_done();
  if (m.coefficients.size() != m.support_vectors.rows() || m.support_vectors.rows() < 1)
    throw io::FormatError("svm section: inconsistent support vectors");

  io::ByteReader dict(c.get("textons"), "texton section");
  m.dictionary.version = dict.str();
  m.dictionary.bank.sigma_small = dict.f64();
  m.dictionary.bank.sigma_large = dict.f64();
  m.dictionary.centers = dict.matrix();
  dict.expect_done();
  if (m.dictionary.version != features::FilterBank::kVersion)
    throw io::FormatError("texton dictionary built with unsupported filter bank '" + m.dictionary.version + "'");
  if (m.dictionary.centers.cols() != features::kResponseDims ||
      m.support_vectors.cols() != features::kColorDims + m.dictionary.centers.rows())
    throw io::FormatError("svm/texton dimensions disagree");
  return m;
}

void save_svm(const SvmModel& model, const std::filesystem::path& path) { to_container(model).save(path); }

SvmModel load_svm(const std::filesystem::path& path) { return svm_from_container(io::Container::load(path)); }

}  // namespace umbra::prior
