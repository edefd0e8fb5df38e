#include "umbra/features.hpp"

#include <algorithm>
#include <limits>
#include <random>
#include <set>

namespace umbra::features {

namespace {

std::vector<double> gaussian_taps(double sigma, int order) {
  const int radius = static_cast<int>(std::ceil(3.0 * sigma));
  std::vector<double> g(static_cast<std::size_t>(2 * radius + 1));
  double sum = 0;
  for (int i = -radius; i <= radius; ++i) {
    g[static_cast<std::size_t>(i + radius)] = std::exp(-0.5 * i * i / (sigma * sigma));
    sum += g[static_cast<std::size_t>(i + radius)];
  }
  for (auto& v : g) v /= sum;
  if (order == 0) return g;

  std::vector<double> k(g.size());
  for (int i = -radius; i <= radius; ++i) {
    const double gi = g[static_cast<std::size_t>(i + radius)];
    const double x = i;
    k[static_cast<std::size_t>(i + radius)] =
        order == 1 ? -x / (sigma * sigma) * gi : (x * x / (sigma * sigma) - 1.0) / (sigma * sigma) * gi;
  }
  if (order == 2) {
    // Zero DC response.
    double mean = 0;
    for (double v : k) mean += v;
    mean /= static_cast<double>(k.size());
    for (auto& v : k) v -= mean;
  }
  return k;
}

// Separable correlation with replicated borders, one plane at a time.
std::vector<double> separable(const std::vector<double>& plane, int w, int h,
                              const std::vector<double>& kx, const std::vector<double>& ky) {
  const int rx = static_cast<int>(kx.size() / 2), ry = static_cast<int>(ky.size() / 2);
  std::vector<double> tmp(plane.size()), out(plane.size());
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double acc = 0;
      for (int k = -rx; k <= rx; ++k)
        acc += kx[static_cast<std::size_t>(k + rx)] *
               plane[static_cast<std::size_t>(y) * w + std::clamp(x + k, 0, w - 1)];
      tmp[static_cast<std::size_t>(y) * w + x] = acc;
    }
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double acc = 0;
      for (int k = -ry; k <= ry; ++k)
        acc += ky[static_cast<std::size_t>(k + ry)] *
               tmp[static_cast<std::size_t>(std::clamp(y + k, 0, h - 1)) * w + x];
      out[static_cast<std::size_t>(y) * w + x] = acc;
    }
  return out;
}

double squared_distance(const double* a, const double* b, int n) {
  double d = 0;
  for (int i = 0; i < n; ++i) d += (a[i] - b[i]) * (a[i] - b[i]);
  return d;
}

int nearest(const double* r, const ResponseMatrix& centers) {
  int best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (Eigen::Index k = 0; k < centers.rows(); ++k) {
    const double d = squared_distance(r, centers.row(k).data(), static_cast<int>(centers.cols()));
    if (d < best_d) best_d = d, best = static_cast<int>(k);
  }
  return best;
}

}  // namespace

int lightness_bin(double L) {
  return std::clamp(static_cast<int>(std::floor(L / 100.0 * kBinsPerChannel)), 0, kBinsPerChannel - 1);
}

int chroma_bin(double ab) {
  return std::clamp(static_cast<int>(std::floor((ab + 128.0) / 255.0 * kBinsPerChannel)), 0,
                    kBinsPerChannel - 1);
}

Eigen::VectorXd color_histogram(const LabImage& lab, std::span<const int> pixels) {
  if (pixels.empty()) throw std::invalid_argument("color_histogram: empty region");
  Eigen::VectorXd h = Eigen::VectorXd::Zero(kColorDims);
  for (int i : pixels) {
    const float* p = lab.pixel(static_cast<std::size_t>(i));
    h(lightness_bin(p[0])) += 1;
    h(kBinsPerChannel + chroma_bin(p[1])) += 1;
    h(2 * kBinsPerChannel + chroma_bin(p[2])) += 1;
  }
  return h / h.sum();
}

ResponseMatrix FilterBank::apply(const LabImage& lab) const {
  const int w = lab.width(), h = lab.height();
  const std::size_t n = lab.pixel_count();
  std::vector<std::vector<double>> planes(3, std::vector<double>(n));
  for (std::size_t i = 0; i < n; ++i)
    for (int c = 0; c < 3; ++c) planes[static_cast<std::size_t>(c)][i] = lab.pixel(i)[c];

  ResponseMatrix out(static_cast<Eigen::Index>(n), kResponseDims);
  int col = 0;
  auto store = [&](const std::vector<double>& r, double scale = 1.0) {
    for (std::size_t i = 0; i < n; ++i) out(static_cast<Eigen::Index>(i), col) = scale * r[i];
    ++col;
  };
  for (double sigma : {sigma_small, sigma_large}) {
    const auto g = gaussian_taps(sigma, 0);
    for (int c = 0; c < 3; ++c) store(separable(planes[static_cast<std::size_t>(c)], w, h, g, g));
  }
  const auto& L = planes[0];
  for (double sigma : {sigma_small, sigma_large}) {
    const auto g = gaussian_taps(sigma, 0), g2 = gaussian_taps(sigma, 2);
    auto xx = separable(L, w, h, g2, g);
    const auto yy = separable(L, w, h, g, g2);
    for (std::size_t i = 0; i < n; ++i) xx[i] += yy[i];
    store(xx, sigma * sigma);
  }
  for (double sigma : {sigma_small, sigma_large}) {
    const auto g = gaussian_taps(sigma, 0), g1 = gaussian_taps(sigma, 1);
    store(separable(L, w, h, g1, g), sigma);
    store(separable(L, w, h, g, g1), sigma);
  }
  return out;
}

TextonDictionary build_texton_dictionary(std::span<const LabImage> images, const TextonOptions& options) {
  if (images.empty()) throw std::invalid_argument("build_texton_dictionary: no images");
  const int K = options.textons;
  if (K < 2) throw std::invalid_argument("build_texton_dictionary: K must be >= 2");

  TextonDictionary dict;
  std::vector<ResponseMatrix> responses;
  std::size_t total = 0;
  for (const auto& img : images) {
    responses.push_back(dict.bank.apply(img));
    total += static_cast<std::size_t>(responses.back().rows());
  }

  std::mt19937_64 rng(options.seed);
  // Sample rows (without replacement when the corpus is small enough).
  std::vector<std::pair<std::size_t, Eigen::Index>> where;
  where.reserve(total);
  for (std::size_t i = 0; i < responses.size(); ++i)
    for (Eigen::Index r = 0; r < responses[i].rows(); ++r) where.emplace_back(i, r);
  const std::size_t count = std::min<std::size_t>(total, static_cast<std::size_t>(options.max_samples));
  if (count < total) {
    for (std::size_t i = 0; i < count; ++i) {
      std::uniform_int_distribution<std::size_t> pick(i, total - 1);
      std::swap(where[i], where[pick(rng)]);
    }
    where.resize(count);
  }
  ResponseMatrix data(static_cast<Eigen::Index>(count), kResponseDims);
  for (std::size_t i = 0; i < count; ++i)
    data.row(static_cast<Eigen::Index>(i)) = responses[where[i].first].row(where[i].second);

  {
    std::set<std::vector<double>> distinct;
    for (Eigen::Index i = 0; i < data.rows() && distinct.size() < static_cast<std::size_t>(K); ++i)
      distinct.insert(std::vector<double>(data.row(i).data(), data.row(i).data() + kResponseDims));
    if (distinct.size() < static_cast<std::size_t>(K))
      throw std::invalid_argument("build_texton_dictionary: only " + std::to_string(distinct.size()) +
                                  " distinct response vectors for " + std::to_string(K) + " textons");
  }

  const Eigen::Index n = data.rows();
  ResponseMatrix centers(K, kResponseDims);
  // k-means++ seeding.
  std::vector<double> d2(static_cast<std::size_t>(n), std::numeric_limits<double>::infinity());
  {
    std::uniform_int_distribution<Eigen::Index> first(0, n - 1);
    centers.row(0) = data.row(first(rng));
  }
  for (int k = 1; k < K; ++k) {
    double sum = 0;
    for (Eigen::Index i = 0; i < n; ++i) {
      d2[static_cast<std::size_t>(i)] = std::min(
          d2[static_cast<std::size_t>(i)], squared_distance(data.row(i).data(), centers.row(k - 1).data(), kResponseDims));
      sum += d2[static_cast<std::size_t>(i)];
    }
    std::uniform_real_distribution<double> u(0.0, sum);
    double target = u(rng), acc = 0;
    Eigen::Index chosen = -1;
    for (Eigen::Index i = 0; i < n; ++i) {
      if (d2[static_cast<std::size_t>(i)] <= 0) continue;
      chosen = i;
      acc += d2[static_cast<std::size_t>(i)];
      if (acc >= target) break;
    }
    centers.row(k) = data.row(chosen);
  }

  std::vector<int> assign(static_cast<std::size_t>(n), -1);
  for (int it = 0; it < options.max_iterations; ++it) {
    bool changed = false;
    for (Eigen::Index i = 0; i < n; ++i) {
      const int a = nearest(data.row(i).data(), centers);
      if (a != assign[static_cast<std::size_t>(i)]) changed = true, assign[static_cast<std::size_t>(i)] = a;
    }
    if (!changed && it > 0) break;
    ResponseMatrix sums = ResponseMatrix::Zero(K, kResponseDims);
    std::vector<int> counts(static_cast<std::size_t>(K), 0);
    for (Eigen::Index i = 0; i < n; ++i) {
      sums.row(assign[static_cast<std::size_t>(i)]) += data.row(i);
      ++counts[static_cast<std::size_t>(assign[static_cast<std::size_t>(i)])];
    }
    for (int k = 0; k < K; ++k) {
      if (counts[static_cast<std::size_t>(k)] > 0) {
        centers.row(k) = sums.row(k) / counts[static_cast<std::size_t>(k)];
        continue;
      }
      // Empty cluster: move it onto the sample farthest from its current center.
      Eigen::Index far = 0;
      double far_d = -1;
      for (Eigen::Index i = 0; i < n; ++i) {
        const double d = squared_distance(data.row(i).data(),
                                          centers.row(assign[static_cast<std::size_t>(i)]).data(), kResponseDims);
        if (d > far_d) far_d = d, far = i;
      }
      centers.row(k) = data.row(far);
      assign[static_cast<std::size_t>(far)] = k;
    }
  }
  dict.centers = std::move(centers);
  return dict;
}

std::vector<int> assign_textons(const ResponseMatrix& responses, const TextonDictionary& dict) {
  if (responses.cols() != dict.centers.cols())
    throw std::invalid_argument("assign_textons: response dimensionality mismatch");
  std::vector<int> out(static_cast<std::size_t>(responses.rows()));
  for (Eigen::Index i = 0; i < responses.rows(); ++i)
    out[static_cast<std::size_t>(i)] = nearest(responses.row(i).data(), dict.centers);
  return out;
}

Eigen::VectorXd texton_histogram(std::span<const int> assignments, int textons, std::span<const int> pixels) {
  if (pixels.empty()) throw std::invalid_argument("texton_histogram: empty region");
  Eigen::VectorXd h = Eigen::VectorXd::Zero(textons);
  for (int i : pixels) h(assignments[static_cast<std::size_t>(i)]) += 1;
  return h / static_cast<double>(pixels.size());
}

Eigen::VectorXd texton_histogram(const ResponseMatrix& responses, const TextonDictionary& dict,
                                 std::span<const int> pixels) {
  if (pixels.empty()) throw std::invalid_argument("texton_histogram: empty region");
  Eigen::VectorXd h = Eigen::VectorXd::Zero(dict.size());
  for (int i : pixels) h(nearest(responses.row(i).data(), dict.centers)) += 1;
  return h / static_cast<double>(pixels.size());
}

RegionFeature make_region_feature(Eigen::VectorXd color, Eigen::VectorXd texture) {
  RegionFeature f;
  f.combined.resize(color.size() + texture.size());
  f.combined << 0.5 * color, 0.5 * texture;
  f.color = std::move(color);
  f.texture = std::move(texture);
  return f;
}

std::vector<RegionFeature> region_features(const LabImage& lab, const seg::Segmentation& seg,
                                           const TextonDictionary& dict) {
  if (dict.version != FilterBank::kVersion)
    throw std::invalid_argument("region_features: dictionary built with filter bank '" + dict.version + "'");
  const auto assignments = assign_textons(dict.bank.apply(lab), dict);
  std::vector<RegionFeature> out;
  out.reserve(static_cast<std::size_t>(seg.region_count()));
  for (int r = 0; r < seg.region_count(); ++r)
    out.push_back(make_region_feature(color_histogram(lab, seg.region(r)),
                                      texton_histogram(assignments, dict.size(), seg.region(r))));
  return out;
}

double chi2_gamma_heuristic(std::span<const Eigen::VectorXd> samples) {
  double sum = 0;
  std::size_t pairs = 0;
  for (std::size_t i = 0; i < samples.size(); ++i)
    for (std::size_t j = i + 1; j < samples.size(); ++j) {
      sum += chi2_distance(samples[i], samples[j]);
      ++pairs;
    }
  if (pairs == 0 || !(sum > 0)) return 1.0;
  return static_cast<double>(pairs) / sum;
}

}  // namespace umbra::features
