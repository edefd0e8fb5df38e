#pragma once

#include "umbra/raster.hpp"
#include "umbra/segmentation.hpp"

#include <Eigen/Core>

#include <cmath>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace umbra::features {

inline constexpr int kBinsPerChannel = 21;
inline constexpr int kColorDims = 3 * kBinsPerChannel;
inline constexpr int kResponseDims = 12;
inline constexpr int kDefaultTextons = 64;

using ResponseMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// 63 bins: 21 uniform bins each over L in [0,100], a in [-128,127], b in [-128,127].
Eigen::VectorXd color_histogram(const LabImage& lab, std::span<const int> pixels);

int lightness_bin(double L);
int chroma_bin(double ab);

/// Gaussians (sigma_1, sigma_2) on L, a, b; LoG (two scales) on L; x/y derivative of
/// Gaussian (two scales) on L. 12 responses per pixel, borders replicated.
struct FilterBank {
  static constexpr const char* kVersion = "umbra-fb12-v1";
  double sigma_small = 1.0;
  double sigma_large = 2.0;

  ResponseMatrix apply(const LabImage& lab) const;
  friend bool operator==(const FilterBank&, const FilterBank&) = default;
};

struct TextonDictionary {
  FilterBank bank;
  std::string version = FilterBank::kVersion;
  ResponseMatrix centers;  // K x 12

  int size() const { return static_cast<int>(centers.rows()); }
};

struct TextonOptions {
  int textons = kDefaultTextons;
  std::uint64_t seed = 1;
  int max_iterations = 100;
  /// Pixels drawn (uniformly, seeded) from the corpus responses for k-means.
  int max_samples = 20000;
};

/// k-means++ seeded Lloyd iterations over filter responses. Throws if the corpus has fewer
/// distinct response vectors than requested textons.
TextonDictionary build_texton_dictionary(std::span<const LabImage> images, const TextonOptions& options);

/// Nearest-center index for every pixel (Euclidean, ties to lowest index).
std::vector<int> assign_textons(const ResponseMatrix& responses, const TextonDictionary& dict);

Eigen::VectorXd texton_histogram(std::span<const int> assignments, int textons, std::span<const int> pixels);
Eigen::VectorXd texton_histogram(const ResponseMatrix& responses, const TextonDictionary& dict,
                                 std::span<const int> pixels);

struct RegionFeature {
  Eigen::VectorXd color;
  Eigen::VectorXd texture;
  /// [color / 2 ; texture / 2], sums to one.
  Eigen::VectorXd combined;
};

RegionFeature make_region_feature(Eigen::VectorXd color, Eigen::VectorXd texture);

/// Features for every region of one image.
std::vector<RegionFeature> region_features(const LabImage& lab, const seg::Segmentation& seg,
                                           const TextonDictionary& dict);

/// Half the chi-squared distance sum; zero-sum bins contribute nothing.
template <typename DerivedA, typename DerivedB>
double chi2_distance(const Eigen::MatrixBase<DerivedA>& x, const Eigen::MatrixBase<DerivedB>& y) {
  if (x.size() != y.size()) throw std::invalid_argument("chi2: dimension mismatch");
  double acc = 0;
  for (Eigen::Index d = 0; d < x.size(); ++d) {
    const double a = static_cast<double>(x(d)), b = static_cast<double>(y(d));
    if (a < 0 || b < 0) throw std::invalid_argument("chi2: negative histogram component");
    const double s = a + b;
    if (s > 0) acc += (a - b) * (a - b) / s;
  }
  return 0.5 * acc;
}

template <typename DerivedA, typename DerivedB>
double chi2_kernel(const Eigen::MatrixBase<DerivedA>& x, const Eigen::MatrixBase<DerivedB>& y,
                   double gamma) {
  if (!(gamma > 0)) throw std::invalid_argument("chi2_kernel: gamma must be positive");
  return std::exp(-gamma * chi2_distance(x, y));
}

/// 1 / mean pairwise chi-squared distance.
double chi2_gamma_heuristic(std::span<const Eigen::VectorXd> samples);

}  // namespace umbra::features
