#pragma once

#include "umbra/container.hpp"
#include "umbra/features.hpp"
#include "umbra/raster.hpp"
#include "umbra/segmentation.hpp"

#include <Eigen/Core>

#include <cstdint>
#include <filesystem>
#include <functional>
#include <stdexcept>
#include <vector>

namespace umbra::prior {

struct RegionLabel {
  int region = 0;
  bool shadow = false;
  double shadow_fraction = 0.0;
};

/// Majority vote of the ground-truth mask per region; exactly one half counts as non-shadow.
std::vector<RegionLabel> label_regions(const seg::Segmentation& seg, const Mask& gt);

struct SvmOptions {
  double C = 1.0;
  /// Kernel width; <= 0 selects 1 / mean pairwise chi-squared distance.
  double gamma = 0.0;
  double tolerance = 1e-3;
  long max_pair_updates = 1'000'000;
  int calibration_folds = 3;
  std::uint64_t seed = 1;
};

class ConvergenceError : public std::runtime_error {
 public:
  ConvergenceError(const std::string& what, double violation)
      : std::runtime_error(what), violation_(violation) {}
  double violation() const { return violation_; }

 private:
  double violation_;
};

/// Binary soft-margin SVM, shadow = +1.
struct SvmModel {
  Eigen::MatrixXd support_vectors;  // one row per support vector
  Eigen::VectorXd coefficients;     // alpha_i * y_i
  double bias = 0.0;
  double gamma = 1.0;
  double C = 1.0;
  double platt_a = 0.0;
  double platt_b = 0.0;
  features::TextonDictionary dictionary;

  // Training metadata.
  std::uint64_t seed = 0;
  std::uint64_t dataset_fingerprint = 0;
  std::int64_t training_samples = 0;

  double probability(double decision) const;
};

/// Solution of the dual on a fixed kernel, before support-vector extraction.
struct DualSolution {
  Eigen::VectorXd alpha;     // in [0, C]
  Eigen::VectorXd gradient;  // Q alpha - 1
  double rho = 0.0;          // decision = sum alpha_i y_i k_i(x) - rho
  long pair_updates = 0;
  double violation = 0.0;    // final max violating-pair gap

  /// 0.5 a'Qa - sum a
  double objective() const;
};

/// SMO with maximal-violating-pair selection over an arbitrary kernel callback.
DualSolution solve_dual(int n, const std::function<double(int, int)>& kernel, std::span<const int> labels,
                        const SvmOptions& options);

SvmModel train_svm(std::span<const Eigen::VectorXd> features, std::span<const int> labels,
                   const SvmOptions& options = {});
SvmModel train_svm(std::span<const features::RegionFeature> features, std::span<const RegionLabel> labels,
                   const SvmOptions& options = {});

/// sum_i coef_i k(sv_i, f) + bias
double svm_decision(const SvmModel& model, const Eigen::Ref<const Eigen::VectorXd>& f);

/// Platt fit of P(shadow | decision) = 1 / (1 + exp(A f + B)).
std::pair<double, double> fit_platt(std::span<const double> decisions, std::span<const int> labels);

struct PriorResult {
  ProbMap map;
  std::vector<double> decisions;
  std::vector<double> probabilities;
};

PriorResult shadow_prior(const SvmModel& model, const LabImage& lab, const seg::Segmentation& seg);
ProbMap shadow_prior(const SvmModel& model, const RgbImage& image, const seg::Segmentation& seg);

io::Container to_container(const SvmModel& model);
SvmModel svm_from_container(const io::Container& c);
void save_svm(const SvmModel& model, const std::filesystem::path& path);
SvmModel load_svm(const std::filesystem::path& path);

}  // namespace umbra::prior
