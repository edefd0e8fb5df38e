#pragma once

#include "umbra/cnn.hpp"
#include "umbra/imageio.hpp"
#include "umbra/prior.hpp"
#include "umbra/raster.hpp"
#include "umbra/segmentation.hpp"

#include <Eigen/Core>

#include <functional>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace umbra::detector {

struct DetectorConfig {
  /// Regions with s_i >= alpha * max_j s_j are refined.
  double alpha = 0.2;
  double binarize_threshold = 0.5;
  seg::MeanShiftParams mean_shift;
  /// Patches per network call. Results do not depend on `jobs`.
  int batch = 16;
  int jobs = 1;

  void validate() const;
};

/// Anything that maps RGBP patches to per-cell shadow probabilities.
class PatchModel {
 public:
  virtual ~PatchModel() = default;
  /// Probabilities at the requested cells (row-major 0..1023; empty = all cells), one column
  /// per patch.
  virtual Eigen::MatrixXd predict(std::span<const imageio::Patch> patches, std::span<const int> cells) const = 0;
};

/// The trained patch network, evaluated in single precision.
class CnnPatchModel final : public PatchModel {
 public:
  explicit CnnPatchModel(const cnn::CnnModel& model) : net_(model.net.cast<float>()) {}
  explicit CnnPatchModel(cnn::Network<float> net) : net_(std::move(net)) {}
  Eigen::MatrixXd predict(std::span<const imageio::Patch> patches, std::span<const int> cells) const override;

 private:
  cnn::Network<float> net_;
};

/// Test double: probability given by a callback of (patch, cell).
class FunctionPatchModel final : public PatchModel {
 public:
  using Fn = std::function<double(const imageio::Patch&, int)>;
  explicit FunctionPatchModel(Fn fn) : fn_(std::move(fn)) {}
  Eigen::MatrixXd predict(std::span<const imageio::Patch> patches, std::span<const int> cells) const override;

 private:
  Fn fn_;
};

struct RegionPrediction {
  std::vector<double> s;  // per-region shadow probability
  ProbMap map;            // P': s_i written to every pixel of region i
  std::size_t invocations = 0;
};

RegionPrediction region_predict(const RgbImage& image, const ProbMap& prior, const seg::Segmentation& seg,
                                const PatchModel& model, const DetectorConfig& config = {});

/// { i : s_i >= alpha * max_j s_j }, ascending.
std::vector<int> filter_regions(std::span<const double> s, double alpha);

struct Refinement {
  ProbMap map;
  std::size_t invocations = 0;
};

/// Re-predicts every boundary pixel of the selected regions (row-major order) and writes the
/// mean of the patch's 3x3 cells around it into the 3x3 image neighborhood.
Refinement refine_edges(const RgbImage& image, const ProbMap& prior, const seg::Segmentation& seg,
                        std::span<const int> selected, const PatchModel& model, const ProbMap& region_map,
                        const DetectorConfig& config = {});

/// Patch-local cells averaged for the boundary pixel `p` (clamped to the patch).
std::array<int, 9> refinement_cells(Pixel p, Pixel origin);

Mask binarize(const ProbMap& map, double threshold);

struct StageTiming {
  std::string stage;
  double seconds = 0.0;
};

struct DetectionResult {
  seg::Segmentation segmentation;
  ProbMap prior;
  std::vector<double> region_scores;
  std::vector<int> refined_regions;
  ProbMap region_map;
  ProbMap refined_map;
  Mask mask;
  std::vector<StageTiming> timing;
  std::size_t cnn_invocations = 0;
  std::size_t refined_pixels = 0;

  double total_seconds() const;
};

DetectionResult detect(const RgbImage& image, const prior::SvmModel& svm, const PatchModel& cnn,
                       const DetectorConfig& config = {});

}  // namespace umbra::detector
