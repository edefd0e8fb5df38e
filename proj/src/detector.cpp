#include "umbra/detector.hpp"

#include <algorithm>
#include <chrono>
#include <stdexcept>
#include <thread>

namespace umbra::detector {

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

// Runs `model` over fixed-size batches; batches may be spread across threads, but their
// composition is fixed so results do not depend on the thread count. `fn(b0, b1)` returns
// the columns for patches [b0, b1).
template <typename Fn>
Eigen::MatrixXd run_batched(Eigen::Index rows, std::size_t count, const DetectorConfig& config, Fn fn) {
  Eigen::MatrixXd out(rows, static_cast<Eigen::Index>(count));
  const std::size_t batch = static_cast<std::size_t>(std::max(1, config.batch));
  const std::size_t batches = (count + batch - 1) / batch;
  auto run = [&](std::size_t first, std::size_t stride) {
    for (std::size_t k = first; k < batches; k += stride) {
      const std::size_t b0 = k * batch, b1 = std::min(count, b0 + batch);
      out.middleCols(static_cast<Eigen::Index>(b0), static_cast<Eigen::Index>(b1 - b0)) = fn(b0, b1);
    }
  };
  const std::size_t jobs = std::min<std::size_t>(static_cast<std::size_t>(std::max(1, config.jobs)), batches);
  if (jobs <= 1) {
    run(0, 1);
  } else {
    std::vector<std::jthread> workers;
    for (std::size_t j = 0; j < jobs; ++j) workers.emplace_back(run, j, jobs);
  }
  return out;
}

}  // namespace

void DetectorConfig::validate() const {
  if (!(alpha > 0 && alpha <= 1)) throw std::invalid_argument("DetectorConfig: alpha must be in (0, 1]");
  if (!(binarize_threshold > 0 && binarize_threshold < 1))
    throw std::invalid_argument("DetectorConfig: binarize threshold must be in (0, 1)");
  if (batch < 1 || jobs < 1) throw std::invalid_argument("DetectorConfig: batch and jobs must be >= 1");
  mean_shift.validate();
}

Eigen::MatrixXd CnnPatchModel::predict(std::span<const imageio::Patch> patches, std::span<const int> cells) const {
  const auto input = cnn::to_input<float>(patches);
  if (cells.empty()) return cnn::forward(net_, input).cast<double>();
  return cnn::forward_rows(net_, input, cells).cast<double>();
}

Eigen::MatrixXd FunctionPatchModel::predict(std::span<const imageio::Patch> patches, std::span<const int> cells) const {
  const Eigen::Index rows = cells.empty() ? cnn::kOutputs : static_cast<Eigen::Index>(cells.size());
  Eigen::MatrixXd out(rows, static_cast<Eigen::Index>(patches.size()));
  for (std::size_t p = 0; p < patches.size(); ++p)
    for (Eigen::Index r = 0; r < rows; ++r)
      out(r, static_cast<Eigen::Index>(p)) = fn_(patches[p], cells.empty() ? static_cast<int>(r) : cells[static_cast<std::size_t>(r)]);
  return out;
}

RegionPrediction region_predict(const RgbImage& image, const ProbMap& prior, const seg::Segmentation& seg,
                                const PatchModel& model, const DetectorConfig& config) {
  require_same_size(image, prior, "region_predict");
  if (image.width() < imageio::kPatchSize || image.height() < imageio::kPatchSize)
    throw std::invalid_argument("region_predict: image smaller than 32x32");
  std::vector<imageio::Patch> patches;
  patches.reserve(static_cast<std::size_t>(seg.region_count()));
  for (int r = 0; r < seg.region_count(); ++r) patches.push_back(imageio::extract_patch(image, prior, seg.centroid(r)));

  const std::span<const imageio::Patch> all(patches);
  const Eigen::MatrixXd probs = run_batched(cnn::kOutputs, patches.size(), config, [&](std::size_t b0, std::size_t b1) {
    return model.predict(all.subspan(b0, b1 - b0), {});
  });
  RegionPrediction out{{}, ProbMap(image.width(), image.height()), patches.size()};
  for (int r = 0; r < seg.region_count(); ++r) {
    const double s = probs.col(r).mean();
    out.s.push_back(s);
    for (int i : seg.region(r)) out.map.data()[static_cast<std::size_t>(i)] = static_cast<float>(s);
  }
  return out;
}

std::vector<int> filter_regions(std::span<const double> s, double alpha) {
  if (s.empty()) throw std::invalid_argument("filter_regions: no regions");
  const double threshold = alpha * *std::max_element(s.begin(), s.end());
  std::vector<int> out;
  for (std::size_t i = 0; i < s.size(); ++i)
    if (s[i] >= threshold) out.push_back(static_cast<int>(i));
  return out;
}

std::array<int, 9> refinement_cells(Pixel p, Pixel origin) {
  std::array<int, 9> cells{};
  const int lx = p.x - origin.x, ly = p.y - origin.y;
  int k = 0;
  for (int dy = -1; dy <= 1; ++dy)
    for (int dx = -1; dx <= 1; ++dx) {
      const int cx = std::clamp(lx + dx, 0, cnn::kSide - 1), cy = std::clamp(ly + dy, 0, cnn::kSide - 1);
      cells[static_cast<std::size_t>(k++)] = cy * cnn::kSide + cx;
    }
  return cells;
}

Refinement refine_edges(const RgbImage& image, const ProbMap& prior, const seg::Segmentation& seg,
                        std::span<const int> selected, const PatchModel& model, const ProbMap& region_map,
                        const DetectorConfig& config) {
  require_same_size(image, prior, "refine_edges");
  require_same_size(image, region_map, "refine_edges");
  std::vector<int> pixels;
  for (int r : selected) {
    if (r < 0 || r >= seg.region_count()) throw std::out_of_range("refine_edges: region id");
    pixels.insert(pixels.end(), seg.boundary(r).begin(), seg.boundary(r).end());
  }
  std::sort(pixels.begin(), pixels.end());

  Refinement out{region_map, pixels.size()};
  if (pixels.empty()) return out;

  std::vector<imageio::Patch> patches;
  patches.reserve(pixels.size());
  for (int i : pixels) patches.push_back(imageio::extract_patch(image, prior, seg.to_pixel(i)));

  std::vector<std::array<int, 9>> cells(pixels.size());
  for (std::size_t k = 0; k < pixels.size(); ++k) cells[k] = refinement_cells(seg.to_pixel(pixels[k]), patches[k].origin);

  // Most windows in a batch share the same local cells; request their union per call.
  const std::span<const imageio::Patch> all(patches);
  const Eigen::MatrixXd probs = run_batched(9, pixels.size(), config, [&](std::size_t b0, std::size_t b1) {
    std::vector<int> wanted;
    for (std::size_t k = b0; k < b1; ++k) wanted.insert(wanted.end(), cells[k].begin(), cells[k].end());
    std::sort(wanted.begin(), wanted.end());
    wanted.erase(std::unique(wanted.begin(), wanted.end()), wanted.end());
    const Eigen::MatrixXd p = model.predict(all.subspan(b0, b1 - b0), wanted);
    Eigen::MatrixXd picked(9, static_cast<Eigen::Index>(b1 - b0));
    for (std::size_t k = b0; k < b1; ++k)
      for (std::size_t j = 0; j < 9; ++j) {
        const auto row = std::lower_bound(wanted.begin(), wanted.end(), cells[k][j]) - wanted.begin();
        picked(static_cast<Eigen::Index>(j), static_cast<Eigen::Index>(k - b0)) = p(row, static_cast<Eigen::Index>(k - b0));
      }
    return picked;
  });
  for (std::size_t k = 0; k < pixels.size(); ++k) {
    double mean = 0;
    for (Eigen::Index j = 0; j < 9; ++j) mean += probs(j, static_cast<Eigen::Index>(k));
    mean /= 9.0;
    const Pixel p = seg.to_pixel(pixels[k]);
    for (int dy = -1; dy <= 1; ++dy)
      for (int dx = -1; dx <= 1; ++dx)
        if (out.map.contains(p.x + dx, p.y + dy)) out.map(p.x + dx, p.y + dy) = static_cast<float>(mean);
  }
  return out;
}

Mask binarize(const ProbMap& map, double threshold) {
  Mask mask(map.width(), map.height());
  for (std::size_t i = 0; i < map.pixel_count(); ++i) mask.data()[i] = map.data()[i] >= threshold ? 1 : 0;
  return mask;
}

double DetectionResult::total_seconds() const {
  double t = 0;
  for (const auto& s : timing) t += s.seconds;
  return t;
}

DetectionResult detect(const RgbImage& image, const prior::SvmModel& svm, const PatchModel& cnn,
                       const DetectorConfig& config) {
  config.validate();
  if (image.width() < imageio::kPatchSize || image.height() < imageio::kPatchSize)
    throw std::invalid_argument("detect: image smaller than 32x32");
  DetectionResult out;

  auto t0 = Clock::now();
  const LabImage lab = imageio::rgb_to_lab(image);
  out.segmentation = seg::mean_shift_segment(lab, config.mean_shift);
  out.timing.push_back({"segmentation", seconds_since(t0)});

  t0 = Clock::now();
  out.prior = prior::shadow_prior(svm, lab, out.segmentation).map;
  out.timing.push_back({"prior", seconds_since(t0)});

  t0 = Clock::now();
  auto region = region_predict(image, out.prior, out.segmentation, cnn, config);
  out.region_scores = std::move(region.s);
  out.region_map = std::move(region.map);
  out.timing.push_back({"region_predict", seconds_since(t0)});

  t0 = Clock::now();
  out.refined_regions = filter_regions(out.region_scores, config.alpha);
  auto refined = refine_edges(image, out.prior, out.segmentation, out.refined_regions, cnn, out.region_map, config);
  out.refined_map = std::move(refined.map);
  out.refined_pixels = refined.invocations;
  out.timing.push_back({"refine_edges", seconds_since(t0)});

  t0 = Clock::now();
  out.mask = binarize(out.refined_map, config.binarize_threshold);
  out.timing.push_back({"binarize", seconds_since(t0)});

  out.cnn_invocations = region.invocations + refined.invocations;
  return out;
}

}  // namespace umbra::detector
