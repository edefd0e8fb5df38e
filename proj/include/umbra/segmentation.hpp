#pragma once

#include "umbra/raster.hpp"

#include <cstdint>
#include <vector>

namespace umbra::seg {

struct MeanShiftParams {
  double spatial_bandwidth = 8.0;  // pixels
  double range_bandwidth = 8.0;    // Lab units
  int min_region_size = 50;        // pixels
  int max_iterations = 50;
  /// Convergence threshold on the joint (x/hs, y/hs, color/hr) displacement.
  double tolerance = 0.1;

  void validate() const;
};

/// Partition of an image into m regions. Pixel indices are row-major (y * width + x).
class Segmentation {
 public:
  Segmentation() = default;

  /// Builds region lists, centroids and boundary sets from a dense label map whose values
  /// must cover [0, m) without gaps.
  static Segmentation from_labels(int width, int height, std::vector<int> labels);

  int width() const { return width_; }
  int height() const { return height_; }
  int region_count() const { return static_cast<int>(regions_.size()); }
  int label(int x, int y) const { return labels_[static_cast<std::size_t>(y) * width_ + x]; }
  const std::vector<int>& labels() const { return labels_; }
  const std::vector<int>& region(int i) const { return regions_.at(static_cast<std::size_t>(i)); }
  const std::vector<std::vector<int>>& regions() const { return regions_; }
  Pixel centroid(int i) const { return centroids_.at(static_cast<std::size_t>(i)); }
  const std::vector<int>& boundary(int i) const { return boundary_.at(static_cast<std::size_t>(i)); }
  std::size_t total_boundary_pixels() const;

  Pixel to_pixel(int index) const { return {index % width_, index / width_}; }

 private:
  int width_ = 0;
  int height_ = 0;
  std::vector<int> labels_;
  std::vector<std::vector<int>> regions_;
  std::vector<Pixel> centroids_;
  std::vector<std::vector<int>> boundary_;
};

/// Joint spatial-range mean-shift filtering, 4-connected mode clustering and small-region
/// merging. Deterministic.
Segmentation mean_shift_segment(const LabImage& lab, const MeanShiftParams& params = {});

/// Per-region sets of pixels with at least one 4-neighbor carrying another label.
std::vector<std::vector<int>> compute_boundary_pixels(int width, int height,
                                                      const std::vector<int>& labels,
                                                      int region_count);

/// Coordinate mean rounded half-down per axis; falls back to the nearest region pixel
/// (lowest index on ties) when the rounded mean lies outside the region.
Pixel region_centroid(int width, const std::vector<int>& labels, const std::vector<int>& region,
                      int region_id);

/// Label map as 16-bit values (clamped at 65535) for debug dumps.
std::vector<std::uint16_t> label_map16(const Segmentation& seg);

}  // namespace umbra::seg
