#include "umbra/segmentation.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <numeric>
#include <set>
#include <stdexcept>
#include <string>

namespace umbra::seg {

namespace {

class DisjointSets {
 public:
  explicit DisjointSets(std::size_t n) : parent_(n) { std::iota(parent_.begin(), parent_.end(), 0); }
  int find(int i) {
    while (parent_[i] != i) {
      parent_[i] = parent_[parent_[i]];
      i = parent_[i];
    }
    return i;
  }
  void unite(int a, int b) {
    a = find(a);
    b = find(b);
    if (a == b) return;
    // Lower index becomes the root so labels stay independent of visiting order.
    if (b < a) std::swap(a, b);
    parent_[b] = a;
  }

 private:
  std::vector<int> parent_;
};

struct Mode {
  float x, y, L, a, b;
};

std::vector<Mode> filter_modes(const LabImage& lab, const MeanShiftParams& p) {
  const int w = lab.width(), h = lab.height();
  const float hs = static_cast<float>(p.spatial_bandwidth);
  const float hr = static_cast<float>(p.range_bandwidth);
  const float hs2 = hs * hs, hr2 = hr * hr;
  const float tol2 = static_cast<float>(p.tolerance * p.tolerance);
  const int reach = static_cast<int>(std::floor(hs));
  std::vector<Mode> modes(lab.pixel_count());

  for (int y0 = 0; y0 < h; ++y0) {
    for (int x0 = 0; x0 < w; ++x0) {
      const float* c0 = &lab(x0, y0, 0);
      Mode m{static_cast<float>(x0), static_cast<float>(y0), c0[0], c0[1], c0[2]};
      for (int it = 0; it < p.max_iterations; ++it) {
        const int cx = static_cast<int>(std::lround(m.x));
        const int cy = static_cast<int>(std::lround(m.y));
        double sx = 0, sy = 0, sL = 0, sa = 0, sb = 0;
        int n = 0;
        for (int y = std::max(0, cy - reach); y <= std::min(h - 1, cy + reach); ++y) {
          const float dy = static_cast<float>(y) - m.y;
          const float* row = &lab(0, y, 0);
          for (int x = std::max(0, cx - reach); x <= std::min(w - 1, cx + reach); ++x) {
            const float dx = static_cast<float>(x) - m.x;
            if (dx * dx + dy * dy > hs2) continue;
            const float* c = row + 3 * x;
            const float dL = c[0] - m.L, da = c[1] - m.a, db = c[2] - m.b;
            if (dL * dL + da * da + db * db > hr2) continue;
            sx += x;
            sy += y;
            sL += c[0];
            sa += c[1];
            sb += c[2];
            ++n;
          }
        }
        if (n == 0) break;
        const Mode next{static_cast<float>(sx / n), static_cast<float>(sy / n),
                        static_cast<float>(sL / n), static_cast<float>(sa / n),
                        static_cast<float>(sb / n)};
        const float ds = ((next.x - m.x) * (next.x - m.x) + (next.y - m.y) * (next.y - m.y)) / hs2;
        const float dr = ((next.L - m.L) * (next.L - m.L) + (next.a - m.a) * (next.a - m.a) +
                          (next.b - m.b) * (next.b - m.b)) / hr2;
        m = next;
        if (ds + dr < tol2) break;
      }
      modes[lab.index(x0, y0)] = m;
    }
  }
  return modes;
}

// Relabels so ids follow first occurrence in raster order.
std::vector<int> compact_labels(const std::vector<int>& roots) {
  std::vector<int> remap(roots.size(), -1);
  std::vector<int> out(roots.size());
  int next = 0;
  for (std::size_t i = 0; i < roots.size(); ++i) {
    int& r = remap[static_cast<std::size_t>(roots[i])];
    if (r < 0) r = next++;
    out[i] = r;
  }
  return out;
}

void merge_small_regions(const LabImage& lab, std::vector<int>& labels, int min_size) {
  const int w = lab.width(), h = lab.height();
  const int m = labels.empty() ? 0 : *std::max_element(labels.begin(), labels.end()) + 1;
  if (m <= 1) return;

  std::vector<long> size(m, 0);
  std::vector<std::array<double, 3>> sum(m, {0, 0, 0});
  std::vector<std::set<int>> adj(m);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const int l = labels[lab.index(x, y)];
      ++size[l];
      for (int c = 0; c < 3; ++c) sum[l][c] += lab(x, y, c);
      if (x + 1 < w) {
        const int r = labels[lab.index(x + 1, y)];
        if (r != l) adj[l].insert(r), adj[r].insert(l);
      }
      if (y + 1 < h) {
        const int d = labels[lab.index(x, y + 1)];
        if (d != l) adj[l].insert(d), adj[d].insert(l);
      }
    }
  }

  std::vector<int> merged_into(static_cast<std::size_t>(m), -1);
  std::set<std::pair<long, int>> small;
  for (int i = 0; i < m; ++i)
    if (size[i] < min_size) small.insert({size[i], i});
  int alive = m;

  while (!small.empty() && alive > 1) {
    const int victim = small.begin()->second;
    small.erase(small.begin());
    // Pick the adjacent region with the nearest mean color; ties go to the lowest id.
    int target = -1;
    double best = std::numeric_limits<double>::infinity();
    for (int n : adj[victim]) {
      double d = 0;
      for (int c = 0; c < 3; ++c) {
        const double diff = sum[victim][c] / size[victim] - sum[n][c] / size[n];
        d += diff * diff;
      }
      if (d < best) best = d, target = n;
    }
    if (target < 0) break;  // isolated region (cannot happen on a connected grid)
    if (size[target] < min_size) small.erase({size[target], target});
    size[target] += size[victim];
    for (int c = 0; c < 3; ++c) sum[target][c] += sum[victim][c];
    for (int n : adj[victim]) {
      adj[n].erase(victim);
      if (n != target) adj[n].insert(target), adj[target].insert(n);
    }
    adj[victim].clear();
    size[victim] = 0;
    merged_into[victim] = target;
    --alive;
    if (size[target] < min_size) small.insert({size[target], target});
  }

  auto resolve = [&](int l) {
    while (merged_into[l] >= 0) l = merged_into[l];
    return l;
  };
  for (auto& l : labels) l = resolve(l);
  labels = compact_labels(labels);
}

}  // namespace

void MeanShiftParams::validate() const {
  if (!(spatial_bandwidth > 0) || !(range_bandwidth > 0) || min_region_size <= 0)
    throw std::invalid_argument("MeanShiftParams: bandwidths and min_region_size must be positive");
  if (max_iterations <= 0 || !(tolerance > 0))
    throw std::invalid_argument("MeanShiftParams: max_iterations and tolerance must be positive");
}

Segmentation Segmentation::from_labels(int width, int height, std::vector<int> labels) {
  if (width <= 0 || height <= 0) throw std::invalid_argument("Segmentation: empty image");
  if (labels.size() != static_cast<std::size_t>(width) * height)
    throw std::invalid_argument("Segmentation: label count does not match image size");
  const int m = *std::max_element(labels.begin(), labels.end()) + 1;
  Segmentation s;
  s.width_ = width;
  s.height_ = height;
  s.regions_.assign(static_cast<std::size_t>(m), {});
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0) throw std::invalid_argument("Segmentation: negative label");
    s.regions_[static_cast<std::size_t>(labels[i])].push_back(static_cast<int>(i));
  }
  for (int i = 0; i < m; ++i)
    if (s.regions_[static_cast<std::size_t>(i)].empty())
      throw std::invalid_argument("Segmentation: label " + std::to_string(i) + " has no pixels");
  s.labels_ = std::move(labels);
  s.centroids_.reserve(static_cast<std::size_t>(m));
  for (int i = 0; i < m; ++i)
    s.centroids_.push_back(region_centroid(width, s.labels_, s.regions_[static_cast<std::size_t>(i)], i));
  s.boundary_ = compute_boundary_pixels(width, height, s.labels_, m);
  return s;
}

std::size_t Segmentation::total_boundary_pixels() const {
  std::size_t n = 0;
  for (const auto& b : boundary_) n += b.size();
  return n;
}

Segmentation mean_shift_segment(const LabImage& lab, const MeanShiftParams& params) {
  params.validate();
  if (lab.empty()) throw std::invalid_argument("mean_shift_segment: empty image");
  const int w = lab.width(), h = lab.height();
  const auto modes = filter_modes(lab, params);

  const float hs = static_cast<float>(params.spatial_bandwidth);
  const float hr = static_cast<float>(params.range_bandwidth);
  auto close = [&](const Mode& a, const Mode& b) {
    const float ds = (a.x - b.x) * (a.x - b.x) + (a.y - b.y) * (a.y - b.y);
    const float dr = (a.L - b.L) * (a.L - b.L) + (a.a - b.a) * (a.a - b.a) + (a.b - b.b) * (a.b - b.b);
    return ds < hs * hs && dr < hr * hr;
  };
  DisjointSets sets(lab.pixel_count());
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const auto i = lab.index(x, y);
      if (x + 1 < w && close(modes[i], modes[i + 1])) sets.unite(static_cast<int>(i), static_cast<int>(i + 1));
      if (y + 1 < h && close(modes[i], modes[i + w]))
        sets.unite(static_cast<int>(i), static_cast<int>(i + static_cast<std::size_t>(w)));
    }
  }
  std::vector<int> roots(lab.pixel_count());
  for (std::size_t i = 0; i < roots.size(); ++i) roots[i] = sets.find(static_cast<int>(i));
  auto labels = compact_labels(roots);
  merge_small_regions(lab, labels, params.min_region_size);
  return Segmentation::from_labels(w, h, std::move(labels));
}

std::vector<std::vector<int>> compute_boundary_pixels(int width, int height,
                                                      const std::vector<int>& labels,
                                                      int region_count) {
  std::vector<std::vector<int>> boundary(static_cast<std::size_t>(region_count));
  for (int y = 0; y < height; ++y) {
    for (int x = 0; x < width; ++x) {
      const int i = y * width + x;
      const int l = labels[static_cast<std::size_t>(i)];
      const bool edge = (x > 0 && labels[static_cast<std::size_t>(i - 1)] != l) ||
                        (x + 1 < width && labels[static_cast<std::size_t>(i + 1)] != l) ||
                        (y > 0 && labels[static_cast<std::size_t>(i - width)] != l) ||
                        (y + 1 < height && labels[static_cast<std::size_t>(i + width)] != l);
      if (edge) boundary[static_cast<std::size_t>(l)].push_back(i);
    }
  }
  return boundary;
}

Pixel region_centroid(int width, const std::vector<int>& labels, const std::vector<int>& region,
                      int region_id) {
  if (region.empty()) throw std::invalid_argument("region_centroid: invalid region id " + std::to_string(region_id));
  double mx = 0, my = 0;
  for (int i : region) mx += i % width, my += i / width;
  mx /= static_cast<double>(region.size());
  my /= static_cast<double>(region.size());
  const Pixel rounded{static_cast<int>(std::ceil(mx - 0.5)), static_cast<int>(std::ceil(my - 0.5))};
  if (labels[static_cast<std::size_t>(rounded.y) * width + rounded.x] == region_id) return rounded;
  int best = region.front();
  double best_d = std::numeric_limits<double>::infinity();
  for (int i : region) {  // ascending indices: first minimum wins ties
    const double dx = i % width - mx, dy = i / width - my;
    const double d = dx * dx + dy * dy;
    if (d < best_d) best_d = d, best = i;
  }
  return {best % width, best / width};
}

std::vector<std::uint16_t> label_map16(const Segmentation& seg) {
  std::vector<std::uint16_t> out(seg.labels().size());
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = static_cast<std::uint16_t>(std::min(seg.labels()[i], 65535));
  return out;
}

}  // namespace umbra::seg
