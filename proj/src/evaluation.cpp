#include "umbra/evaluation.hpp"

#include "umbra/imageio.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <map>
#include <numeric>
#include <set>
#include <sstream>
#include <stdexcept>

namespace umbra::eval {

namespace fs = std::filesystem;

ConfusionCounts confusion(const Mask& predicted, const Mask& truth) {
  require_same_size(predicted, truth, "confusion");
  ConfusionCounts c;
  for (std::size_t i = 0; i < truth.pixel_count(); ++i) {
    const bool p = predicted.data()[i] != 0, t = truth.data()[i] != 0;
    if (p && t) ++c.tp;
    else if (!p && !t) ++c.tn;
    else if (p) ++c.fp;
    else ++c.fn;
  }
  return c;
}

Metrics metrics(const ConfusionCounts& c) {
  if (c.total() == 0) throw std::invalid_argument("metrics: no pixels");
  Metrics m;
  if (c.tp + c.fn > 0) m.shadow = static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fn);
  if (c.tn + c.fp > 0) m.nonshadow = static_cast<double>(c.tn) / static_cast<double>(c.tn + c.fp);
  m.total = static_cast<double>(c.tp + c.tn) / static_cast<double>(c.total());
  return m;
}

Aggregate aggregate(const std::vector<std::optional<double>>& values) {
  Aggregate a;
  double sum = 0;
  for (const auto& v : values)
    if (v) sum += *v, ++a.count;
  if (a.count == 0) return a;
  a.mean = sum / static_cast<double>(a.count);
  double var = 0;
  for (const auto& v : values)
    if (v) var += (*v - a.mean) * (*v - a.mean);
  a.std = std::sqrt(var / static_cast<double>(a.count));
  return a;
}

MetricReport summarize(std::vector<ImageResult> images) {
  MetricReport r;
  std::vector<std::optional<double>> sh, ns, tot;
  double seconds = 0, calls = 0;
  for (const auto& im : images) {
    sh.push_back(im.metrics.shadow);
    ns.push_back(im.metrics.nonshadow);
    tot.push_back(im.metrics.total);
    seconds += im.seconds;
    calls += static_cast<double>(im.cnn_invocations);
  }
  r.shadow = aggregate(sh);
  r.nonshadow = aggregate(ns);
  r.total = aggregate(tot);
  if (!images.empty()) {
    r.seconds_per_image = seconds / static_cast<double>(images.size());
    r.mean_cnn_invocations = calls / static_cast<double>(images.size());
  }
  r.images = std::move(images);
  return r;
}

// ---------------------------------------------------------------------------------------

std::vector<Sample> DatasetIndex::train() const { return select(*this, Split::kTrain); }
std::vector<Sample> DatasetIndex::test() const { return select(*this, Split::kTest); }

namespace {

bool is_image_file(const fs::path& p) {
  std::string ext = p.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return ext == ".png" || ext == ".ppm";
}

std::map<std::string, fs::path> files_by_stem(const fs::path& dir) {
  std::map<std::string, fs::path> out;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_regular_file() && is_image_file(e.path())) out.emplace(e.path().stem().string(), e.path());
  return out;
}

}  // namespace

DatasetIndex load_dataset(const fs::path& root, const std::string& layout) {
  if (!fs::is_directory(root)) throw std::runtime_error("load_dataset: no such directory " + root.string());
  static const std::map<std::string, std::pair<std::string, std::string>> kLayouts = {
      {"images-masks", {"Images", "Masks"}},
      {"sbu", {"ShadowImages", "ShadowMasks"}},
  };
  std::pair<std::string, std::string> dirs;
  if (layout == "auto") {
    bool found = false;
    for (const auto& name : {"images-masks", "sbu"}) {
      const auto& d = kLayouts.at(name);
      if (fs::is_directory(root / d.first) && fs::is_directory(root / d.second)) {
        dirs = d;
        found = true;
        break;
      }
    }
    if (!found) throw std::runtime_error("load_dataset: " + root.string() + " matches no known layout");
  } else {
    const auto it = kLayouts.find(layout);
    if (it == kLayouts.end()) throw std::invalid_argument("load_dataset: unknown layout '" + layout + "'");
    dirs = it->second;
    if (!fs::is_directory(root / dirs.first) || !fs::is_directory(root / dirs.second))
      throw std::runtime_error("load_dataset: " + root.string() + " lacks " + dirs.first + "/ or " + dirs.second + "/");
  }

  DatasetIndex index;
  const auto images = files_by_stem(root / dirs.first);
  const auto masks = files_by_stem(root / dirs.second);
  for (const auto& [stem, path] : images) {
    const auto m = masks.find(stem);
    if (m == masks.end()) {
      index.warnings.push_back("image without mask: " + path.string());
      continue;
    }
    index.samples.push_back({stem, path, m->second});
  }
  for (const auto& [stem, path] : masks)
    if (!images.count(stem)) index.warnings.push_back("mask without image: " + path.string());
  if (index.samples.empty()) throw std::runtime_error("load_dataset: no image/mask pairs under " + root.string());
  index.is_test.assign(index.samples.size(), false);
  return index;
}

void assign_split(DatasetIndex& index, double test_fraction, std::uint64_t seed) {
  if (!(test_fraction >= 0 && test_fraction <= 1)) throw std::invalid_argument("assign_split: fraction outside [0,1]");
  const std::size_t n = index.samples.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  const auto test = static_cast<std::size_t>(std::llround(test_fraction * static_cast<double>(n)));
  index.is_test.assign(n, false);
  for (std::size_t i = 0; i < test; ++i) index.is_test[order[i]] = true;
}

Split parse_split(const std::string& s) {
  if (s == "train") return Split::kTrain;
  if (s == "test") return Split::kTest;
  if (s == "all") return Split::kAll;
  throw std::invalid_argument("unknown split '" + s + "' (train, test, all)");
}

std::vector<Sample> select(const DatasetIndex& index, Split split) {
  std::vector<Sample> out;
  for (std::size_t i = 0; i < index.samples.size(); ++i) {
    const bool test = i < index.is_test.size() && index.is_test[i];
    if (split == Split::kAll || (split == Split::kTest) == test) out.push_back(index.samples[i]);
  }
  return out;
}

// ---------------------------------------------------------------------------------------

namespace {

struct Point2 {
  double x, y;
};

std::vector<Point2> convex_hull(std::vector<Point2> pts) {
  std::sort(pts.begin(), pts.end(), [](const Point2& a, const Point2& b) { return a.x < b.x || (a.x == b.x && a.y < b.y); });
  auto cross = [](const Point2& o, const Point2& a, const Point2& b) {
    return (a.x - o.x) * (b.y - o.y) - (a.y - o.y) * (b.x - o.x);
  };
  std::vector<Point2> hull(2 * pts.size());
  std::size_t k = 0;
  for (const auto& p : pts) {
    while (k >= 2 && cross(hull[k - 2], hull[k - 1], p) <= 0) --k;
    hull[k++] = p;
  }
  for (std::size_t i = pts.size() - 1, t = k + 1; i-- > 0;) {
    while (k >= t && cross(hull[k - 2], hull[k - 1], pts[i]) <= 0) --k;
    hull[k++] = pts[i];
  }
  hull.resize(k - 1);
  return hull;
}

// Counter-clockwise convex polygon containment of a pixel center.
bool inside(const std::vector<Point2>& poly, double x, double y) {
  for (std::size_t i = 0; i < poly.size(); ++i) {
    const auto& a = poly[i];
    const auto& b = poly[(i + 1) % poly.size()];
    if ((b.x - a.x) * (y - a.y) - (b.y - a.y) * (x - a.x) < 0) return false;
  }
  return true;
}

}  // namespace

SyntheticScene make_synthetic_scene(int size, std::mt19937_64& rng, const SyntheticOptions& options) {
  if (size < 32) throw std::invalid_argument("make_synthetic_scene: size must be >= 32");
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  auto uniform = [&](double lo, double hi) { return lo + (hi - lo) * unit(rng); };

  // Background: a 2x2 grid of fields with random split lines.
  const int sx = static_cast<int>(uniform(0.3, 0.7) * size), sy = static_cast<int>(uniform(0.3, 0.7) * size);
  struct Field {
    double rgb[3];
    int texture;  // 0 flat, 1 noise, 2 checkerboard
    int cell;
  };
  std::array<Field, 4> fields{};
  for (auto& f : fields) {
    const double base = uniform(140, 230);
    for (double& c : f.rgb) c = std::clamp(base + uniform(-25, 25), 0.0, 255.0);
    f.texture = static_cast<int>(unit(rng) * 3) % 3;
    f.cell = 2 + static_cast<int>(unit(rng) * 3);
  }
  std::normal_distribution<double> noise(0.0, 4.0);
  std::vector<double> base_rgb(static_cast<std::size_t>(size) * size * 3);
  for (int y = 0; y < size; ++y) {
    for (int x = 0; x < size; ++x) {
      const Field& f = fields[static_cast<std::size_t>((y >= sy ? 2 : 0) + (x >= sx ? 1 : 0))];
      double offset = 0;
      if (f.texture == 1) offset = noise(rng);
      if (f.texture == 2) offset = ((x / f.cell + y / f.cell) % 2 == 0) ? 8.0 : -8.0;
      for (int c = 0; c < 3; ++c)
        base_rgb[(static_cast<std::size_t>(y) * size + x) * 3 + static_cast<std::size_t>(c)] = f.rgb[c] + offset;
    }
  }

  // Shadows: union of 1-3 convex polygons, resampled until the covered fraction is in range.
  Mask mask(size, size);
  for (int attempt = 0; attempt < 1000; ++attempt) {
    std::fill(mask.data().begin(), mask.data().end(), std::uint8_t{0});
    const int polygons = 1 + static_cast<int>(unit(rng) * 3) % 3;
    for (int p = 0; p < polygons; ++p) {
      const double cx = uniform(0.15, 0.85) * size, cy = uniform(0.15, 0.85) * size;
      const double radius = uniform(0.12, 0.35) * size;
      std::vector<Point2> pts;
      const int vertices = 5 + static_cast<int>(unit(rng) * 5);
      for (int v = 0; v < vertices; ++v) {
        const double a = uniform(0, 2 * M_PI), r = radius * uniform(0.5, 1.0);
        pts.push_back({cx + r * std::cos(a), cy + r * std::sin(a)});
      }
      const auto hull = convex_hull(pts);
      if (hull.size() < 3) continue;
      for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x)
          if (inside(hull, x + 0.5, y + 0.5)) mask(x, y) = 1;
    }
    const double fraction =
        static_cast<double>(std::count(mask.data().begin(), mask.data().end(), std::uint8_t{1})) / (size * size);
    if (fraction >= options.min_shadow_fraction && fraction <= options.max_shadow_fraction) break;
    if (attempt == 999) throw std::runtime_error("make_synthetic_scene: could not place shadows");
  }

  const double attenuation = uniform(options.min_attenuation, options.max_attenuation);
  const double blue = std::min(1.0, attenuation + uniform(0.05, 0.12));
  RgbImage image(size, size);
  for (int y = 0; y < size; ++y) {
    for (int x = 0; x < size; ++x) {
      for (int c = 0; c < 3; ++c) {
        double v = base_rgb[(static_cast<std::size_t>(y) * size + x) * 3 + static_cast<std::size_t>(c)];
        if (mask(x, y)) v *= (c == 2 ? blue : attenuation);
        image(x, y, c) = static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L));
      }
    }
  }
  return {std::move(image), std::move(mask)};
}

void generate_synthetic(int n, int size, std::uint64_t seed, const fs::path& out, const SyntheticOptions& options) {
  if (n < 1) throw std::invalid_argument("generate_synthetic: n must be >= 1");
  fs::create_directories(out / "Images");
  fs::create_directories(out / "Masks");
  std::mt19937_64 rng(seed);
  for (int i = 0; i < n; ++i) {
    const auto scene = make_synthetic_scene(size, rng, options);
    std::ostringstream name;
    name << std::setw(4) << std::setfill('0') << i;
    imageio::write_file(out / "Images" / (name.str() + ".png"), imageio::encode_image(scene.image));
    imageio::write_mask(out / "Masks" / (name.str() + ".png"), scene.mask);
  }
}

// ---------------------------------------------------------------------------------------

MetricReport benchmark(const Predictor& predict, const std::vector<Sample>& samples,
                       const std::function<void(const ImageResult&)>& on_image) {
  if (samples.empty()) throw std::invalid_argument("benchmark: empty dataset");
  std::vector<ImageResult> results;
  for (const auto& s : samples) {
    const RgbImage image = imageio::read_image(s.image);
    const Mask truth = imageio::read_mask(s.mask);
    require_same_size(image, truth, ("benchmark: " + s.name).c_str());
    const Prediction p = predict(image);
    ImageResult r;
    r.name = s.name;
    r.counts = confusion(p.mask, truth);
    r.metrics = metrics(r.counts);
    r.seconds = p.seconds;
    r.cnn_invocations = p.cnn_invocations;
    r.pixels = truth.pixel_count();
    if (on_image) on_image(r);
    results.push_back(std::move(r));
  }
  return summarize(std::move(results));
}

namespace {

std::string fmt(const std::optional<double>& v) {
  if (!v) return "absent";
  std::ostringstream s;
  s << std::setprecision(6) << std::fixed << *v;
  return s.str();
}

nlohmann::json aggregate_json(const Aggregate& a) {
  return {{"mean", a.mean}, {"std", a.std}, {"count", a.count}};
}

}  // namespace

void write_report_lines(std::ostream& out, const MetricReport& report, bool include_timing) {
  for (const auto& im : report.images) {
    out << "image=" << im.name << " shadow_acc=" << fmt(im.metrics.shadow) << " nonshadow_acc=" << fmt(im.metrics.nonshadow)
        << " total_acc=" << fmt(im.metrics.total) << " tp=" << im.counts.tp << " tn=" << im.counts.tn
        << " fp=" << im.counts.fp << " fn=" << im.counts.fn << " cnn_invocations=" << im.cnn_invocations;
    if (include_timing) out << " seconds=" << fmt(im.seconds);
    out << '\n';
  }
  out << "summary images=" << report.images.size() << " total_acc=" << fmt(report.total.mean) << "/"
      << fmt(report.total.std) << " shadow_acc=" << fmt(report.shadow.mean) << "/" << fmt(report.shadow.std)
      << " nonshadow_acc=" << fmt(report.nonshadow.mean) << "/" << fmt(report.nonshadow.std)
      << " mean_cnn_invocations=" << fmt(report.mean_cnn_invocations);
  if (include_timing) out << " seconds_per_image=" << fmt(report.seconds_per_image);
  out << '\n';
}

std::string report_json(const MetricReport& report, bool include_timing) {
  nlohmann::json j;
  j["schema"] = "umbra-report-v1";
  j["images"] = report.images.size();
  j["total_accuracy"] = aggregate_json(report.total);
  j["shadow_accuracy"] = aggregate_json(report.shadow);
  j["nonshadow_accuracy"] = aggregate_json(report.nonshadow);
  j["mean_cnn_invocations"] = report.mean_cnn_invocations;
  if (include_timing) j["seconds_per_image"] = report.seconds_per_image;
  auto& per = j["per_image"] = nlohmann::json::array();
  for (const auto& im : report.images) {
    nlohmann::json e = {{"name", im.name},
                        {"tp", im.counts.tp},
                        {"tn", im.counts.tn},
                        {"fp", im.counts.fp},
                        {"fn", im.counts.fn},
                        {"total_accuracy", im.metrics.total},
                        {"cnn_invocations", im.cnn_invocations}};
    e["shadow_accuracy"] = im.metrics.shadow ? nlohmann::json(*im.metrics.shadow) : nlohmann::json(nullptr);
    e["nonshadow_accuracy"] = im.metrics.nonshadow ? nlohmann::json(*im.metrics.nonshadow) : nlohmann::json(nullptr);
    if (include_timing) e["seconds"] = im.seconds;
    per.push_back(std::move(e));
  }
  return j.dump(2) + "\n";
}

}  // namespace umbra::eval
