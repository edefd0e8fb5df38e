#pragma once

#include "umbra/raster.hpp"

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <ostream>
#include <random>
#include <string>
#include <vector>

namespace umbra::eval {

/// Pixel tallies with shadow as the positive class.
struct ConfusionCounts {
  std::uint64_t tp = 0, tn = 0, fp = 0, fn = 0;
  std::uint64_t total() const { return tp + tn + fp + fn; }
};

ConfusionCounts confusion(const Mask& predicted, const Mask& truth);

/// Shadow accuracy TP/(TP+FN), non-shadow accuracy TN/(TN+FP), total (TP+TN)/all. A metric
/// whose denominator is zero is absent.
struct Metrics {
  std::optional<double> shadow;
  std::optional<double> nonshadow;
  double total = 0.0;
};

Metrics metrics(const ConfusionCounts& c);

struct Aggregate {
  double mean = 0.0;
  double std = 0.0;  // population standard deviation
  std::size_t count = 0;
};

/// Mean/std over the defined values only.
Aggregate aggregate(const std::vector<std::optional<double>>& values);

struct ImageResult {
  std::string name;
  ConfusionCounts counts;
  Metrics metrics;
  double seconds = 0.0;
  std::size_t cnn_invocations = 0;
  std::size_t pixels = 0;
};

struct MetricReport {
  std::vector<ImageResult> images;
  Aggregate shadow, nonshadow, total;
  double seconds_per_image = 0.0;
  double mean_cnn_invocations = 0.0;
};

MetricReport summarize(std::vector<ImageResult> images);

// ---------------------------------------------------------------------------------------

struct Sample {
  std::string name;
  std::filesystem::path image;
  std::filesystem::path mask;
};

struct DatasetIndex {
  std::vector<Sample> samples;
  std::vector<bool> is_test;
  std::vector<std::string> warnings;

  std::vector<Sample> train() const;
  std::vector<Sample> test() const;
};

/// Known layouts: "images-masks" (Images/ + Masks/), "sbu" (ShadowImages/ + ShadowMasks/),
/// "auto" (first layout whose directories exist). Pairs share a file stem.
DatasetIndex load_dataset(const std::filesystem::path& root, const std::string& layout = "auto");

/// Marks round(test_fraction * n) samples, chosen by a seeded shuffle, as test.
void assign_split(DatasetIndex& index, double test_fraction, std::uint64_t seed);

enum class Split { kTrain, kTest, kAll };
Split parse_split(const std::string& s);
std::vector<Sample> select(const DatasetIndex& index, Split split);

// ---------------------------------------------------------------------------------------

struct SyntheticScene {
  RgbImage image;
  Mask mask;
};

struct SyntheticOptions {
  double min_shadow_fraction = 0.05;
  double max_shadow_fraction = 0.60;
  double min_attenuation = 0.3;
  double max_attenuation = 0.6;
};

/// Textured background fields (flat / noise / checkerboard) with convex polygon shadows.
SyntheticScene make_synthetic_scene(int size, std::mt19937_64& rng, const SyntheticOptions& options = {});

/// Writes n scenes as Images/NNNN.png and Masks/NNNN.png under `out`.
void generate_synthetic(int n, int size, std::uint64_t seed, const std::filesystem::path& out,
                        const SyntheticOptions& options = {});

// ---------------------------------------------------------------------------------------

struct Prediction {
  Mask mask;
  std::size_t cnn_invocations = 0;
  double seconds = 0.0;  // detection wall time, model loading excluded
};

using Predictor = std::function<Prediction(const RgbImage&)>;

MetricReport benchmark(const Predictor& predict, const std::vector<Sample>& samples,
                       const std::function<void(const ImageResult&)>& on_image = {});

/// One `key=value` line per image followed by a summary line.
void write_report_lines(std::ostream& out, const MetricReport& report, bool include_timing);

/// Machine-readable summary (JSON). Timing fields are written only when requested so that
/// reports from identical runs are byte-identical.
std::string report_json(const MetricReport& report, bool include_timing);

}  // namespace umbra::eval
