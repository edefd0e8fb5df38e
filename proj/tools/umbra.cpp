// umbra command line: synthetic data, training, detection and evaluation.

#include "umbra/detector.hpp"
#include "umbra/evaluation.hpp"
#include "umbra/imageio.hpp"
#include "umbra/training.hpp"

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <chrono>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <sstream>

namespace fs = std::filesystem;
using namespace umbra;

namespace {

// Flat config files: keys that are not global options belong to the selected subcommand.
class FlatConfig : public CLI::ConfigINI {
 public:
  explicit FlatConfig(const CLI::App& app) : app_(app) {}

  std::vector<CLI::ConfigItem> from_config(std::istream& input) const override {
    auto items = CLI::ConfigINI::from_config(input);
    const auto subs = app_.get_subcommands();
    if (subs.empty()) return items;
    for (auto& item : items)
      if (item.parents.empty() && !app_.get_option_no_throw("--" + item.name)) item.parents = {subs.front()->get_name()};
    return items;
  }

 private:
  const CLI::App& app_;
};

enum class Verbosity { kQuiet, kInfo, kDebug };

Verbosity verbosity() {
  const char* v = std::getenv("UMBRA_LOG");
  if (!v) return Verbosity::kInfo;
  const std::string s(v);
  if (s == "quiet" || s == "0") return Verbosity::kQuiet;
  if (s == "debug" || s == "2") return Verbosity::kDebug;
  return Verbosity::kInfo;
}

void info(const std::string& msg) {
  if (verbosity() != Verbosity::kQuiet) std::cerr << "[umbra] " << msg << '\n';
}

struct DataArgs {
  std::string root;
  std::string layout = "auto";
  std::string split;
  double test_fraction = 0.25;
  std::uint64_t split_seed = 1;

  void add(CLI::App* app, const std::string& default_split) {
    split = default_split;
    app->add_option("--data", root, "Dataset root")->required()->check(CLI::ExistingDirectory);
    app->add_option("--layout", layout, "images-masks, sbu or auto")->capture_default_str();
    app->add_option("--split", split, "train, test or all")->capture_default_str();
    app->add_option("--test-fraction", test_fraction, "Fraction held out as test")->capture_default_str()
        ->check(CLI::Range(0.0, 1.0));
    app->add_option("--split-seed", split_seed, "Seed of the train/test split")->capture_default_str();
  }

  std::vector<eval::Sample> load() const {
    auto index = eval::load_dataset(root, layout);
    for (const auto& w : index.warnings) info("warning: " + w);
    eval::assign_split(index, test_fraction, split_seed);
    auto samples = eval::select(index, eval::parse_split(split));
    if (samples.empty()) throw std::runtime_error("split '" + split + "' of " + root + " is empty");
    info("dataset " + root + ": " + std::to_string(samples.size()) + " images in split '" + split + "'");
    return samples;
  }
};

struct DetectArgs {
  detector::DetectorConfig config;

  void add(CLI::App* app) {
    app->add_option("--alpha", config.alpha, "Region filter threshold")->capture_default_str();
    app->add_option("--threshold", config.binarize_threshold, "Binarization threshold")->capture_default_str();
    app->add_option("--batch", config.batch, "Patches per network call")->capture_default_str();
    app->add_option("--spatial-bandwidth", config.mean_shift.spatial_bandwidth)->capture_default_str();
    app->add_option("--range-bandwidth", config.mean_shift.range_bandwidth)->capture_default_str();
    app->add_option("--min-region", config.mean_shift.min_region_size)->capture_default_str();
  }
};

void write_text(const fs::path& path, const std::string& text) {
  const std::vector<std::uint8_t> bytes(text.begin(), text.end());
  imageio::write_file(path, bytes);
}

std::string timing_json(const detector::DetectionResult& r) {
  nlohmann::json j;
  for (const auto& t : r.timing) j["stages"][t.stage] = t.seconds;
  j["total_seconds"] = r.total_seconds();
  j["cnn_invocations"] = r.cnn_invocations;
  j["regions"] = r.segmentation.region_count();
  j["refined_regions"] = r.refined_regions.size();
  j["refined_pixels"] = r.refined_pixels;
  return j.dump(2) + "\n";
}

eval::Predictor make_predictor(const prior::SvmModel& svm, const detector::PatchModel& cnn,
                               const detector::DetectorConfig& config) {
  return [&](const RgbImage& image) {
    const auto t0 = std::chrono::steady_clock::now();
    auto r = detector::detect(image, svm, cnn, config);
    eval::Prediction p;
    p.mask = std::move(r.mask);
    p.cnn_invocations = r.cnn_invocations;
    p.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return p;
  };
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"umbra: single-image shadow detection"};
  app.set_config("--config", "", "Configuration file: flat `key = value` lines named after long options");
  app.config_formatter(std::make_shared<FlatConfig>(app));
  app.require_subcommand(1);
  int jobs = 1;
  app.add_option("--jobs", jobs, "Worker threads for network inference")->capture_default_str()->check(CLI::PositiveNumber);

  // synth
  auto* synth = app.add_subcommand("synth", "Generate a synthetic shadow dataset");
  int synth_n = 64, synth_size = 128;
  std::uint64_t synth_seed = 1;
  std::string synth_out;
  synth->add_option("--n", synth_n, "Number of images")->capture_default_str()->check(CLI::PositiveNumber);
  synth->add_option("--size", synth_size, "Side length in pixels")->capture_default_str()->check(CLI::Range(32, 8192));
  synth->add_option("--seed", synth_seed)->capture_default_str();
  synth->add_option("--out", synth_out, "Output directory (Images/, Masks/)")->required();

  // train-svm
  auto* train_svm = app.add_subcommand("train-svm", "Train the region shadow prior");
  DataArgs svm_data;
  svm_data.add(train_svm, "train");
  training::PriorOptions prior_opts;
  seg::MeanShiftParams svm_ms;
  std::string svm_out;
  train_svm->add_option("--out", svm_out, "Model file")->required();
  train_svm->add_option("--textons", prior_opts.textons.textons)->capture_default_str();
  train_svm->add_option("--texton-samples", prior_opts.textons.max_samples)->capture_default_str();
  train_svm->add_option("--C", prior_opts.svm.C)->capture_default_str();
  train_svm->add_option("--gamma", prior_opts.svm.gamma, "<= 0 selects the heuristic")->capture_default_str();
  std::uint64_t svm_seed = 1;
  train_svm->add_option("--seed", svm_seed)->capture_default_str();

  // train-cnn
  auto* train_cnn = app.add_subcommand("train-cnn", "Train the patch network");
  DataArgs cnn_data;
  cnn_data.add(train_cnn, "train");
  training::CnnOptions cnn_opts;
  std::string cnn_svm, cnn_out;
  std::vector<int> widths{32, 64, 128};
  train_cnn->add_option("--svm", cnn_svm, "Prior model")->required()->check(CLI::ExistingFile);
  train_cnn->add_option("--out", cnn_out, "Model file")->required();
  train_cnn->add_option("--epochs", cnn_opts.schedule.epochs)->capture_default_str();
  train_cnn->add_option("--lr", cnn_opts.schedule.learning_rate)->capture_default_str();
  train_cnn->add_option("--momentum", cnn_opts.schedule.momentum)->capture_default_str();
  train_cnn->add_option("--batch", cnn_opts.schedule.batch_size)->capture_default_str();
  train_cnn->add_option("--patches-per-class,--per-class", cnn_opts.patches_per_class)->capture_default_str();
  train_cnn->add_option("--widths", widths, "Conv widths w1,w2,w3")
      ->delimiter(',')
      ->expected(3)
      ->check(CLI::PositiveNumber)
      ->capture_default_str();
  train_cnn->add_option("--seed", cnn_opts.seed)->capture_default_str();

  // detect
  auto* detect = app.add_subcommand("detect", "Detect shadows in one image");
  DetectArgs detect_args;
  detect_args.add(detect);
  std::string image_path, svm_path, cnn_path, out_prob, out_mask, dump_dir, timing_path;
  detect->add_option("--image", image_path)->required()->check(CLI::ExistingFile);
  detect->add_option("--svm", svm_path)->required()->check(CLI::ExistingFile);
  detect->add_option("--cnn", cnn_path)->required()->check(CLI::ExistingFile);
  detect->add_option("--out-prob", out_prob, "Refined probability map (8-bit PNG)");
  detect->add_option("--out-mask", out_mask, "Binary mask (PNG, 0/255)");
  detect->add_option("--dump-stages", dump_dir, "Write prior, region map, refined map and labels here");
  detect->add_option("--timing", timing_path, "Per-stage timing (JSON)");

  // evaluate / bench
  auto* evaluate = app.add_subcommand("evaluate", "Score a trained detector on a dataset split");
  auto* bench = app.add_subcommand("bench", "Evaluate and print per-image timing");
  DataArgs eval_data, bench_data;
  DetectArgs eval_args, bench_args;
  std::string eval_svm, eval_cnn, report_path, eval_timing;
  eval_data.add(evaluate, "test");
  eval_args.add(evaluate);
  evaluate->add_option("--svm", eval_svm)->required()->check(CLI::ExistingFile);
  evaluate->add_option("--cnn", eval_cnn)->required()->check(CLI::ExistingFile);
  evaluate->add_option("--report", report_path, "Report file (JSON, deterministic content)");
  evaluate->add_option("--timing-report", eval_timing, "Separate timing file (JSON)");
  std::string bench_svm, bench_cnn;
  bench_data.add(bench, "test");
  bench_args.add(bench);
  bench->add_option("--svm", bench_svm)->required()->check(CLI::ExistingFile);
  bench->add_option("--cnn", bench_cnn)->required()->check(CLI::ExistingFile);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (synth->parsed()) {
      eval::generate_synthetic(synth_n, synth_size, synth_seed, synth_out);
      info("wrote " + std::to_string(synth_n) + " images to " + synth_out);
    } else if (train_svm->parsed()) {
      prior_opts.textons.seed = svm_seed;
      prior_opts.svm.seed = svm_seed;
      const auto images = training::prepare(svm_data.load(), svm_ms, verbosity() == Verbosity::kDebug ? info : training::Log{});
      auto model = training::train_prior(images, prior_opts, info);
      model.seed = svm_seed;
      prior::save_svm(model, svm_out);
      info("saved " + svm_out);
    } else if (train_cnn->parsed()) {
      cnn_opts.arch = {widths[0], widths[1], widths[2]};
      const auto svm = prior::load_svm(cnn_svm);
      const auto images = training::prepare(cnn_data.load(), {}, verbosity() == Verbosity::kDebug ? info : training::Log{});
      const auto model = training::train_patch_cnn(images, svm, cnn_opts, info);
      cnn::save_cnn(model, cnn_out);
      info("saved " + cnn_out);
    } else if (detect->parsed()) {
      detect_args.config.jobs = jobs;
      const auto svm = prior::load_svm(svm_path);
      const detector::CnnPatchModel cnn(cnn::load_cnn(cnn_path));
      const auto image = imageio::read_image(image_path);
      const auto r = detector::detect(image, svm, cnn, detect_args.config);
      if (!out_prob.empty()) imageio::write_prob_map(out_prob, r.refined_map);
      if (!out_mask.empty()) imageio::write_mask(out_mask, r.mask);
      if (!dump_dir.empty()) {
        const fs::path d(dump_dir);
        imageio::write_prob_map(d / "prior.png", r.prior);
        imageio::write_prob_map(d / "region_map.png", r.region_map);
        imageio::write_prob_map(d / "refined_map.png", r.refined_map);
        imageio::write_mask(d / "mask.png", r.mask);
        imageio::write_file(d / "labels.png", imageio::encode_png16(r.segmentation.width(), r.segmentation.height(), seg::label_map16(r.segmentation)));
      }
      if (!timing_path.empty()) write_text(timing_path, timing_json(r));
      std::cout << "regions=" << r.segmentation.region_count() << " refined_regions=" << r.refined_regions.size()
                << " cnn_invocations=" << r.cnn_invocations << " seconds=" << r.total_seconds() << '\n';
    } else if (evaluate->parsed() || bench->parsed()) {
      const bool is_bench = bench->parsed();
      auto& args = is_bench ? bench_args : eval_args;
      args.config.jobs = jobs;
      const auto samples = (is_bench ? bench_data : eval_data).load();
      const auto svm = prior::load_svm(is_bench ? bench_svm : eval_svm);
      const detector::CnnPatchModel cnn(cnn::load_cnn(is_bench ? bench_cnn : eval_cnn));
      const auto report = eval::benchmark(make_predictor(svm, cnn, args.config), samples, [&](const eval::ImageResult& r) {
        if (is_bench)
          std::cout << r.name << " seconds=" << r.seconds << " cnn_invocations=" << r.cnn_invocations
                    << " total_acc=" << r.metrics.total << '\n';
      });
      eval::write_report_lines(std::cout, report, is_bench);
      if (!is_bench && !report_path.empty()) write_text(report_path, eval::report_json(report, false));
      if (!is_bench && !eval_timing.empty()) {
        nlohmann::json t;
        t["seconds_per_image"] = report.seconds_per_image;
        for (const auto& im : report.images) t["per_image"][im.name] = im.seconds;
        write_text(eval_timing, t.dump(2) + "\n");
      }
    }
  } catch (const std::exception& e) {
    std::cerr << "umbra: error: " << e.what() << '\n';
    return 2;
  }
  return 0;
}
