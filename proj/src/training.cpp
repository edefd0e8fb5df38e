#include "umbra/training.hpp"

#include "umbra/imageio.hpp"

#include <sstream>
#include <stdexcept>

namespace umbra::training {

PreparedImage prepare(std::string name, RgbImage image, Mask truth, const seg::MeanShiftParams& params) {
  require_same_size(image, truth, ("prepare: " + name).c_str());
  PreparedImage p;
  p.name = std::move(name);
  p.lab = imageio::rgb_to_lab(image);
  p.segmentation = seg::mean_shift_segment(p.lab, params);
  p.image = std::move(image);
  p.truth = std::move(truth);
  return p;
}

std::vector<PreparedImage> prepare(const std::vector<eval::Sample>& samples, const seg::MeanShiftParams& params,
                                   const Log& log) {
  std::vector<PreparedImage> out;
  out.reserve(samples.size());
  for (const auto& s : samples) {
    out.push_back(prepare(s.name, imageio::read_image(s.image), imageio::read_mask(s.mask), params));
    if (log) log("segmented " + s.name + ": " + std::to_string(out.back().segmentation.region_count()) + " regions");
  }
  return out;
}

std::uint64_t dataset_fingerprint(std::span<const PreparedImage> images) {
  std::uint64_t h = io::fingerprint({});
  for (const auto& im : images) {
    h = io::fingerprint(im.image.data(), h);
    h = io::fingerprint(im.truth.data(), h);
  }
  return h;
}

prior::SvmModel train_prior(std::span<const PreparedImage> images, const PriorOptions& options, const Log& log) {
  if (images.empty()) throw std::invalid_argument("train_prior: no training images");
  std::vector<LabImage> labs;
  labs.reserve(images.size());
  for (const auto& im : images) labs.push_back(im.lab);
  const auto dict = features::build_texton_dictionary(labs, options.textons);
  if (log) log("texton dictionary: " + std::to_string(dict.size()) + " centers");

  std::vector<features::RegionFeature> feats;
  std::vector<prior::RegionLabel> labels;
  for (const auto& im : images) {
    auto f = features::region_features(im.lab, im.segmentation, dict);
    auto l = prior::label_regions(im.segmentation, im.truth);
    feats.insert(feats.end(), std::make_move_iterator(f.begin()), std::make_move_iterator(f.end()));
    labels.insert(labels.end(), l.begin(), l.end());
  }
  if (log) {
    std::size_t shadow = 0;
    for (const auto& l : labels) shadow += l.shadow;
    log("svm training set: " + std::to_string(labels.size()) + " regions, " + std::to_string(shadow) + " shadow");
  }
  auto model = prior::train_svm(feats, labels, options.svm);
  model.dictionary = dict;
  model.dataset_fingerprint = dataset_fingerprint(images);
  if (log) {
    std::ostringstream s;
    s << "svm: " << model.support_vectors.rows() << " support vectors, gamma " << model.gamma << ", platt A "
      << model.platt_a << " B " << model.platt_b;
    log(s.str());
  }
  return model;
}

std::vector<cnn::TrainingPatch> collect_patches(std::span<const PreparedImage> images, const prior::SvmModel& svm,
                                                const CnnOptions& options) {
  std::vector<cnn::TrainingPatch> data;
  for (std::size_t i = 0; i < images.size(); ++i) {
    const auto& im = images[i];
    const ProbMap p = prior::shadow_prior(svm, im.lab, im.segmentation).map;
    auto patches = cnn::sample_patches(im.image, p, im.truth, options.patches_per_class, options.seed + i,
                                       options.sampling);
    data.insert(data.end(), std::make_move_iterator(patches.begin()), std::make_move_iterator(patches.end()));
  }
  cnn::balance_classes(data);
  return data;
}

cnn::CnnModel train_patch_cnn(std::span<const PreparedImage> images, const prior::SvmModel& svm,
                              const CnnOptions& options, const Log& log) {
  if (images.empty()) throw std::invalid_argument("train_patch_cnn: no training images");
  const auto data = collect_patches(images, svm, options);
  if (data.empty()) throw std::runtime_error("train_patch_cnn: no qualifying training patches");
  if (log) log("cnn training set: " + std::to_string(data.size()) + " patches");
  return cnn::train_cnn(data, options.schedule, options.seed, options.arch, [&](int epoch, double loss) {
    if (log) {
      std::ostringstream s;
      s << "epoch " << epoch << " loss " << loss;
      log(s.str());
    }
  });
}

}  // namespace umbra::training
