#pragma once

#include "umbra/cnn.hpp"
#include "umbra/evaluation.hpp"
#include "umbra/features.hpp"
#include "umbra/prior.hpp"
#include "umbra/segmentation.hpp"

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

namespace umbra::training {

/// An image with its mask, Lab conversion and segmentation.
struct PreparedImage {
  std::string name;
  RgbImage image;
  Mask truth;
  LabImage lab;
  seg::Segmentation segmentation;
};

using Log = std::function<void(const std::string&)>;

PreparedImage prepare(std::string name, RgbImage image, Mask truth, const seg::MeanShiftParams& params = {});
std::vector<PreparedImage> prepare(const std::vector<eval::Sample>& samples, const seg::MeanShiftParams& params = {},
                                   const Log& log = {});

/// FNV-1a over every image and mask, in order.
std::uint64_t dataset_fingerprint(std::span<const PreparedImage> images);

struct PriorOptions {
  features::TextonOptions textons;
  prior::SvmOptions svm;
};

/// Texton dictionary over all training images, region features and majority labels, then
/// the calibrated SVM.
prior::SvmModel train_prior(std::span<const PreparedImage> images, const PriorOptions& options = {},
                            const Log& log = {});

struct CnnOptions {
  int patches_per_class = 12;
  cnn::SamplingRule sampling;
  cnn::TrainingSchedule schedule;
  cnn::Architecture arch;
  std::uint64_t seed = 1;
};

/// Patch sampling on every image (using the prior as fourth channel), per-dataset class
/// balancing.
std::vector<cnn::TrainingPatch> collect_patches(std::span<const PreparedImage> images, const prior::SvmModel& svm,
                                                const CnnOptions& options);

cnn::CnnModel train_patch_cnn(std::span<const PreparedImage> images, const prior::SvmModel& svm,
                              const CnnOptions& options = {}, const Log& log = {});

}  // namespace umbra::training
