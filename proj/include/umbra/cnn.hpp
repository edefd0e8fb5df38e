#pragma once

#include "umbra/container.hpp"
#include "umbra/imageio.hpp"
#include "umbra/raster.hpp"

#include <Eigen/Core>

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace umbra::cnn {

inline constexpr int kSide = imageio::kPatchSize;
inline constexpr int kOutputs = kSide * kSide;
inline constexpr int kConvLayers = 6;

/// conv3x3/w1 -> conv3x3/w1 -> pool2 -> conv3x3/w2 -> conv3x3/w2 -> pool2 -> conv3x3/w3 ->
/// conv3x3/w3 -> fc(8*8*w3 -> 1024) -> logistic. Same padding, ReLU after every conv.
struct Architecture {
  static constexpr const char* kLayout =
      "rgbp32|conv3x3+relu|conv3x3+relu|maxpool2|conv3x3+relu|conv3x3+relu|maxpool2|conv3x3+relu|conv3x3+relu|fc1024|"
      "logistic";
  int width1 = 32;
  int width2 = 64;
  int width3 = 128;

  int conv_in(int layer) const;
  int conv_out(int layer) const;
  /// Spatial side length seen by a conv layer.
  int conv_side(int layer) const;
  int fc_inputs() const { return (kSide / 4) * (kSide / 4) * width3; }
  std::string fingerprint() const;
  friend bool operator==(const Architecture&, const Architecture&) = default;
};

template <typename Scalar>
struct ConvParams {
  Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic> weights;  // out x (in * 9)
  Eigen::Matrix<Scalar, Eigen::Dynamic, 1> bias;
};

/// Parameters of the patch network; also used as the gradient accumulator.
template <typename Scalar>
struct Network {
  using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
  using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

  Architecture arch;
  std::array<ConvParams<Scalar>, kConvLayers> conv;
  Matrix fc_weights;  // 1024 x fc_inputs
  Vector fc_bias;

  Network() : Network(Architecture{}) {}
  explicit Network(const Architecture& a);

  /// He-normal weights (std = sqrt(2 / fan_in)), zero biases.
  void init(std::uint64_t seed);
  void set_zero();
  std::size_t parameter_count() const;
  bool all_finite() const;

  /// Visits every parameter tensor as a flat span, in a fixed order.
  template <typename F>
  void for_each_tensor(F&& f) {
    for (int l = 0; l < kConvLayers; ++l) {
      f("conv" + std::to_string(l + 1) + ".weight", std::span<Scalar>(conv[l].weights.data(), conv[l].weights.size()));
      f("conv" + std::to_string(l + 1) + ".bias", std::span<Scalar>(conv[l].bias.data(), conv[l].bias.size()));
    }
    f(std::string("fc.weight"), std::span<Scalar>(fc_weights.data(), fc_weights.size()));
    f(std::string("fc.bias"), std::span<Scalar>(fc_bias.data(), fc_bias.size()));
  }
  template <typename F>
  void for_each_tensor(F&& f) const {
    const_cast<Network*>(this)->for_each_tensor([&](const std::string& name, std::span<Scalar> s) {
      f(name, std::span<const Scalar>(s.data(), s.size()));
    });
  }

  template <typename T>
  Network<T> cast() const {
    Network<T> out(arch);
    for (int l = 0; l < kConvLayers; ++l) {
      out.conv[l].weights = conv[l].weights.template cast<T>();
      out.conv[l].bias = conv[l].bias.template cast<T>();
    }
    out.fc_weights = fc_weights.template cast<T>();
    out.fc_bias = fc_bias.template cast<T>();
    return out;
  }
};

/// Intermediate values kept for the backward pass.
template <typename Scalar>
struct ForwardTrace {
  using Matrix = typename Network<Scalar>::Matrix;
  int batch = 0;
  // Feature maps are channels x (batch * side * side), one column per pixel.
  std::array<Matrix, kConvLayers + 1> activations;  // [0] input, [l+1] after conv l + ReLU
  std::array<Matrix, kConvLayers> columns;          // im2col of each conv input, rows (ky*3+kx)*C+c
  std::array<Matrix, kConvLayers> kernels;          // conv weights reordered to match `columns`
  std::array<std::vector<int>, 2> pool_argmax;
  std::array<Matrix, 2> pooled;
  Matrix fc_input;  // fc_inputs x batch
  Matrix logits;    // 1024 x batch
};

/// Network input of shape (batch * 1024, 4): one column per channel plane.
template <typename Scalar>
typename Network<Scalar>::Matrix to_input(std::span<const imageio::Patch> patches);

/// Output probabilities, 1024 x batch. Column b is patch b in row-major 32x32 order.
template <typename Scalar>
typename Network<Scalar>::Matrix forward(const Network<Scalar>& net, const typename Network<Scalar>::Matrix& input,
                                         ForwardTrace<Scalar>* trace = nullptr);

/// Probabilities for a subset of output cells only (rows.size() x batch).
template <typename Scalar>
typename Network<Scalar>::Matrix forward_rows(const Network<Scalar>& net, const typename Network<Scalar>::Matrix& input,
                                              std::span<const int> rows);

struct PatchPrediction {
  std::array<double, kOutputs> probs{};
};

using PatchTarget = std::array<std::uint8_t, kOutputs>;

template <typename Scalar>
PatchPrediction forward(const Network<Scalar>& net, const imageio::Patch& patch);

inline constexpr double kLossEpsilon = 1e-7;

/// Mean per-pixel binary negative log-likelihood, probabilities clamped to [eps, 1 - eps].
double loss(const PatchPrediction& pred, const PatchTarget& target);

/// Accumulates d(mean over batch of loss)/d(params) * scale into `grads`. Returns the summed
/// per-sample loss of the batch.
template <typename Scalar>
double backward(const Network<Scalar>& net, const ForwardTrace<Scalar>& trace,
                const typename Network<Scalar>::Matrix& targets, Scalar scale, Network<Scalar>& grads);

/// Hash of every ReLU on/off state and pool argmax; changes when an input crosses a kink.
template <typename Scalar>
std::uint64_t activation_signature(const ForwardTrace<Scalar>& trace);

// ---------------------------------------------------------------------------------------
// Training data.

enum class PatchClass : std::uint8_t { kShadow = 0, kNonShadow = 1, kShadowEdge = 2 };

struct TrainingPatch {
  imageio::Patch patch;
  PatchTarget target{};
  PatchClass cls = PatchClass::kShadow;
};

struct SamplingRule {
  double shadow_min_fraction = 0.70;
  double nonshadow_max_fraction = 0.01;
  double edge_radius = 2.0;
};

/// True when (x, y) lies within `radius` of the midpoint of a 4-adjacent pair of mask pixels
/// with different labels.
bool near_shadow_transition(const Mask& gt, int x, int y, double radius);

/// Per class, up to `per_class` centers drawn at random among qualifying pixels; the
/// non-empty classes are then trimmed to the smallest of them.
std::vector<TrainingPatch> sample_patches(const RgbImage& image, const ProbMap& prior, const Mask& gt, int per_class,
                                          std::uint64_t seed, const SamplingRule& rule = {});

/// Trims each class to the size of the smallest class (per dataset), keeping draw order.
void balance_classes(std::vector<TrainingPatch>& patches);

// ---------------------------------------------------------------------------------------
// Training.

struct TrainingSchedule {
  double learning_rate = 0.01;
  double momentum = 0.9;
  int batch_size = 64;
  int epochs = 10;
  /// Samples per forward/backward chunk inside a mini-batch (memory bound only).
  int chunk = 8;
};

struct CnnModel {
  Network<double> net;
  std::uint64_t seed = 0;
  TrainingSchedule schedule;
  double final_loss = 0.0;
  std::vector<double> epoch_losses;
};

class DivergenceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

CnnModel train_cnn(std::span<const TrainingPatch> data, const TrainingSchedule& schedule, std::uint64_t seed,
                   const Architecture& arch = {}, const std::function<void(int, double)>& on_epoch = {});

struct GradientCheckOptions {
  int parameters = 200;
  double step = 1e-3;
  std::uint64_t seed = 1;
  /// Applied to the analytic gradient before comparison (fault-injection hook).
  std::function<void(Network<double>&)> tamper;
};

struct GradientCheckReport {
  double max_relative_error = 0.0;
  int checked = 0;
  int skipped_at_kinks = 0;
  double analytic_norm = 0.0;
};

/// Relative error |a - n| / max(|a|, |n|, 1e-8) of the analytic gradient against central
/// differences. Parameters whose perturbation flips a ReLU or pooling decision are resampled.
GradientCheckReport gradient_check(const Network<double>& net, const imageio::Patch& patch, const PatchTarget& target,
                                   const GradientCheckOptions& options = {});

/// Analytic gradient of the single-patch loss.
Network<double> gradient(const Network<double>& net, const imageio::Patch& patch, const PatchTarget& target);

io::Container to_container(const CnnModel& model);
CnnModel cnn_from_container(const io::Container& c);
void save_cnn(const CnnModel& model, const std::filesystem::path& path);
CnnModel load_cnn(const std::filesystem::path& path);

}  // namespace umbra::cnn
