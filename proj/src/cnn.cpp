#include "umbra/cnn.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

namespace umbra::cnn {

int Architecture::conv_in(int layer) const {
  switch (layer) {
    case 0: return imageio::kPatchChannels;
    case 1: return width1;
    case 2: return width1;
    case 3: return width2;
    case 4: return width2;
    case 5: return width3;
    default: throw std::out_of_range("conv layer");
  }
}

int Architecture::conv_out(int layer) const {
  static constexpr int kGroup[kConvLayers] = {0, 0, 1, 1, 2, 2};
  const int g = kGroup[layer];
  return g == 0 ? width1 : g == 1 ? width2 : width3;
}

int Architecture::conv_side(int layer) const { return kSide >> (layer / 2); }

std::string Architecture::fingerprint() const {
  return std::string(kLayout) + "@" + std::to_string(width1) + "/" + std::to_string(width2) + "/" +
         std::to_string(width3);
}

template <typename Scalar>
Network<Scalar>::Network(const Architecture& a) : arch(a) {
  if (a.width1 <= 0 || a.width2 <= 0 || a.width3 <= 0) throw std::invalid_argument("Architecture: widths must be positive");
  for (int l = 0; l < kConvLayers; ++l) {
    conv[l].weights = Matrix::Zero(a.conv_out(l), a.conv_in(l) * 9);
    conv[l].bias = Vector::Zero(a.conv_out(l));
  }
  fc_weights = Matrix::Zero(kOutputs, a.fc_inputs());
  fc_bias = Vector::Zero(kOutputs);
}

template <typename Scalar>
void Network<Scalar>::init(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  auto fill = [&](Matrix& m, int fan_in) {
    std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / fan_in));
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<Scalar>(dist(rng));
  };
  for (int l = 0; l < kConvLayers; ++l) {
    fill(conv[l].weights, arch.conv_in(l) * 9);
    conv[l].bias.setZero();
  }
  fill(fc_weights, arch.fc_inputs());
  fc_bias.setZero();
}

template <typename Scalar>
void Network<Scalar>::set_zero() {
  for_each_tensor([](const std::string&, std::span<Scalar> t) { std::fill(t.begin(), t.end(), Scalar(0)); });
}

template <typename Scalar>
std::size_t Network<Scalar>::parameter_count() const {
  std::size_t n = 0;
  for_each_tensor([&](const std::string&, std::span<const Scalar> t) { n += t.size(); });
  return n;
}

template <typename Scalar>
bool Network<Scalar>::all_finite() const {
  bool ok = true;
  for_each_tensor([&](const std::string&, std::span<const Scalar> t) {
    for (Scalar v : t) ok = ok && std::isfinite(static_cast<double>(v));
  });
  return ok;
}

namespace {

template <typename Scalar>
using MatrixT = typename Network<Scalar>::Matrix;

// Conv weights are stored with column c*9+k; the pixel-major im2col below uses k*C+c.
template <typename Scalar>
void reorder_kernel(const MatrixT<Scalar>& w, Eigen::Index channels, MatrixT<Scalar>& out) {
  out.resize(w.rows(), w.cols());
  for (Eigen::Index c = 0; c < channels; ++c)
    for (int k = 0; k < 9; ++k) out.col(k * channels + c) = w.col(c * 9 + k);
}

template <typename Scalar>
void add_reordered(const MatrixT<Scalar>& g, Eigen::Index channels, MatrixT<Scalar>& w) {
  for (Eigen::Index c = 0; c < channels; ++c)
    for (int k = 0; k < 9; ++k) w.col(c * 9 + k) += g.col(k * channels + c);
}

// im2col for a 3x3 same-padded convolution: (9*C) x (batch*S*S).
template <typename Scalar>
void im2col(const MatrixT<Scalar>& in, int side, int batch, MatrixT<Scalar>& cols) {
  const Eigen::Index channels = in.rows();
  const int plane = side * side;
  cols.resize(channels * 9, static_cast<Eigen::Index>(batch) * plane);
  for (int b = 0; b < batch; ++b) {
    for (int y = 0; y < side; ++y) {
      for (int x = 0; x < side; ++x) {
        Scalar* dst = cols.col(b * plane + y * side + x).data();
        for (int ky = 0; ky < 3; ++ky) {
          const int sy = y + ky - 1;
          for (int kx = 0; kx < 3; ++kx, dst += channels) {
            const int sx = x + kx - 1;
            if (sy < 0 || sy >= side || sx < 0 || sx >= side)
              std::fill_n(dst, channels, Scalar(0));
            else
              std::copy_n(in.col(b * plane + sy * side + sx).data(), channels, dst);
          }
        }
      }
    }
  }
}

template <typename Scalar>
void col2im_add(const MatrixT<Scalar>& dcols, int side, int batch, MatrixT<Scalar>& din) {
  const Eigen::Index channels = din.rows();
  const int plane = side * side;
  for (int b = 0; b < batch; ++b) {
    for (int y = 0; y < side; ++y) {
      for (int x = 0; x < side; ++x) {
        const Scalar* src = dcols.col(b * plane + y * side + x).data();
        for (int ky = 0; ky < 3; ++ky) {
          const int sy = y + ky - 1;
          for (int kx = 0; kx < 3; ++kx, src += channels) {
            const int sx = x + kx - 1;
            if (sy < 0 || sy >= side || sx < 0 || sx >= side) continue;
            din.col(b * plane + sy * side + sx) += Eigen::Map<const Eigen::Matrix<Scalar, Eigen::Dynamic, 1>>(src, channels);
          }
        }
      }
    }
  }
}

// argmax holds, per pooled pixel and channel, the source pixel index.
template <typename Scalar>
void maxpool(const MatrixT<Scalar>& in, int side, int batch, MatrixT<Scalar>& out, std::vector<int>& argmax) {
  const int half = side / 2;
  const Eigen::Index channels = in.rows();
  out.resize(channels, static_cast<Eigen::Index>(batch) * half * half);
  argmax.resize(static_cast<std::size_t>(out.size()));
  for (int b = 0; b < batch; ++b) {
    for (int y = 0; y < half; ++y) {
      for (int x = 0; x < half; ++x) {
        const int top = b * side * side + (2 * y) * side + 2 * x;
        const int o = b * half * half + y * half + x;
        for (Eigen::Index c = 0; c < channels; ++c) {
          int best = top;
          for (int k : {top + 1, top + side, top + side + 1})
            if (in(c, k) > in(c, best)) best = k;
          out(c, o) = in(c, best);
          argmax[static_cast<std::size_t>(o * channels + c)] = best;
        }
      }
    }
  }
}

// Runs the convolutional trunk, leaving every intermediate in `trace`; trace.fc_input holds
// the fc input (fc_inputs x batch). Buffers are reused across calls of the same shape.
template <typename Scalar>
void trunk(const Network<Scalar>& net, const MatrixT<Scalar>& input, ForwardTrace<Scalar>& trace) {
  if (input.cols() != imageio::kPatchChannels || input.rows() % kOutputs != 0)
    throw std::invalid_argument("cnn forward: input must be (batch*1024) x 4");
  const int batch = static_cast<int>(input.rows() / kOutputs);
  trace.batch = batch;
  trace.activations[0] = input.transpose();
  const MatrixT<Scalar>* act = &trace.activations[0];
  for (int l = 0; l < kConvLayers; ++l) {
    const int side = net.arch.conv_side(l);
    const auto i = static_cast<std::size_t>(l);
    auto& cols = trace.columns[i];
    auto& out = trace.activations[i + 1];
    im2col<Scalar>(*act, side, batch, cols);
    reorder_kernel<Scalar>(net.conv[l].weights, act->rows(), trace.kernels[i]);
    out.noalias() = trace.kernels[i] * cols;
    out.colwise() += net.conv[l].bias;
    out = out.cwiseMax(Scalar(0));
    if (l == 1 || l == 3) {
      auto& pooled = trace.pooled[i / 2];
      maxpool<Scalar>(out, side, batch, pooled, trace.pool_argmax[i / 2]);
      act = &pooled;
    } else {
      act = &out;
    }
  }
  constexpr int plane = (kSide / 4) * (kSide / 4);
  trace.fc_input.resize(net.arch.fc_inputs(), batch);
  for (int b = 0; b < batch; ++b)
    Eigen::Map<MatrixT<Scalar>>(trace.fc_input.col(b).data(), plane, act->rows()) =
        act->middleCols(b * plane, plane).transpose();
}

template <typename Scalar>
ForwardTrace<Scalar>& scratch_trace() {
  thread_local ForwardTrace<Scalar> trace;
  return trace;
}

template <typename Scalar>
Scalar logistic(Scalar z) {
  return z >= 0 ? Scalar(1) / (Scalar(1) + std::exp(-z)) : std::exp(z) / (Scalar(1) + std::exp(z));
}

}  // namespace

template <typename Scalar>
typename Network<Scalar>::Matrix to_input(std::span<const imageio::Patch> patches) {
  MatrixT<Scalar> in(static_cast<Eigen::Index>(patches.size()) * kOutputs, imageio::kPatchChannels);
  for (std::size_t b = 0; b < patches.size(); ++b)
    for (int c = 0; c < imageio::kPatchChannels; ++c)
      for (int k = 0; k < kOutputs; ++k)
        in(static_cast<Eigen::Index>(b) * kOutputs + k, c) =
            static_cast<Scalar>(patches[b].values[static_cast<std::size_t>(c * kOutputs + k)]);
  return in;
}

template <typename Scalar>
typename Network<Scalar>::Matrix forward(const Network<Scalar>& net, const typename Network<Scalar>::Matrix& input,
                                         ForwardTrace<Scalar>* trace) {
  ForwardTrace<Scalar>& t = trace ? *trace : scratch_trace<Scalar>();
  trunk(net, input, t);
  t.logits.noalias() = net.fc_weights * t.fc_input;
  t.logits.colwise() += net.fc_bias;
  return t.logits.unaryExpr([](Scalar z) { return logistic(z); });
}

template <typename Scalar>
typename Network<Scalar>::Matrix forward_rows(const Network<Scalar>& net, const typename Network<Scalar>::Matrix& input,
                                              std::span<const int> rows) {
  ForwardTrace<Scalar>& t = scratch_trace<Scalar>();
  trunk(net, input, t);
  MatrixT<Scalar> w(static_cast<Eigen::Index>(rows.size()), net.fc_weights.cols());
  typename Network<Scalar>::Vector bias(static_cast<Eigen::Index>(rows.size()));
  for (std::size_t r = 0; r < rows.size(); ++r) {
    const int row = rows[r];
    if (row < 0 || row >= kOutputs) throw std::out_of_range("forward_rows: output row");
    w.row(static_cast<Eigen::Index>(r)) = net.fc_weights.row(row);
    bias(static_cast<Eigen::Index>(r)) = net.fc_bias(row);
  }
  MatrixT<Scalar> z = w * t.fc_input;
  z.colwise() += bias;
  return z.unaryExpr([](Scalar v) { return logistic(v); });
}

template <typename Scalar>
PatchPrediction forward(const Network<Scalar>& net, const imageio::Patch& patch) {
  const auto probs = forward(net, to_input<Scalar>(std::span(&patch, 1)));
  PatchPrediction p;
  for (int k = 0; k < kOutputs; ++k) p.probs[static_cast<std::size_t>(k)] = static_cast<double>(probs(k, 0));
  return p;
}

double loss(const PatchPrediction& pred, const PatchTarget& target) {
  double acc = 0;
  for (int k = 0; k < kOutputs; ++k) {
    const double q = std::clamp(pred.probs[static_cast<std::size_t>(k)], kLossEpsilon, 1.0 - kLossEpsilon);
    acc += target[static_cast<std::size_t>(k)] ? std::log(q) : std::log(1.0 - q);
  }
  return -acc / kOutputs;
}

template <typename Scalar>
double backward(const Network<Scalar>& net, const ForwardTrace<Scalar>& trace,
                const typename Network<Scalar>::Matrix& targets, Scalar scale, Network<Scalar>& grads) {
  const int batch = trace.batch;
  if (targets.rows() != kOutputs || targets.cols() != batch) throw std::invalid_argument("backward: target shape");

  // Loss and d loss / d logits (sigmoid + NLL combined).
  double total = 0;
  MatrixT<Scalar> dlogits(kOutputs, batch);
  for (int b = 0; b < batch; ++b) {
    for (int k = 0; k < kOutputs; ++k) {
      const Scalar z = trace.logits(k, b);
      const Scalar q = logistic(z);
      const double qc = std::clamp(static_cast<double>(q), kLossEpsilon, 1.0 - kLossEpsilon);
      const Scalar t = targets(k, b);
      total -= t > Scalar(0.5) ? std::log(qc) : std::log(1.0 - qc);
      dlogits(k, b) = (q - t) * scale / Scalar(kOutputs);
    }
  }
  total /= kOutputs;

  grads.fc_weights.noalias() += dlogits * trace.fc_input.transpose();
  grads.fc_bias += dlogits.rowwise().sum();

  // Gradients w.r.t. each conv output (dout) and each pooled map (dpool), reused per thread.
  thread_local std::array<MatrixT<Scalar>, kConvLayers> dout;
  thread_local std::array<MatrixT<Scalar>, 2> dpool;
  thread_local MatrixT<Scalar> dx, dcols, dkernel;
  dx.noalias() = net.fc_weights.transpose() * dlogits;

  constexpr int plane = (kSide / 4) * (kSide / 4);
  const int w3 = net.arch.width3;
  auto& top = dout[kConvLayers - 1];
  top.resize(w3, static_cast<Eigen::Index>(batch) * plane);
  for (int b = 0; b < batch; ++b)
    top.middleCols(b * plane, plane) = Eigen::Map<const MatrixT<Scalar>>(dx.col(b).data(), plane, w3).transpose();

  for (int l = kConvLayers - 1; l >= 0; --l) {
    const int side = net.arch.conv_side(l);
    const auto i = static_cast<std::size_t>(l);
    auto& d = dout[i];
    if (l == 1 || l == 3) {
      // Route the pooled gradient back to the argmax positions.
      const auto& src = dpool[i / 2];
      const auto& argmax = trace.pool_argmax[i / 2];
      d.setZero(src.rows(), static_cast<Eigen::Index>(batch) * side * side);
      for (Eigen::Index o = 0; o < src.cols(); ++o)
        for (Eigen::Index c = 0; c < src.rows(); ++c)
          d(c, argmax[static_cast<std::size_t>(o * src.rows() + c)]) += src(c, o);
    }
    const auto& out = trace.activations[i + 1];
    d = (out.array() > Scalar(0)).select(d, Scalar(0));

    const Eigen::Index channels = net.arch.conv_in(l);
    dkernel.noalias() = d * trace.columns[i].transpose();
    add_reordered<Scalar>(dkernel, channels, grads.conv[l].weights);
    grads.conv[l].bias += d.rowwise().sum();
    if (l == 0) break;
    dcols.noalias() = trace.kernels[i].transpose() * d;
    auto& din = (l == 2 || l == 4) ? dpool[static_cast<std::size_t>((l - 1) / 2)] : dout[i - 1];
    din.setZero(channels, static_cast<Eigen::Index>(batch) * side * side);
    col2im_add<Scalar>(dcols, side, batch, din);
  }
  return total;
}

template <typename Scalar>
std::uint64_t activation_signature(const ForwardTrace<Scalar>& trace) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto mix = [&](std::uint64_t v) {
    h ^= v;
    h *= 0x100000001b3ULL;
  };
  for (std::size_t l = 1; l < trace.activations.size(); ++l) {
    const auto& a = trace.activations[l];
    for (Eigen::Index i = 0; i < a.size(); ++i) mix(a.data()[i] > Scalar(0) ? 1u : 2u);
  }
  for (const auto& am : trace.pool_argmax)
    for (int v : am) mix(static_cast<std::uint64_t>(v));
  return h;
}

// ---------------------------------------------------------------------------------------

bool near_shadow_transition(const Mask& gt, int x, int y, double radius) {
  const int reach = static_cast<int>(std::ceil(radius)) + 1;
  const double r2 = radius * radius;
  for (int qy = y - reach; qy <= y + reach; ++qy) {
    for (int qx = x - reach; qx <= x + reach; ++qx) {
      if (!gt.contains(qx, qy)) continue;
      const auto v = gt(qx, qy);
      if (gt.contains(qx + 1, qy) && gt(qx + 1, qy) != v) {
        const double dx = qx + 0.5 - x, dy = qy - y;
        if (dx * dx + dy * dy <= r2) return true;
      }
      if (gt.contains(qx, qy + 1) && gt(qx, qy + 1) != v) {
        const double dx = qx - x, dy = qy + 0.5 - y;
        if (dx * dx + dy * dy <= r2) return true;
      }
    }
  }
  return false;
}

namespace {

TrainingPatch make_training_patch(const RgbImage& image, const ProbMap& prior, const Mask& gt, Pixel center,
                                  PatchClass cls) {
  TrainingPatch tp;
  tp.patch = imageio::extract_patch(image, prior, center);
  tp.cls = cls;
  for (int r = 0; r < kSide; ++r)
    for (int c = 0; c < kSide; ++c)
      tp.target[static_cast<std::size_t>(r * kSide + c)] = gt(tp.patch.origin.x + c, tp.patch.origin.y + r) ? 1 : 0;
  return tp;
}

}  // namespace

std::vector<TrainingPatch> sample_patches(const RgbImage& image, const ProbMap& prior, const Mask& gt, int per_class,
                                          std::uint64_t seed, const SamplingRule& rule) {
  require_same_size(image, prior, "sample_patches");
  require_same_size(image, gt, "sample_patches");
  if (per_class < 1) throw std::invalid_argument("sample_patches: per_class must be >= 1");
  const int w = image.width(), h = image.height();
  if (w < kSide || h < kSide) throw std::invalid_argument("sample_patches: image smaller than 32x32");

  // Summed-area table of the mask.
  std::vector<long> sat(static_cast<std::size_t>(w + 1) * (h + 1), 0);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      sat[static_cast<std::size_t>(y + 1) * (w + 1) + x + 1] = gt(x, y) + sat[static_cast<std::size_t>(y) * (w + 1) + x + 1] +
                                                              sat[static_cast<std::size_t>(y + 1) * (w + 1) + x] -
                                                              sat[static_cast<std::size_t>(y) * (w + 1) + x];
  auto window_sum = [&](Pixel o) {
    auto at = [&](int x, int y) { return sat[static_cast<std::size_t>(y) * (w + 1) + x]; };
    return at(o.x + kSide, o.y + kSide) - at(o.x, o.y + kSide) - at(o.x + kSide, o.y) + at(o.x, o.y);
  };

  std::array<std::vector<Pixel>, 3> candidates;
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const double frac = static_cast<double>(window_sum(imageio::patch_origin(w, h, {x, y}))) / kOutputs;
      if (gt(x, y) && frac >= rule.shadow_min_fraction) candidates[0].push_back({x, y});
      if (frac <= rule.nonshadow_max_fraction) candidates[1].push_back({x, y});
      if (near_shadow_transition(gt, x, y, rule.edge_radius)) candidates[2].push_back({x, y});
    }
  }

  std::mt19937_64 rng(seed);
  std::size_t keep = std::numeric_limits<std::size_t>::max();
  for (auto& c : candidates) {
    const std::size_t n = std::min(c.size(), static_cast<std::size_t>(per_class));
    for (std::size_t i = 0; i < n; ++i) {
      std::uniform_int_distribution<std::size_t> pick(i, c.size() - 1);
      std::swap(c[i], c[pick(rng)]);
    }
    c.resize(n);
    if (n > 0) keep = std::min(keep, n);
  }

  std::vector<TrainingPatch> out;
  for (int k = 0; k < 3; ++k) {
    const auto n = std::min(keep, candidates[static_cast<std::size_t>(k)].size());
    for (std::size_t i = 0; i < n; ++i)
      out.push_back(make_training_patch(image, prior, gt, candidates[static_cast<std::size_t>(k)][i],
                                        static_cast<PatchClass>(k)));
  }
  return out;
}

void balance_classes(std::vector<TrainingPatch>& patches) {
  std::array<std::size_t, 3> count{};
  for (const auto& p : patches) ++count[static_cast<std::size_t>(p.cls)];
  std::size_t keep = std::numeric_limits<std::size_t>::max();
  for (auto c : count)
    if (c > 0) keep = std::min(keep, c);
  std::array<std::size_t, 3> taken{};
  std::vector<TrainingPatch> out;
  for (auto& p : patches)
    if (taken[static_cast<std::size_t>(p.cls)]++ < keep) out.push_back(std::move(p));
  patches = std::move(out);
}

// ---------------------------------------------------------------------------------------

namespace {

Eigen::MatrixXd to_targets(std::span<const TrainingPatch* const> batch) {
  Eigen::MatrixXd t(kOutputs, static_cast<Eigen::Index>(batch.size()));
  for (std::size_t b = 0; b < batch.size(); ++b)
    for (int k = 0; k < kOutputs; ++k) t(k, static_cast<Eigen::Index>(b)) = batch[b]->target[static_cast<std::size_t>(k)];
  return t;
}

}  // namespace

CnnModel train_cnn(std::span<const TrainingPatch> data, const TrainingSchedule& schedule, std::uint64_t seed,
                   const Architecture& arch, const std::function<void(int, double)>& on_epoch) {
  if (data.empty()) throw std::invalid_argument("train_cnn: no training patches");
  if (schedule.batch_size < 1 || schedule.epochs < 0 || schedule.chunk < 1)
    throw std::invalid_argument("train_cnn: invalid schedule");
  CnnModel model{Network<double>(arch), seed, schedule, 0.0, {}};
  auto& net = model.net;
  net.init(seed);
  Network<double> velocity(arch), grads(arch);

  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(seed ^ 0x9e3779b97f4a7c15ULL);

  ForwardTrace<double> trace;
  for (int epoch = 0; epoch < schedule.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double epoch_loss = 0;
    int batch_index = 0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(schedule.batch_size), ++batch_index) {
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(schedule.batch_size));
      const double scale = 1.0 / static_cast<double>(end - start);
      grads.set_zero();
      double batch_loss = 0;
      for (std::size_t c0 = start; c0 < end; c0 += static_cast<std::size_t>(schedule.chunk)) {
        const std::size_t c1 = std::min(end, c0 + static_cast<std::size_t>(schedule.chunk));
        std::vector<imageio::Patch> patches;
        std::vector<const TrainingPatch*> refs;
        for (std::size_t i = c0; i < c1; ++i) {
          patches.push_back(data[order[i]].patch);
          refs.push_back(&data[order[i]]);
        }
        forward(net, to_input<double>(patches), &trace);
        batch_loss += backward(net, trace, to_targets(refs), scale, grads);
      }
      if (!std::isfinite(batch_loss) || !grads.all_finite())
        throw DivergenceError("train_cnn: loss diverged at epoch " + std::to_string(epoch + 1) + ", batch " +
                              std::to_string(batch_index + 1));
      epoch_loss += batch_loss;
      // v <- mu v - lr g ; w <- w + v
      std::vector<std::span<double>> g, v;
      grads.for_each_tensor([&](const std::string&, std::span<double> t) { g.push_back(t); });
      velocity.for_each_tensor([&](const std::string&, std::span<double> t) { v.push_back(t); });
      std::size_t k = 0;
      net.for_each_tensor([&](const std::string&, std::span<double> w) {
        for (std::size_t i = 0; i < w.size(); ++i) {
          v[k][i] = schedule.momentum * v[k][i] - schedule.learning_rate * g[k][i];
          w[i] += v[k][i];
        }
        ++k;
      });
    }
    epoch_loss /= static_cast<double>(data.size());
    if (!std::isfinite(epoch_loss))
      throw DivergenceError("train_cnn: loss diverged at epoch " + std::to_string(epoch + 1));
    model.epoch_losses.push_back(epoch_loss);
    model.final_loss = epoch_loss;
    if (on_epoch) on_epoch(epoch + 1, epoch_loss);
  }
  return model;
}

Network<double> gradient(const Network<double>& net, const imageio::Patch& patch, const PatchTarget& target) {
  ForwardTrace<double> trace;
  forward(net, to_input<double>(std::span(&patch, 1)), &trace);
  Eigen::MatrixXd t(kOutputs, 1);
  for (int k = 0; k < kOutputs; ++k) t(k, 0) = target[static_cast<std::size_t>(k)];
  Network<double> g(net.arch);
  backward(net, trace, t, 1.0, g);
  return g;
}

GradientCheckReport gradient_check(const Network<double>& net, const imageio::Patch& patch, const PatchTarget& target,
                                   const GradientCheckOptions& options) {
  Network<double> probe = net;
  Network<double> analytic = gradient(net, patch, target);
  if (options.tamper) options.tamper(analytic);

  const Eigen::MatrixXd input = to_input<double>(std::span(&patch, 1));
  ForwardTrace<double> trace;
  auto evaluate = [&](std::uint64_t& signature) {
    const Eigen::MatrixXd q = forward(probe, input, &trace);
    signature = activation_signature(trace);
    PatchPrediction p;
    for (int k = 0; k < kOutputs; ++k) p.probs[static_cast<std::size_t>(k)] = q(k, 0);
    return loss(p, target);
  };
  std::uint64_t base = 0;
  evaluate(base);

  std::vector<std::span<double>> params, grads;
  probe.for_each_tensor([&](const std::string&, std::span<double> t) { params.push_back(t); });
  analytic.for_each_tensor([&](const std::string&, std::span<double> t) { grads.push_back(t); });

  GradientCheckReport report;
  double norm2 = 0;
  for (const auto& g : grads)
    for (double v : g) norm2 += v * v;
  report.analytic_norm = std::sqrt(norm2);

  std::mt19937_64 rng(options.seed);
  const int quota = (options.parameters + static_cast<int>(params.size()) - 1) / static_cast<int>(params.size());
  for (std::size_t t = 0; t < params.size(); ++t) {
    std::uniform_int_distribution<std::size_t> pick(0, params[t].size() - 1);
    int done = 0;
    for (int attempt = 0; done < quota && attempt < 50 * quota; ++attempt) {
      const std::size_t i = pick(rng);
      double& w = params[t][i];
      const double saved = w;
      std::uint64_t sp = 0, sm = 0;
      w = saved + options.step;
      const double lp = evaluate(sp);
      w = saved - options.step;
      const double lm = evaluate(sm);
      w = saved;
      if (sp != base || sm != base) {
        ++report.skipped_at_kinks;
        continue;
      }
      const double numeric = (lp - lm) / (2 * options.step);
      const double a = grads[t][i];
      const double rel = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-8});
      report.max_relative_error = std::max(report.max_relative_error, rel);
      ++report.checked;
      ++done;
    }
  }
  return report;
}

// ---------------------------------------------------------------------------------------

io::Container to_container(const CnnModel& model) {
  io::Container c;
  io::ByteWriter meta;
  meta.str("umbra-cnn");
  meta.str(Architecture::kLayout);
  meta.u64(static_cast<std::uint64_t>(model.net.arch.width1));
  meta.u64(static_cast<std::uint64_t>(model.net.arch.width2));
  meta.u64(static_cast<std::uint64_t>(model.net.arch.width3));
  meta.u64(model.seed);
  meta.f64(model.schedule.learning_rate);
  meta.f64(model.schedule.momentum);
  meta.u64(static_cast<std::uint64_t>(model.schedule.batch_size));
  meta.u64(static_cast<std::uint64_t>(model.schedule.epochs));
  meta.f64(model.final_loss);
  meta.f64s(model.epoch_losses);
  c.add("meta", meta.take());

  io::ByteWriter weights;
  model.net.for_each_tensor([&](const std::string& name, std::span<const double> t) {
    weights.str(name);
    weights.f64s(t);
  });
  c.add("weights", weights.take());
  return c;
}

CnnModel cnn_from_container(const io::Container& c) {
  io::ByteReader meta(c.get("meta"), "cnn meta");
  if (meta.str() != "umbra-cnn") throw io::FormatError("not a CNN model file");
  const std::string layout = meta.str();
  if (layout != Architecture::kLayout)
    throw io::FormatError("CNN architecture fingerprint mismatch: file has '" + layout + "'");
  Architecture arch;
  arch.width1 = static_cast<int>(meta.u64());
  arch.width2 = static_cast<int>(meta.u64());
  arch.width3 = static_cast<int>(meta.u64());
  CnnModel model{Network<double>(arch), 0, {}, 0.0, {}};
  model.seed = meta.u64();
  model.schedule.learning_rate = meta.f64();
  model.schedule.momentum = meta.f64();
  model.schedule.batch_size = static_cast<int>(meta.u64());
  model.schedule.epochs = static_cast<int>(meta.u64());
  model.final_loss = meta.f64();
  model.epoch_losses = meta.f64s();
  meta.expect_done();

  io::ByteReader weights(c.get("weights"), "cnn weights");
  model.net.for_each_tensor([&](const std::string& name, std::span<double> t) {
    const std::string stored = weights.str();
    if (stored != name) throw io::FormatError("CNN weights: expected tensor '" + name + "', found '" + stored + "'");
    const auto values = weights.f64s();
    if (values.size() != t.size())
      throw io::FormatError("CNN weights: tensor '" + name + "' has " + std::to_string(values.size()) +
                            " values, architecture expects " + std::to_string(t.size()));
    std::copy(values.begin(), values.end(), t.begin());
  });
  weights.expect_done();
  if (!model.net.all_finite()) throw io::FormatError("CNN weights: non-finite parameter");
  return model;
}

void save_cnn(const CnnModel& model, const std::filesystem::path& path) { to_container(model).save(path); }

CnnModel load_cnn(const std::filesystem::path& path) { return cnn_from_container(io::Container::load(path)); }

#define UMBRA_INSTANTIATE(T)                                                                                        \
  template struct Network<T>;                                                                                      \
  template Network<T>::Matrix to_input<T>(std::span<const imageio::Patch>);                                         \
  template Network<T>::Matrix forward<T>(const Network<T>&, const Network<T>::Matrix&, ForwardTrace<T>*);           \
  template Network<T>::Matrix forward_rows<T>(const Network<T>&, const Network<T>::Matrix&, std::span<const int>); \
  template PatchPrediction forward<T>(const Network<T>&, const imageio::Patch&);                                    \
  template double backward<T>(const Network<T>&, const ForwardTrace<T>&, const Network<T>::Matrix&, T, Network<T>&); \
  template std::uint64_t activation_signature<T>(const ForwardTrace<T>&);

UMBRA_INSTANTIATE(float)
UMBRA_INSTANTIATE(double)

#undef UMBRA_INSTANTIATE

}  // namespace umbra::cnn
