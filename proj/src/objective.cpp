#include "muonseg/objective.hpp"

#include <cmath>

#include <nlohmann/json.hpp>

#include "muonseg/error.hpp"

namespace muonseg {

void LossConfig::validate() const {
  if (!(gamma >= 0.0)) throw ValidationError("loss gamma must be >= 0");
  if (!(lambda_dice >= 0.0)) throw ValidationError("lambda_dice must be >= 0");
  for (double w : class_weights) {
    if (!(w > 0.0)) throw ValidationError("class weights must be positive");
  }
  for (double w : aux_weights) {
    if (!(w >= 0.0)) throw ValidationError("aux weights must be >= 0");
  }
  if (!(dice_epsilon > 0.0)) throw ValidationError("dice_epsilon must be positive");
}

void to_json(nlohmann::json& j, const LossConfig& c) {
  j = nlohmann::json{{"gamma", c.gamma},
                     {"lambda_dice", c.lambda_dice},
                     {"class_weights", c.class_weights},
                     {"aux_weights", c.aux_weights},
                     {"dice_epsilon", c.dice_epsilon}};
}

void from_json(const nlohmann::json& j, LossConfig& c) {
  c = LossConfig{};
  c.gamma = j.value("gamma", c.gamma);
  c.lambda_dice = j.value("lambda_dice", c.lambda_dice);
  c.class_weights = j.value("class_weights", c.class_weights);
  c.aux_weights = j.value("aux_weights", c.aux_weights);
  c.dice_epsilon = j.value("dice_epsilon", c.dice_epsilon);
}

namespace {

struct Layout {
  int n, classes;
  std::size_t voxels;  // per sample
};

template <typename T>
Layout check_inputs(const Tensor<T>& logits, std::span<const std::uint8_t> labels) {
  if (logits.rank() < 3) throw ValidationError("loss: logits must be [N, C, ...]");
  const Layout l{logits.dim(0), logits.dim(1),
                 logits.size() / (static_cast<std::size_t>(logits.dim(0)) * logits.dim(1))};
  if (l.classes != kNumClasses) throw ValidationError("loss: logits must have 6 class channels");
  if (labels.size() != static_cast<std::size_t>(l.n) * l.voxels) {
    throw ValidationError("loss: label count " + std::to_string(labels.size()) +
                          " does not match logits " + shape_string(logits.shape()));
  }
  for (std::uint8_t c : labels) {
    if (c >= kNumClasses) throw ValidationError("label out of range: " + std::to_string(c));
  }
  return l;
}

// Channel softmax at every voxel, in double.
template <typename T>
std::vector<double> channel_softmax(const Tensor<T>& logits, const Layout& l) {
  std::vector<double> p(logits.size());
  for (int n = 0; n < l.n; ++n) {
    const std::size_t base = static_cast<std::size_t>(n) * l.classes * l.voxels;
    for (std::size_t v = 0; v < l.voxels; ++v) {
      double mx = -INFINITY;
      for (int c = 0; c < l.classes; ++c) mx = std::max(mx, static_cast<double>(logits[base + c * l.voxels + v]));
      double s = 0.0;
      for (int c = 0; c < l.classes; ++c) {
        const double e = std::exp(logits[base + c * l.voxels + v] - mx);
        p[base + c * l.voxels + v] = e;
        s += e;
      }
      for (int c = 0; c < l.classes; ++c) p[base + c * l.voxels + v] /= s;
    }
  }
  return p;
}

// Adds d/dz of a loss to grad given dL/dp at every voxel and class.
template <typename T>
void softmax_backward(const std::vector<double>& p, const std::vector<double>& dp, const Layout& l,
                      double upstream, Tensor<T>& grad) {
  for (int n = 0; n < l.n; ++n) {
    const std::size_t base = static_cast<std::size_t>(n) * l.classes * l.voxels;
    for (std::size_t v = 0; v < l.voxels; ++v) {
      double dot = 0.0;
      for (int c = 0; c < l.classes; ++c) dot += p[base + c * l.voxels + v] * dp[base + c * l.voxels + v];
      for (int c = 0; c < l.classes; ++c) {
        const std::size_t i = base + c * l.voxels + v;
        grad[i] += static_cast<T>(upstream * p[i] * (dp[i] - dot));
      }
    }
  }
}

}  // namespace

template <typename T>
Var<T> focal_loss(Var<T> logits, std::span<const std::uint8_t> labels, const LossConfig& config) {
  const Tensor<T>& z = logits.value();
  const Layout l = check_inputs(z, labels);
  std::vector<double> p = channel_softmax(z, l);
  const double m = static_cast<double>(l.n) * static_cast<double>(l.voxels);
  const double gamma = config.gamma;
  double loss = 0.0;
  // dL/dp_true for each voxel, stored in class layout.
  std::vector<double> dp(p.size(), 0.0);
  for (int n = 0; n < l.n; ++n) {
    const std::size_t base = static_cast<std::size_t>(n) * l.classes * l.voxels;
    for (std::size_t v = 0; v < l.voxels; ++v) {
      const int c = labels[static_cast<std::size_t>(n) * l.voxels + v];
      const std::size_t i = base + c * l.voxels + v;
      const double pt = p[i];
      const double w = config.class_weights[static_cast<std::size_t>(c)];
      const bool clamped = pt < config.log_clamp;
      const double logp = std::log(clamped ? config.log_clamp : pt);
      const double one_minus = 1.0 - pt;
      const double mod = gamma == 0.0 ? 1.0 : std::pow(one_minus, gamma);
      loss += -w * mod * logp;
      const double dmod = gamma == 0.0 ? 0.0 : -gamma * std::pow(one_minus, gamma - 1.0);
      const double dlog = clamped ? 0.0 : 1.0 / pt;
      dp[i] = -w * (dmod * logp + mod * dlog) / m;
    }
  }
  loss /= m;
  return logits.tape->record(
      Tensor<T>(Shape{1}, static_cast<T>(loss)), {logits},
      [logits, l, p = std::move(p), dp = std::move(dp)](Tape<T>& tape, const Tensor<T>& g) {
        softmax_backward(p, dp, l, static_cast<double>(g[0]), tape.grad_buffer(logits.id));
      });
}

template <typename T>
Var<T> dice_loss(Var<T> logits, std::span<const std::uint8_t> labels, const LossConfig& config) {
  const Tensor<T>& z = logits.value();
  const Layout l = check_inputs(z, labels);
  std::vector<double> p = channel_softmax(z, l);
  const double eps = config.dice_epsilon;
  double wsum = 0.0;
  for (double w : config.class_weights) wsum += w;

  std::array<double, kNumClasses> inter{}, psum{}, gsum{};
  for (int n = 0; n < l.n; ++n) {
    const std::size_t base = static_cast<std::size_t>(n) * l.classes * l.voxels;
    for (int c = 0; c < l.classes; ++c) {
      for (std::size_t v = 0; v < l.voxels; ++v) {
        const double pc = p[base + c * l.voxels + v];
        psum[c] += pc;
        if (labels[static_cast<std::size_t>(n) * l.voxels + v] == c) {
          inter[c] += pc;
          gsum[c] += 1.0;
        }
      }
    }
  }
  double loss = 0.0;
  std::array<double, kNumClasses> weight{}, denom{}, numer{};
  for (int c = 0; c < kNumClasses; ++c) {
    weight[c] = config.class_weights[static_cast<std::size_t>(c)] / wsum;
    numer[c] = 2.0 * inter[c] + eps;
    denom[c] = psum[c] + gsum[c] + eps;
    loss += weight[c] * (1.0 - numer[c] / denom[c]);
  }
  std::vector<double> dp(p.size());
  for (int n = 0; n < l.n; ++n) {
    const std::size_t base = static_cast<std::size_t>(n) * l.classes * l.voxels;
    for (int c = 0; c < l.classes; ++c) {
      for (std::size_t v = 0; v < l.voxels; ++v) {
        const double gc = labels[static_cast<std::size_t>(n) * l.voxels + v] == c ? 1.0 : 0.0;
        dp[base + c * l.voxels + v] =
            -weight[c] * (2.0 * gc * denom[c] - numer[c]) / (denom[c] * denom[c]);
      }
    }
  }
  return logits.tape->record(
      Tensor<T>(Shape{1}, static_cast<T>(loss)), {logits},
      [logits, l, p = std::move(p), dp = std::move(dp)](Tape<T>& tape, const Tensor<T>& g) {
        softmax_backward(p, dp, l, static_cast<double>(g[0]), tape.grad_buffer(logits.id));
      });
}

template <typename T>
LossBreakdown<T> total_loss(const ForwardOutput<T>& output, std::span<const std::uint8_t> labels,
                            const LossConfig& config) {
  if (!output.aux.empty() && output.aux.size() != config.aux_weights.size()) {
    throw ValidationError("loss: " + std::to_string(output.aux.size()) + " aux heads but " +
                          std::to_string(config.aux_weights.size()) + " aux weights");
  }
  LossBreakdown<T> out;
  const Var<T> focal = focal_loss(output.logits, labels, config);
  const Var<T> dice = dice_loss(output.logits, labels, config);
  Var<T> total = ops::add(focal, ops::scale(dice, static_cast<T>(config.lambda_dice)));
  out.focal = static_cast<double>(focal.value()[0]);
  out.dice = static_cast<double>(dice.value()[0]);
  out.main = static_cast<double>(total.value()[0]);
  for (std::size_t i = 0; i < output.aux.size(); ++i) {
    const Var<T> term = ops::add(focal_loss(output.aux[i], labels, config),
                                 ops::scale(dice_loss(output.aux[i], labels, config),
                                            static_cast<T>(config.lambda_dice)));
    const double value = static_cast<double>(term.value()[0]);
    out.aux_terms.push_back(value);
    out.aux += config.aux_weights[i] * value;
    total = ops::add(total, ops::scale(term, static_cast<T>(config.aux_weights[i])));
  }
  out.total = total;
  return out;
}

template Var<float> focal_loss(Var<float>, std::span<const std::uint8_t>, const LossConfig&);
template Var<double> focal_loss(Var<double>, std::span<const std::uint8_t>, const LossConfig&);
template Var<float> dice_loss(Var<float>, std::span<const std::uint8_t>, const LossConfig&);
template Var<double> dice_loss(Var<double>, std::span<const std::uint8_t>, const LossConfig&);
template LossBreakdown<float> total_loss(const ForwardOutput<float>&, std::span<const std::uint8_t>,
                                         const LossConfig&);
template LossBreakdown<double> total_loss(const ForwardOutput<double>&,
                                          std::span<const std::uint8_t>, const LossConfig&);

}  // namespace muonseg
