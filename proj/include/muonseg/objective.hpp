#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "muonseg/geometry.hpp"
#include "muonseg/network.hpp"

namespace muonseg {

struct LossConfig {
  double gamma = 3.0;
  double lambda_dice = 2.0;
  std::array<double, 6> class_weights{0.1, 20.0, 25.0, 20.0, 25.0, 0.5};
  std::vector<double> aux_weights{0.3, 0.15};
  double dice_epsilon = 1e-5;
  double log_clamp = 1e-8;

  void validate() const;
};

void to_json(nlohmann::json& j, const LossConfig& c);
void from_json(const nlohmann::json& j, LossConfig& c);

// logits: [N, 6, D, H, W]; labels: N*D*H*W class codes in voxel order.
// Mean over voxels of -w_c (1 - p_c)^gamma log max(p_c, clamp).
template <typename T>
Var<T> focal_loss(Var<T> logits, std::span<const std::uint8_t> labels, const LossConfig& config);

// Soft Dice computed jointly over the batch, per class, averaged with the
// class weights renormalised to sum to one.
template <typename T>
Var<T> dice_loss(Var<T> logits, std::span<const std::uint8_t> labels, const LossConfig& config);

template <typename T>
struct LossBreakdown {
  Var<T> total;
  double main = 0.0;   // focal + lambda * dice on the main head
  double focal = 0.0;  // main head
  double dice = 0.0;   // main head
  double aux = 0.0;    // weighted sum of aux terms
  std::vector<double> aux_terms;
};

// L_main + sum_i aux_weights[i] * L_aux_i, each L = focal + lambda * dice.
template <typename T>
LossBreakdown<T> total_loss(const ForwardOutput<T>& output, std::span<const std::uint8_t> labels,
                            const LossConfig& config);

}  // namespace muonseg
