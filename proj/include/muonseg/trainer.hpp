#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "muonseg/geometry.hpp"
#include "muonseg/network.hpp"
#include "muonseg/objective.hpp"
#include "muonseg/rng.hpp"

namespace muonseg {

struct TrainConfig {
  int epochs = 100;
  int batch_size = 4;
  double lr_peak = 1e-3;
  double lr_floor = 1e-5;
  double warmup_epochs = 5.0;
  double weight_decay = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_epsilon = 1e-8;
  double clip_norm = 1.0;
  int patience = 30;
  bool augment = true;
  double flip_prob = 0.5;
  double noise_sigma = 0.05;
  std::array<double, 2> scale_range{0.95, 1.05};
  std::uint64_t seed = 0;

  void validate() const;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

// One normalised volume with its labels.
struct Sample {
  int volume_index = -1;
  DefectClass cls = DefectClass::Healthy;
  std::vector<float> stream1;  // 9 x 20^3
  std::vector<float> stream2;  // 40 x 20^3
  LabelGrid labels;
};

struct SplitManifest {
  std::vector<int> train, val, test;
  std::map<std::string, std::array<int, 3>> per_class;  // class -> train/val/test counts
  std::uint64_t seed = 0;
  std::array<double, 3> ratios{0.7, 0.15, 0.15};
};

void to_json(nlohmann::json& j, const SplitManifest& m);
void from_json(const nlohmann::json& j, SplitManifest& m);

// Per class: seeded shuffle, then largest-remainder slicing. Remainder ties
// go to the split furthest below its global target, then to the lower split.
// classes[i] is the class of volume i.
SplitManifest stratified_split(std::span<const DefectClass> classes, std::array<double, 3> ratios,
                               std::uint64_t seed);

template <typename T>
struct AdamState {
  std::vector<Tensor<T>> m, v;
  std::int64_t step = 0;
};

// Decoupled weight decay, then the bias-corrected Adam update.
template <typename T>
void adamw_step(std::span<Parameter<T>> params, AdamState<T>& state, double lr,
                const TrainConfig& config);

// Linear warmup from 0 to lr_peak, then cosine from lr_peak to lr_floor.
double lr_at(double epoch_fraction, const TrainConfig& config);

void flip_labels(LabelGrid& labels, int axis);

struct AugmentDraws {
  std::array<bool, 3> flipped{};
  std::vector<double> scales;  // one per channel, stream 1 then stream 2
};

// Coherent axis flips of both streams and the labels, then Gaussian noise,
// then per-channel scaling. Labels change only through the flips.
AugmentDraws augment(Sample& sample, Philox& rng, const TrainConfig& config);

struct StepRow {
  int epoch = 0;
  std::int64_t step = 0;
  double lr = 0.0;
  double loss_total = 0.0, loss_focal = 0.0, loss_dice = 0.0, loss_aux = 0.0;
  double grad_norm = 0.0;      // after clipping
  double grad_norm_raw = 0.0;  // before clipping
};

struct EpochRow {
  int epoch = 0;
  std::int64_t step = 0;
  double lr = 0.0;
  double loss_total = 0.0, loss_focal = 0.0, loss_dice = 0.0, loss_aux = 0.0;
  double grad_norm = 0.0;  // mean post-clip norm over the epoch
  double val_dice_overall = 0.0;
  double val_dice_defect_mean = 0.0;
  bool best = false;
};

inline constexpr const char* kMetricsHeader =
    "epoch,step,lr,loss_total,loss_focal,loss_dice,loss_aux,grad_norm,val_dice_overall,"
    "val_dice_defect_mean,best_flag";

struct TrainResult {
  std::vector<EpochRow> epochs;
  std::vector<StepRow> steps;
  int best_epoch = 0;
  double best_val_defect_dice = -1.0;
  bool early_stopped = false;
  // Instrumentation: every volume passed to augment().
  std::multiset<int> augmented_volumes;
};

struct TrainOptions {
  // When set: metrics.csv, steps.csv and best.mvck are written here.
  std::optional<std::filesystem::path> out_dir;
  std::function<void(const EpochRow&)> on_epoch;
};

// Trains in place; on return the model holds the best checkpoint. With an
// empty validation split the lowest mean training loss selects the best
// epoch.
TrainResult train(Model<float>& model, std::span<const Sample> dataset, const SplitManifest& split,
                  const TrainConfig& train_config, const LossConfig& loss_config,
                  const TrainOptions& options = {});

void write_metrics_csv(const std::filesystem::path& path, const std::vector<EpochRow>& rows);
void write_steps_csv(const std::filesystem::path& path, const std::vector<StepRow>& rows);
std::vector<EpochRow> read_metrics_csv(const std::filesystem::path& path);
std::vector<StepRow> read_steps_csv(const std::filesystem::path& path);

}  // namespace muonseg
