#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "muonseg/evaluator.hpp"
#include "muonseg/features.hpp"
#include "muonseg/network.hpp"
#include "muonseg/objective.hpp"
#include "muonseg/trainer.hpp"
#include "muonseg/transport.hpp"

namespace muonseg {

inline constexpr const char* kToolVersion = "muonseg 1.0.0";

struct CampaignConfig {
  int n_per_class = 10;
  int events_per_volume = 500;
  std::uint64_t campaign_seed = 1;
  // Subset filter; empty means every class.
  std::vector<DefectClass> classes;
  // The healthy baseline is drawn this many times per n_per_class so a
  // campaign over the five geometries has six class-sized strata.
  int healthy_multiplier = 2;
  BeamSpec beam;
  DetectorLayout layout;
  PhysicsTable physics;

  void validate() const;
  std::vector<DefectClass> active_classes() const;
};

void to_json(nlohmann::json& j, const CampaignConfig& c);
void from_json(const nlohmann::json& j, CampaignConfig& c);

struct VolumeEntry {
  int index = 0;
  DefectClass cls = DefectClass::Healthy;
  std::uint64_t seed = 0;
  std::string stem;  // vol_0007
};

// Volumes in class order (healthy, honeycombing, shear, corrosion,
// delamination); volume i draws from seed campaign_seed ^ i.
std::vector<VolumeEntry> plan_campaign(const CampaignConfig& config);

// File layout of a dataset directory.
struct DatasetPaths {
  std::filesystem::path root;
  std::filesystem::path campaign() const { return root / "campaign.json"; }
  std::filesystem::path manifest() const { return root / "manifest.json"; }
  std::filesystem::path split() const { return root / "split.json"; }
  std::filesystem::path norm_stats() const { return root / "norm_stats.json"; }
  std::filesystem::path featurize_report() const { return root / "featurize.json"; }
  std::filesystem::path hits(const std::string& stem) const { return root / "volumes" / (stem + "_hits.csv"); }
  std::filesystem::path events(const std::string& stem) const { return root / "volumes" / (stem + "_events.csv"); }
  std::filesystem::path labels(const std::string& stem) const { return root / "volumes" / (stem + "_labels.mvlb"); }
  std::filesystem::path geometry(const std::string& stem) const { return root / "volumes" / (stem + "_geometry.json"); }
  std::filesystem::path stream1(const std::string& stem) const { return root / "features" / (stem + "_stream1.mvft"); }
  std::filesystem::path stream2(const std::string& stem) const { return root / "features" / (stem + "_stream2.mvft"); }
};

struct SimulateResult {
  int generated = 0;
  int skipped = 0;
};

// Idempotent: complete volumes are skipped unless `force`.
SimulateResult simulate_campaign(const CampaignConfig& config, const std::filesystem::path& out,
                                 bool force = false, int threads = 1);

CampaignConfig read_campaign(const std::filesystem::path& data_dir);
std::vector<VolumeEntry> read_manifest(const std::filesystem::path& data_dir);

struct FeaturizeResult {
  int featurized = 0;
  int skipped = 0;
  std::vector<std::string> failed;  // "vol_0003: reason"
  bool normalization_written = false;
  std::string warning;
};

// Writes raw stream files per volume, then norm_stats.json from the training
// split when split.json exists.
FeaturizeResult featurize_dataset(const std::filesystem::path& data_dir, bool force = false,
                                  int threads = 1);

SplitManifest split_dataset(const std::filesystem::path& data_dir, std::array<double, 3> ratios,
                            std::uint64_t seed);

// Normalised samples for the given volume indices (all when empty).
std::vector<Sample> load_samples(const std::filesystem::path& data_dir, const NormStats& stats,
                                 const std::vector<int>& indices = {});

struct ExperimentConfig {
  ModelConfig model = ModelConfig::from_preset("full", 8);
  TrainConfig train;
  LossConfig loss;
  std::uint64_t model_seed = 0;
};

void to_json(nlohmann::json& j, const ExperimentConfig& c);
void from_json(const nlohmann::json& j, ExperimentConfig& c);

// Trains on the dataset's split and writes a self-contained run directory:
// config.json, model_config.json, norm_stats.json, best.mvck, metrics.csv,
// steps.csv, curves.svg, summary.json.
TrainResult run_training(const std::filesystem::path& data_dir, const std::filesystem::path& run_dir,
                         const ExperimentConfig& config);

// Loads the model of a run directory (config + best checkpoint).
Model<float> load_run_model(const std::filesystem::path& run_dir);

// split: "train", "val", "test" or "all".
EvaluationReport run_evaluation(const std::filesystem::path& run_dir,
                                const std::filesystem::path& data_dir, const std::string& split,
                                const std::filesystem::path& report_dir,
                                bool truth_as_prediction = false, int slice_volumes = 1);

// Simulates a new campaign into out_dir/data, featurises it with the run's
// saved normalisation and evaluates the frozen model on every volume.
EvaluationReport run_fresh_validation(const std::filesystem::path& run_dir,
                                      const std::filesystem::path& train_data_dir,
                                      const CampaignConfig& fresh,
                                      const std::filesystem::path& out_dir, int threads = 1);

struct AblationRow {
  std::string preset;
  std::size_t params = 0;
  bool ok = false;
  std::string error;
  double overall_dice = 0.0;
  double defect_mean_dice = 0.0;
  std::array<double, kNumClasses> dice{};
  std::uint64_t model_seed = 0;
  std::uint64_t train_seed = 0;
};

// Trains each preset with identical seeds into out_dir/<preset> and writes
// ablation.csv, ablation.svg and curves.svg. Evaluates on the test split.
std::vector<AblationRow> run_ablation(const std::filesystem::path& data_dir,
                                      const std::filesystem::path& out_dir,
                                      const ExperimentConfig& base,
                                      const std::vector<std::string>& presets);

struct ReportResult {
  std::vector<std::string> included;
  std::vector<std::string> missing;
  std::vector<std::string> written;
};

// Merges run directories (each holding metrics.json and/or metrics.csv) into
// report.csv plus comparison SVGs in out_dir.
ReportResult build_report(const std::vector<std::filesystem::path>& runs,
                          const std::filesystem::path& out_dir);

// Writes text unless the file already holds exactly that content. Returns
// whether the file was written.
bool write_if_changed(const std::filesystem::path& path, const std::string& content);

}  // namespace muonseg
