#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "CLI11.hpp"
#include "muonseg/error.hpp"
#include "muonseg/pipeline.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace muonseg;

namespace {

struct Globals {
  std::string config;
  std::optional<std::uint64_t> seed;
  int threads = 1;
  std::string out;
};

json load_config(const Globals& g) {
  if (g.config.empty()) return json::object();
  std::ifstream in(g.config);
  if (!in) throw ValidationError("cannot read config " + g.config);
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw ValidationError("malformed config " + g.config + ": " + e.what());
  }
}

CampaignConfig campaign_from(const json& cfg) {
  return cfg.contains("campaign") ? cfg.at("campaign").get<CampaignConfig>() : CampaignConfig{};
}

ExperimentConfig experiment_from(const json& cfg) {
  ExperimentConfig e = cfg.contains("experiment") ? cfg.at("experiment").get<ExperimentConfig>() : ExperimentConfig{};
  return e;
}

fs::path require_out(const Globals& g, const std::string& fallback) {
  return g.out.empty() ? fs::path(fallback) : fs::path(g.out);
}

void require_dir(const fs::path& p, const std::string& what) {
  if (!fs::is_directory(p)) throw ValidationError(what + " " + p.string() + " does not exist");
}

std::vector<DefectClass> parse_classes(const std::string& list) {
  std::vector<DefectClass> out;
  std::stringstream ss(list);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) out.push_back(defect_class_from_string(item));
  }
  return out;
}

void print_report(const EvaluationReport& r) {
  std::cout << "overall accuracy " << r.seg.overall_accuracy << ", defect-mean Dice " << r.seg.defect_mean_dice
            << ", micro Dice " << r.seg.dice_micro << "\n";
  for (int c = 0; c < kNumClasses; ++c) std::cout << "  " << class_name(c) << " Dice " << r.seg.dice[c] << "\n";
  for (const std::string& e : r.errors) std::cerr << "warning: skipped " << e << "\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Muon tomography defect segmentation pipeline"};
  app.require_subcommand(1);
  app.fallthrough();
  Globals g;
  app.add_option("--config", g.config, "JSON config with optional 'campaign' and 'experiment' sections");
  app.add_option("--seed", g.seed, "Seed override (campaign seed, or training seed for train/ablate)");
  app.add_option("--threads", g.threads, "Worker threads for simulate/featurize")->check(CLI::PositiveNumber);
  app.add_option("--out", g.out, "Output directory");
  app.set_version_flag("--version", std::string(kToolVersion));

  // simulate
  auto* sim = app.add_subcommand("simulate", "Generate a seeded campaign of volumes");
  std::optional<int> n_per_class, events;
  std::string classes;
  bool sim_force = false;
  sim->add_option("--n-per-class", n_per_class, "Volumes per class")->check(CLI::PositiveNumber);
  sim->add_option("--events", events, "Muon events per volume")->check(CLI::PositiveNumber);
  sim->add_option("--classes", classes, "Comma-separated class subset");
  sim->add_flag("--force", sim_force, "Regenerate completed volumes");

  // featurize
  auto* feat = app.add_subcommand("featurize", "Extract feature streams and normalisation stats");
  std::string feat_data;
  bool feat_force = false;
  feat->add_option("data", feat_data, "Dataset directory")->required();
  feat->add_flag("--force", feat_force, "Recompute existing feature files");

  // split
  auto* spl = app.add_subcommand("split", "Stratified train/val/test split");
  std::string split_data;
  std::vector<double> ratios{0.7, 0.15, 0.15};
  spl->add_option("data", split_data, "Dataset directory")->required();
  spl->add_option("--ratios", ratios, "Train/val/test ratios")->expected(3);

  // train
  auto* tr = app.add_subcommand("train", "Train a model on a split dataset");
  std::string train_data, preset;
  std::optional<int> epochs, width, batch, patience;
  std::optional<double> lr, warmup;
  bool no_augment = false;
  tr->add_option("data", train_data, "Dataset directory")->required();
  tr->add_option("--preset", preset, "Model preset");
  tr->add_option("--width", width, "Base channel width")->check(CLI::PositiveNumber);
  tr->add_option("--epochs", epochs)->check(CLI::PositiveNumber);
  tr->add_option("--batch-size", batch)->check(CLI::PositiveNumber);
  tr->add_option("--patience", patience)->check(CLI::PositiveNumber);
  tr->add_option("--lr", lr, "Peak learning rate");
  tr->add_option("--warmup", warmup, "Warmup epochs")->check(CLI::NonNegativeNumber);
  tr->add_flag("--no-augment", no_augment, "Disable augmentation");

  // evaluate
  auto* ev = app.add_subcommand("evaluate", "Evaluate a trained run on a split");
  std::string ev_run, ev_data, ev_split = "test";
  bool truth_as_prediction = false;
  int slices = 2;
  ev->add_option("run", ev_run, "Run directory")->required();
  ev->add_option("data", ev_data, "Dataset directory")->required();
  ev->add_option("--split", ev_split, "train, val, test or all");
  ev->add_flag("--truth-as-prediction", truth_as_prediction, "Score ground truth against itself");
  ev->add_option("--slices", slices, "Volumes to export slice SVGs for")->check(CLI::NonNegativeNumber);

  // fresh-validate
  auto* fv = app.add_subcommand("fresh-validate", "Evaluate a frozen run on a fresh seeded campaign");
  std::string fv_run, fv_data;
  fv->add_option("run", fv_run, "Run directory")->required();
  fv->add_option("data", fv_data, "Training dataset directory")->required();
  fv->add_option("--n-per-class", n_per_class)->check(CLI::PositiveNumber);
  fv->add_option("--events", events)->check(CLI::PositiveNumber);

  // ablate
  auto* ab = app.add_subcommand("ablate", "Train and compare model presets");
  std::string ab_data;
  std::vector<std::string> presets = ModelConfig::preset_names();
  ab->add_option("data", ab_data, "Dataset directory")->required();
  ab->add_option("--presets", presets, "Presets to compare")->delimiter(',');
  ab->add_option("--width", width)->check(CLI::PositiveNumber);
  ab->add_option("--epochs", epochs)->check(CLI::PositiveNumber);
  ab->add_option("--batch-size", batch)->check(CLI::PositiveNumber);
  ab->add_option("--lr", lr, "Peak learning rate");
  ab->add_option("--warmup", warmup, "Warmup epochs")->check(CLI::NonNegativeNumber);

  // report
  auto* rep = app.add_subcommand("report", "Merge evaluation/run directories into comparison plots");
  std::vector<std::string> runs;
  rep->add_option("runs", runs, "Evaluation or run directories")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    const json cfg = load_config(g);
    if (sim->parsed()) {
      CampaignConfig c = campaign_from(cfg);
      if (n_per_class) c.n_per_class = *n_per_class;
      if (events) c.events_per_volume = *events;
      if (g.seed) c.campaign_seed = *g.seed;
      if (!classes.empty()) c.classes = parse_classes(classes);
      const fs::path out = require_out(g, "data");
      const SimulateResult r = simulate_campaign(c, out, sim_force, g.threads);
      std::cout << "simulated " << r.generated << " volumes, skipped " << r.skipped << " complete volumes in "
                << out.string() << "\n";
    } else if (feat->parsed()) {
      require_dir(feat_data, "dataset");
      const FeaturizeResult r = featurize_dataset(feat_data, feat_force, g.threads);
      std::cout << "featurized " << r.featurized << ", skipped " << r.skipped << ", failed " << r.failed.size()
                << "\n";
      for (const std::string& f : r.failed) std::cerr << "warning: volume flagged: " << f << "\n";
      if (!r.warning.empty()) std::cerr << "warning: " << r.warning << "\n";
    } else if (spl->parsed()) {
      require_dir(split_data, "dataset");
      const SplitManifest m = split_dataset(split_data, {ratios[0], ratios[1], ratios[2]}, g.seed.value_or(0));
      std::cout << "split train " << m.train.size() << " / val " << m.val.size() << " / test " << m.test.size()
                << "\n";
    } else if (tr->parsed()) {
      require_dir(train_data, "dataset");
      ExperimentConfig e = experiment_from(cfg);
      if (!preset.empty() || width) {
        const int w = width.value_or(e.model.base_width);
        e.model = ModelConfig::from_preset(preset.empty() ? e.model.preset : preset, w);
      }
      if (epochs) e.train.epochs = *epochs;
      if (batch) e.train.batch_size = *batch;
      if (patience) e.train.patience = *patience;
      if (lr) e.train.lr_peak = *lr;
      if (warmup) e.train.warmup_epochs = *warmup;
      if (no_augment) e.train.augment = false;
      if (g.seed) e.train.seed = *g.seed;
      const fs::path out = require_out(g, "run");
      const TrainResult r = run_training(train_data, out, e);
      std::cout << "trained " << r.epochs.size() << " epochs; best epoch " << r.best_epoch
                << ", val defect-mean Dice " << r.best_val_defect_dice << "\n";
    } else if (ev->parsed()) {
      require_dir(ev_data, "dataset");
      if (!truth_as_prediction) require_dir(ev_run, "run");
      const fs::path out = require_out(g, (fs::path(ev_run) / ("eval_" + ev_split)).string());
      print_report(run_evaluation(ev_run, ev_data, ev_split, out, truth_as_prediction, slices));
    } else if (fv->parsed()) {
      require_dir(fv_run, "run");
      require_dir(fv_data, "dataset");
      CampaignConfig c = read_campaign(fv_data);
      if (cfg.contains("campaign")) c = campaign_from(cfg);
      if (!g.seed) throw ValidationError("fresh-validate requires --seed for the independent campaign");
      c.campaign_seed = *g.seed;
      if (n_per_class) c.n_per_class = *n_per_class;
      if (events) c.events_per_volume = *events;
      const fs::path out = require_out(g, (fs::path(fv_run) / "fresh").string());
      print_report(run_fresh_validation(fv_run, fv_data, c, out, g.threads));
    } else if (ab->parsed()) {
      require_dir(ab_data, "dataset");
      ExperimentConfig e = experiment_from(cfg);
      if (width) e.model = ModelConfig::from_preset(e.model.preset, *width);
      if (epochs) e.train.epochs = *epochs;
      if (batch) e.train.batch_size = *batch;
      if (lr) e.train.lr_peak = *lr;
      if (warmup) e.train.warmup_epochs = *warmup;
      if (g.seed) e.train.seed = *g.seed;
      const fs::path out = require_out(g, "ablation");
      for (const AblationRow& r : run_ablation(ab_data, out, e, presets)) {
        std::cout << r.preset << ": " << (r.ok ? "params " + std::to_string(r.params) + ", defect-mean Dice " +
                                                     std::to_string(r.defect_mean_dice)
                                               : "failed: " + r.error)
                  << "\n";
      }
    } else if (rep->parsed()) {
      std::vector<fs::path> dirs(runs.begin(), runs.end());
      const ReportResult r = build_report(dirs, require_out(g, "report"));
      for (const std::string& m : r.missing) std::cerr << "warning: missing " << m << "\n";
      for (const std::string& w : r.written) std::cout << "wrote " << w << "\n";
    }
  } catch (const ValidationError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const json::exception& e) {
    std::cerr << "error: invalid configuration: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
