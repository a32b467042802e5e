#include "muonseg/pipeline.hpp"

#include <algorithm>
#include <atomic>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <map>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>

#include <nlohmann/json.hpp>

#include "muonseg/error.hpp"
#include "muonseg/event_io.hpp"
#include "muonseg/svg.hpp"

namespace muonseg {

namespace fs = std::filesystem;
using nlohmann::json;

void CampaignConfig::validate() const {
  if (n_per_class < 1) throw ValidationError("n_per_class must be >= 1");
  if (events_per_volume < 1) throw ValidationError("events_per_volume must be >= 1");
  if (healthy_multiplier < 1) throw ValidationError("healthy_multiplier must be >= 1");
  if (!(beam.kinetic_energy_mev > 0.0)) throw ValidationError("beam energy must be positive");
  layout.validate();
  physics.validate();
}

std::vector<DefectClass> CampaignConfig::active_classes() const {
  std::vector<DefectClass> out;
  for (DefectClass c : kAllDefectClasses) {
    if (classes.empty() || std::find(classes.begin(), classes.end(), c) != classes.end()) out.push_back(c);
  }
  return out;
}

void to_json(json& j, const CampaignConfig& c) {
  std::vector<std::string> classes;
  for (DefectClass k : c.active_classes()) classes.emplace_back(to_string(k));
  j = json{{"n_per_class", c.n_per_class},
           {"events_per_volume", c.events_per_volume},
           {"campaign_seed", c.campaign_seed},
           {"classes", classes},
           {"healthy_multiplier", c.healthy_multiplier},
           {"beam",
            {{"kinetic_energy_mev", c.beam.kinetic_energy_mev},
             {"direction", {c.beam.direction.x(), c.beam.direction.y(), c.beam.direction.z()}},
             {"gun_z_mm", c.beam.gun_z_mm},
             {"xy_half_width_mm", c.beam.xy_half_width_mm}}},
           {"layout",
            {{"plane_z_mm", c.layout.plane_z_mm},
             {"plane_half_size_mm", c.layout.plane_half_size_mm},
             {"position_noise_mm", c.layout.position_noise_mm}}},
           {"physics",
            {{"dedx_mev_per_cm", c.physics.dedx_mev_per_cm},
             {"highland_constant_mev", c.physics.highland_constant_mev},
             {"secondary_rate_coefficient", c.physics.secondary_rate_coefficient},
             {"p_electron", c.physics.p_electron},
             {"p_gamma", c.physics.p_gamma},
             {"p_positron", c.physics.p_positron},
             {"secondary_sigma_xy_mm", c.physics.secondary_sigma_xy_mm},
             {"secondary_edep_mean_mev", c.physics.secondary_edep_mean_mev},
             {"secondary_time_sigma_ns", c.physics.secondary_time_sigma_ns},
             {"backsplash_fraction", c.physics.backsplash_fraction},
             {"plane_mip_deposit_mev", c.physics.plane_mip_deposit_mev},
             {"plane_deposit_spread_mev", c.physics.plane_deposit_spread_mev}}}};
}

void from_json(const json& j, CampaignConfig& c) {
  c = CampaignConfig{};
  c.n_per_class = j.value("n_per_class", c.n_per_class);
  c.events_per_volume = j.value("events_per_volume", c.events_per_volume);
  c.campaign_seed = j.value("campaign_seed", c.campaign_seed);
  c.healthy_multiplier = j.value("healthy_multiplier", c.healthy_multiplier);
  if (j.contains("classes")) {
    for (const auto& name : j.at("classes")) c.classes.push_back(defect_class_from_string(name.get<std::string>()));
  }
  if (j.contains("beam")) {
    const json& b = j.at("beam");
    c.beam.kinetic_energy_mev = b.value("kinetic_energy_mev", c.beam.kinetic_energy_mev);
    if (b.contains("direction")) {
      const auto d = b.at("direction").get<std::array<double, 3>>();
      c.beam.direction = Vec3(d[0], d[1], d[2]);
    }
    c.beam.gun_z_mm = b.value("gun_z_mm", c.beam.gun_z_mm);
    c.beam.xy_half_width_mm = b.value("xy_half_width_mm", c.beam.xy_half_width_mm);
  }
  if (j.contains("layout")) {
    const json& l = j.at("layout");
    c.layout.plane_z_mm = l.value("plane_z_mm", c.layout.plane_z_mm);
    c.layout.plane_half_size_mm = l.value("plane_half_size_mm", c.layout.plane_half_size_mm);
    c.layout.position_noise_mm = l.value("position_noise_mm", c.layout.position_noise_mm);
  }
  if (j.contains("physics")) {
    const json& p = j.at("physics");
    PhysicsTable& t = c.physics;
    t.dedx_mev_per_cm = p.value("dedx_mev_per_cm", t.dedx_mev_per_cm);
    t.highland_constant_mev = p.value("highland_constant_mev", t.highland_constant_mev);
    t.secondary_rate_coefficient = p.value("secondary_rate_coefficient", t.secondary_rate_coefficient);
    t.p_electron = p.value("p_electron", t.p_electron);
    t.p_gamma = p.value("p_gamma", t.p_gamma);
    t.p_positron = p.value("p_positron", t.p_positron);
    t.secondary_sigma_xy_mm = p.value("secondary_sigma_xy_mm", t.secondary_sigma_xy_mm);
    t.secondary_edep_mean_mev = p.value("secondary_edep_mean_mev", t.secondary_edep_mean_mev);
    t.secondary_time_sigma_ns = p.value("secondary_time_sigma_ns", t.secondary_time_sigma_ns);
    t.backsplash_fraction = p.value("backsplash_fraction", t.backsplash_fraction);
    t.plane_mip_deposit_mev = p.value("plane_mip_deposit_mev", t.plane_mip_deposit_mev);
    t.plane_deposit_spread_mev = p.value("plane_deposit_spread_mev", t.plane_deposit_spread_mev);
  }
}

void to_json(json& j, const ExperimentConfig& c) {
  j = json{{"model", c.model}, {"train", c.train}, {"loss", c.loss}, {"model_seed", c.model_seed}};
}

void from_json(const json& j, ExperimentConfig& c) {
  c = ExperimentConfig{};
  if (j.contains("model")) c.model = j.at("model").get<ModelConfig>();
  if (j.contains("train")) c.train = j.at("train").get<TrainConfig>();
  if (j.contains("loss")) c.loss = j.at("loss").get<LossConfig>();
  c.model_seed = j.value("model_seed", c.model_seed);
}

namespace {

json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("missing file " + path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw ValidationError("malformed JSON in " + path.string() + ": " + e.what());
  }
}

std::string dump(const json& j) { return j.dump(2) + "\n"; }

// Runs fn(i) for i in [0, n) on up to `threads` workers. Exceptions are
// collected per index and rethrown for the lowest failing index.
template <typename Fn>
void parallel_for(int n, int threads, Fn fn) {
  threads = std::max(1, std::min(threads, n));
  if (threads == 1) {
    for (int i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<int> next{0};
  std::vector<std::exception_ptr> errors(static_cast<std::size_t>(n));
  std::vector<std::thread> pool;
  for (int t = 0; t < threads; ++t) {
    pool.emplace_back([&] {
      for (int i = next++; i < n; i = next++) {
        try {
          fn(i);
        } catch (...) {
          errors[static_cast<std::size_t>(i)] = std::current_exception();
        }
      }
    });
  }
  for (auto& th : pool) th.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

std::string stem_of(int index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "vol_%04d", index);
  return buf;
}

json provenance(const json& config) {
  return json{{"version", kToolVersion}, {"config", config}};
}

void write_atomic(const fs::path& path, const std::function<void(const fs::path&)>& writer) {
  const fs::path tmp = path.string() + ".tmp";
  writer(tmp);
  fs::rename(tmp, path);
}

}  // namespace

bool write_if_changed(const fs::path& path, const std::string& content) {
  if (fs::exists(path)) {
    std::ifstream in(path, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    if (ss.str() == content) return false;
  }
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw RuntimeError("cannot open " + path.string() + " for writing");
  out << content;
  if (!out) throw RuntimeError("failed writing " + path.string());
  return true;
}

std::vector<VolumeEntry> plan_campaign(const CampaignConfig& config) {
  config.validate();
  std::vector<VolumeEntry> out;
  int index = 0;
  for (DefectClass cls : config.active_classes()) {
    const int count = config.n_per_class * (cls == DefectClass::Healthy ? config.healthy_multiplier : 1);
    for (int k = 0; k < count; ++k, ++index) {
      out.push_back({index, cls, volume_seed(config.campaign_seed, static_cast<std::uint64_t>(index)),
                     stem_of(index)});
    }
  }
  return out;
}

SimulateResult simulate_campaign(const CampaignConfig& config, const fs::path& out, bool force,
                                 int threads) {
  const std::vector<VolumeEntry> plan = plan_campaign(config);
  const DatasetPaths paths{out};
  std::error_code ec;
  fs::create_directories(out / "volumes", ec);
  if (ec) throw RuntimeError("cannot create output directory " + out.string() + ": " + ec.message());

  const std::string campaign_text = dump(provenance(json(config)));
  if (fs::exists(paths.campaign()) && !force) {
    std::ifstream in(paths.campaign());
    std::stringstream ss;
    ss << in.rdbuf();
    if (ss.str() != campaign_text) {
      throw ValidationError(out.string() + " already holds a different campaign; use --force to overwrite");
    }
  }
  write_if_changed(paths.campaign(), campaign_text);

  std::vector<char> done(plan.size(), 0);
  parallel_for(static_cast<int>(plan.size()), threads, [&](int i) {
    const VolumeEntry& v = plan[static_cast<std::size_t>(i)];
    const bool complete = fs::exists(paths.hits(v.stem)) && fs::exists(paths.events(v.stem)) &&
                          fs::exists(paths.labels(v.stem)) && fs::exists(paths.geometry(v.stem));
    if (complete && !force) return;
    DefectSpec spec;
    spec.cls = v.cls;
    spec.seed = v.seed;
    const VolumeGeometry geometry = build_volume(spec);
    BeamSpec beam = config.beam;
    beam.events_per_volume = config.events_per_volume;
    const std::vector<EventRecord> events =
        simulate_volume(geometry, beam, config.layout, config.physics, v.seed);
    write_atomic(paths.labels(v.stem), [&](const fs::path& p) { write_label_grid(p, rasterize_labels(geometry)); });
    write_atomic(paths.geometry(v.stem), [&](const fs::path& p) {
      std::ofstream(p) << geometry_manifest_json(geometry) << "\n";
    });
    write_atomic(paths.events(v.stem), [&](const fs::path& p) { write_event_summary_csv(p, events); });
    write_atomic(paths.hits(v.stem), [&](const fs::path& p) { write_hit_csv(p, events); });
    done[static_cast<std::size_t>(i)] = 1;
  });

  json manifest = json::array();
  for (const VolumeEntry& v : plan) {
    manifest.push_back({{"index", v.index}, {"class", to_string(v.cls)}, {"seed", v.seed}, {"stem", v.stem}});
  }
  write_if_changed(paths.manifest(), dump(json{{"version", kToolVersion}, {"volumes", manifest}}));

  SimulateResult r;
  for (char d : done) (d ? r.generated : r.skipped) += 1;
  return r;
}

CampaignConfig read_campaign(const fs::path& data_dir) {
  return read_json(DatasetPaths{data_dir}.campaign()).at("config").get<CampaignConfig>();
}

std::vector<VolumeEntry> read_manifest(const fs::path& data_dir) {
  const json j = read_json(DatasetPaths{data_dir}.manifest());
  std::vector<VolumeEntry> out;
  for (const json& v : j.at("volumes")) {
    out.push_back({v.at("index").get<int>(), defect_class_from_string(v.at("class").get<std::string>()),
                   v.at("seed").get<std::uint64_t>(), v.at("stem").get<std::string>()});
  }
  return out;
}

namespace {

FeatureVolume read_raw_features(const DatasetPaths& paths, const VolumeEntry& v) {
  FeatureVolume fv;
  fv.stream1 = read_feature_file(paths.stream1(v.stem), kStream1Channels);
  fv.stream2 = read_feature_file(paths.stream2(v.stem), kStream2Channels);
  fv.volume_index = v.index;
  fv.label_file = paths.labels(v.stem).string();
  return fv;
}

}  // namespace

FeaturizeResult featurize_dataset(const fs::path& data_dir, bool force, int threads) {
  const DatasetPaths paths{data_dir};
  const std::vector<VolumeEntry> volumes = read_manifest(data_dir);
  fs::create_directories(data_dir / "features");
  std::vector<std::string> status(volumes.size());
  parallel_for(static_cast<int>(volumes.size()), threads, [&](int i) {
    const VolumeEntry& v = volumes[static_cast<std::size_t>(i)];
    if (!force && fs::exists(paths.stream1(v.stem)) && fs::exists(paths.stream2(v.stem))) {
      status[static_cast<std::size_t>(i)] = "skipped";
      return;
    }
    try {
      const std::vector<EventRecord> events = read_events(paths.hits(v.stem), paths.events(v.stem));
      const FeatureVolume fv = extract_features(events);
      write_atomic(paths.stream1(v.stem), [&](const fs::path& p) { write_feature_file(p, fv.stream1, kStream1Channels); });
      write_atomic(paths.stream2(v.stem), [&](const fs::path& p) { write_feature_file(p, fv.stream2, kStream2Channels); });
      status[static_cast<std::size_t>(i)] = "ok";
    } catch (const std::exception& e) {
      status[static_cast<std::size_t>(i)] = std::string("failed: ") + e.what();
      fs::remove(paths.stream1(v.stem));
      fs::remove(paths.stream2(v.stem));
    }
  });

  FeaturizeResult r;
  std::set<int> failed;
  for (std::size_t i = 0; i < volumes.size(); ++i) {
    if (status[i] == "ok") ++r.featurized;
    else if (status[i] == "skipped") ++r.skipped;
    else {
      r.failed.push_back(volumes[i].stem + ": " + status[i].substr(8));
      failed.insert(volumes[i].index);
    }
  }

  if (fs::exists(paths.split())) {
    const SplitManifest split = read_json(paths.split()).get<SplitManifest>();
    std::vector<FeatureVolume> training;
    for (int idx : split.train) {
      if (failed.count(idx)) continue;
      const auto it = std::find_if(volumes.begin(), volumes.end(), [&](const VolumeEntry& v) { return v.index == idx; });
      if (it == volumes.end()) throw ValidationError("split references unknown volume " + std::to_string(idx));
      training.push_back(read_raw_features(paths, *it));
    }
    const NormStats stats = compute_norm_stats(training);
    write_atomic(paths.norm_stats(), [&](const fs::path& p) { write_norm_stats(p, stats); });
    r.normalization_written = true;
  } else {
    r.warning = "no split.json in " + data_dir.string() +
                "; features written, normalisation deferred until a split exists";
  }
  json report{{"version", kToolVersion}, {"failed", r.failed}, {"normalized", r.normalization_written}};
  write_if_changed(paths.featurize_report(), dump(report));
  return r;
}

SplitManifest split_dataset(const fs::path& data_dir, std::array<double, 3> ratios, std::uint64_t seed) {
  const std::vector<VolumeEntry> volumes = read_manifest(data_dir);
  std::vector<DefectClass> classes(volumes.size());
  for (const VolumeEntry& v : volumes) {
    if (v.index < 0 || v.index >= static_cast<int>(volumes.size())) {
      throw ValidationError("manifest volume indices must be 0..n-1");
    }
    classes[static_cast<std::size_t>(v.index)] = v.cls;
  }
  const SplitManifest split = stratified_split(classes, ratios, seed);
  json j = split;
  j["version"] = kToolVersion;
  write_if_changed(DatasetPaths{data_dir}.split(), dump(j));
  return split;
}

std::vector<Sample> load_samples(const fs::path& data_dir, const NormStats& stats,
                                 const std::vector<int>& indices) {
  const DatasetPaths paths{data_dir};
  const std::vector<VolumeEntry> volumes = read_manifest(data_dir);
  std::vector<Sample> out;
  for (const VolumeEntry& v : volumes) {
    if (!indices.empty() && std::find(indices.begin(), indices.end(), v.index) == indices.end()) continue;
    const FeatureVolume fv = apply_norm(read_raw_features(paths, v), stats);
    Sample s;
    s.volume_index = v.index;
    s.cls = v.cls;
    s.stream1 = fv.stream1;
    s.stream2 = fv.stream2;
    s.labels = read_label_grid(paths.labels(v.stem));
    out.push_back(std::move(s));
  }
  return out;
}

namespace {

void write_curves(const fs::path& path, const std::vector<EpochRow>& rows, const std::string& title) {
  svg::Series loss{"train loss", {}, {}}, vd{"val defect Dice", {}, {}}, vo{"val overall Dice", {}, {}};
  for (const EpochRow& r : rows) {
    loss.x.push_back(r.epoch);
    loss.y.push_back(r.loss_total);
    vd.x.push_back(r.epoch);
    vd.y.push_back(r.val_dice_defect_mean);
    vo.x.push_back(r.epoch);
    vo.y.push_back(r.val_dice_overall);
  }
  svg::write_file(path, svg::line_chart(title, "epoch", "value", {loss, vd, vo}));
}

std::vector<int> split_indices(const SplitManifest& split, const std::string& which, std::size_t n) {
  if (which == "train") return split.train;
  if (which == "val") return split.val;
  if (which == "test") return split.test;
  if (which == "all") {
    std::vector<int> all(n);
    for (std::size_t i = 0; i < n; ++i) all[i] = static_cast<int>(i);
    return all;
  }
  throw ValidationError("unknown split '" + which + "' (expected train, val, test or all)");
}

}  // namespace

TrainResult run_training(const fs::path& data_dir, const fs::path& run_dir, const ExperimentConfig& config) {
  config.model.validate();
  config.train.validate();
  config.loss.validate();
  const DatasetPaths paths{data_dir};
  if (!fs::exists(paths.split())) throw ValidationError("no split.json in " + data_dir.string() + "; run split first");
  if (!fs::exists(paths.norm_stats())) {
    throw ValidationError("no norm_stats.json in " + data_dir.string() + "; run featurize after split");
  }
  const SplitManifest split = read_json(paths.split()).get<SplitManifest>();
  const NormStats stats = read_norm_stats(paths.norm_stats());
  std::vector<int> needed = split.train;
  needed.insert(needed.end(), split.val.begin(), split.val.end());
  const std::vector<Sample> samples = load_samples(data_dir, stats, needed);

  fs::create_directories(run_dir);
  write_if_changed(run_dir / "config.json",
                   dump(json{{"version", kToolVersion}, {"data_dir", fs::absolute(data_dir).string()},
                             {"experiment", config}}));
  write_if_changed(run_dir / "model_config.json",
                   dump(json{{"model", config.model}, {"model_seed", config.model_seed}}));
  write_norm_stats(run_dir / "norm_stats.json", stats);

  Model<float> model(config.model, config.model_seed);
  TrainOptions opts;
  opts.out_dir = run_dir;
  const TrainResult result = train(model, samples, split, config.train, config.loss, opts);
  write_curves(run_dir / "curves.svg", result.epochs, "training curves (" + config.model.preset + ")");

  std::set<int> train_set(split.train.begin(), split.train.end());
  bool hygiene = true;
  for (int v : result.augmented_volumes) hygiene = hygiene && train_set.count(v) > 0;
  json summary{{"version", kToolVersion},
               {"preset", config.model.preset},
               {"params", model.param_count()},
               {"epochs_run", result.epochs.size()},
               {"best_epoch", result.best_epoch},
               {"best_val_defect_mean_dice", result.best_val_defect_dice},
               {"early_stopped", result.early_stopped},
               {"augment_calls", result.augmented_volumes.size()},
               {"augmentation_train_only", hygiene}};
  write_if_changed(run_dir / "summary.json", dump(summary));
  return result;
}

Model<float> load_run_model(const fs::path& run_dir) {
  const json j = read_json(run_dir / "model_config.json");
  Model<float> model(j.at("model").get<ModelConfig>(), j.at("model_seed").get<std::uint64_t>());
  model.load(run_dir / "best.mvck");
  return model;
}

namespace {

EvaluationReport evaluate_samples(Model<float>* model, const std::vector<Sample>& samples,
                                  bool truth_as_prediction) {
  if (truth_as_prediction) {
    std::vector<VolumeResult> results;
    for (const Sample& s : samples) {
      VolumeResult v;
      v.volume_index = s.volume_index;
      v.pred = s.labels;
      v.truth = s.labels;
      const auto h = s.labels.histogram();
      for (int c = 0; c < kNumClasses; ++c) {
        v.score[c] = static_cast<double>(h[c]);
        v.mean_prob[c] = static_cast<double>(h[c]) / kGridVoxels;
      }
      results.push_back(v);
    }
    return summarize(std::move(results));
  }
  std::vector<EvalInput> inputs;
  for (const Sample& s : samples) inputs.push_back({s.volume_index, s.stream1, s.stream2, &s.labels});
  return evaluate_volumes(*model, inputs);
}

void export_report_slices(const fs::path& report_dir, const EvaluationReport& report, int slice_volumes) {
  const std::array<int, 3> zs{0, kGridDim / 2, kGridDim - 1};
  for (int k = 0; k < slice_volumes && k < static_cast<int>(report.volumes.size()); ++k) {
    const VolumeResult& v = report.volumes[static_cast<std::size_t>(k)];
    export_slices(report_dir / "slices", v.pred, v.truth, zs, stem_of(v.volume_index));
  }
}

}  // namespace

EvaluationReport run_evaluation(const fs::path& run_dir, const fs::path& data_dir, const std::string& split_name,
                                const fs::path& report_dir, bool truth_as_prediction, int slice_volumes) {
  const DatasetPaths paths{data_dir};
  const std::vector<VolumeEntry> volumes = read_manifest(data_dir);
  std::vector<int> indices;
  if (split_name == "all") {
    indices = split_indices(SplitManifest{}, "all", volumes.size());
  } else {
    indices = split_indices(read_json(paths.split()).get<SplitManifest>(), split_name, volumes.size());
  }
  if (indices.empty()) throw ValidationError("split '" + split_name + "' is empty");
  const fs::path stats_path = fs::exists(run_dir / "norm_stats.json") ? run_dir / "norm_stats.json" : paths.norm_stats();
  const NormStats stats = read_norm_stats(stats_path);
  const std::vector<Sample> samples = load_samples(data_dir, stats, indices);

  std::optional<Model<float>> model;
  if (!truth_as_prediction) model.emplace(load_run_model(run_dir));
  const EvaluationReport report = evaluate_samples(model ? &*model : nullptr, samples, truth_as_prediction);
  write_report(report_dir, report);
  write_if_changed(report_dir / "provenance.json",
                   dump(json{{"version", kToolVersion},
                             {"split", split_name},
                             {"truth_as_prediction", truth_as_prediction},
                             {"volumes", indices}}));
  export_report_slices(report_dir, report, slice_volumes);
  return report;
}

EvaluationReport run_fresh_validation(const fs::path& run_dir, const fs::path& train_data_dir,
                                      const CampaignConfig& fresh, const fs::path& out_dir, int threads) {
  const CampaignConfig trained = read_campaign(train_data_dir);
  if (fresh.campaign_seed == trained.campaign_seed) {
    throw ValidationError("fresh campaign seed " + std::to_string(fresh.campaign_seed) +
                          " equals the training campaign seed; choose an independent seed");
  }
  std::set<std::uint64_t> used;
  for (const VolumeEntry& v : plan_campaign(trained)) used.insert(v.seed);
  for (const VolumeEntry& v : plan_campaign(fresh)) {
    if (used.count(v.seed)) {
      throw ValidationError("fresh volume " + v.stem + " would reuse training volume seed " +
                            std::to_string(v.seed) + "; choose a more distant campaign seed");
    }
  }
  const fs::path data = out_dir / "data";
  simulate_campaign(fresh, data, false, threads);
  const FeaturizeResult fr = featurize_dataset(data, false, threads);
  const NormStats stats = read_norm_stats(run_dir / "norm_stats.json");
  // Record the training statistics the fresh features are normalised with.
  write_norm_stats(data / "norm_stats.json", stats);
  std::vector<Sample> samples = load_samples(data, stats);
  std::set<std::string> failed_stems;
  for (const std::string& f : fr.failed) failed_stems.insert(f.substr(0, f.find(':')));
  Model<float> model = load_run_model(run_dir);
  EvaluationReport report = evaluate_samples(&model, samples, false);
  for (const std::string& f : fr.failed) report.errors.push_back(f);
  const fs::path report_dir = out_dir / "report";
  write_report(report_dir, report);
  write_if_changed(report_dir / "provenance.json",
                   dump(json{{"version", kToolVersion},
                             {"run_dir", fs::absolute(run_dir).string()},
                             {"training_campaign_seed", trained.campaign_seed},
                             {"fresh_campaign", fresh},
                             {"normalization", "training norm_stats.json"}}));
  export_report_slices(report_dir, report, 1);
  return report;
}

std::vector<AblationRow> run_ablation(const fs::path& data_dir, const fs::path& out_dir,
                                      const ExperimentConfig& base, const std::vector<std::string>& presets) {
  fs::create_directories(out_dir);
  std::vector<AblationRow> rows;
  std::vector<svg::Series> curves;
  for (const std::string& name : presets) {
    AblationRow row;
    row.preset = name;
    row.model_seed = base.model_seed;
    row.train_seed = base.train.seed;
    try {
      ExperimentConfig cfg = base;
      cfg.model = ModelConfig::from_preset(name, base.model.base_width);
      cfg.model.width_multipliers = base.model.width_multipliers;
      cfg.model.heads = base.model.heads;
      const fs::path run = out_dir / name;
      const TrainResult tr = run_training(data_dir, run, cfg);
      const EvaluationReport rep = run_evaluation(run, data_dir, "test", run / "eval_test");
      row.params = Model<float>(cfg.model, cfg.model_seed).param_count();
      row.overall_dice = rep.seg.dice_micro;
      row.defect_mean_dice = rep.seg.defect_mean_dice;
      row.dice = rep.seg.dice;
      row.ok = true;
      svg::Series s{name, {}, {}};
      for (const EpochRow& e : tr.epochs) {
        s.x.push_back(e.epoch);
        s.y.push_back(e.val_dice_defect_mean);
      }
      curves.push_back(s);
    } catch (const std::exception& e) {
      row.error = e.what();
    }
    rows.push_back(row);
  }

  std::ofstream csv(out_dir / "ablation.csv");
  csv << "preset,params,overall_dice,defect_mean_dice";
  for (int c = 0; c < kNumClasses; ++c) csv << ",dice_" << class_name(c);
  csv << ",model_seed,train_seed,status\n";
  for (const AblationRow& r : rows) {
    csv << r.preset << ',' << r.params << ',' << format_double(r.overall_dice) << ','
        << format_double(r.defect_mean_dice);
    for (double d : r.dice) csv << ',' << format_double(d);
    csv << ',' << r.model_seed << ',' << r.train_seed << ',' << (r.ok ? "ok" : "failed: " + r.error) << '\n';
  }
  std::vector<svg::BarGroup> groups;
  for (int c : kDefectClasses) {
    svg::BarGroup g{class_name(c), {}};
    for (const AblationRow& r : rows) g.values.push_back(r.ok ? r.dice[c] : 0.0);
    groups.push_back(g);
  }
  svg::BarGroup mean{"defect mean", {}};
  for (const AblationRow& r : rows) mean.values.push_back(r.ok ? r.defect_mean_dice : 0.0);
  groups.push_back(mean);
  svg::write_file(out_dir / "ablation.svg",
                  svg::grouped_bar_chart("Per-defect Dice by variant", "test Dice", presets, groups));
  svg::write_file(out_dir / "curves.svg",
                  svg::line_chart("Validation defect-mean Dice", "epoch", "Dice", curves));
  json meta{{"version", kToolVersion}, {"presets", presets}, {"model_seed", base.model_seed},
            {"train_seed", base.train.seed}, {"experiment", base}};
  write_if_changed(out_dir / "ablation.json", dump(meta));
  return rows;
}

ReportResult build_report(const std::vector<fs::path>& runs, const fs::path& out_dir) {
  fs::create_directories(out_dir);
  ReportResult r;
  struct RunData {
    std::string name;
    std::optional<json> metrics;
    std::vector<EpochRow> curve;
    fs::path dir;
  };
  std::vector<RunData> data;
  for (const fs::path& run : runs) {
    RunData d{run.filename().empty() ? run.parent_path().filename().string() : run.filename().string(), {}, {}, run};
    if (fs::exists(run / "metrics.json")) d.metrics = read_json(run / "metrics.json");
    else r.missing.push_back((run / "metrics.json").string());
    if (fs::exists(run / "metrics.csv")) d.curve = read_metrics_csv(run / "metrics.csv");
    if (!d.metrics && d.curve.empty()) continue;
    r.included.push_back(run.string());
    data.push_back(std::move(d));
  }

  std::ofstream csv(out_dir / "report.csv");
  csv << "run,overall_accuracy,dice_overall_micro,defect_mean_dice";
  for (int c = 0; c < kNumClasses; ++c) csv << ",dice_" << class_name(c);
  csv << '\n';
  for (const RunData& d : data) {
    if (!d.metrics) continue;
    const json& m = *d.metrics;
    csv << d.name << ',' << format_double(m.at("overall_accuracy").get<double>()) << ','
        << format_double(m.at("dice_overall_micro").get<double>()) << ','
        << format_double(m.at("defect_mean_dice").get<double>());
    for (int c = 0; c < kNumClasses; ++c) {
      csv << ',' << format_double(m.at("per_class").at(class_name(c)).at("dice").get<double>());
    }
    csv << '\n';
  }
  r.written.push_back((out_dir / "report.csv").string());

  std::vector<const RunData*> with_metrics;
  for (const RunData& d : data) {
    if (d.metrics) with_metrics.push_back(&d);
  }
  if (with_metrics.size() >= 2) {
    std::vector<std::string> names;
    for (const RunData* d : with_metrics) names.push_back(d->name);
    std::vector<svg::BarGroup> groups;
    for (int c : kDefectClasses) {
      svg::BarGroup g{class_name(c), {}};
      for (const RunData* d : with_metrics) {
        g.values.push_back(d->metrics->at("per_class").at(class_name(c)).at("dice").get<double>());
      }
      groups.push_back(g);
    }
    const fs::path bars = out_dir / "comparison_dice.svg";
    svg::write_file(bars, svg::grouped_bar_chart("Per-defect Dice comparison", "Dice", names, groups));
    r.written.push_back(bars.string());
    for (int c : kDefectClasses) {
      std::vector<svg::Series> series;
      for (const RunData* d : with_metrics) {
        const fs::path roc = d->dir / ("roc_" + class_name(c) + ".csv");
        if (!fs::exists(roc)) continue;
        svg::Series s{d->name, {}, {}};
        std::ifstream in(roc);
        std::string line;
        std::getline(in, line);
        while (std::getline(in, line)) {
          const auto a = line.find(','), b = line.rfind(',');
          s.x.push_back(std::stod(line.substr(a + 1, b - a - 1)));
          s.y.push_back(std::stod(line.substr(b + 1)));
        }
        series.push_back(s);
      }
      if (series.size() < 2) continue;
      const fs::path p = out_dir / ("roc_" + class_name(c) + ".svg");
      svg::write_file(p, svg::line_chart("ROC " + class_name(c), "false positive rate", "true positive rate", series));
      r.written.push_back(p.string());
    }
  }
  std::vector<svg::Series> curves;
  for (const RunData& d : data) {
    if (d.curve.empty()) continue;
    svg::Series s{d.name, {}, {}};
    for (const EpochRow& e : d.curve) {
      s.x.push_back(e.epoch);
      s.y.push_back(e.val_dice_defect_mean);
    }
    curves.push_back(s);
  }
  if (!curves.empty()) {
    const fs::path p = out_dir / "curves.svg";
    svg::write_file(p, svg::line_chart("Validation defect-mean Dice", "epoch", "Dice", curves));
    r.written.push_back(p.string());
  }
  json j{{"version", kToolVersion}, {"included", r.included}, {"missing", r.missing}, {"written", r.written}};
  write_if_changed(out_dir / "report.json", dump(j));
  return r;
}

}  // namespace muonseg
