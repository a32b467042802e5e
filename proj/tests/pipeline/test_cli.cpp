#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <sys/wait.h>

#include <nlohmann/json.hpp>

#include "muonseg/features.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

const fs::path& root() {
  static const fs::path r = [] {
    const fs::path p = fs::temp_directory_path() / "muonseg_cli_tests";
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
  }();
  return r;
}

struct Result {
  int code = -1;
  std::string output;
};

Result cli(const std::string& args) {
  const fs::path log = root() / "last_output.txt";
  const std::string cmd = std::string(MUONSEG_CLI) + " " + args + " > " + log.string() + " 2>&1";
  const int status = std::system(cmd.c_str());
  Result r;
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  std::ifstream in(log);
  r.output.assign(std::istreambuf_iterator<char>(in), {});
  return r;
}

json read_json(const fs::path& p) { return json::parse(std::ifstream(p)); }

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return std::string((std::istreambuf_iterator<char>(in)), {});
}

int count_files(const fs::path& dir, const std::string& suffix) {
  int n = 0;
  for (const auto& e : fs::directory_iterator(dir)) {
    const std::string name = e.path().filename().string();
    n += name.size() >= suffix.size() && name.compare(name.size() - suffix.size(), suffix.size(), suffix) == 0;
  }
  return n;
}

// 12-volume campaign shared by the tests: simulated, featurised, split.
const fs::path& campaign() {
  static const fs::path data = [] {
    const fs::path d = root() / "data";
    const auto r = cli("simulate --n-per-class 2 --events 200 --seed 7 --out " + d.string());
    EXPECT_EQ(r.code, 0) << r.output;
    const auto f = cli("featurize " + d.string());
    EXPECT_EQ(f.code, 0) << f.output;
    EXPECT_NE(f.output.find("normalisation deferred"), std::string::npos) << f.output;
    EXPECT_FALSE(fs::exists(d / "norm_stats.json"));
    const auto s = cli("split " + d.string() + " --ratios 0.5 0.5 0");
    EXPECT_EQ(s.code, 0) << s.output;
    const auto f2 = cli("featurize " + d.string());
    EXPECT_EQ(f2.code, 0) << f2.output;
    return d;
  }();
  return data;
}

// Two-epoch tiny run on the shared campaign.
const fs::path& tiny_run() {
  static const fs::path run = [] {
    const fs::path r = root() / "run";
    const auto t = cli("train " + campaign().string() + " --epochs 2 --warmup 1 --width 4 --out " + r.string());
    EXPECT_EQ(t.code, 0) << t.output;
    return r;
  }();
  return run;
}

// Evaluations of the tiny run, shared by the evaluate and report tests.
const fs::path& truth_eval() {
  static const fs::path out = [] {
    const fs::path o = root() / "truth_eval";
    const auto r = cli("evaluate " + tiny_run().string() + " " + campaign().string() +
                       " --split all --truth-as-prediction --out " + o.string());
    EXPECT_EQ(r.code, 0) << r.output;
    return o;
  }();
  return out;
}

const fs::path& val_eval() {
  static const fs::path out = [] {
    const fs::path o = root() / "test_eval";
    const auto r = cli("evaluate " + tiny_run().string() + " " + campaign().string() + " --split val --out " + o.string());
    EXPECT_EQ(r.code, 0) << r.output;
    return o;
  }();
  return out;
}

}  // namespace

TEST(Simulate, TwoPerClassGivesTwelveVolumes) {
  const auto& d = campaign();
  const json m = read_json(d / "manifest.json");
  EXPECT_EQ(m.at("volumes").size(), 12u);
  EXPECT_EQ(count_files(d / "volumes", "_labels.mvlb"), 12);
  EXPECT_EQ(count_files(d / "volumes", "_hits.csv"), 12);
  std::map<std::string, int> per_class;
  for (const auto& v : m.at("volumes")) per_class[v.at("class").get<std::string>()] += 1;
  EXPECT_EQ(per_class.size(), 5u);
  EXPECT_EQ(per_class["healthy"], 4);
  EXPECT_TRUE(read_json(d / "campaign.json").contains("version"));
}

TEST(Simulate, RerunRewritesNothing) {
  const auto& d = campaign();
  std::map<fs::path, fs::file_time_type> before;
  for (const auto& e : fs::recursive_directory_iterator(d)) {
    if (e.is_regular_file()) before[e.path()] = e.last_write_time();
  }
  const auto r = cli("simulate --n-per-class 2 --events 200 --seed 7 --out " + d.string());
  EXPECT_EQ(r.code, 0) << r.output;
  EXPECT_NE(r.output.find("skipped 12"), std::string::npos) << r.output;
  for (const auto& [path, t] : before) EXPECT_EQ(fs::last_write_time(path), t) << path;

  const auto clash = cli("simulate --n-per-class 2 --events 300 --seed 7 --out " + d.string());
  EXPECT_EQ(clash.code, 2) << clash.output;
}

TEST(Simulate, ClassFilter) {
  const fs::path d = root() / "filtered";
  const auto r = cli("simulate --n-per-class 1 --events 20 --seed 3 --classes corrosion,healthy --out " + d.string());
  ASSERT_EQ(r.code, 0) << r.output;
  std::set<std::string> classes;
  const json m = read_json(d / "manifest.json");
  for (const auto& v : m.at("volumes")) classes.insert(v.at("class").get<std::string>());
  EXPECT_EQ(classes, (std::set<std::string>{"corrosion", "healthy"}));
}

TEST(Featurize, StreamsAndFortyNineChannelStats) {
  const auto& d = campaign();
  EXPECT_EQ(count_files(d / "features", ".mvft"), 24);
  const json s = read_json(d / "norm_stats.json");
  ASSERT_EQ(s.size(), static_cast<std::size_t>(muonseg::kTotalChannels));
  EXPECT_EQ(s.size(), 49u);
  for (const auto& c : s) EXPECT_GT(c.at("std").get<double>(), 0.0);
  EXPECT_TRUE(read_json(d / "featurize.json").at("failed").empty());
}

TEST(Featurize, CorruptHitRowFlagsOnlyThatVolume) {
  const fs::path d = root() / "corrupt";
  ASSERT_EQ(cli("simulate --n-per-class 1 --events 30 --seed 5 --out " + d.string()).code, 0);
  {
    std::ofstream out(d / "volumes" / "vol_0002_hits.csv", std::ios::app);
    out << "7,1,not_a_plane,x,y,z,mu,0,0\n";
  }
  const auto r = cli("featurize " + d.string());
  EXPECT_EQ(r.code, 0) << r.output;
  const json f = read_json(d / "featurize.json");
  ASSERT_EQ(f.at("failed").size(), 1u);
  EXPECT_NE(f.at("failed")[0].dump().find("vol_0002"), std::string::npos) << f.dump();
  EXPECT_FALSE(fs::exists(d / "features" / "vol_0002_stream1.mvft"));
  EXPECT_EQ(count_files(d / "features", ".mvft"), 2 * 5);
}

TEST(Train, RunDirectoryCarriesProvenance) {
  const auto& r = tiny_run();
  for (const char* f : {"config.json", "model_config.json", "norm_stats.json", "best.mvck", "metrics.csv",
                        "steps.csv", "curves.svg", "summary.json"}) {
    EXPECT_TRUE(fs::exists(r / f)) << f;
  }
  EXPECT_TRUE(read_json(r / "config.json").contains("version"));
  EXPECT_EQ(read_json(r / "summary.json").at("augmentation_train_only").get<bool>(), true);
}

TEST(Evaluate, TruthAsPredictionIsPerfect) {
  const fs::path& out = truth_eval();
  const json m = read_json(out / "metrics.json");
  EXPECT_EQ(m.at("overall_accuracy").get<double>(), 1.0);
  EXPECT_EQ(m.at("n_volumes").get<int>(), 12);
  EXPECT_TRUE(fs::exists(out / "provenance.json"));
}

TEST(Evaluate, ModelOnValidationSplit) {
  const fs::path& out = val_eval();
  for (const char* f : {"metrics.json", "per_class.csv", "confusion.csv", "timing.csv"}) {
    EXPECT_TRUE(fs::exists(out / f)) << f;
  }
  EXPECT_GT(count_files(out / "slices", ".svg"), 0);
}

TEST(FreshValidate, RefusesTrainingSeedAndReportsOtherwise) {
  const auto same = cli("fresh-validate " + tiny_run().string() + " " + campaign().string() +
                        " --seed 7 --out " + (root() / "fresh_same").string());
  EXPECT_EQ(same.code, 2) << same.output;
  EXPECT_NE(same.output.find("equals the training campaign seed"), std::string::npos) << same.output;

  const fs::path out = root() / "fresh";
  const auto r = cli("fresh-validate " + tiny_run().string() + " " + campaign().string() +
                     " --seed 1000 --n-per-class 1 --events 50 --out " + out.string());
  ASSERT_EQ(r.code, 0) << r.output;
  const fs::path rep = out / "report";
  const json m = read_json(rep / "metrics.json");
  EXPECT_TRUE(m.contains("per_class"));
  EXPECT_TRUE(m.contains("detection"));
  EXPECT_TRUE(m.contains("confusion"));
  EXPECT_GT(count_files(rep, ".csv"), 3);
  // The fresh campaign is normalised with the run's saved statistics.
  EXPECT_EQ(slurp(out / "data" / "norm_stats.json"), slurp(tiny_run() / "norm_stats.json"));
}

TEST(Ablate, TwoPresetsGiveTwoRowsWithIdenticalSeeds) {
  const fs::path out = root() / "ablation";
  const auto r = cli("ablate " + campaign().string() +
                     " --presets scatter_only,shower_only --epochs 1 --warmup 0 --width 4 --out " + out.string());
  ASSERT_EQ(r.code, 0) << r.output;
  std::ifstream csv(out / "ablation.csv");
  std::string header, line;
  std::getline(csv, header);
  std::vector<std::string> rows;
  while (std::getline(csv, line)) rows.push_back(line);
  ASSERT_EQ(rows.size(), 2u);
  auto column = [](const std::string& row, std::size_t k) {
    std::stringstream ss(row);
    std::string cell;
    for (std::size_t i = 0; i <= k; ++i) std::getline(ss, cell, ',');
    return cell;
  };
  std::size_t model_col = 0, train_col = 0;
  {
    std::stringstream ss(header);
    std::string cell;
    for (std::size_t i = 0; std::getline(ss, cell, ','); ++i) {
      if (cell == "model_seed") model_col = i;
      if (cell == "train_seed") train_col = i;
    }
  }
  ASSERT_GT(model_col, 0u);
  ASSERT_GT(train_col, 0u);
  EXPECT_EQ(column(rows[0], model_col), column(rows[1], model_col));
  EXPECT_EQ(column(rows[0], train_col), column(rows[1], train_col));
  EXPECT_EQ(column(rows[0], 0), "scatter_only");
  EXPECT_EQ(column(rows[1], 0), "shower_only");
  EXPECT_TRUE(read_json(out / "ablation.json").contains("model_seed"));
  EXPECT_TRUE(fs::exists(out / "ablation.svg"));
  EXPECT_TRUE(fs::exists(out / "curves.svg"));
}

TEST(Report, SingleRunHasNoComparisonPanels) {
  const fs::path out = root() / "report_single";
  const auto r = cli("report " + val_eval().string() + " --out " + out.string());
  ASSERT_EQ(r.code, 0) << r.output;
  EXPECT_TRUE(fs::exists(out / "report.csv"));
  EXPECT_FALSE(fs::exists(out / "comparison_dice.svg"));
}

TEST(Report, TwoRunsCompareAndMissingFilesAreListed) {
  const fs::path out = root() / "report_pair";
  const fs::path empty = root() / "empty_run";
  fs::create_directories(empty);
  const auto r = cli("report " + val_eval().string() + " " + truth_eval().string() + " " +
                     empty.string() + " --out " + out.string());
  ASSERT_EQ(r.code, 0) << r.output;
  EXPECT_TRUE(fs::exists(out / "comparison_dice.svg"));
  const json j = read_json(out / "report.json");
  EXPECT_FALSE(j.at("missing").empty());
  for (const auto& w : j.at("written")) EXPECT_TRUE(fs::exists(out / w.get<std::string>())) << w;
}

TEST(ExitCodes, ValidationIsTwoRuntimeIsOne) {
  EXPECT_EQ(cli("--bogus-flag").code, 2);
  EXPECT_EQ(cli("split " + campaign().string() + " --ratios 0.9 0.9 0.9").code, 2);
  EXPECT_EQ(cli("--version").code, 0);
  // A run directory whose checkpoint vanished is a runtime failure.
  const fs::path broken = root() / "broken_run";
  fs::remove_all(broken);
  fs::copy(tiny_run(), broken, fs::copy_options::recursive);
  fs::remove(broken / "best.mvck");
  EXPECT_EQ(cli("evaluate " + broken.string() + " " + campaign().string() + " --split val --out " +
                (root() / "broken_eval").string())
                .code,
            1);
}
