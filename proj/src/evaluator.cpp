#include "muonseg/evaluator.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <numeric>

#include <nlohmann/json.hpp>

#include "muonseg/error.hpp"
#include "muonseg/event_io.hpp"
#include "muonseg/network.hpp"
#include "muonseg/svg.hpp"

namespace muonseg {

std::string class_name(int c) {
  static const std::array<const char*, kNumClasses> names{"concrete",  "honeycombing", "shear",
                                                          "corrosion", "delamination", "rebar"};
  if (c < 0 || c >= kNumClasses) throw ValidationError("class index out of range");
  return names[static_cast<std::size_t>(c)];
}

void ConfusionCounts::add(const LabelGrid& pred, const LabelGrid& truth) {
  for (int v = 0; v < kGridVoxels; ++v) {
    const int t = truth.values[v], p = pred.values[v];
    if (t >= kNumClasses || p >= kNumClasses) throw ValidationError("label out of range in confusion");
    ++counts[t][p];
  }
}

void ConfusionCounts::merge(const ConfusionCounts& other) {
  for (int i = 0; i < kNumClasses; ++i) {
    for (int j = 0; j < kNumClasses; ++j) counts[i][j] += other.counts[i][j];
  }
}

std::int64_t ConfusionCounts::total() const {
  std::int64_t n = 0;
  for (const auto& row : counts) n += std::accumulate(row.begin(), row.end(), std::int64_t{0});
  return n;
}

std::int64_t ConfusionCounts::truth_size(int c) const {
  return std::accumulate(counts[c].begin(), counts[c].end(), std::int64_t{0});
}

std::int64_t ConfusionCounts::pred_size(int c) const {
  std::int64_t n = 0;
  for (const auto& row : counts) n += row[c];
  return n;
}

namespace {

double dice_from(std::int64_t inter, std::int64_t p, std::int64_t t) {
  if (p == 0 && t == 0) return 1.0;
  return 2.0 * static_cast<double>(inter) / static_cast<double>(p + t);
}

double iou_from(std::int64_t inter, std::int64_t p, std::int64_t t) {
  if (p == 0 && t == 0) return 1.0;
  return static_cast<double>(inter) / static_cast<double>(p + t - inter);
}

struct SetCounts {
  std::int64_t inter = 0, pred = 0, truth = 0;
};

SetCounts set_counts(const LabelGrid& pred, const LabelGrid& truth, int c) {
  SetCounts s;
  for (int v = 0; v < kGridVoxels; ++v) {
    const bool p = pred.values[v] == c, t = truth.values[v] == c;
    s.inter += p && t;
    s.pred += p;
    s.truth += t;
  }
  return s;
}

}  // namespace

double dice(const LabelGrid& pred, const LabelGrid& truth, int c) {
  const SetCounts s = set_counts(pred, truth, c);
  return dice_from(s.inter, s.pred, s.truth);
}

double iou(const LabelGrid& pred, const LabelGrid& truth, int c) {
  const SetCounts s = set_counts(pred, truth, c);
  return iou_from(s.inter, s.pred, s.truth);
}

SegMetrics SegMetrics::from_counts(const ConfusionCounts& cc) {
  SegMetrics m;
  m.counts = cc.counts;
  const std::int64_t total = cc.total();
  std::int64_t correct = 0;
  for (int c = 0; c < kNumClasses; ++c) {
    const std::int64_t inter = cc.counts[c][c];
    const std::int64_t t = cc.truth_size(c);
    const std::int64_t p = cc.pred_size(c);
    correct += inter;
    m.present[c] = t > 0;
    m.dice[c] = dice_from(inter, p, t);
    m.iou[c] = iou_from(inter, p, t);
    for (int j = 0; j < kNumClasses; ++j) {
      m.confusion[c][j] = t > 0 ? static_cast<double>(cc.counts[c][j]) / static_cast<double>(t) : 0.0;
    }
  }
  m.overall_accuracy = total > 0 ? static_cast<double>(correct) / static_cast<double>(total) : 0.0;
  // Micro-averaged Dice: sum 2|P∩T| / sum (|P|+|T|) = correct / total.
  m.dice_micro = m.overall_accuracy;
  m.dice_mean = std::accumulate(m.dice.begin(), m.dice.end(), 0.0) / kNumClasses;
  double defect = 0.0;
  for (int c : kDefectClasses) defect += m.dice[c];
  m.defect_mean_dice = defect / static_cast<double>(kDefectClasses.size());
  return m;
}

DetectionMetrics roc_auc(std::span<const double> scores, std::span<const std::uint8_t> positive,
                         double threshold) {
  if (scores.size() != positive.size()) throw ValidationError("roc: score/label count mismatch");
  DetectionMetrics d;
  d.threshold = threshold;
  for (bool p : positive) (p ? d.positives : d.negatives) += 1;
  if (d.positives == 0 || d.negatives == 0) {
    throw ValidationError("roc: need at least one positive and one negative volume");
  }
  // Rank statistic: P(score_pos > score_neg) + 0.5 P(equal).
  double wins = 0.0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (!positive[i]) continue;
    for (std::size_t j = 0; j < scores.size(); ++j) {
      if (positive[j]) continue;
      wins += scores[i] > scores[j] ? 1.0 : scores[i] == scores[j] ? 0.5 : 0.0;
    }
  }
  d.auc = wins / (static_cast<double>(d.positives) * d.negatives);

  std::vector<double> thresholds(scores.begin(), scores.end());
  std::sort(thresholds.begin(), thresholds.end(), std::greater<>());
  thresholds.erase(std::unique(thresholds.begin(), thresholds.end()), thresholds.end());
  d.roc.push_back({0.0, 0.0, INFINITY});
  for (double t : thresholds) {
    int tp = 0, fp = 0;
    for (std::size_t i = 0; i < scores.size(); ++i) {
      if (scores[i] >= t) (positive[i] ? tp : fp) += 1;
    }
    d.roc.push_back({static_cast<double>(fp) / d.negatives, static_cast<double>(tp) / d.positives, t});
  }
  d.auc_trapezoid = 0.0;
  for (std::size_t i = 1; i < d.roc.size(); ++i) {
    d.auc_trapezoid += (d.roc[i].fpr - d.roc[i - 1].fpr) * (d.roc[i].tpr + d.roc[i - 1].tpr) / 2.0;
  }

  int tp = 0, fp = 0, tn = 0, fn = 0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    const bool flagged = scores[i] > threshold;
    if (positive[i]) (flagged ? tp : fn) += 1;
    else (flagged ? fp : tn) += 1;
  }
  d.sensitivity = static_cast<double>(tp) / d.positives;
  d.specificity = static_cast<double>(tn) / d.negatives;
  d.precision = tp + fp > 0 ? static_cast<double>(tp) / (tp + fp) : 0.0;
  return d;
}

std::int64_t volume_score(std::span<const float> probs, int c) {
  if (probs.size() % kNumClasses != 0) throw ValidationError("probability map size not a multiple of 6");
  const std::size_t V = probs.size() / kNumClasses;
  std::int64_t n = 0;
  for (std::size_t v = 0; v < V; ++v) {
    int best = 0;
    for (int k = 1; k < kNumClasses; ++k) {
      if (probs[k * V + v] > probs[best * V + v]) best = k;
    }
    n += best == c;
  }
  return n;
}

double mean_probability(std::span<const float> probs, int c) {
  const std::size_t V = probs.size() / kNumClasses;
  double s = 0.0;
  for (std::size_t v = 0; v < V; ++v) s += probs[c * V + v];
  return V > 0 ? s / static_cast<double>(V) : 0.0;
}

std::vector<float> predict_probabilities(Model<float>& model, std::span<const float> stream1,
                                         std::span<const float> stream2) {
  Tape<float> tape(false);
  const ModelConfig& cfg = model.config();
  Var<float> s1, s2;
  if (cfg.use_scatter) {
    s1 = tape.constant(Tensor<float>(Shape{1, cfg.scatter_channels, kGridDim, kGridDim, kGridDim},
                                     std::vector<float>(stream1.begin(), stream1.end())));
  }
  if (cfg.use_shower) {
    s2 = tape.constant(Tensor<float>(Shape{1, cfg.shower_channels, kGridDim, kGridDim, kGridDim},
                                     std::vector<float>(stream2.begin(), stream2.end())));
  }
  const ForwardOutput<float> out = model.forward(tape, s1, s2, false);
  const Tensor<float>& z = out.logits.value();
  std::vector<float> p(z.size());
  for (int v = 0; v < kGridVoxels; ++v) {
    float mx = z[v];
    for (int c = 1; c < kNumClasses; ++c) mx = std::max(mx, z[c * kGridVoxels + v]);
    double s = 0.0;
    for (int c = 0; c < kNumClasses; ++c) s += std::exp(static_cast<double>(z[c * kGridVoxels + v] - mx));
    for (int c = 0; c < kNumClasses; ++c) {
      p[c * kGridVoxels + v] = static_cast<float>(std::exp(static_cast<double>(z[c * kGridVoxels + v] - mx)) / s);
    }
  }
  return p;
}

LabelGrid argmax_labels(std::span<const float> probs) {
  if (probs.size() != static_cast<std::size_t>(kNumClasses) * kGridVoxels) {
    throw ValidationError("probability map must be 6 x 20^3");
  }
  LabelGrid g;
  for (int v = 0; v < kGridVoxels; ++v) {
    int best = 0;
    for (int c = 1; c < kNumClasses; ++c) {
      if (probs[c * kGridVoxels + v] > probs[best * kGridVoxels + v]) best = c;
    }
    g.values[v] = static_cast<std::uint8_t>(best);
  }
  return g;
}

EvaluationReport summarize(std::vector<VolumeResult> volumes) {
  EvaluationReport r;
  ConfusionCounts cc;
  for (const VolumeResult& v : volumes) cc.add(v.pred, v.truth);
  r.seg = SegMetrics::from_counts(cc);
  for (int c : kDefectClasses) {
    std::vector<double> scores;
    std::vector<std::uint8_t> pos;
    for (const VolumeResult& v : volumes) {
      scores.push_back(v.score[c]);
      pos.push_back(v.truth.histogram()[c] > 0);
    }
    const auto npos = std::count(pos.begin(), pos.end(), 1);
    if (npos == 0 || npos == static_cast<std::ptrdiff_t>(pos.size())) continue;
    r.detection[c] = roc_auc(scores, pos);
  }
  if (!volumes.empty()) {
    double s = 0.0;
    for (const VolumeResult& v : volumes) s += v.forward_ms;
    r.timing_mean_ms = s / static_cast<double>(volumes.size());
    double ss = 0.0;
    for (const VolumeResult& v : volumes) ss += (v.forward_ms - r.timing_mean_ms) * (v.forward_ms - r.timing_mean_ms);
    r.timing_std_ms = volumes.size() > 1 ? std::sqrt(ss / static_cast<double>(volumes.size() - 1)) : 0.0;
  }
  r.volumes = std::move(volumes);
  return r;
}

EvaluationReport evaluate_volumes(Model<float>& model, std::span<const EvalInput> inputs) {
  std::vector<VolumeResult> results;
  std::vector<std::string> errors;
  for (const EvalInput& in : inputs) {
    try {
      if (!in.truth) throw ValidationError("missing ground truth");
      const auto t0 = std::chrono::steady_clock::now();
      const std::vector<float> probs = predict_probabilities(model, in.stream1, in.stream2);
      const auto t1 = std::chrono::steady_clock::now();
      VolumeResult v;
      v.volume_index = in.volume_index;
      v.forward_ms = std::chrono::duration<double, std::milli>(t1 - t0).count();
      v.pred = argmax_labels(probs);
      v.truth = *in.truth;
      for (int c = 0; c < kNumClasses; ++c) {
        v.score[c] = static_cast<double>(volume_score(probs, c));
        v.mean_prob[c] = mean_probability(probs, c);
      }
      results.push_back(std::move(v));
    } catch (const ValidationError& e) {
      errors.push_back("volume " + std::to_string(in.volume_index) + ": " + e.what());
    }
  }
  EvaluationReport r = summarize(std::move(results));
  r.errors = std::move(errors);
  return r;
}

namespace {

nlohmann::ordered_json detection_json(const DetectionMetrics& d) {
  nlohmann::ordered_json j;
  j["positives"] = d.positives;
  j["negatives"] = d.negatives;
  j["threshold"] = d.threshold;
  j["sensitivity"] = d.sensitivity;
  j["specificity"] = d.specificity;
  j["precision"] = d.precision;
  j["auc"] = d.auc;
  j["auc_trapezoid"] = d.auc_trapezoid;
  return j;
}

}  // namespace

void write_report(const std::filesystem::path& dir, const EvaluationReport& r) {
  std::filesystem::create_directories(dir);
  nlohmann::ordered_json j;
  j["n_volumes"] = r.volumes.size();
  j["overall_accuracy"] = r.seg.overall_accuracy;
  j["dice_overall_micro"] = r.seg.dice_micro;
  j["dice_overall_class_mean"] = r.seg.dice_mean;
  j["defect_mean_dice"] = r.seg.defect_mean_dice;
  nlohmann::ordered_json per_class;
  for (int c = 0; c < kNumClasses; ++c) {
    per_class[class_name(c)] = {{"dice", r.seg.dice[c]},
                                {"iou", r.seg.iou[c]},
                                {"present", static_cast<bool>(r.seg.present[c])},
                                {"voxels", std::accumulate(r.seg.counts[c].begin(),
                                                           r.seg.counts[c].end(), std::int64_t{0})}};
  }
  j["per_class"] = per_class;
  j["confusion"] = r.seg.confusion;
  nlohmann::ordered_json det = nlohmann::ordered_json::object();
  for (int c : kDefectClasses) {
    det[class_name(c)] = r.detection[c] ? detection_json(*r.detection[c]) : nlohmann::ordered_json();
  }
  j["detection"] = det;
  j["errors"] = r.errors;
  std::ofstream(dir / "metrics.json") << j.dump(2) << "\n";

  std::ofstream pc(dir / "per_class.csv");
  pc << "class,dice,iou,present,sensitivity,specificity,precision,auc\n";
  for (int c = 0; c < kNumClasses; ++c) {
    pc << class_name(c) << ',' << format_double(r.seg.dice[c]) << ',' << format_double(r.seg.iou[c])
       << ',' << (r.seg.present[c] ? 1 : 0);
    if (r.detection[c]) {
      const DetectionMetrics& d = *r.detection[c];
      pc << ',' << format_double(d.sensitivity) << ',' << format_double(d.specificity) << ','
         << format_double(d.precision) << ',' << format_double(d.auc);
    } else {
      pc << ",,,,";
    }
    pc << '\n';
  }

  std::ofstream cf(dir / "confusion.csv");
  cf << "truth";
  for (int c = 0; c < kNumClasses; ++c) cf << ',' << class_name(c);
  cf << '\n';
  for (int i = 0; i < kNumClasses; ++i) {
    cf << class_name(i);
    for (int k = 0; k < kNumClasses; ++k) cf << ',' << format_double(r.seg.confusion[i][k]);
    cf << '\n';
  }

  for (int c : kDefectClasses) {
    if (!r.detection[c]) continue;
    std::ofstream rc(dir / ("roc_" + class_name(c) + ".csv"));
    rc << "threshold,fpr,tpr\n";
    for (const RocPoint& p : r.detection[c]->roc) {
      rc << (std::isinf(p.threshold) ? std::string("inf") : format_double(p.threshold)) << ','
         << format_double(p.fpr) << ',' << format_double(p.tpr) << '\n';
    }
  }

  std::ofstream tm(dir / "timing.csv");
  tm << "volume_index,forward_ms\n";
  for (const VolumeResult& v : r.volumes) tm << v.volume_index << ',' << format_double(v.forward_ms) << '\n';
}

std::vector<int> export_slices(const std::filesystem::path& dir, const LabelGrid& pred,
                               const LabelGrid& truth, std::span<const int> z_indices,
                               const std::string& prefix) {
  std::filesystem::create_directories(dir);
  std::vector<int> error_counts;
  std::vector<std::string> legend;
  for (int c = 0; c < kNumClasses; ++c) legend.push_back(class_name(c));
  legend.push_back("error");
  for (int z : z_indices) {
    if (z < 0 || z >= kGridDim) {
      throw ValidationError("slice z index " + std::to_string(z) + " outside 0..19");
    }
    svg::Panel t{"ground truth z=" + std::to_string(z), kGridDim, kGridDim, {}};
    svg::Panel p{"prediction", kGridDim, kGridDim, {}};
    svg::Panel e{"error", kGridDim, kGridDim, {}};
    int errors = 0;
    for (int y = 0; y < kGridDim; ++y) {
      for (int x = 0; x < kGridDim; ++x) {
        const int tv = truth.at(x, y, z), pv = pred.at(x, y, z);
        t.cells.push_back(tv);
        p.cells.push_back(pv);
        e.cells.push_back(tv != pv ? kNumClasses : -1);
        errors += tv != pv;
      }
    }
    error_counts.push_back(errors);
    svg::write_file(dir / (prefix + "_z" + std::to_string(z) + ".svg"),
                    svg::panels({t, p, e}, svg::class_palette(), legend));
  }
  return error_counts;
}

}  // namespace muonseg
