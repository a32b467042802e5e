#include "muonseg/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <sstream>

#include <nlohmann/json.hpp>

#include "muonseg/error.hpp"
#include "muonseg/evaluator.hpp"
#include "muonseg/event_io.hpp"
#include "muonseg/features.hpp"

namespace muonseg {

void TrainConfig::validate() const {
  if (epochs < 1) throw ValidationError("epochs must be >= 1");
  if (batch_size < 1) throw ValidationError("batch_size must be >= 1");
  if (!(warmup_epochs >= 0.0 && warmup_epochs < epochs)) {
    throw ValidationError("warmup_epochs must be in [0, epochs)");
  }
  if (!(lr_peak >= 0.0 && lr_floor >= 0.0 && lr_floor <= lr_peak)) {
    throw ValidationError("learning rates must satisfy 0 <= lr_floor <= lr_peak");
  }
  if (!(weight_decay >= 0.0)) throw ValidationError("weight_decay must be >= 0");
  if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0)) {
    throw ValidationError("Adam betas must be in [0, 1)");
  }
  if (!(clip_norm > 0.0)) throw ValidationError("clip_norm must be positive");
  if (patience < 1) throw ValidationError("patience must be >= 1");
  if (!(flip_prob >= 0.0 && flip_prob <= 1.0)) throw ValidationError("flip_prob must be in [0, 1]");
  if (!(noise_sigma >= 0.0)) throw ValidationError("noise_sigma must be >= 0");
  if (!(scale_range[0] > 0.0 && scale_range[0] <= scale_range[1])) {
    throw ValidationError("scale_range must satisfy 0 < lo <= hi");
  }
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = nlohmann::json{{"epochs", c.epochs},
                     {"batch_size", c.batch_size},
                     {"lr_peak", c.lr_peak},
                     {"lr_floor", c.lr_floor},
                     {"warmup_epochs", c.warmup_epochs},
                     {"weight_decay", c.weight_decay},
                     {"betas", {c.beta1, c.beta2}},
                     {"adam_epsilon", c.adam_epsilon},
                     {"clip_norm", c.clip_norm},
                     {"patience", c.patience},
                     {"augment", c.augment},
                     {"flip_prob", c.flip_prob},
                     {"noise_sigma", c.noise_sigma},
                     {"scale_range", c.scale_range},
                     {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
  c = TrainConfig{};
  c.epochs = j.value("epochs", c.epochs);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.lr_peak = j.value("lr_peak", c.lr_peak);
  c.lr_floor = j.value("lr_floor", c.lr_floor);
  c.warmup_epochs = j.value("warmup_epochs", c.warmup_epochs);
  c.weight_decay = j.value("weight_decay", c.weight_decay);
  if (j.contains("betas")) {
    const auto b = j.at("betas").get<std::array<double, 2>>();
    c.beta1 = b[0];
    c.beta2 = b[1];
  }
  c.adam_epsilon = j.value("adam_epsilon", c.adam_epsilon);
  c.clip_norm = j.value("clip_norm", c.clip_norm);
  c.patience = j.value("patience", c.patience);
  c.augment = j.value("augment", c.augment);
  c.flip_prob = j.value("flip_prob", c.flip_prob);
  c.noise_sigma = j.value("noise_sigma", c.noise_sigma);
  c.scale_range = j.value("scale_range", c.scale_range);
  c.seed = j.value("seed", c.seed);
}

void to_json(nlohmann::json& j, const SplitManifest& m) {
  j = nlohmann::json{{"seed", m.seed}, {"ratios", m.ratios}, {"train", m.train},
                     {"val", m.val},   {"test", m.test},     {"per_class", m.per_class}};
}

void from_json(const nlohmann::json& j, SplitManifest& m) {
  m.seed = j.at("seed").get<std::uint64_t>();
  m.ratios = j.at("ratios").get<std::array<double, 3>>();
  m.train = j.at("train").get<std::vector<int>>();
  m.val = j.at("val").get<std::vector<int>>();
  m.test = j.at("test").get<std::vector<int>>();
  m.per_class = j.at("per_class").get<std::map<std::string, std::array<int, 3>>>();
}

SplitManifest stratified_split(std::span<const DefectClass> classes, std::array<double, 3> ratios,
                               std::uint64_t seed) {
  double rsum = 0.0;
  for (double r : ratios) {
    if (!(r >= 0.0)) throw ValidationError("split ratios must be non-negative");
    rsum += r;
  }
  if (std::abs(rsum - 1.0) > 1e-9) throw ValidationError("split ratios must sum to 1");
  if (classes.empty()) throw ValidationError("no volumes to split");

  constexpr double kTol = 1e-9;
  std::map<DefectClass, std::vector<int>> members;
  for (std::size_t i = 0; i < classes.size(); ++i) members[classes[i]].push_back(static_cast<int>(i));

  // Floors for every class first, so remainder ties can see global deficits.
  std::map<DefectClass, std::array<int, 3>> alloc;
  std::map<DefectClass, std::array<double, 3>> frac;
  std::array<double, 3> target{};
  std::array<int, 3> assigned{};
  for (int s = 0; s < 3; ++s) target[s] = static_cast<double>(classes.size()) * ratios[s];
  for (const auto& [cls, ids] : members) {
    for (int s = 0; s < 3; ++s) {
      const double q = static_cast<double>(ids.size()) * ratios[s];
      const int f = static_cast<int>(std::floor(q + kTol));
      alloc[cls][s] = f;
      frac[cls][s] = std::max(0.0, q - f);
      assigned[s] += f;
    }
  }
  for (const auto& [cls, ids] : members) {
    int remaining = static_cast<int>(ids.size()) - alloc[cls][0] - alloc[cls][1] - alloc[cls][2];
    while (remaining-- > 0) {
      int pick = -1;
      for (int s = 0; s < 3; ++s) {
        if (ratios[s] == 0.0) continue;
        if (pick < 0) {
          pick = s;
          continue;
        }
        const double df = frac[cls][s] - frac[cls][pick];
        if (df > kTol) {
          pick = s;
        } else if (std::abs(df) <= kTol &&
                   target[s] - assigned[s] > target[pick] - assigned[pick] + kTol) {
          pick = s;
        }
      }
      ++alloc[cls][pick];
      ++assigned[pick];
      frac[cls][pick] = -1.0;
    }
    for (int s = 0; s < 3; ++s) {
      if (ratios[s] > 0.0 && alloc[cls][s] == 0) {
        throw ValidationError("class " + std::string(to_string(cls)) + " has too few volumes (" +
                              std::to_string(ids.size()) + ") for a non-empty share of every split");
      }
    }
  }

  SplitManifest m;
  m.seed = seed;
  m.ratios = ratios;
  for (auto& [cls, ids] : members) {
    Philox rng(seed, 0x5350'4c49'5400'0000ULL + static_cast<std::uint64_t>(cls));
    std::vector<int> order = ids;
    for (std::size_t i = order.size(); i > 1; --i) {
      std::swap(order[i - 1], order[rng.below(i)]);
    }
    const auto& a = alloc[cls];
    auto it = order.begin();
    m.train.insert(m.train.end(), it, it + a[0]);
    m.val.insert(m.val.end(), it + a[0], it + a[0] + a[1]);
    m.test.insert(m.test.end(), it + a[0] + a[1], order.end());
    m.per_class[std::string(to_string(cls))] = a;
  }
  std::sort(m.train.begin(), m.train.end());
  std::sort(m.val.begin(), m.val.end());
  std::sort(m.test.begin(), m.test.end());
  return m;
}

template <typename T>
void adamw_step(std::span<Parameter<T>> params, AdamState<T>& state, double lr,
                const TrainConfig& config) {
  if (state.m.empty()) {
    for (const auto& p : params) {
      state.m.emplace_back(p.value.shape());
      state.v.emplace_back(p.value.shape());
    }
  }
  if (state.m.size() != params.size()) throw ValidationError("optimizer state does not match parameters");
  ++state.step;
  const double b1 = config.beta1, b2 = config.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(state.step));
  const double decay = 1.0 - lr * config.weight_decay;
  for (std::size_t k = 0; k < params.size(); ++k) {
    Parameter<T>& p = params[k];
    Tensor<T>& m = state.m[k];
    Tensor<T>& v = state.v[k];
    if (m.shape() != p.value.shape() || p.grad.shape() != p.value.shape()) {
      throw ValidationError("optimizer moment shape mismatch for " + p.name);
    }
    for (std::size_t i = 0; i < p.value.size(); ++i) {
      const double g = p.grad[i];
      const double mi = b1 * m[i] + (1.0 - b1) * g;
      const double vi = b2 * v[i] + (1.0 - b2) * g * g;
      m[i] = static_cast<T>(mi);
      v[i] = static_cast<T>(vi);
      const double mhat = mi / c1, vhat = vi / c2;
      p.value[i] = static_cast<T>(p.value[i] * decay - lr * mhat / (std::sqrt(vhat) + config.adam_epsilon));
    }
  }
}

template void adamw_step(std::span<Parameter<float>>, AdamState<float>&, double, const TrainConfig&);
template void adamw_step(std::span<Parameter<double>>, AdamState<double>&, double, const TrainConfig&);

double lr_at(double epoch_fraction, const TrainConfig& c) {
  if (epoch_fraction < c.warmup_epochs) return c.lr_peak * epoch_fraction / c.warmup_epochs;
  const double span = static_cast<double>(c.epochs) - c.warmup_epochs;
  const double progress = std::clamp((epoch_fraction - c.warmup_epochs) / span, 0.0, 1.0);
  return c.lr_floor + 0.5 * (c.lr_peak - c.lr_floor) * (1.0 + std::cos(std::numbers::pi * progress));
}

void flip_labels(LabelGrid& labels, int axis) {
  LabelGrid out;
  for (int z = 0; z < kGridDim; ++z) {
    for (int y = 0; y < kGridDim; ++y) {
      for (int x = 0; x < kGridDim; ++x) {
        const int m = kGridDim - 1;
        out.at(x, y, z) = labels.at(axis == 0 ? m - x : x, axis == 1 ? m - y : y, axis == 2 ? m - z : z);
      }
    }
  }
  labels = out;
}

AugmentDraws augment(Sample& s, Philox& rng, const TrainConfig& config) {
  AugmentDraws d;
  for (int axis = 0; axis < 3; ++axis) {
    d.flipped[axis] = rng.bernoulli(config.flip_prob);
    if (!d.flipped[axis]) continue;
    flip_channels(s.stream1, kStream1Channels, axis);
    flip_channels(s.stream2, kStream2Channels, axis);
    flip_labels(s.labels, axis);
  }
  if (config.noise_sigma > 0.0) {
    for (float& v : s.stream1) v += static_cast<float>(config.noise_sigma * rng.normal());
    for (float& v : s.stream2) v += static_cast<float>(config.noise_sigma * rng.normal());
  }
  for (int c = 0; c < kTotalChannels; ++c) {
    const double f = rng.uniform(config.scale_range[0], config.scale_range[1]);
    d.scales.push_back(f);
    float* base = c < kStream1Channels
                      ? s.stream1.data() + static_cast<std::size_t>(c) * kGridVoxels
                      : s.stream2.data() + static_cast<std::size_t>(c - kStream1Channels) * kGridVoxels;
    for (int v = 0; v < kGridVoxels; ++v) base[v] = static_cast<float>(base[v] * f);
  }
  return d;
}

namespace {

struct Batch {
  Tensor<float> stream1, stream2;
  std::vector<std::uint8_t> labels;
};

Batch stack(const std::vector<const Sample*>& samples) {
  const int n = static_cast<int>(samples.size());
  Batch b{Tensor<float>(Shape{n, kStream1Channels, kGridDim, kGridDim, kGridDim}),
          Tensor<float>(Shape{n, kStream2Channels, kGridDim, kGridDim, kGridDim}),
          {}};
  for (int i = 0; i < n; ++i) {
    const Sample& s = *samples[static_cast<std::size_t>(i)];
    if (s.stream1.size() != static_cast<std::size_t>(kStream1Channels) * kGridVoxels ||
        s.stream2.size() != static_cast<std::size_t>(kStream2Channels) * kGridVoxels) {
      throw ValidationError("volume " + std::to_string(s.volume_index) + " has malformed features");
    }
    std::copy(s.stream1.begin(), s.stream1.end(), b.stream1.data() + i * s.stream1.size());
    std::copy(s.stream2.begin(), s.stream2.end(), b.stream2.data() + i * s.stream2.size());
    b.labels.insert(b.labels.end(), s.labels.values.begin(), s.labels.values.end());
  }
  return b;
}

std::string diag(double v) { return format_double(v); }

}  // namespace

TrainResult train(Model<float>& model, std::span<const Sample> dataset, const SplitManifest& split,
                  const TrainConfig& tc, const LossConfig& lc, const TrainOptions& options) {
  tc.validate();
  lc.validate();
  std::map<int, const Sample*> by_index;
  for (const Sample& s : dataset) by_index[s.volume_index] = &s;
  auto lookup = [&](int idx) {
    const auto it = by_index.find(idx);
    if (it == by_index.end()) throw ValidationError("split references missing volume " + std::to_string(idx));
    return it->second;
  };
  {
    std::set<int> seen;
    for (const auto* list : {&split.train, &split.val, &split.test}) {
      for (int i : *list) {
        if (!seen.insert(i).second) throw ValidationError("volume " + std::to_string(i) + " appears in more than one split");
      }
    }
  }
  if (split.train.empty()) throw ValidationError("training split is empty");
  std::vector<const Sample*> val;
  for (int i : split.val) val.push_back(lookup(i));
  std::vector<EvalInput> val_inputs;
  for (const Sample* s : val) val_inputs.push_back({s->volume_index, s->stream1, s->stream2, &s->labels});

  if (options.out_dir) std::filesystem::create_directories(*options.out_dir);
  const ModelConfig& mc = model.config();
  const auto nb = static_cast<int>((split.train.size() + tc.batch_size - 1) / tc.batch_size);
  const std::uint64_t aug_key = mix64(tc.seed ^ 0x4155'4755'4d45'4e54ULL);

  TrainResult result;
  AdamState<float> adam;
  std::vector<CheckpointEntry> best_state = model.state();
  double best_score = -INFINITY;
  int since_best = 0;
  std::int64_t step = 0;
  double last_lr = 0.0, last_norm = 0.0;

  for (int epoch = 0; epoch < tc.epochs; ++epoch) {
    std::vector<int> order = split.train;
    Philox shuffle(tc.seed, 0x5348'5546'0000'0000ULL + static_cast<std::uint64_t>(epoch));
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[shuffle.below(i)]);

    EpochRow row;
    row.epoch = epoch + 1;
    for (int b = 0; b < nb; ++b) {
      const int lo = b * tc.batch_size;
      const int hi = std::min<int>(lo + tc.batch_size, static_cast<int>(order.size()));
      std::vector<Sample> augmented;
      std::vector<const Sample*> members;
      augmented.reserve(static_cast<std::size_t>(hi - lo));
      for (int k = lo; k < hi; ++k) {
        const Sample* s = lookup(order[static_cast<std::size_t>(k)]);
        if (tc.augment) {
          augmented.push_back(*s);
          Philox rng(aug_key, (static_cast<std::uint64_t>(epoch) << 32) |
                                  (static_cast<std::uint64_t>(b) << 8) | static_cast<std::uint64_t>(k - lo));
          augment(augmented.back(), rng, tc);
          result.augmented_volumes.insert(s->volume_index);
          members.push_back(&augmented.back());
        } else {
          members.push_back(s);
        }
      }
      Batch batch = stack(members);

      const double lr = lr_at(epoch + static_cast<double>(b + 1) / nb, tc);
      model.zero_grad();
      Tape<float> tape;
      const Var<float> s1 = mc.use_scatter ? tape.constant(std::move(batch.stream1)) : Var<float>{};
      const Var<float> s2 = mc.use_shower ? tape.constant(std::move(batch.stream2)) : Var<float>{};
      const ForwardOutput<float> out = model.forward(tape, s1, s2, true);
      const LossBreakdown<float> loss = total_loss(out, batch.labels, lc);
      const double total = loss.total.value()[0];
      if (!std::isfinite(total)) {
        throw RuntimeError("non-finite loss at epoch " + std::to_string(epoch + 1) + ", step " +
                           std::to_string(step + 1) + " (lr " + diag(lr) + ", last grad norm " +
                           diag(last_norm) + ", previous lr " + diag(last_lr) + ")");
      }
      tape.backward(loss.total);
      const double raw = ops::clip_by_global_norm(std::span<Parameter<float>>(model.parameters()), tc.clip_norm);
      if (!std::isfinite(raw)) {
        throw RuntimeError("non-finite gradient norm at epoch " + std::to_string(epoch + 1) +
                           ", step " + std::to_string(step + 1) + " (lr " + diag(lr) + ")");
      }
      const double clipped = ops::global_grad_norm(std::span<const Parameter<float>>(model.parameters()));
      adamw_step(std::span<Parameter<float>>(model.parameters()), adam, lr, tc);
      ++step;
      last_lr = lr;
      last_norm = clipped;

      StepRow sr{epoch + 1, step, lr, total, loss.focal, loss.dice, loss.aux, clipped, raw};
      result.steps.push_back(sr);
      row.loss_total += total / nb;
      row.loss_focal += loss.focal / nb;
      row.loss_dice += loss.dice / nb;
      row.loss_aux += loss.aux / nb;
      row.grad_norm += clipped / nb;
    }
    row.step = step;
    row.lr = last_lr;

    double score;
    if (!val_inputs.empty()) {
      const EvaluationReport rep = evaluate_volumes(model, val_inputs);
      if (!rep.errors.empty()) throw ValidationError("validation failed: " + rep.errors.front());
      row.val_dice_overall = rep.seg.dice_micro;
      row.val_dice_defect_mean = rep.seg.defect_mean_dice;
      score = row.val_dice_defect_mean;
    } else {
      row.val_dice_overall = NAN;
      row.val_dice_defect_mean = NAN;
      score = -row.loss_total;
    }
    if (score > best_score) {
      best_score = score;
      since_best = 0;
      row.best = true;
      result.best_epoch = row.epoch;
      result.best_val_defect_dice = row.val_dice_defect_mean;
      best_state = model.state();
      if (options.out_dir) model.save(*options.out_dir / "best.mvck");
    } else {
      ++since_best;
    }
    result.epochs.push_back(row);
    if (options.out_dir) {
      write_metrics_csv(*options.out_dir / "metrics.csv", result.epochs);
      write_steps_csv(*options.out_dir / "steps.csv", result.steps);
    }
    if (options.on_epoch) options.on_epoch(row);
    if (since_best >= tc.patience) {
      result.early_stopped = epoch + 1 < tc.epochs;
      break;
    }
  }
  model.load_state(best_state);
  return result;
}

namespace {

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string cell;
  while (std::getline(ss, cell, ',')) out.push_back(cell);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

double parse(const std::string& s, const std::filesystem::path& path, int line) {
  if (s == "nan") return NAN;
  try {
    std::size_t used = 0;
    const double v = std::stod(s, &used);
    if (used != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw ValidationError(path.string() + ":" + std::to_string(line) + ": bad number '" + s + "'");
  }
}

std::string fmt(double v) { return std::isnan(v) ? "nan" : format_double(v); }

}  // namespace

void write_metrics_csv(const std::filesystem::path& path, const std::vector<EpochRow>& rows) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw RuntimeError("cannot open " + path.string() + " for writing");
  out << kMetricsHeader << '\n';
  for (const EpochRow& r : rows) {
    out << r.epoch << ',' << r.step << ',' << fmt(r.lr) << ',' << fmt(r.loss_total) << ','
        << fmt(r.loss_focal) << ',' << fmt(r.loss_dice) << ',' << fmt(r.loss_aux) << ','
        << fmt(r.grad_norm) << ',' << fmt(r.val_dice_overall) << ',' << fmt(r.val_dice_defect_mean)
        << ',' << (r.best ? 1 : 0) << '\n';
  }
}

void write_steps_csv(const std::filesystem::path& path, const std::vector<StepRow>& rows) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw RuntimeError("cannot open " + path.string() + " for writing");
  out << "epoch,step,lr,loss_total,loss_focal,loss_dice,loss_aux,grad_norm,grad_norm_preclip\n";
  for (const StepRow& r : rows) {
    out << r.epoch << ',' << r.step << ',' << fmt(r.lr) << ',' << fmt(r.loss_total) << ','
        << fmt(r.loss_focal) << ',' << fmt(r.loss_dice) << ',' << fmt(r.loss_aux) << ','
        << fmt(r.grad_norm) << ',' << fmt(r.grad_norm_raw) << '\n';
  }
}

std::vector<EpochRow> read_metrics_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw RuntimeError("cannot open " + path.string());
  std::string line;
  std::getline(in, line);
  if (line != kMetricsHeader) throw ValidationError(path.string() + ": unexpected header");
  std::vector<EpochRow> rows;
  int n = 1;
  while (std::getline(in, line)) {
    ++n;
    if (line.empty()) continue;
    const auto c = split_csv(line);
    if (c.size() != 11) throw ValidationError(path.string() + ":" + std::to_string(n) + ": expected 11 fields");
    EpochRow r;
    r.epoch = static_cast<int>(parse(c[0], path, n));
    r.step = static_cast<std::int64_t>(parse(c[1], path, n));
    r.lr = parse(c[2], path, n);
    r.loss_total = parse(c[3], path, n);
    r.loss_focal = parse(c[4], path, n);
    r.loss_dice = parse(c[5], path, n);
    r.loss_aux = parse(c[6], path, n);
    r.grad_norm = parse(c[7], path, n);
    r.val_dice_overall = parse(c[8], path, n);
    r.val_dice_defect_mean = parse(c[9], path, n);
    r.best = c[10] == "1";
    rows.push_back(r);
  }
  return rows;
}

std::vector<StepRow> read_steps_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw RuntimeError("cannot open " + path.string());
  std::string line;
  std::getline(in, line);
  std::vector<StepRow> rows;
  int n = 1;
  while (std::getline(in, line)) {
    ++n;
    if (line.empty()) continue;
    const auto c = split_csv(line);
    if (c.size() != 9) throw ValidationError(path.string() + ":" + std::to_string(n) + ": expected 9 fields");
    StepRow r;
    r.epoch = static_cast<int>(parse(c[0], path, n));
    r.step = static_cast<std::int64_t>(parse(c[1], path, n));
    r.lr = parse(c[2], path, n);
    r.loss_total = parse(c[3], path, n);
    r.loss_focal = parse(c[4], path, n);
    r.loss_dice = parse(c[5], path, n);
    r.loss_aux = parse(c[6], path, n);
    r.grad_norm = parse(c[7], path, n);
    r.grad_norm_raw = parse(c[8], path, n);
    rows.push_back(r);
  }
  return rows;
}

}  // namespace muonseg
