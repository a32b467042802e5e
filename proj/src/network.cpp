#include "muonseg/network.hpp"

#include <cmath>

#include <nlohmann/json.hpp>

#include "muonseg/error.hpp"
#include "muonseg/geometry.hpp"
#include "muonseg/rng.hpp"

namespace muonseg {

using namespace ops;

ModelConfig ModelConfig::from_preset(std::string_view name, int base_width) {
  ModelConfig c;
  c.preset = std::string(name);
  c.base_width = base_width;
  if (name == "full") {
  } else if (name == "no_attn_gate") {
    c.attention_gates = false;
  } else if (name == "no_deep_sup") {
    c.deep_supervision = false;
  } else if (name == "scatter_only") {
    c.use_shower = false;
  } else if (name == "shower_only") {
    c.use_scatter = false;
  } else {
    throw ValidationError("unknown model preset '" + std::string(name) +
                          "' (expected full, no_attn_gate, no_deep_sup, scatter_only, shower_only)");
  }
  return c;
}

const std::vector<std::string>& ModelConfig::preset_names() {
  static const std::vector<std::string> names{"full", "no_attn_gate", "no_deep_sup", "scatter_only",
                                              "shower_only"};
  return names;
}

void ModelConfig::validate() const {
  if (!use_scatter && !use_shower) throw ValidationError("model config enables no input stream");
  if (base_width < 1) throw ValidationError("base_width must be >= 1");
  for (int m : width_multipliers) {
    if (m < 1) throw ValidationError("width multipliers must be >= 1");
  }
  if (heads < 1) throw ValidationError("heads must be >= 1");
  if (fused() && width(2) % heads != 0) {
    throw ValidationError("bottleneck width " + std::to_string(width(2)) +
                          " is not divisible by " + std::to_string(heads) + " heads");
  }
  if (scatter_channels < 1 || shower_channels < 1 || n_classes < 2) {
    throw ValidationError("invalid channel or class counts in model config");
  }
}

void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{{"preset", c.preset},
                     {"use_scatter", c.use_scatter},
                     {"use_shower", c.use_shower},
                     {"attention_gates", c.attention_gates},
                     {"deep_supervision", c.deep_supervision},
                     {"base_width", c.base_width},
                     {"width_multipliers", c.width_multipliers},
                     {"heads", c.heads},
                     {"in_channels", {c.scatter_channels, c.shower_channels}},
                     {"n_classes", c.n_classes}};
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
  const int width = j.value("base_width", 30);
  c = ModelConfig::from_preset(j.value("preset", std::string("full")), width);
  c.use_scatter = j.value("use_scatter", c.use_scatter);
  c.use_shower = j.value("use_shower", c.use_shower);
  c.attention_gates = j.value("attention_gates", c.attention_gates);
  c.deep_supervision = j.value("deep_supervision", c.deep_supervision);
  c.width_multipliers = j.value("width_multipliers", c.width_multipliers);
  c.heads = j.value("heads", c.heads);
  if (j.contains("in_channels")) {
    const auto in = j.at("in_channels").get<std::array<int, 2>>();
    c.scatter_channels = in[0];
    c.shower_channels = in[1];
  }
  c.n_classes = j.value("n_classes", c.n_classes);
}

template <typename T>
Var<T> attention_gate(Var<T> skip, Var<T> gating, Var<T> wx, Var<T> bx, Var<T> wg, Var<T> bg,
                      Var<T> psi_w, Var<T> psi_b) {
  const Shape& a = skip.shape();
  const Shape& b = gating.shape();
  if (a.size() != 5 || b.size() != 5 || a[0] != b[0] || a[2] != b[2] || a[3] != b[3] || a[4] != b[4]) {
    throw ValidationError("attention gate: skip " + shape_string(a) + " and gating " +
                          shape_string(b) + " are not spatially aligned");
  }
  const Var<T> inter = relu(add(conv3d(skip, wx, bx), conv3d(gating, wg, bg)));
  const Var<T> mask = sigmoid(conv3d(inter, psi_w, psi_b));
  return mul_channel_broadcast(skip, mask);
}

template <typename T>
Model<T>::Model(const ModelConfig& config, std::uint64_t seed) : config_(config), seed_(seed) {
  config_.validate();
  const int w0 = config_.width(0), w1 = config_.width(1), w2 = config_.width(2);
  if (config_.use_scatter) scatter_encoder_ = make_encoder("scatter", config_.scatter_channels);
  if (config_.use_shower) shower_encoder_ = make_encoder("shower", config_.shower_channels);
  if (config_.fused()) {
    const std::string p = "fusion.";
    Attention a{};
    a.ln_q_gamma = add_param(p + "ln_q.gamma", {w2}, Init::Ones);
    a.ln_q_beta = add_param(p + "ln_q.beta", {w2}, Init::Zeros);
    a.ln_kv_gamma = add_param(p + "ln_kv.gamma", {w2}, Init::Ones);
    a.ln_kv_beta = add_param(p + "ln_kv.beta", {w2}, Init::Zeros);
    a.wq = add_param(p + "q.weight", {w2, w2}, Init::KaimingUniform, w2);
    a.bq = add_param(p + "q.bias", {w2}, Init::Zeros);
    a.wk = add_param(p + "k.weight", {w2, w2}, Init::KaimingUniform, w2);
    a.bk = add_param(p + "k.bias", {w2}, Init::Zeros);
    a.wv = add_param(p + "v.weight", {w2, w2}, Init::KaimingUniform, w2);
    a.bv = add_param(p + "v.bias", {w2}, Init::Zeros);
    a.wo = add_param(p + "out.weight", {w2, w2}, Init::KaimingUniform, w2);
    a.bo = add_param(p + "out.bias", {w2}, Init::Zeros);
    fusion_ = a;
  }
  bottleneck_ = make_cbr("decoder.bottleneck", config_.fused() ? 2 * w2 : w2, w2);
  if (config_.deep_supervision) aux5_ = make_conv("decoder.aux5", w2, config_.n_classes, 1);

  up1_.up_conv = make_cbr("decoder.up1.up", w2, w1);
  if (config_.attention_gates) up1_.gate = make_gate("decoder.up1.gate", w1, w1, w0);
  up1_.merge_conv = make_cbr("decoder.up1.merge", 2 * w1, w1);
  if (config_.deep_supervision) up1_.aux = make_conv("decoder.aux10", w1, config_.n_classes, 1);

  up2_.up_conv = make_cbr("decoder.up2.up", w1, w0);
  if (config_.attention_gates) up2_.gate = make_gate("decoder.up2.gate", w0, w0, std::max(w0 / 2, 1));
  up2_.merge_conv = make_cbr("decoder.up2.merge", 2 * w0, w0);
  head_ = make_conv("head", w0, config_.n_classes, 1);
}

template <typename T>
int Model<T>::add_param(const std::string& name, Shape shape, Init init, int fan_in) {
  for (const auto& p : params_) {
    if (p.name == name) throw ValidationError("duplicate parameter name " + name);
  }
  Tensor<T> value(shape);
  switch (init) {
    case Init::Zeros: break;
    case Init::Ones: value.fill(T(1)); break;
    case Init::KaimingUniform: {
      // Seeded per name so adding a layer never perturbs the others.
      Philox rng(seed_, hash_string(name.c_str()));
      const double bound = std::sqrt(6.0 / fan_in);
      for (T& v : value.values()) v = static_cast<T>(rng.uniform(-bound, bound));
      break;
    }
  }
  params_.emplace_back(name, std::move(value));
  return static_cast<int>(params_.size()) - 1;
}

template <typename T>
typename Model<T>::Conv Model<T>::make_conv(const std::string& name, int cin, int cout, int k) {
  Conv c{};
  c.weight = add_param(name + ".weight", {cout, cin, k, k, k}, Init::KaimingUniform, cin * k * k * k);
  c.bias = add_param(name + ".bias", {cout}, Init::Zeros);
  return c;
}

template <typename T>
typename Model<T>::ConvBnRelu Model<T>::make_cbr(const std::string& name, int cin, int cout) {
  const Conv conv = make_conv(name + ".conv", cin, cout, 3);
  ConvBnRelu c{};
  c.weight = conv.weight;
  c.bias = conv.bias;
  c.gamma = add_param(name + ".bn.gamma", {cout}, Init::Ones);
  c.beta = add_param(name + ".bn.beta", {cout}, Init::Zeros);
  c.state = static_cast<int>(bn_states_.size());
  bn_states_.emplace_back(cout);
  bn_names_.push_back(name + ".bn");
  return c;
}

template <typename T>
typename Model<T>::Encoder Model<T>::make_encoder(const std::string& name, int cin) {
  Encoder e{};
  int prev = cin;
  for (int s = 0; s < 3; ++s) {
    e.stages[static_cast<std::size_t>(s)] = make_cbr(name + ".enc" + std::to_string(s + 1), prev, config_.width(s));
    prev = config_.width(s);
  }
  return e;
}

template <typename T>
typename Model<T>::Gate Model<T>::make_gate(const std::string& name, int skip_channels,
                                            int gating_channels, int inter) {
  Gate g{};
  g.wx = make_conv(name + ".wx", skip_channels, inter, 1);
  g.wg = make_conv(name + ".wg", gating_channels, inter, 1);
  g.psi = make_conv(name + ".psi", inter, 1, 1);
  return g;
}

template <typename T>
std::size_t Model<T>::param_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.value.size();
  return n;
}

template <typename T>
Parameter<T>& Model<T>::parameter(std::string_view name) {
  for (auto& p : params_) {
    if (p.name == name) return p;
  }
  throw ValidationError("no parameter named " + std::string(name));
}

template <typename T>
void Model<T>::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

template <typename T>
Var<T> Model<T>::bind(Tape<T>& tape, int index) {
  return tape.parameter(params_[static_cast<std::size_t>(index)]);
}

template <typename T>
Var<T> Model<T>::apply(Tape<T>& tape, const Conv& c, Var<T> x) {
  return conv3d(x, bind(tape, c.weight), bind(tape, c.bias));
}

template <typename T>
Var<T> Model<T>::apply(Tape<T>& tape, const ConvBnRelu& c, Var<T> x, bool train) {
  const Var<T> y = conv3d(x, bind(tape, c.weight), bind(tape, c.bias));
  return relu(batch_norm(y, bind(tape, c.gamma), bind(tape, c.beta),
                         bn_states_[static_cast<std::size_t>(c.state)], train));
}

template <typename T>
Var<T> Model<T>::apply(Tape<T>& tape, const Gate& g, Var<T> skip, Var<T> gating) {
  return attention_gate(skip, gating, bind(tape, g.wx.weight), bind(tape, g.wx.bias),
                        bind(tape, g.wg.weight), bind(tape, g.wg.bias), bind(tape, g.psi.weight),
                        bind(tape, g.psi.bias));
}

template <typename T>
std::array<Var<T>, 3> Model<T>::encode(Tape<T>& tape, const Encoder& e, Var<T> x, bool train) {
  const Var<T> s1 = apply(tape, e.stages[0], x, train);
  const Var<T> s2 = apply(tape, e.stages[1], max_pool_2x(s1), train);
  const Var<T> s3 = apply(tape, e.stages[2], max_pool_2x(s2), train);
  return {s1, s2, s3};
}

template <typename T>
ForwardOutput<T> Model<T>::forward(Tape<T>& tape, Var<T> stream1, Var<T> stream2, bool train) {
  auto check_input = [](Var<T> v, int channels, const char* what) {
    const Shape& s = v.shape();
    if (s.size() != 5 || s[1] != channels || s[2] != kGridDim || s[3] != kGridDim || s[4] != kGridDim) {
      throw ValidationError(std::string(what) + " input must be [N, " + std::to_string(channels) +
                            ", 20, 20, 20], got " + shape_string(s));
    }
  };
  std::optional<std::array<Var<T>, 3>> scatter, shower;
  if (config_.use_scatter) {
    check_input(stream1, config_.scatter_channels, "stream 1");
    scatter = encode(tape, *scatter_encoder_, stream1, train);
  }
  if (config_.use_shower) {
    check_input(stream2, config_.shower_channels, "stream 2");
    shower = encode(tape, *shower_encoder_, stream2, train);
  }
  if (scatter && shower && stream1.dim(0) != stream2.dim(0)) {
    throw ValidationError("stream batch sizes differ");
  }

  Var<T> bottom;
  if (fusion_) {
    const Attention& a = *fusion_;
    const AttentionWeights<T> w{bind(tape, a.ln_q_gamma), bind(tape, a.ln_q_beta),
                                bind(tape, a.ln_kv_gamma), bind(tape, a.ln_kv_beta),
                                bind(tape, a.wq), bind(tape, a.bq), bind(tape, a.wk),
                                bind(tape, a.bk), bind(tape, a.wv), bind(tape, a.bv),
                                bind(tape, a.wo), bind(tape, a.bo)};
    const Var<T> q = to_tokens((*scatter)[2]);
    const Var<T> kv = to_tokens((*shower)[2]);
    const Var<T> attended = add(q, multihead_cross_attention(q, kv, w, config_.heads));
    const int side = (*scatter)[2].dim(2);
    bottom = concat_channels(from_tokens(attended, side, side, side), (*shower)[2]);
  } else {
    bottom = scatter ? (*scatter)[2] : (*shower)[2];
  }
  const std::array<Var<T>, 3>& skips = scatter ? *scatter : *shower;
  const bool emit_aux = train && config_.deep_supervision;

  ForwardOutput<T> out;
  const Var<T> d5 = apply(tape, bottleneck_, bottom, train);
  if (emit_aux) out.aux.push_back(upsample_2x(upsample_2x(apply(tape, *aux5_, d5))));

  auto up_stage = [&](const UpStage& st, Var<T> x, Var<T> skip) {
    const Var<T> up = apply(tape, st.up_conv, upsample_2x(x), train);
    const Var<T> gated = st.gate ? apply(tape, *st.gate, skip, up) : skip;
    return apply(tape, st.merge_conv, concat_channels(gated, up), train);
  };
  const Var<T> d10 = up_stage(up1_, d5, skips[1]);
  if (emit_aux) out.aux.push_back(upsample_2x(apply(tape, *up1_.aux, d10)));
  const Var<T> d20 = up_stage(up2_, d10, skips[0]);
  out.logits = apply(tape, head_, d20);
  return out;
}

template <typename T>
std::vector<CheckpointEntry> Model<T>::state() const {
  std::vector<CheckpointEntry> entries;
  for (const auto& p : params_) entries.push_back({p.name, p.value.template cast<float>()});
  for (std::size_t i = 0; i < bn_states_.size(); ++i) {
    const auto& s = bn_states_[i];
    entries.push_back({bn_names_[i] + ".running_mean", s.running_mean.template cast<float>()});
    entries.push_back({bn_names_[i] + ".running_var", s.running_var.template cast<float>()});
    entries.push_back({bn_names_[i] + ".initialized",
                       Tensor<float>(Shape{1}, s.initialized ? 1.0f : 0.0f)});
  }
  return entries;
}

template <typename T>
void Model<T>::load_state(const std::vector<CheckpointEntry>& entries) {
  const std::vector<CheckpointEntry> expected = state();
  if (entries.size() != expected.size()) {
    throw ValidationError("checkpoint/config mismatch: checkpoint has " +
                          std::to_string(entries.size()) + " entries, model expects " +
                          std::to_string(expected.size()));
  }
  for (std::size_t i = 0; i < entries.size(); ++i) {
    if (entries[i].name != expected[i].name) {
      throw ValidationError("checkpoint/config mismatch: entry " + std::to_string(i) + " is '" +
                            entries[i].name + "', model expects '" + expected[i].name + "'");
    }
    if (entries[i].value.shape() != expected[i].value.shape()) {
      throw ValidationError("checkpoint/config mismatch: '" + entries[i].name + "' has shape " +
                            shape_string(entries[i].value.shape()) + ", model expects " +
                            shape_string(expected[i].value.shape()));
    }
  }
  std::size_t k = 0;
  for (auto& p : params_) p.value = entries[k++].value.template cast<T>();
  for (auto& s : bn_states_) {
    s.running_mean = entries[k++].value.template cast<T>();
    s.running_var = entries[k++].value.template cast<T>();
    s.initialized = entries[k++].value[0] != 0.0f;
  }
  zero_grad();
}

template <typename T>
void Model<T>::save(const std::filesystem::path& path) const {
  write_checkpoint(path, state());
}

template <typename T>
void Model<T>::load(const std::filesystem::path& path) {
  load_state(read_checkpoint(path));
}

template class Model<float>;
template class Model<double>;
template Var<float> attention_gate(Var<float>, Var<float>, Var<float>, Var<float>, Var<float>,
                                   Var<float>, Var<float>, Var<float>);
template Var<double> attention_gate(Var<double>, Var<double>, Var<double>, Var<double>,
                                    Var<double>, Var<double>, Var<double>, Var<double>);

}  // namespace muonseg
