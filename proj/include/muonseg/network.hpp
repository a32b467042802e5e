#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "muonseg/checkpoint.hpp"
#include "muonseg/ops.hpp"
#include "muonseg/tape.hpp"

namespace muonseg {

struct ModelConfig {
  std::string preset = "full";
  bool use_scatter = true;
  bool use_shower = true;
  bool attention_gates = true;
  bool deep_supervision = true;
  int base_width = 30;
  std::array<int, 3> width_multipliers{1, 2, 4};
  int heads = 4;
  int scatter_channels = 9;
  int shower_channels = 40;
  int n_classes = 6;

  // full, no_attn_gate, no_deep_sup, scatter_only, shower_only.
  static ModelConfig from_preset(std::string_view name, int base_width = 30);
  static const std::vector<std::string>& preset_names();
  void validate() const;
  bool fused() const { return use_scatter && use_shower; }
  int width(int stage) const { return base_width * width_multipliers[static_cast<std::size_t>(stage)]; }
};

void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

template <typename T>
struct ForwardOutput {
  Var<T> logits;             // [N, 6, 20, 20, 20]
  std::vector<Var<T>> aux;   // 5^3 head then 10^3 head, upsampled to 20^3
};

// SA-DSVN. Parameters live in one contiguous vector so optimizers and
// clipping can treat them as a span; layers refer to them by index.
template <typename T>
class Model {
 public:
  Model(const ModelConfig& config, std::uint64_t seed);

  const ModelConfig& config() const { return config_; }
  std::vector<Parameter<T>>& parameters() { return params_; }
  const std::vector<Parameter<T>>& parameters() const { return params_; }
  std::vector<BatchNormState<T>>& batch_norm_states() { return bn_states_; }
  std::size_t param_count() const;
  Parameter<T>& parameter(std::string_view name);
  void zero_grad();

  // stream1: [N, 9, 20, 20, 20], stream2: [N, 40, 20, 20, 20]. A disabled
  // stream's input is never read and may be an invalid Var. Aux heads are
  // emitted only when training with deep supervision.
  ForwardOutput<T> forward(Tape<T>& tape, Var<T> stream1, Var<T> stream2, bool train);

  // Parameters first (in registration order), then batch-norm running
  // statistics as "<layer>.running_mean", ".running_var", ".initialized".
  std::vector<CheckpointEntry> state() const;
  void load_state(const std::vector<CheckpointEntry>& entries);
  void save(const std::filesystem::path& path) const;
  void load(const std::filesystem::path& path);

 private:
  struct ConvBnRelu {
    int weight, bias, gamma, beta, state;
  };
  struct Conv {
    int weight, bias;
  };
  struct Gate {
    Conv wx, wg, psi;
  };
  struct Encoder {
    std::array<ConvBnRelu, 3> stages;
  };
  struct Attention {
    int ln_q_gamma, ln_q_beta, ln_kv_gamma, ln_kv_beta, wq, bq, wk, bk, wv, bv, wo, bo;
  };
  struct UpStage {
    ConvBnRelu up_conv;
    std::optional<Gate> gate;
    ConvBnRelu merge_conv;
    std::optional<Conv> aux;
  };

  enum class Init { KaimingUniform, Zeros, Ones };
  int add_param(const std::string& name, Shape shape, Init init, int fan_in = 0);
  Conv make_conv(const std::string& name, int cin, int cout, int k);
  ConvBnRelu make_cbr(const std::string& name, int cin, int cout);
  Encoder make_encoder(const std::string& name, int cin);
  Gate make_gate(const std::string& name, int skip_channels, int gating_channels, int inter);

  Var<T> bind(Tape<T>& tape, int index);
  Var<T> apply(Tape<T>& tape, const Conv& c, Var<T> x);
  Var<T> apply(Tape<T>& tape, const ConvBnRelu& c, Var<T> x, bool train);
  Var<T> apply(Tape<T>& tape, const Gate& g, Var<T> skip, Var<T> gating);
  std::array<Var<T>, 3> encode(Tape<T>& tape, const Encoder& e, Var<T> x, bool train);

  ModelConfig config_;
  std::uint64_t seed_;
  std::vector<Parameter<T>> params_;
  std::vector<BatchNormState<T>> bn_states_;
  std::vector<std::string> bn_names_;
  std::optional<Encoder> scatter_encoder_, shower_encoder_;
  std::optional<Attention> fusion_;
  ConvBnRelu bottleneck_{};
  std::optional<Conv> aux5_;
  UpStage up1_{}, up2_{};
  Conv head_{};
};

// 1x1 attention gate with explicit weights; the network uses it internally
// and tests drive it directly.
template <typename T>
Var<T> attention_gate(Var<T> skip, Var<T> gating, Var<T> wx, Var<T> bx, Var<T> wg, Var<T> bg,
                      Var<T> psi_w, Var<T> psi_b);

extern template class Model<float>;
extern template class Model<double>;

}  // namespace muonseg
