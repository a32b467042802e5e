#pragma once

#include <span>

#include "muonseg/tape.hpp"
#include "muonseg/tensor.hpp"

// Differentiable operators. Volumes are [N, C, D, H, W] with W (x) fastest;
// token sequences are [N, S, d]. Every op records a backward closure on the
// tape of its first argument. Instantiated for float and double.
namespace muonseg::ops {

inline constexpr double kNormEpsilon = 1e-5;
inline constexpr double kBatchNormMomentum = 0.1;

// Cross-correlation with an odd cubic kernel (1 or 3), stride 1, zero padding
// k/2. weight: [C_out, C_in, k, k, k], bias: [C_out].
template <typename T>
Var<T> conv3d(Var<T> x, Var<T> weight, Var<T> bias);

// Per-channel batch normalisation over (N, D, H, W). Training mode uses batch
// statistics (biased variance) and updates the running estimates with
// momentum 0.1 (unbiased variance, as is conventional); eval mode uses the
// running estimates and throws if no training step has populated them.
template <typename T>
Var<T> batch_norm(Var<T> x, Var<T> gamma, Var<T> beta, BatchNormState<T>& state, bool train);

template <typename T>
Var<T> relu(Var<T> x);
template <typename T>
Var<T> sigmoid(Var<T> x);
template <typename T>
Var<T> softmax_last(Var<T> x);
template <typename T>
Var<T> layer_norm_last(Var<T> x, Var<T> gamma, Var<T> beta);

// 2x2x2 max pooling; ties go to the first element in (d, h, w) order.
template <typename T>
Var<T> max_pool_2x(Var<T> x);

// 2x trilinear upsampling, align_corners = false: output index o samples the
// input at o/2 - 1/4, clamped to the edge.
template <typename T>
Var<T> upsample_2x(Var<T> x);

template <typename T>
Var<T> concat_channels(Var<T> a, Var<T> b);
template <typename T>
Var<T> add(Var<T> a, Var<T> b);
template <typename T>
Var<T> scale(Var<T> a, T factor);
// x: [N, C, ...], mask: [N, 1, ...]; mask broadcast over channels.
template <typename T>
Var<T> mul_channel_broadcast(Var<T> x, Var<T> mask);

// [N, C, D, H, W] <-> [N, D*H*W, C]
template <typename T>
Var<T> to_tokens(Var<T> x);
template <typename T>
Var<T> from_tokens(Var<T> tokens, int depth, int height, int width);

// y = x W^T + b over the last axis; weight: [d_out, d_in].
template <typename T>
Var<T> linear(Var<T> x, Var<T> weight, Var<T> bias);

// [N, S, h*dh] <-> [N*h, S, dh]
template <typename T>
Var<T> split_heads(Var<T> x, int heads);
template <typename T>
Var<T> merge_heads(Var<T> x, int heads);

// Batched a b^T: [B, M, K] x [B, N, K] -> [B, M, N].
template <typename T>
Var<T> matmul_nt(Var<T> a, Var<T> b);
// Batched a b: [B, M, K] x [B, K, N] -> [B, M, N].
template <typename T>
Var<T> matmul_nn(Var<T> a, Var<T> b);

// Scalar reductions, mostly for building test objectives.
template <typename T>
Var<T> sum(Var<T> x);
template <typename T>
Var<T> weighted_sum(Var<T> x, const Tensor<T>& weights);

template <typename T>
struct AttentionWeights {
  Var<T> ln_q_gamma, ln_q_beta, ln_kv_gamma, ln_kv_beta;
  Var<T> wq, bq, wk, bk, wv, bv, wo, bo;
};

// Pre-norm multi-head cross-attention: queries from q_src [N, Sq, d], keys
// and values from kv_src [N, Skv, d]; scores scaled by 1/sqrt(d/heads).
// When `weights_out` is given it receives the attention weights
// [N*heads, Sq, Skv].
template <typename T>
Var<T> multihead_cross_attention(Var<T> q_src, Var<T> kv_src, const AttentionWeights<T>& w,
                                 int heads, Tensor<T>* weights_out = nullptr);

// L2 norm of all parameter gradients, accumulated in double in order.
template <typename T>
double global_grad_norm(std::span<const Parameter<T>> params);

// Rescales every gradient by max_norm / norm when norm > max_norm. Returns the
// norm before clipping.
template <typename T>
double clip_by_global_norm(std::span<Parameter<T>> params, double max_norm);

}  // namespace muonseg::ops
