#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "neuroretrieve/diff.hpp"
#include "neuroretrieve/tensor.hpp"

namespace nr::encoder {

// f_EEG: scalar→lift_dim input lift, `blocks` stacked units of per-time-slice
// diffusion graph convolution (over the montage transition matrix and a
// learned adaptive adjacency) followed by a gated causal TCN, then a
// permutation-invariant readout (node sum → time mean → two-layer MLP).
struct EncoderConfig {
  std::size_t blocks = 2;           // S
  std::size_t diffusion_steps = 2;  // K
  std::size_t lift_dim = 16;        // D
  std::size_t hidden_dim = 32;      // M
  std::size_t embed_dim = 10;       // adaptive-adjacency embedding width
  std::size_t kernel = 3;
  std::vector<std::size_t> dilations = {1, 2};  // one per block
  std::size_t out_dim = 128;
  // Default readout pools the elementwise sum of every block's output;
  // setting this pools the final block only.
  bool readout_last_block_only = false;
};

void validate(const EncoderConfig& cfg);

// Registers the "enc.*" tensors for a V-node montage. Weights are Glorot
// uniform, adaptive-adjacency embeddings N(0, 0.1), biases zero; every
// tensor's draw stream depends only on (seed, name).
void init_params(diff::ParamStore& store, const EncoderConfig& cfg,
                 std::size_t v, std::uint64_t seed);

// Registers the "fore.*" forecast head: one more gated TCN block (dilation 1)
// plus a per-node linear map hidden_dim → horizon.
void init_forecast_params(diff::ParamStore& store, const EncoderConfig& cfg,
                          std::size_t horizon, std::uint64_t seed);

// On-tape forward passes. `clip` is the raw V×T matrix (already
// preprocessed), `transition` the montage's row-stochastic P, and `params`
// holds leaves for the registered tensors (see diff::make_leaves).
// Final block feature sequence, T×V×hidden_dim.
diff::Var encode_features(diff::Tape& tape, const Tensor& clip,
                          const Tensor& transition, const diff::VarMap& params,
                          const EncoderConfig& cfg);
// Full encoding, (out_dim).
diff::Var encode(diff::Tape& tape, const Tensor& clip, const Tensor& transition,
                 const diff::VarMap& params, const EncoderConfig& cfg);
// Next-`horizon` estimate from the clip's features, V×horizon.
diff::Var forecast(diff::Tape& tape, const Tensor& clip, const Tensor& transition,
                   const diff::VarMap& params, const EncoderConfig& cfg,
                   std::size_t horizon);

// Gradient-free convenience wrapper around encode.
Tensor encode_value(const Tensor& clip, const Tensor& transition,
                    const diff::ParamStore& params, const EncoderConfig& cfg);

}  // namespace nr::encoder
