#pragma once

#include <cstddef>
#include <cstdint>
#include <string>

#include "neuroretrieve/diff.hpp"
#include "neuroretrieve/rng.hpp"
#include "neuroretrieve/tensor.hpp"

namespace nr::crossmodal {

// Cross-modal mismatch terms (EEG_i vs image_j and EEG_j vs image_i) are
// always in the denominator; the strategy toggles the intra-modal extras.
enum class Strategy { none, eeg_only, image_only, both };

Strategy parse_strategy(const std::string& text);
std::string strategy_name(Strategy s);

struct NegativeConfig {
  Strategy strategy = Strategy::both;
  std::size_t sample_size = 0;  // negatives drawn per query; 0 = every j != i
};

// Projections into the joint space: z̃ = relu(z·W + b), weights stored
// modality-dim × joint_dim. The small positive bias keeps all-zero rows
// (which the cosine cannot score) out of the reachable set at init.
struct ProjectionConfig {
  std::size_t eeg_dim = 128;
  std::size_t vis_dim = 128;
  std::size_t joint_dim = 64;
};

// Registers "proj.eeg.w/b" and "proj.img.w/b"; biases start at 0.01.
void init_params(diff::ParamStore& store, const ProjectionConfig& cfg,
                 std::uint64_t seed);

// Rows of z (N×dim) projected to N×joint_dim on tape; which ∈ {"eeg","img"}.
diff::Var project_rows(diff::Tape& tape, diff::Var z, const diff::VarMap& params,
                       const std::string& which);
// Single-vector convenience without a tape.
Tensor project(const Tensor& z, const diff::ParamStore& params,
               const std::string& which);

// exp(cos(a,b)/tau); zero-norm inputs are an error.
double similarity(const Tensor& a, const Tensor& b, double tau);
// entry (i,j) = similarity(row i of z_e, row j of z_i).
Tensor similarity_matrix(const Tensor& z_e, const Tensor& z_i, double tau);

// N×N 0/1 matrix, zero diagonal; row i marks the negatives drawn for query
// i (sample_size without replacement, or all off-diagonal when 0/oversized).
Tensor sample_negative_mask(std::size_t n, std::size_t sample_size, Rng& rng);

// Mean over queries of −log(positive / denominator) with the denominator
// assembled per strategy; z_e and z_i are on-tape N×joint projections.
diff::Var infonce_loss(diff::Tape& tape, diff::Var z_e, diff::Var z_i,
                       double tau, Strategy strategy, const Tensor& mask);

}  // namespace nr::crossmodal
