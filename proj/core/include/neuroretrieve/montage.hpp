#pragma once

#include <cstddef>
#include <string>

#include "neuroretrieve/tensor.hpp"

namespace nr::montage {

// Sensor graph: positions, symmetric k-NN adjacency with self-loops, and
// the row-stochastic random-walk transition matrix derived from it.
struct Montage {
  Tensor positions;   // V×3
  std::size_t k = 0;  // neighbor count used to build W
  Tensor adjacency;   // V×V, entries in {0,1}, unit diagonal, symmetric
  Tensor transition;  // V×V, rows sum to 1

  std::size_t nodes() const { return positions.rank() == 2 ? positions.dim(0) : 0; }
};

// W_ij = 1 iff j is among i's k nearest (Euclidean) or vice versa, plus
// self-loops. Distance ties break toward the lower node index. Duplicate
// positions are rejected (neighbors would be ambiguous).
Tensor build_knn_adjacency(const Tensor& positions, std::size_t k);

// P = W / rowsum(W).
Tensor transition_matrix(const Tensor& adjacency);

// Ã = row-softmax(relu(Θ_X · Θ_X'ᵀ)); nonnegative, rows sum to 1. The
// differentiable path in the encoder mirrors this computation on-tape.
Tensor adaptive_adjacency(const Tensor& theta_x, const Tensor& theta_xp);

// Deterministic stand-in for real electrode coordinates: V distinct points
// on a spherical cap (golden-angle azimuth spiral), unit head radius.
Tensor default_positions(std::size_t v);

// Text file, one "node_id x y z" per line, node_ids 0..V-1 in any order.
Tensor load_positions(const std::string& path);

Montage make_montage(const Tensor& positions, std::size_t k);

}  // namespace nr::montage
