#pragma once

#include <cstddef>
#include <cstdint>
#include <string>

#include "neuroretrieve/dataio.hpp"
#include "neuroretrieve/diff.hpp"
#include "neuroretrieve/tensor.hpp"

namespace nr::visual {

// Built-in stand-in for a pretrained image backbone: three conv→relu→avgpool
// stages (1→8→16→32 channels) and a linear head to `dim`. Frozen by default;
// `trainable` lets the trainer update it jointly.
struct VisualConfig {
  std::size_t side = 32;  // model input side; three poolings need side % 8 == 0
  std::size_t dim = 128;
  bool trainable = false;
};

void validate(const VisualConfig& cfg);

// Registers the "img.*" tensors (Glorot weights, zero biases).
void init_params(diff::ParamStore& store, const VisualConfig& cfg,
                 std::uint64_t seed);

// pixels is 1×side×side (or side×side, treated as one channel), values [0,1].
diff::Var encode_image(diff::Tape& tape, const Tensor& pixels,
                       const diff::VarMap& params, const VisualConfig& cfg);
Tensor encode_image_value(const Tensor& pixels, const diff::ParamStore& params,
                          const VisualConfig& cfg);

// Stored row for pair_id, verified against the width the model expects.
Tensor encode_from_cache(const std::string& pair_id,
                         const dataio::EmbeddingCache& cache,
                         std::size_t expected_dim);

// Bilinear resample (half-pixel centers) to side×side; accepts H×W or C×H×W.
Tensor resize_to_model(const Tensor& pixels, std::size_t side);

}  // namespace nr::visual
