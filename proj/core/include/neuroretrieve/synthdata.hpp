#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "neuroretrieve/dataio.hpp"
#include "neuroretrieve/tensor.hpp"

namespace nr::synth {

// Paired EEG/image generator with a controllable cross-modal signal level.
// Each pair draws a latent code (class prototype + instance perturbation);
// the image is an oriented grating whose frequency/orientation encode the
// class and whose phase/offset encode the instance, and the EEG is a
// channel-mixed sum of fixed tones whose amplitudes and phases come from the
// same latent code, scaled by `snr` over unit 1/f noise.
struct SynthConfig {
  std::size_t n_classes = 8;
  std::size_t per_class = 25;
  std::size_t v = 16;   // channels
  std::size_t t = 256;  // samples per clip
  std::uint32_t fs = 128;
  std::size_t side = 32;      // image side
  double snr = 2.0;           // signal-to-noise amplitude ratio
  std::size_t latent_dim = 6;
  std::size_t n_sets = 5;     // split sets stamped into the manifest
  std::uint64_t seed = 7;
};

void validate(const SynthConfig& cfg);

struct SynthData {
  std::vector<dataio::EEGClip> clips;  // manifest order
  dataio::ImageStore images;
  dataio::PairManifest manifest;
};

// Fully deterministic in cfg.seed; all stored values sit on the f32 grid so
// a save/load round-trip reproduces them bit-exactly.
SynthData generate(const SynthConfig& cfg);

// Oracle that recoverable class signal actually exists in the clips: ridge
// one-vs-rest on per-channel band-power features, 80/20 split, accuracy on
// the held-out 20%.
double probe_decodability(const std::vector<dataio::EEGClip>& clips,
                          const std::vector<std::string>& labels,
                          std::uint64_t seed = 0);

}  // namespace nr::synth
