#pragma once

#include <complex>
#include <cstdint>
#include <vector>

#include "neuroretrieve/dataio.hpp"

namespace nr::preprocess {

struct FilterSpec {
  double low_hz = 55.0;
  double high_hz = 95.0;
  std::uint32_t order = 4;
  double fs = 1024.0;
};

void validate(const FilterSpec& spec);

// One second-order section, direct form II transposed, a0 normalized to 1.
struct Biquad {
  double b0, b1, b2;
  double a1, a2;
};

struct SosFilter {
  std::vector<Biquad> sections;
  double fs = 0.0;

  std::complex<double> response(double freq_hz) const;  // H(e^{j 2 pi f / fs})
  double magnitude(double freq_hz) const { return std::abs(response(freq_hz)); }
  std::size_t effective_taps() const { return 2 * sections.size() + 1; }
};

// Digital Butterworth via analog prototype + bilinear transform with
// pre-warped edges. Throws unstable_filter if any pole lands on or outside
// the unit circle.
SosFilter design_bandpass(const FilterSpec& spec);
SosFilter design_lowpass(double cutoff_hz, double fs, std::uint32_t order);

// Zero-phase forward-backward pass with odd-reflection padding of
// 3 * effective_taps() samples and steady-state initial conditions.
// single_pass skips the backward sweep (phase-preserving mode is a config
// choice, not the default).
std::vector<double> filtfilt(const SosFilter& filter, const std::vector<double>& x);
std::vector<double> sosfilt(const SosFilter& filter, const std::vector<double>& x);

dataio::EEGClip apply_filter(const dataio::EEGClip& clip, const SosFilter& filter,
                             bool single_pass = false);

// Integer-factor decimation with an 8th-order Butterworth anti-alias
// low-pass at 0.4 * target_fs, applied zero-phase.
dataio::EEGClip resample(const dataio::EEGClip& clip, std::uint32_t target_fs);

struct NormStats {
  std::vector<double> mean;  // per channel
  std::vector<double> std;   // per channel, epsilon-guarded
  std::vector<bool> guarded;  // channels where std fell back to the epsilon floor
};

// Statistics must come from training-split clips only; callers enforce that.
NormStats fit_norm(const std::vector<dataio::EEGClip>& train_clips);
dataio::EEGClip normalize(const dataio::EEGClip& clip, const NormStats& stats);
dataio::EEGClip denormalize(const dataio::EEGClip& clip, const NormStats& stats);

}  // namespace nr::preprocess
