#pragma once

#include <complex>
#include <cstddef>
#include <vector>

namespace nr::signal {

// In-place radix-2 FFT; n must be a power of two.
void fft(std::vector<std::complex<double>>& x, bool inverse = false);

bool is_power_of_two(std::size_t n);

// |X_k| for k = 0..n/2 of a real input (power-of-two length).
std::vector<double> magnitude_spectrum(const std::vector<double>& x);

// Amplitude of the sinusoid at an exact bin frequency: 2|X_k|/n.
double amplitude_at(const std::vector<double>& x, std::size_t bin);

// Mean of |X_k|^2 over bins [lo, hi).
double band_power(const std::vector<double>& x, std::size_t lo_bin, std::size_t hi_bin);

}  // namespace nr::signal
