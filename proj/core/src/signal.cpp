#include "neuroretrieve/signal.hpp"

#include <cmath>

#include "neuroretrieve/error.hpp"

namespace nr::signal {

bool is_power_of_two(std::size_t n) { return n > 0 && (n & (n - 1)) == 0; }

void fft(std::vector<std::complex<double>>& x, bool inverse) {
  const std::size_t n = x.size();
  if (!is_power_of_two(n)) fail(Errc::invalid_argument, "fft length must be a power of two");
  // Bit-reversal permutation.
  for (std::size_t i = 1, j = 0; i < n; ++i) {
    std::size_t bit = n >> 1;
    for (; j & bit; bit >>= 1) j ^= bit;
    j ^= bit;
    if (i < j) std::swap(x[i], x[j]);
  }
  for (std::size_t len = 2; len <= n; len <<= 1) {
    double ang = 2.0 * M_PI / static_cast<double>(len) * (inverse ? 1.0 : -1.0);
    std::complex<double> wlen(std::cos(ang), std::sin(ang));
    for (std::size_t i = 0; i < n; i += len) {
      std::complex<double> w(1.0, 0.0);
      for (std::size_t k = 0; k < len / 2; ++k) {
        std::complex<double> u = x[i + k];
        std::complex<double> v = x[i + k + len / 2] * w;
        x[i + k] = u + v;
        x[i + k + len / 2] = u - v;
        w *= wlen;
      }
    }
  }
  if (inverse)
    for (auto& v : x) v /= static_cast<double>(n);
}

std::vector<double> magnitude_spectrum(const std::vector<double>& x) {
  std::vector<std::complex<double>> buf(x.begin(), x.end());
  fft(buf);
  std::vector<double> mag(x.size() / 2 + 1);
  for (std::size_t k = 0; k < mag.size(); ++k) mag[k] = std::abs(buf[k]);
  return mag;
}

double amplitude_at(const std::vector<double>& x, std::size_t bin) {
  auto mag = magnitude_spectrum(x);
  if (bin >= mag.size()) fail(Errc::out_of_range, "spectrum bin out of range");
  double scale = (bin == 0 || bin == x.size() / 2) ? 1.0 : 2.0;
  return scale * mag[bin] / static_cast<double>(x.size());
}

double band_power(const std::vector<double>& x, std::size_t lo_bin, std::size_t hi_bin) {
  auto mag = magnitude_spectrum(x);
  if (hi_bin > mag.size() || lo_bin >= hi_bin) fail(Errc::out_of_range, "bad band bins");
  double acc = 0.0;
  for (std::size_t k = lo_bin; k < hi_bin; ++k) acc += mag[k] * mag[k];
  return acc / static_cast<double>(hi_bin - lo_bin);
}

}  // namespace nr::signal
