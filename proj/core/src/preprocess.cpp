#include "neuroretrieve/preprocess.hpp"

#include <algorithm>
#include <cmath>
#include <complex>
#include <iostream>

#include "neuroretrieve/error.hpp"

namespace nr::preprocess {

namespace {

using cplx = std::complex<double>;

// Left-half-plane poles of the analog Butterworth prototype, |p| = 1.
std::vector<cplx> prototype_poles(std::uint32_t order) {
  std::vector<cplx> poles;
  poles.reserve(order);
  for (std::uint32_t k = 0; k < order; ++k) {
    double theta = M_PI * (2.0 * k + 1.0) / (2.0 * order) + M_PI / 2.0;
    poles.emplace_back(std::cos(theta), std::sin(theta));
  }
  return poles;
}

double prewarp(double f_hz, double fs) { return 2.0 * fs * std::tan(M_PI * f_hz / fs); }

struct Zpk {
  std::vector<cplx> zeros;
  std::vector<cplx> poles;
  double gain = 1.0;
};

Zpk bilinear(const Zpk& analog, double fs) {
  const double fs2 = 2.0 * fs;
  Zpk digital;
  cplx num(1.0, 0.0), den(1.0, 0.0);
  for (const cplx& z : analog.zeros) {
    digital.zeros.push_back((fs2 + z) / (fs2 - z));
    num *= (fs2 - z);
  }
  for (const cplx& p : analog.poles) {
    digital.poles.push_back((fs2 + p) / (fs2 - p));
    den *= (fs2 - p);
  }
  // Analog zeros at infinity become digital zeros at z = -1.
  for (std::size_t i = analog.zeros.size(); i < analog.poles.size(); ++i)
    digital.zeros.emplace_back(-1.0, 0.0);
  digital.gain = analog.gain * (num / den).real();
  return digital;
}

// Pairs conjugate roots. Expects a conjugate-closed set; real roots are
// paired among themselves in sorted order.
std::vector<std::pair<cplx, cplx>> conjugate_pairs(std::vector<cplx> roots) {
  const double tol = 1e-10;
  std::sort(roots.begin(), roots.end(), [](const cplx& a, const cplx& b) {
    if (a.real() != b.real()) return a.real() < b.real();
    return a.imag() < b.imag();
  });
  std::vector<cplx> reals, uppers;
  for (const cplx& r : roots) {
    if (std::fabs(r.imag()) <= tol)
      reals.emplace_back(r.real(), 0.0);
    else if (r.imag() > 0.0)
      uppers.push_back(r);
  }
  std::vector<std::pair<cplx, cplx>> pairs;
  for (const cplx& u : uppers) pairs.emplace_back(u, std::conj(u));
  for (std::size_t i = 0; i + 1 < reals.size(); i += 2) pairs.emplace_back(reals[i], reals[i + 1]);
  if (reals.size() % 2 != 0)
    fail(Errc::invalid_argument, "odd number of real roots cannot form biquads");
  return pairs;
}

SosFilter zpk_to_sos(const Zpk& zpk, double fs) {
  if (zpk.zeros.size() != zpk.poles.size() || zpk.poles.size() % 2 != 0)
    fail(Errc::invalid_argument, "zpk_to_sos expects an even, balanced root count");
  auto pole_pairs = conjugate_pairs(zpk.poles);
  auto zero_pairs = conjugate_pairs(zpk.zeros);
  if (pole_pairs.size() != zero_pairs.size())
    fail(Errc::invalid_argument, "mismatched section counts");
  const std::size_t n = pole_pairs.size();
  const double g = std::pow(std::fabs(zpk.gain), 1.0 / static_cast<double>(n));
  const double gsign = zpk.gain < 0.0 ? -1.0 : 1.0;

  SosFilter filt;
  filt.fs = fs;
  for (std::size_t i = 0; i < n; ++i) {
    const auto& [p1, p2] = pole_pairs[i];
    const auto& [z1, z2] = zero_pairs[i];
    Biquad s{};
    double sec_gain = (i == 0) ? g * gsign : g;
    s.b0 = sec_gain;
    s.b1 = sec_gain * (-(z1 + z2).real());
    s.b2 = sec_gain * (z1 * z2).real();
    s.a1 = -(p1 + p2).real();
    s.a2 = (p1 * p2).real();
    double pole_mag = std::max(std::abs(p1), std::abs(p2));
    if (pole_mag >= 1.0)
      fail(Errc::unstable_filter,
           "designed filter has pole magnitude " + std::to_string(pole_mag));
    filt.sections.push_back(s);
  }
  return filt;
}

// Steady-state DF2T state for a unit-amplitude constant input.
struct BiquadZi {
  double z1, z2;
  double dc_gain;
};

BiquadZi steady_state(const Biquad& s) {
  double dc = (s.b0 + s.b1 + s.b2) / (1.0 + s.a1 + s.a2);
  BiquadZi zi{};
  zi.dc_gain = dc;
  zi.z1 = dc - s.b0;
  zi.z2 = s.b2 - s.a2 * dc;
  return zi;
}

std::vector<double> run_cascade(const SosFilter& filt, const std::vector<double>& x,
                                double x0_scale) {
  std::vector<double> y = x;
  double level = x0_scale;
  for (const Biquad& s : filt.sections) {
    BiquadZi zi = steady_state(s);
    double z1 = zi.z1 * level;
    double z2 = zi.z2 * level;
    for (double& v : y) {
      double in = v;
      double out = s.b0 * in + z1;
      z1 = s.b1 * in - s.a1 * out + z2;
      z2 = s.b2 * in - s.a2 * out;
      v = out;
    }
    level *= zi.dc_gain;
  }
  return y;
}

}  // namespace

void validate(const FilterSpec& spec) {
  if (spec.order < 1) fail(Errc::invalid_argument, "filter order must be >= 1");
  if (!(spec.fs > 0.0)) fail(Errc::invalid_argument, "sampling rate must be positive");
  if (!(spec.low_hz > 0.0) || !(spec.low_hz < spec.high_hz))
    fail(Errc::invalid_argument, "need 0 < low < high, got low=" + std::to_string(spec.low_hz) +
                                     " high=" + std::to_string(spec.high_hz));
  if (!(spec.high_hz < spec.fs / 2.0))
    fail(Errc::invalid_argument, "band edge " + std::to_string(spec.high_hz) +
                                     " Hz must be below Nyquist " + std::to_string(spec.fs / 2.0));
}

std::complex<double> SosFilter::response(double freq_hz) const {
  const cplx z = std::polar(1.0, 2.0 * M_PI * freq_hz / fs);
  const cplx zinv = 1.0 / z;
  cplx h(1.0, 0.0);
  for (const Biquad& s : sections)
    h *= (s.b0 + s.b1 * zinv + s.b2 * zinv * zinv) /
         (1.0 + s.a1 * zinv + s.a2 * zinv * zinv);
  return h;
}

SosFilter design_bandpass(const FilterSpec& spec) {
  validate(spec);
  const double wl = prewarp(spec.low_hz, spec.fs);
  const double wh = prewarp(spec.high_hz, spec.fs);
  const double bw = wh - wl;
  const double w0sq = wl * wh;

  Zpk analog;
  analog.gain = std::pow(bw, static_cast<double>(spec.order));
  for (const cplx& p : prototype_poles(spec.order)) {
    // s_lp -> (s^2 + w0^2) / (bw * s): each prototype pole splits in two.
    cplx pb = p * bw * 0.5;
    cplx disc = std::sqrt(pb * pb - cplx(w0sq, 0.0));
    analog.poles.push_back(pb + disc);
    analog.poles.push_back(pb - disc);
  }
  analog.zeros.assign(spec.order, cplx(0.0, 0.0));

  return zpk_to_sos(bilinear(analog, spec.fs), spec.fs);
}

SosFilter design_lowpass(double cutoff_hz, double fs, std::uint32_t order) {
  if (order < 1 || order % 2 != 0)
    fail(Errc::invalid_argument, "lowpass order must be a positive even number");
  if (!(cutoff_hz > 0.0 && cutoff_hz < fs / 2.0))
    fail(Errc::invalid_argument, "lowpass cutoff must lie in (0, Nyquist)");
  const double wc = prewarp(cutoff_hz, fs);
  Zpk analog;
  analog.gain = std::pow(wc, static_cast<double>(order));
  for (const cplx& p : prototype_poles(order)) analog.poles.push_back(p * wc);
  // All prototype zeros at infinity.
  return zpk_to_sos(bilinear(analog, fs), fs);
}

std::vector<double> sosfilt(const SosFilter& filter, const std::vector<double>& x) {
  if (x.empty()) return {};
  return run_cascade(filter, x, x.front());
}

std::vector<double> filtfilt(const SosFilter& filter, const std::vector<double>& x) {
  const std::size_t n = x.size();
  if (n < 2) fail(Errc::invalid_argument, "filtfilt needs at least 2 samples");
  std::size_t pad = 3 * filter.effective_taps();
  pad = std::min(pad, n - 1);

  // Odd reflection about the end samples.
  std::vector<double> ext;
  ext.reserve(n + 2 * pad);
  for (std::size_t i = pad; i >= 1; --i) ext.push_back(2.0 * x.front() - x[i]);
  ext.insert(ext.end(), x.begin(), x.end());
  for (std::size_t i = 1; i <= pad; ++i) ext.push_back(2.0 * x.back() - x[n - 1 - i]);

  std::vector<double> fwd = run_cascade(filter, ext, ext.front());
  std::reverse(fwd.begin(), fwd.end());
  std::vector<double> bwd = run_cascade(filter, fwd, fwd.front());
  std::reverse(bwd.begin(), bwd.end());

  return std::vector<double>(bwd.begin() + static_cast<std::ptrdiff_t>(pad),
                             bwd.begin() + static_cast<std::ptrdiff_t>(pad + n));
}

dataio::EEGClip apply_filter(const dataio::EEGClip& clip, const SosFilter& filter,
                             bool single_pass) {
  dataio::validate_clip(clip);
  if (static_cast<double>(clip.fs) != filter.fs)
    fail(Errc::invalid_argument, "clip rate " + std::to_string(clip.fs) +
                                     " Hz does not match filter design rate " +
                                     std::to_string(filter.fs) + " Hz");
  dataio::EEGClip out = clip;
  const std::size_t v = clip.channels(), t = clip.samples();
  std::vector<double> row(t);
  for (std::size_t i = 0; i < v; ++i) {
    const double* src = clip.data.data() + i * t;
    row.assign(src, src + t);
    std::vector<double> filtered = single_pass ? sosfilt(filter, row) : filtfilt(filter, row);
    std::copy(filtered.begin(), filtered.end(), out.data.data() + i * t);
  }
  return out;
}

dataio::EEGClip resample(const dataio::EEGClip& clip, std::uint32_t target_fs) {
  dataio::validate_clip(clip);
  if (target_fs == 0 || target_fs >= clip.fs)
    fail(Errc::invalid_argument, "target rate must be positive and below the clip rate");
  if (clip.fs % target_fs != 0)
    fail(Errc::invalid_argument, "non-integer decimation factor " +
                                     std::to_string(clip.fs) + "/" + std::to_string(target_fs));
  const std::uint32_t factor = clip.fs / target_fs;
  SosFilter aa = design_lowpass(0.4 * target_fs, static_cast<double>(clip.fs), 8);

  const std::size_t v = clip.channels(), t = clip.samples();
  const std::size_t t_out = (t + factor - 1) / factor;
  dataio::EEGClip out;
  out.pair_id = clip.pair_id;
  out.class_label = clip.class_label;
  out.fs = target_fs;
  out.data = Tensor({v, t_out});
  std::vector<double> row(t);
  for (std::size_t i = 0; i < v; ++i) {
    const double* src = clip.data.data() + i * t;
    row.assign(src, src + t);
    std::vector<double> smooth = filtfilt(aa, row);
    for (std::size_t j = 0; j < t_out; ++j) out.data.at(i, j) = smooth[j * factor];
  }
  return out;
}

NormStats fit_norm(const std::vector<dataio::EEGClip>& train_clips) {
  if (train_clips.empty()) fail(Errc::invalid_argument, "fit_norm needs at least one clip");
  const std::size_t v = train_clips.front().channels();
  for (const auto& c : train_clips)
    if (c.channels() != v)
      fail(Errc::shape_mismatch, "clips disagree on channel count in fit_norm");

  NormStats stats;
  stats.mean.assign(v, 0.0);
  stats.std.assign(v, 0.0);
  stats.guarded.assign(v, false);

  std::vector<std::size_t> counts(v, 0);
  for (const auto& c : train_clips) {
    const std::size_t t = c.samples();
    for (std::size_t i = 0; i < v; ++i) {
      const double* row = c.data.data() + i * t;
      for (std::size_t j = 0; j < t; ++j) stats.mean[i] += row[j];
      counts[i] += t;
    }
  }
  for (std::size_t i = 0; i < v; ++i) stats.mean[i] /= static_cast<double>(counts[i]);

  for (const auto& c : train_clips) {
    const std::size_t t = c.samples();
    for (std::size_t i = 0; i < v; ++i) {
      const double* row = c.data.data() + i * t;
      for (std::size_t j = 0; j < t; ++j) {
        double d = row[j] - stats.mean[i];
        stats.std[i] += d * d;
      }
    }
  }
  constexpr double kEps = 1e-8;
  for (std::size_t i = 0; i < v; ++i) {
    stats.std[i] = std::sqrt(stats.std[i] / static_cast<double>(counts[i]));
    if (stats.std[i] < kEps) {
      stats.std[i] = kEps;
      stats.guarded[i] = true;
      std::cerr << "warning: channel " << i << " has ~zero variance; std clamped to 1e-8\n";
    }
  }
  return stats;
}

dataio::EEGClip normalize(const dataio::EEGClip& clip, const NormStats& stats) {
  dataio::validate_clip(clip);
  if (clip.channels() != stats.mean.size())
    fail(Errc::shape_mismatch, "clip channel count does not match NormStats");
  dataio::EEGClip out = clip;
  const std::size_t t = clip.samples();
  for (std::size_t i = 0; i < clip.channels(); ++i)
    for (std::size_t j = 0; j < t; ++j)
      out.data.at(i, j) = (clip.data.at(i, j) - stats.mean[i]) / stats.std[i];
  return out;
}

dataio::EEGClip denormalize(const dataio::EEGClip& clip, const NormStats& stats) {
  dataio::validate_clip(clip);
  if (clip.channels() != stats.mean.size())
    fail(Errc::shape_mismatch, "clip channel count does not match NormStats");
  dataio::EEGClip out = clip;
  const std::size_t t = clip.samples();
  for (std::size_t i = 0; i < clip.channels(); ++i)
    for (std::size_t j = 0; j < t; ++j)
      out.data.at(i, j) = clip.data.at(i, j) * stats.std[i] + stats.mean[i];
  return out;
}

}  // namespace nr::preprocess
