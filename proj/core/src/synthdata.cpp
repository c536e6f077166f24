#include "neuroretrieve/synthdata.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <numbers>

#include "neuroretrieve/error.hpp"
#include "neuroretrieve/evalmetrics.hpp"
#include "neuroretrieve/rng.hpp"
#include "neuroretrieve/signal.hpp"

namespace nr::synth {

namespace {

constexpr std::size_t kBands = 6;

double softplus(double x) {
  return x > 30.0 ? x : std::log1p(std::exp(x));
}

std::string pair_name(std::size_t i) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "pair%04zu", i);
  return buf;
}

// Voss-McCartney: one always-on generator plus octave-spaced holds gives an
// approximately 1/f spectrum.
Tensor pink_noise(std::size_t v, std::size_t t, Rng& rng) {
  constexpr std::size_t kOctaves = 6;
  Tensor out({v, t});
  for (std::size_t ch = 0; ch < v; ++ch) {
    double held[kOctaves];
    for (double& h : held) h = rng.normal();
    for (std::size_t i = 0; i < t; ++i) {
      double acc = rng.normal();
      for (std::size_t o = 0; o < kOctaves; ++o) {
        if (i % (std::size_t{1} << (o + 1)) == 0) held[o] = rng.normal();
        acc += held[o];
      }
      out.at(ch, i) = acc;
    }
  }
  return out;
}

double rms(const Tensor& x) {
  double acc = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) acc += x[i] * x[i];
  return std::sqrt(acc / static_cast<double>(x.size()));
}

}  // namespace

void validate(const SynthConfig& cfg) {
  if (cfg.n_classes < 1 || cfg.per_class < 1 || cfg.v < 1 || cfg.t < 2 ||
      cfg.fs < 2 || cfg.side < 1 || cfg.latent_dim < 1 || cfg.n_sets < 2) {
    fail(Errc::invalid_argument, "all synth dimensions must be positive");
  }
  if (cfg.snr < 0.0) fail(Errc::invalid_argument, "snr must be >= 0");
  if (cfg.n_classes * cfg.per_class > 9999) {
    fail(Errc::invalid_argument, "generator supports at most 9999 pairs");
  }
  if (cfg.per_class % cfg.n_sets != 0) {
    fail(Errc::invalid_argument,
         "per_class " + std::to_string(cfg.per_class) +
             " must divide evenly into " + std::to_string(cfg.n_sets) +
             " sets (remainder " + std::to_string(cfg.per_class % cfg.n_sets) +
             ")");
  }
}

SynthData generate(const SynthConfig& cfg) {
  validate(cfg);
  const std::size_t n_pairs = cfg.n_classes * cfg.per_class;
  const std::size_t l = cfg.latent_dim;

  // Dataset-level structure: class prototypes, latent→amplitude/phase maps,
  // channel mixing, per-channel phase offsets, image instance maps.
  Rng proto_rng(Rng::mix(cfg.seed, Rng::hash_str("synth.proto")));
  std::vector<Tensor> prototypes;
  prototypes.reserve(cfg.n_classes);
  for (std::size_t c = 0; c < cfg.n_classes; ++c) {
    Tensor p({l});
    for (std::size_t d = 0; d < l; ++d) p[d] = proto_rng.normal();
    prototypes.push_back(std::move(p));
  }

  Rng maps_rng(Rng::mix(cfg.seed, Rng::hash_str("synth.maps")));
  Tensor w_amp({kBands, l}), w_phase({kBands, l});
  for (std::size_t i = 0; i < w_amp.size(); ++i) w_amp.vec()[i] = maps_rng.normal();
  for (std::size_t i = 0; i < w_phase.size(); ++i) w_phase.vec()[i] = maps_rng.normal();
  Tensor mixing({cfg.v, kBands});
  for (std::size_t i = 0; i < mixing.size(); ++i) {
    mixing.vec()[i] = std::abs(maps_rng.normal()) + 0.2;
  }
  Tensor channel_phase({cfg.v, kBands});
  for (std::size_t i = 0; i < channel_phase.size(); ++i) {
    channel_phase.vec()[i] = maps_rng.uniform(0.0, 2.0 * std::numbers::pi);
  }
  Tensor w_img_phase({l}), w_img_offset({l});
  for (std::size_t d = 0; d < l; ++d) w_img_phase[d] = maps_rng.normal();
  for (std::size_t d = 0; d < l; ++d) w_img_offset[d] = maps_rng.normal();

  // Tones at fixed fractions of fs, clear of DC and Nyquist.
  double tone_hz[kBands];
  for (std::size_t b = 0; b < kBands; ++b) {
    tone_hz[b] = static_cast<double>(cfg.fs) * (0.10 + 0.07 * static_cast<double>(b));
  }

  Rng inst_rng(Rng::mix(cfg.seed, Rng::hash_str("synth.instance")));
  Rng noise_rng(Rng::mix(cfg.seed, Rng::hash_str("synth.noise")));

  SynthData data;
  data.clips.reserve(n_pairs);
  data.images.side = static_cast<std::uint32_t>(cfg.side);
  data.images.pixels = Tensor::zeros({n_pairs, cfg.side, cfg.side});
  data.manifest.n_sets = static_cast<std::uint32_t>(cfg.n_sets);

  for (std::size_t i = 0; i < n_pairs; ++i) {
    const std::size_t cls = i / cfg.per_class;
    const std::string id = pair_name(i);
    const std::string label = "class" + std::to_string(cls);

    Tensor u({l});
    for (std::size_t d = 0; d < l; ++d) {
      u[d] = prototypes[cls][d] + 0.35 * inst_rng.normal();
    }

    double amp[kBands], phase[kBands];
    for (std::size_t b = 0; b < kBands; ++b) {
      double da = 0.0, dp = 0.0;
      for (std::size_t d = 0; d < l; ++d) {
        da += w_amp.at(b, d) * u[d];
        dp += w_phase.at(b, d) * u[d];
      }
      amp[b] = softplus(da);
      phase[b] = dp;
    }

    Tensor clean = Tensor::zeros({cfg.v, cfg.t});
    for (std::size_t ch = 0; ch < cfg.v; ++ch) {
      for (std::size_t s = 0; s < cfg.t; ++s) {
        const double time = static_cast<double>(s) / static_cast<double>(cfg.fs);
        double acc = 0.0;
        for (std::size_t b = 0; b < kBands; ++b) {
          acc += mixing.at(ch, b) * amp[b] *
                 std::sin(2.0 * std::numbers::pi * tone_hz[b] * time + phase[b] +
                          channel_phase.at(ch, b));
        }
        clean.at(ch, s) = acc;
      }
    }
    Tensor noise = pink_noise(cfg.v, cfg.t, noise_rng);
    const double clean_rms = rms(clean);
    const double noise_rms = rms(noise);
    Tensor eeg({cfg.v, cfg.t});
    for (std::size_t s = 0; s < eeg.size(); ++s) {
      eeg.vec()[s] = cfg.snr * clean.vec()[s] / clean_rms +
                     noise.vec()[s] / noise_rms;
    }

    dataio::EEGClip clip;
    clip.pair_id = id;
    dataio::quantize_to_f32(eeg);
    clip.data = std::move(eeg);
    clip.fs = cfg.fs;
    clip.class_label = label;
    data.clips.push_back(std::move(clip));

    // Grating: frequency and orientation follow the class, phase and
    // brightness offset follow the instance.
    double img_phase = 0.0, img_off = 0.0;
    for (std::size_t d = 0; d < l; ++d) {
      img_phase += w_img_phase[d] * u[d];
      img_off += w_img_offset[d] * u[d];
    }
    const double freq = 2.0 + static_cast<double>(cls % 5);
    const double angle =
        std::numbers::pi * static_cast<double>(cls) / static_cast<double>(cfg.n_classes);
    const double ca = std::cos(angle), sa = std::sin(angle);
    const double offset = 0.12 * std::tanh(img_off);
    for (std::size_t y = 0; y < cfg.side; ++y) {
      for (std::size_t x = 0; x < cfg.side; ++x) {
        const double axis = (static_cast<double>(x) * ca + static_cast<double>(y) * sa) /
                            static_cast<double>(cfg.side);
        data.images.pixels.at(i, y, x) =
            0.5 + offset +
            0.33 * std::sin(2.0 * std::numbers::pi * freq * axis + img_phase);
      }
    }

    dataio::ManifestEntry entry;
    entry.pair_id = id;
    entry.eeg_path = "eeg/" + id + ".eeg";
    entry.image_ref = id;
    entry.class_label = label;
    entry.set_id = 0;
    data.manifest.entries.push_back(std::move(entry));
    data.manifest.index.emplace(id, i);
    data.images.id_index.emplace(id, i);
  }

  dataio::quantize_to_f32(data.images.pixels);

  const eval::SplitPlan plan = eval::make_splits(
      data.manifest, cfg.n_sets, Rng::mix(cfg.seed, Rng::hash_str("synth.splits")));
  for (auto& entry : data.manifest.entries) {
    entry.set_id = static_cast<std::uint32_t>(plan.set_of.at(entry.pair_id));
  }
  return data;
}

double probe_decodability(const std::vector<dataio::EEGClip>& clips,
                          const std::vector<std::string>& labels,
                          std::uint64_t seed) {
  if (clips.empty() || clips.size() != labels.size()) {
    fail(Errc::invalid_argument, "probe needs one label per clip");
  }

  // Per-channel log band power over 8 equal FFT-bin bands (DC excluded),
  // computed on the longest power-of-two prefix.
  std::size_t n = 1;
  while (n * 2 <= clips.front().samples()) n *= 2;
  const std::size_t half = n / 2;
  constexpr std::size_t kFeatureBands = 8;
  if (half < kFeatureBands) fail(Errc::invalid_argument, "clips too short to probe");
  const std::size_t v = clips.front().channels();
  const std::size_t n_features = v * kFeatureBands;

  Eigen::MatrixXd features(clips.size(), n_features);
  std::vector<double> channel(n);
  for (std::size_t i = 0; i < clips.size(); ++i) {
    const dataio::EEGClip& clip = clips[i];
    if (clip.channels() != v || clip.samples() < n) {
      fail(Errc::dim_mismatch, "clip " + clip.pair_id + " has mismatched shape");
    }
    for (std::size_t ch = 0; ch < v; ++ch) {
      for (std::size_t s = 0; s < n; ++s) channel[s] = clip.data.at(ch, s);
      for (std::size_t b = 0; b < kFeatureBands; ++b) {
        const std::size_t lo = 1 + b * (half - 1) / kFeatureBands;
        const std::size_t hi = 1 + (b + 1) * (half - 1) / kFeatureBands;
        features(static_cast<Eigen::Index>(i),
                 static_cast<Eigen::Index>(ch * kFeatureBands + b)) =
            std::log(signal::band_power(channel, lo, hi) + 1e-12);
      }
    }
  }

  std::vector<std::string> classes;
  for (const std::string& label : labels) {
    if (std::find(classes.begin(), classes.end(), label) == classes.end()) {
      classes.push_back(label);
    }
  }
  std::sort(classes.begin(), classes.end());

  // Stratified 80/20 split.
  std::vector<std::size_t> train_idx, test_idx;
  Rng split_rng(Rng::mix(seed, Rng::hash_str("probe.split")));
  for (const std::string& cls : classes) {
    std::vector<std::size_t> members;
    for (std::size_t i = 0; i < labels.size(); ++i) {
      if (labels[i] == cls) members.push_back(i);
    }
    split_rng.shuffle(members);
    const std::size_t n_train = members.size() - std::max<std::size_t>(1, members.size() / 5);
    for (std::size_t r = 0; r < members.size(); ++r) {
      (r < n_train ? train_idx : test_idx).push_back(members[r]);
    }
  }
  if (train_idx.empty() || test_idx.empty()) {
    fail(Errc::invalid_argument, "probe split left an empty side");
  }

  // Standardize on the training rows.
  Eigen::RowVectorXd mean = Eigen::RowVectorXd::Zero(features.cols());
  for (std::size_t i : train_idx) mean += features.row(static_cast<Eigen::Index>(i));
  mean /= static_cast<double>(train_idx.size());
  Eigen::RowVectorXd var = Eigen::RowVectorXd::Zero(features.cols());
  for (std::size_t i : train_idx) {
    const Eigen::RowVectorXd d = features.row(static_cast<Eigen::Index>(i)) - mean;
    var += d.cwiseProduct(d);
  }
  var /= static_cast<double>(train_idx.size());
  const Eigen::RowVectorXd scale =
      (var.array() + 1e-12).sqrt().inverse().matrix();

  Eigen::MatrixXd x_train(train_idx.size(), features.cols());
  Eigen::MatrixXd y_train = Eigen::MatrixXd::Zero(train_idx.size(), classes.size());
  for (std::size_t r = 0; r < train_idx.size(); ++r) {
    x_train.row(static_cast<Eigen::Index>(r)) =
        (features.row(static_cast<Eigen::Index>(train_idx[r])) - mean)
            .cwiseProduct(scale);
    const auto cls = std::find(classes.begin(), classes.end(), labels[train_idx[r]]);
    y_train(static_cast<Eigen::Index>(r),
            static_cast<Eigen::Index>(cls - classes.begin())) = 1.0;
  }

  const double lambda = 1e-2 * static_cast<double>(train_idx.size());
  Eigen::MatrixXd gram = x_train.transpose() * x_train;
  gram.diagonal().array() += lambda;
  const Eigen::MatrixXd weights = gram.ldlt().solve(x_train.transpose() * y_train);

  std::size_t hits = 0;
  for (std::size_t i : test_idx) {
    const Eigen::RowVectorXd row =
        (features.row(static_cast<Eigen::Index>(i)) - mean).cwiseProduct(scale);
    const Eigen::RowVectorXd scores = row * weights;
    Eigen::Index best = 0;
    scores.maxCoeff(&best);
    if (classes[static_cast<std::size_t>(best)] == labels[i]) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(test_idx.size());
}

}  // namespace nr::synth
