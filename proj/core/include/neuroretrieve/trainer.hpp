#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "neuroretrieve/crossmodal.hpp"
#include "neuroretrieve/dataio.hpp"
#include "neuroretrieve/diff.hpp"
#include "neuroretrieve/encoder.hpp"
#include "neuroretrieve/evalmetrics.hpp"
#include "neuroretrieve/preprocess.hpp"
#include "neuroretrieve/visual.hpp"

namespace nr::trainer {

// Every knob of a run, one flat JSON object with dotted keys; unknown keys
// are rejected so typos cannot silently fall back to defaults.
struct RunConfig {
  std::uint64_t seed = 7;
  std::size_t batch = 8;
  std::size_t epochs = 10;
  diff::AdamConfig optim;
  encoder::EncoderConfig enc;
  visual::VisualConfig vis;
  std::size_t joint_dim = 64;
  double tau = 0.07;
  crossmodal::NegativeConfig neg;
  std::size_t n_sets = 5;
  std::uint64_t split_seed = 7;
  std::size_t fold = 0;
  std::size_t montage_k = 8;
  std::string positions_path;  // empty → built-in spiral positions
  std::string manifest_path;
  std::string eeg_dir;          // empty → clip paths resolve against manifest dir
  std::string images_path;      // built-in visual encoder input
  std::string embeddings_path;  // precomputed cache; overrides images_path
  std::string init_encoder;     // encoder checkpoint to transfer before training
  std::string hold_out_class;   // excluded from train/val, kept in test
  std::string resume;           // resume checkpoint; epochs counts the total
  std::string out_dir;
  // Forecasting pre-training knobs (shared config file, "pretrain.*" keys).
  std::size_t pre_past = 64;
  std::size_t pre_horizon = 16;
  std::size_t pre_stride = 32;
  std::size_t pre_epochs = 5;
  std::size_t pre_batch = 8;
};

// Parses the flat JSON text; any unknown key or ill-typed value is an error.
RunConfig parse_run_config(const std::string& json_text);
// All fields of cfg, defaults materialized; parses back to an equal config.
std::string effective_config(const RunConfig& cfg);

// In-memory dataset; visual side is either pixel images (built-in encoder)
// or a precomputed embedding cache.
struct Dataset {
  dataio::PairManifest manifest;
  std::vector<dataio::EEGClip> clips;  // aligned with manifest.entries
  dataio::ImageStore images;           // may be empty
  dataio::EmbeddingCache cache;        // may be empty

  bool use_cache() const { return cache.count() > 0; }
};

void validate(const Dataset& data);
Dataset load_dataset(const RunConfig& cfg);

// Clip rows and visual rows aligned so row i of both sides is pair i.
struct Batch {
  std::vector<std::string> ids;
  std::vector<const Tensor*> clips;   // normalized V×T, borrowed
  Tensor visuals;                     // N × vis_dim (frozen/cached path)
};

struct MetricsRow {
  std::size_t epoch = 0;
  double loss = 0.0;
  double val_mrr = 0.0;
  double val_map = 0.0;
};

struct TrainOutcome {
  diff::ParamStore model;        // final parameters
  dataio::NamedTensors best;     // best-validation snapshot (plus norm stats)
  std::size_t best_epoch = 0;
  double best_val_mrr = 0.0;
  std::size_t epochs_done = 0;
  std::vector<MetricsRow> metrics;  // rows for the epochs this call ran
  std::map<std::string, Tensor> opt_state;  // Adam moments, "opt." keys
  preprocess::NormStats norm;    // fold-scoped, frozen into checkpoints
  Tensor transition;             // montage P used throughout the run
  eval::Fold fold;
};

TrainOutcome fit(const Dataset& data, const RunConfig& cfg);

// Writes best.ckpt, resume.ckpt, metrics.jsonl, and effective.json under
// cfg.out_dir (created if missing).
void save_outcome(const TrainOutcome& outcome, const RunConfig& cfg);

// Encodes the given pairs' EEG side through the model into the joint space.
eval::EncodedSet encode_eeg_set(const Dataset& data,
                                const std::vector<std::string>& ids,
                                const dataio::NamedTensors& model,
                                const RunConfig& cfg);
// Same for the visual side (gallery building).
eval::EncodedSet encode_image_set(const Dataset& data,
                                  const std::vector<std::string>& ids,
                                  const dataio::NamedTensors& model,
                                  const RunConfig& cfg);

// Montage transition matrix for a V-channel dataset per the config.
Tensor montage_transition(const RunConfig& cfg, std::size_t v);

// NamedTensors view of a live store (values copied).
dataio::NamedTensors snapshot(const diff::ParamStore& params);

}  // namespace nr::trainer
