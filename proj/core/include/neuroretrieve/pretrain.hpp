#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "neuroretrieve/dataio.hpp"
#include "neuroretrieve/diff.hpp"
#include "neuroretrieve/encoder.hpp"
#include "neuroretrieve/tensor.hpp"

namespace nr::pretrain {

struct PretrainConfig {
  std::size_t past = 64;     // window fed to the encoder
  std::size_t horizon = 16;  // steps to forecast
  std::size_t stride = 32;
  std::size_t epochs = 5;
  std::size_t batch = 8;
  diff::AdamConfig optim;
  std::uint64_t seed = 1;
};

void validate(const PretrainConfig& cfg);

struct Window {
  Tensor past;    // V × past
  Tensor future;  // V × horizon
};

// Windows at offsets 0, stride, 2·stride, … while past+future fits; empty
// (with a warning) when the clip is shorter than one window.
std::vector<Window> make_windows(const Tensor& clip, std::size_t past,
                                 std::size_t horizon, std::size_t stride);

// Mean absolute error, averaged over every node and forecast step.
double forecast_mae(const Tensor& future, const Tensor& forecast);
diff::Var forecast_mae(diff::Tape& tape, diff::Var forecast, const Tensor& future);

struct PretrainResult {
  diff::ParamStore params;         // enc.* and fore.*
  std::vector<double> epoch_mae;   // mean training loss per epoch
};

// Adam on the forecasting objective over all windows of all clips; fully
// deterministic in cfg.seed. Pass clips already normalized.
PretrainResult run_pretraining(const std::vector<Tensor>& clips,
                               const Tensor& transition,
                               const encoder::EncoderConfig& enc,
                               const PretrainConfig& cfg);

// Forecast MAE averaged over all windows of the given clips, no updates.
double evaluate_forecast(const std::vector<Tensor>& clips,
                         const Tensor& transition,
                         const encoder::EncoderConfig& enc,
                         const PretrainConfig& cfg,
                         const diff::ParamStore& params);

// The encoder-only slice ("enc.*") of a parameter store.
dataio::NamedTensors encoder_tensors(const diff::ParamStore& params);

// Overwrites the model's "enc.*" tensors from a checkpoint, leaving the
// projection/visual side untouched. Every encoder tensor must be present
// with a matching shape.
void transfer(const dataio::NamedTensors& checkpoint, diff::ParamStore& model);

}  // namespace nr::pretrain
