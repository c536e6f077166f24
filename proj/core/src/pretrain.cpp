#include "neuroretrieve/pretrain.hpp"

#include <cmath>
#include <iostream>
#include <numeric>

#include "neuroretrieve/error.hpp"
#include "neuroretrieve/rng.hpp"

namespace nr::pretrain {

using diff::ParamStore;
using diff::Tape;
using diff::Var;
using diff::VarMap;

void validate(const PretrainConfig& cfg) {
  if (cfg.past < 1 || cfg.horizon < 1 || cfg.stride < 1 || cfg.batch < 1) {
    fail(Errc::invalid_argument, "pretrain window/batch sizes must be >= 1");
  }
}

std::vector<Window> make_windows(const Tensor& clip, std::size_t past,
                                 std::size_t horizon, std::size_t stride) {
  if (clip.rank() != 2) {
    fail(Errc::shape_mismatch, "clip must be VxT, got " + clip.shape_str());
  }
  if (past < 1 || horizon < 1 || stride < 1) {
    fail(Errc::invalid_argument, "window sizes must be >= 1");
  }
  const std::size_t v = clip.dim(0), total = clip.dim(1);
  std::vector<Window> windows;
  if (past + horizon > total) {
    std::cerr << "warning: clip of " << total << " samples is shorter than one "
              << past << "+" << horizon << " window\n";
    return windows;
  }
  for (std::size_t off = 0; off + past + horizon <= total; off += stride) {
    Window w{Tensor({v, past}), Tensor({v, horizon})};
    for (std::size_t ch = 0; ch < v; ++ch) {
      for (std::size_t s = 0; s < past; ++s) w.past.at(ch, s) = clip.at(ch, off + s);
      for (std::size_t s = 0; s < horizon; ++s) {
        w.future.at(ch, s) = clip.at(ch, off + past + s);
      }
    }
    windows.push_back(std::move(w));
  }
  return windows;
}

double forecast_mae(const Tensor& future, const Tensor& forecast) {
  if (!future.same_shape(forecast) || future.rank() != 2) {
    fail(Errc::shape_mismatch, "future " + future.shape_str() +
                                   " vs forecast " + forecast.shape_str());
  }
  double acc = 0.0;
  for (std::size_t i = 0; i < future.size(); ++i) {
    acc += std::abs(future.vec()[i] - forecast.vec()[i]);
  }
  return acc / static_cast<double>(future.size());
}

Var forecast_mae(Tape& tape, Var forecast, const Tensor& future) {
  return tape.mean_abs_error(forecast, future);
}

namespace {

std::vector<Window> all_windows(const std::vector<Tensor>& clips,
                                const PretrainConfig& cfg) {
  std::vector<Window> windows;
  for (const Tensor& clip : clips) {
    auto w = make_windows(clip, cfg.past, cfg.horizon, cfg.stride);
    windows.insert(windows.end(), std::make_move_iterator(w.begin()),
                   std::make_move_iterator(w.end()));
  }
  if (windows.empty()) {
    fail(Errc::invalid_argument, "no training windows; clips too short");
  }
  return windows;
}

}  // namespace

PretrainResult run_pretraining(const std::vector<Tensor>& clips,
                               const Tensor& transition,
                               const encoder::EncoderConfig& enc,
                               const PretrainConfig& cfg) {
  validate(cfg);
  if (clips.empty()) fail(Errc::invalid_argument, "no clips to pretrain on");
  const std::size_t v = clips.front().dim(0);

  PretrainResult result;
  encoder::init_params(result.params, enc, v, cfg.seed);
  encoder::init_forecast_params(result.params, enc, cfg.horizon, cfg.seed);
  if (cfg.epochs == 0) return result;

  const std::vector<Window> windows = all_windows(clips, cfg);
  diff::Adam adam(cfg.optim);

  std::vector<std::size_t> order(windows.size());
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng shuffle_rng(Rng::mix(cfg.seed, epoch + 1));
    shuffle_rng.shuffle(order);

    double epoch_loss = 0.0;
    std::size_t n_batches = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch) {
      const std::size_t stop = std::min(order.size(), start + cfg.batch);
      const auto loss_fn = [&](Tape& tape, const VarMap& leaves) {
        Var acc{};
        for (std::size_t r = start; r < stop; ++r) {
          const Window& w = windows[order[r]];
          const Var pred =
              encoder::forecast(tape, w.past, transition, leaves, enc, cfg.horizon);
          const Var term = tape.mean_abs_error(pred, w.future);
          acc = r == start ? term : tape.add(acc, term);
        }
        return tape.scale(acc, 1.0 / static_cast<double>(stop - start));
      };
      epoch_loss += diff::evaluate_with_gradients(loss_fn, result.params);
      adam.step(result.params);
      ++n_batches;
    }
    result.epoch_mae.push_back(epoch_loss / static_cast<double>(n_batches));
  }
  return result;
}

double evaluate_forecast(const std::vector<Tensor>& clips,
                         const Tensor& transition,
                         const encoder::EncoderConfig& enc,
                         const PretrainConfig& cfg,
                         const ParamStore& params) {
  validate(cfg);
  const std::vector<Window> windows = all_windows(clips, cfg);
  double acc = 0.0;
  for (const Window& w : windows) {
    Tape tape;
    VarMap vars;
    for (const auto& [name, tensor] : params.values) {
      vars.emplace(name, tape.constant(tensor));
    }
    const Var pred =
        encoder::forecast(tape, w.past, transition, vars, enc, cfg.horizon);
    acc += forecast_mae(w.future, tape.value(pred));
  }
  return acc / static_cast<double>(windows.size());
}

dataio::NamedTensors encoder_tensors(const ParamStore& params) {
  dataio::NamedTensors out;
  for (const auto& [name, tensor] : params.values) {
    if (name.rfind("enc.", 0) == 0) out.emplace(name, tensor);
  }
  if (out.empty()) fail(Errc::missing_field, "store holds no encoder tensors");
  return out;
}

void transfer(const dataio::NamedTensors& checkpoint, ParamStore& model) {
  std::size_t applied = 0;
  for (const auto& [name, tensor] : checkpoint) {
    if (name.rfind("enc.", 0) != 0) continue;
    if (!model.has(name)) {
      fail(Errc::not_found, "model has no tensor named '" + name + "'");
    }
    Tensor& dst = model.values.at(name);
    if (!dst.same_shape(tensor)) {
      fail(Errc::shape_mismatch, "tensor '" + name + "' is " +
                                     tensor.shape_str() + " in the checkpoint but " +
                                     dst.shape_str() + " in the model");
    }
    dst = tensor;
    ++applied;
  }
  for (const auto& [name, tensor] : model.values) {
    if (name.rfind("enc.", 0) == 0 && checkpoint.find(name) == checkpoint.end()) {
      fail(Errc::missing_field, "checkpoint lacks encoder tensor '" + name + "'");
    }
  }
  if (applied == 0) fail(Errc::missing_field, "checkpoint holds no encoder tensors");
}

}  // namespace nr::pretrain
