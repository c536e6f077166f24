#include "neuroretrieve/pretrain.hpp"

#include <cmath>

#include "doctest.h"
#include "neuroretrieve/error.hpp"
#include "neuroretrieve/montage.hpp"
#include "neuroretrieve/rng.hpp"

using namespace nr;

namespace {

encoder::EncoderConfig tiny_encoder() {
  encoder::EncoderConfig cfg;
  cfg.blocks = 1;
  cfg.diffusion_steps = 2;
  cfg.lift_dim = 3;
  cfg.hidden_dim = 4;
  cfg.embed_dim = 2;
  cfg.kernel = 2;
  cfg.dilations = {1};
  cfg.out_dim = 4;
  return cfg;
}

Tensor line_transition(std::size_t v) {
  Tensor pos({v, 3});
  for (std::size_t i = 0; i < v; ++i) pos.at(i, 0) = static_cast<double>(i);
  return montage::transition_matrix(montage::build_knn_adjacency(pos, 1));
}

}  // namespace

TEST_CASE("window offsets") {
  Tensor clip({2, 16});
  for (std::size_t t = 0; t < 16; ++t) {
    clip.at(0, t) = static_cast<double>(t);
    clip.at(1, t) = 100.0 + static_cast<double>(t);
  }
  SUBCASE("16 total, past 8, horizon 4, stride 4 gives offsets 0 and 4") {
    const auto windows = pretrain::make_windows(clip, 8, 4, 4);
    REQUIRE(windows.size() == 2);
    CHECK(windows[0].past.shape() == std::vector<std::size_t>{2, 8});
    CHECK(windows[0].future.shape() == std::vector<std::size_t>{2, 4});
    CHECK(windows[0].past.at(0, 0) == 0.0);
    CHECK(windows[0].future.at(0, 0) == 8.0);
    CHECK(windows[1].past.at(0, 0) == 4.0);
    CHECK(windows[1].future.at(0, 0) == 12.0);
    CHECK(windows[1].future.at(1, 3) == 115.0);
  }
  SUBCASE("past + horizon equal to the clip gives exactly one window") {
    const auto windows = pretrain::make_windows(clip, 12, 4, 999);
    REQUIRE(windows.size() == 1);
    CHECK(windows[0].past.at(0, 0) == 0.0);
    CHECK(windows[0].future.at(0, 3) == 15.0);
  }
  SUBCASE("window longer than the clip is empty") {
    CHECK(pretrain::make_windows(clip, 14, 4, 1).empty());
  }
  SUBCASE("degenerate sizes rejected") {
    CHECK_THROWS_AS(pretrain::make_windows(clip, 0, 4, 1), Error);
    CHECK_THROWS_AS(pretrain::make_windows(clip, 8, 4, 0), Error);
  }
}

TEST_CASE("forecast mae") {
  Tensor future({2, 3});
  Rng rng(71);
  for (std::size_t i = 0; i < future.size(); ++i) future.vec()[i] = rng.normal();
  CHECK(pretrain::forecast_mae(future, future) == 0.0);

  Tensor shifted = future;
  for (std::size_t i = 0; i < shifted.size(); ++i) shifted.vec()[i] += 0.25;
  CHECK(pretrain::forecast_mae(future, shifted) ==
        doctest::Approx(0.25).epsilon(1e-14));

  // brute-force double loop
  Tensor forecast({2, 3});
  for (std::size_t i = 0; i < forecast.size(); ++i) forecast.vec()[i] = rng.normal();
  double acc = 0.0;
  for (std::size_t v = 0; v < 2; ++v)
    for (std::size_t t = 0; t < 3; ++t)
      acc += std::abs(future.at(v, t) - forecast.at(v, t));
  CHECK(pretrain::forecast_mae(future, forecast) ==
        doctest::Approx(acc / 6.0).epsilon(1e-14));

  CHECK_THROWS_AS(pretrain::forecast_mae(future, Tensor::zeros({2, 4})), Error);
}

TEST_CASE("constant signals are learnable almost for free") {
  const std::size_t v = 3;
  std::vector<Tensor> clips;
  for (int i = 0; i < 4; ++i) clips.push_back(Tensor::full({v, 24}, 0.5));

  pretrain::PretrainConfig cfg;
  cfg.past = 8;
  cfg.horizon = 4;
  cfg.stride = 4;
  cfg.epochs = 60;
  cfg.batch = 4;
  cfg.optim.lr = 0.02;
  cfg.seed = 5;
  const Tensor transition = line_transition(v);
  const encoder::EncoderConfig enc = tiny_encoder();

  const auto result = pretrain::run_pretraining(clips, transition, enc, cfg);
  REQUIRE(result.epoch_mae.size() == cfg.epochs);
  CHECK(result.epoch_mae.back() <= 0.1 * result.epoch_mae.front());

  const double held_out =
      pretrain::evaluate_forecast(clips, transition, enc, cfg, result.params);
  CHECK(held_out <= 0.1 * result.epoch_mae.front());
}

TEST_CASE("zero epochs returns the initialization") {
  const std::size_t v = 3;
  std::vector<Tensor> clips = {Tensor::full({v, 16}, 0.3)};
  pretrain::PretrainConfig cfg;
  cfg.past = 8;
  cfg.horizon = 4;
  cfg.stride = 4;
  cfg.epochs = 0;
  const encoder::EncoderConfig enc = tiny_encoder();

  const auto result = pretrain::run_pretraining(clips, line_transition(v), enc, cfg);
  CHECK(result.epoch_mae.empty());

  diff::ParamStore expect;
  encoder::init_params(expect, enc, v, cfg.seed);
  encoder::init_forecast_params(expect, enc, cfg.horizon, cfg.seed);
  REQUIRE(result.params.values.size() == expect.values.size());
  for (const auto& [name, tensor] : expect.values) {
    CHECK(result.params.value(name) == tensor);
  }
}

TEST_CASE("same seed, same checkpoint") {
  const std::size_t v = 3;
  Rng rng(72);
  std::vector<Tensor> clips;
  for (int c = 0; c < 3; ++c) {
    Tensor clip({v, 20});
    for (std::size_t i = 0; i < clip.size(); ++i) clip.vec()[i] = rng.normal();
    clips.push_back(std::move(clip));
  }
  pretrain::PretrainConfig cfg;
  cfg.past = 8;
  cfg.horizon = 4;
  cfg.stride = 4;
  cfg.epochs = 3;
  cfg.seed = 9;
  const Tensor transition = line_transition(v);
  const encoder::EncoderConfig enc = tiny_encoder();

  const auto a = pretrain::run_pretraining(clips, transition, enc, cfg);
  const auto b = pretrain::run_pretraining(clips, transition, enc, cfg);
  REQUIRE(a.params.values.size() == b.params.values.size());
  for (const auto& [name, tensor] : a.params.values) {
    CHECK(b.params.value(name) == tensor);
  }
  CHECK(a.epoch_mae == b.epoch_mae);

  pretrain::PretrainConfig other = cfg;
  other.seed = 10;
  const auto c = pretrain::run_pretraining(clips, transition, enc, other);
  CHECK_FALSE(a.params.value("enc.lift.w") == c.params.value("enc.lift.w"));
}

TEST_CASE("encoder slice and transfer") {
  const std::size_t v = 3;
  const encoder::EncoderConfig enc = tiny_encoder();
  diff::ParamStore source;
  encoder::init_params(source, enc, v, 21);
  encoder::init_forecast_params(source, enc, 4, 21);

  const dataio::NamedTensors slice = pretrain::encoder_tensors(source);
  CHECK(!slice.empty());
  for (const auto& [name, tensor] : slice) {
    CHECK(name.rfind("enc.", 0) == 0);
    CHECK(source.value(name) == tensor);
  }
  // the forecast head stays out of the checkpoint
  CHECK(slice.count("fore.map.w") == 0);

  SUBCASE("transfer overwrites exactly the encoder tensors") {
    diff::ParamStore model;
    encoder::init_params(model, enc, v, 99);  // different draw
    model.add("proj.eeg.w", Tensor::full({4, 2}, 0.5));
    const Tensor proj_before = model.value("proj.eeg.w");

    pretrain::transfer(slice, model);
    for (const auto& [name, tensor] : slice) {
      CHECK(model.value(name) == tensor);
    }
    CHECK(model.value("proj.eeg.w") == proj_before);
    // transfer then slice again reproduces the checkpoint bit-exactly
    const auto round_trip = pretrain::encoder_tensors(model);
    REQUIRE(round_trip.size() == slice.size());
    for (const auto& [name, tensor] : slice) {
      CHECK(round_trip.at(name) == tensor);
    }
  }
  SUBCASE("V mismatch is an error") {
    diff::ParamStore model;
    encoder::init_params(model, enc, v + 1, 99);
    CHECK_THROWS_AS(pretrain::transfer(slice, model), Error);
  }
  SUBCASE("missing encoder tensor in the checkpoint is an error") {
    dataio::NamedTensors incomplete = slice;
    incomplete.erase("enc.lift.w");
    diff::ParamStore model;
    encoder::init_params(model, enc, v, 99);
    CHECK_THROWS_AS(pretrain::transfer(incomplete, model), Error);
  }
  SUBCASE("empty checkpoint is an error") {
    diff::ParamStore model;
    encoder::init_params(model, enc, v, 99);
    CHECK_THROWS_AS(pretrain::transfer({}, model), Error);
  }
}
