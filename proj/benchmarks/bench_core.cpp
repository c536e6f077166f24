#include <benchmark/benchmark.h>

#include <cmath>
#include <vector>

#include "neuroretrieve/crossmodal.hpp"
#include "neuroretrieve/diff.hpp"
#include "neuroretrieve/encoder.hpp"
#include "neuroretrieve/montage.hpp"
#include "neuroretrieve/preprocess.hpp"
#include "neuroretrieve/rng.hpp"
#include "neuroretrieve/signal.hpp"
#include "neuroretrieve/tensor.hpp"

namespace {

std::vector<double> noise(std::size_t n, std::uint64_t seed) {
  nr::Rng rng(seed);
  std::vector<double> x(n);
  for (double& v : x) v = rng.normal();
  return x;
}

nr::Tensor random_tensor(const std::vector<std::size_t>& shape, nr::Rng& rng) {
  nr::Tensor t(shape);
  for (std::size_t i = 0; i < t.size(); ++i) t.vec()[i] = rng.uniform(-1.0, 1.0);
  return t;
}

void BM_fft(benchmark::State& state) {
  auto n = static_cast<std::size_t>(state.range(0));
  auto x = noise(n, 1);
  for (auto _ : state) {
    std::vector<std::complex<double>> buf(x.begin(), x.end());
    nr::signal::fft(buf);
    benchmark::DoNotOptimize(buf.data());
  }
  state.SetItemsProcessed(static_cast<int64_t>(state.iterations()) * state.range(0));
}
BENCHMARK(BM_fft)->Arg(1024)->Arg(8192);

void BM_filtfilt(benchmark::State& state) {
  auto n = static_cast<std::size_t>(state.range(0));
  auto filter = nr::preprocess::design_bandpass({55.0, 95.0, 4, 1024.0});
  auto x = noise(n, 2);
  for (auto _ : state) {
    auto y = nr::preprocess::filtfilt(filter, x);
    benchmark::DoNotOptimize(y.data());
  }
  state.SetItemsProcessed(static_cast<int64_t>(state.iterations()) * state.range(0));
}
BENCHMARK(BM_filtfilt)->Arg(2048)->Arg(8192);

// Default-size encoder on one clip; range arg is T.
void BM_encoder_forward(benchmark::State& state) {
  const std::size_t v = 16;
  const auto t = static_cast<std::size_t>(state.range(0));
  nr::Rng rng(3);
  nr::encoder::EncoderConfig cfg;
  nr::diff::ParamStore params;
  nr::encoder::init_params(params, cfg, v, 3);
  const nr::Tensor clip = random_tensor({v, t}, rng);
  const nr::Tensor transition = nr::montage::transition_matrix(
      nr::montage::build_knn_adjacency(nr::montage::default_positions(v), 8));
  for (auto _ : state) {
    nr::Tensor z = nr::encoder::encode_value(clip, transition, params, cfg);
    benchmark::DoNotOptimize(z.vec().data());
  }
  state.SetItemsProcessed(static_cast<int64_t>(state.iterations()));
}
BENCHMARK(BM_encoder_forward)->Arg(64)->Arg(256);

void BM_encoder_backward(benchmark::State& state) {
  const std::size_t v = 16;
  const auto t = static_cast<std::size_t>(state.range(0));
  nr::Rng rng(4);
  nr::encoder::EncoderConfig cfg;
  nr::diff::ParamStore params;
  nr::encoder::init_params(params, cfg, v, 4);
  const nr::Tensor clip = random_tensor({v, t}, rng);
  const nr::Tensor transition = nr::montage::transition_matrix(
      nr::montage::build_knn_adjacency(nr::montage::default_positions(v), 8));
  for (auto _ : state) {
    nr::diff::Tape tape;
    const auto leaves = nr::diff::make_leaves(tape, params);
    const nr::diff::Var loss =
        tape.sum_squares(nr::encoder::encode(tape, clip, transition, leaves, cfg));
    tape.backward(loss);
    params.zero_grads();
    nr::diff::collect_grads(tape, leaves, params);
    benchmark::DoNotOptimize(params.grads.begin()->second.vec().data());
  }
  state.SetItemsProcessed(static_cast<int64_t>(state.iterations()));
}
BENCHMARK(BM_encoder_backward)->Arg(64)->Arg(256);

// InfoNCE over an N-row batch in the default joint space, strategy "both".
void BM_infonce(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const std::size_t dim = 64;
  nr::Rng rng(5);
  const nr::Tensor z_e = random_tensor({n, dim}, rng);
  const nr::Tensor z_i = random_tensor({n, dim}, rng);
  nr::Tensor mask = nr::Tensor::full({n, n}, 1.0);
  for (std::size_t i = 0; i < n; ++i) mask.at(i, i) = 0.0;
  for (auto _ : state) {
    nr::diff::Tape tape;
    const nr::diff::Var loss = nr::crossmodal::infonce_loss(
        tape, tape.constant(z_e), tape.constant(z_i), 0.07,
        nr::crossmodal::Strategy::both, mask);
    tape.backward(loss);
    benchmark::DoNotOptimize(tape.value(loss)[0]);
  }
  state.SetItemsProcessed(static_cast<int64_t>(state.iterations()) * state.range(0));
}
BENCHMARK(BM_infonce)->Arg(8)->Arg(32)->Arg(128);

}  // namespace

BENCHMARK_MAIN();
