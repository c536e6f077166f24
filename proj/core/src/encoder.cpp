#include "neuroretrieve/encoder.hpp"

#include <string>

#include "neuroretrieve/error.hpp"

namespace nr::encoder {

using diff::ParamStore;
using diff::Tape;
using diff::Var;
using diff::VarMap;

void validate(const EncoderConfig& cfg) {
  if (cfg.blocks < 1 || cfg.diffusion_steps < 1 || cfg.lift_dim < 1 ||
      cfg.hidden_dim < 1 || cfg.embed_dim < 1 || cfg.kernel < 1 ||
      cfg.out_dim < 1) {
    fail(Errc::invalid_argument, "all encoder dimensions must be >= 1");
  }
  if (cfg.dilations.size() != cfg.blocks) {
    fail(Errc::invalid_argument,
         "dilation schedule has " + std::to_string(cfg.dilations.size()) +
             " entries for " + std::to_string(cfg.blocks) + " blocks");
  }
  for (std::size_t d : cfg.dilations) {
    if (d < 1) fail(Errc::invalid_argument, "dilations must be >= 1");
  }
}

namespace {

std::string block_name(std::size_t s, const char* leaf) {
  return "enc.block" + std::to_string(s) + "." + leaf;
}

Var lookup(const VarMap& params, const std::string& name) {
  const auto it = params.find(name);
  if (it == params.end()) {
    fail(Errc::missing_field, "parameter '" + name + "' not provided");
  }
  return it->second;
}

void check_clip(const Tensor& clip, const Tensor& transition,
                const VarMap& params, Tape& tape) {
  if (clip.rank() != 2 || clip.dim(0) < 1 || clip.dim(1) < 1) {
    fail(Errc::shape_mismatch, "clip must be VxT, got " + clip.shape_str());
  }
  const std::size_t v = clip.dim(0);
  if (transition.rank() != 2 || transition.dim(0) != v ||
      transition.dim(1) != v) {
    fail(Errc::dim_mismatch,
         "clip has " + std::to_string(v) + " nodes but transition is " +
             transition.shape_str());
  }
  const Tensor& tx = tape.value(lookup(params, "enc.adj.theta_x"));
  if (tx.dim(0) != v) {
    fail(Errc::dim_mismatch, "clip has " + std::to_string(v) +
                                 " nodes but params were built for " +
                                 std::to_string(tx.dim(0)));
  }
}

// Lift then all S blocks; returns every block's T×V×M output.
std::vector<Var> run_blocks(Tape& tape, const Tensor& clip,
                            const Tensor& transition, const VarMap& params,
                            const EncoderConfig& cfg) {
  validate(cfg);
  check_clip(clip, transition, params, tape);

  const Var affinity = tape.matmul_nt(lookup(params, "enc.adj.theta_x"),
                                      lookup(params, "enc.adj.theta_xp"));
  const Var adaptive = tape.row_softmax(tape.relu(affinity));

  Var x = tape.lift(clip, lookup(params, "enc.lift.w"),
                    lookup(params, "enc.lift.b"));
  std::vector<Var> outputs;
  outputs.reserve(cfg.blocks);
  for (std::size_t s = 0; s < cfg.blocks; ++s) {
    std::vector<Var> theta_w, theta_a;
    for (std::size_t k = 0; k < cfg.diffusion_steps; ++k) {
      theta_w.push_back(lookup(params, block_name(s, "gconv.w") + std::to_string(k)));
      theta_a.push_back(lookup(params, block_name(s, "gconv.a") + std::to_string(k)));
    }
    const Var mixed = tape.diffusion_gconv_seq(x, transition, adaptive, theta_w, theta_a);
    x = tape.gated_tcn(mixed, lookup(params, block_name(s, "tcn.filter_w")),
                       lookup(params, block_name(s, "tcn.filter_b")),
                       lookup(params, block_name(s, "tcn.gate_w")),
                       lookup(params, block_name(s, "tcn.gate_b")),
                       cfg.dilations[s]);
    outputs.push_back(x);
  }
  return outputs;
}

}  // namespace

void init_params(ParamStore& store, const EncoderConfig& cfg, std::size_t v,
                 std::uint64_t seed) {
  validate(cfg);
  if (v < 1) fail(Errc::invalid_argument, "montage must have nodes");
  const std::size_t d = cfg.lift_dim, m = cfg.hidden_dim;

  auto glorot = [&](const std::string& name, std::vector<std::size_t> shape,
                    std::size_t fan_in, std::size_t fan_out) {
    store.add(name, diff::glorot_init(shape, fan_in, fan_out, seed, name));
  };
  auto zeros = [&](const std::string& name, std::vector<std::size_t> shape) {
    store.add(name, Tensor::zeros(shape));
  };

  store.add("enc.adj.theta_x",
            diff::normal_init({v, cfg.embed_dim}, 0.1, seed, "enc.adj.theta_x"));
  store.add("enc.adj.theta_xp",
            diff::normal_init({v, cfg.embed_dim}, 0.1, seed, "enc.adj.theta_xp"));
  glorot("enc.lift.w", {d}, 1, d);
  zeros("enc.lift.b", {d});

  for (std::size_t s = 0; s < cfg.blocks; ++s) {
    const std::size_t c_in = s == 0 ? d : m;
    for (std::size_t k = 0; k < cfg.diffusion_steps; ++k) {
      glorot(block_name(s, "gconv.w") + std::to_string(k), {c_in, m}, c_in, m);
      glorot(block_name(s, "gconv.a") + std::to_string(k), {c_in, m}, c_in, m);
    }
    glorot(block_name(s, "tcn.filter_w"), {cfg.kernel, m, m}, cfg.kernel * m,
           cfg.kernel * m);
    zeros(block_name(s, "tcn.filter_b"), {m});
    glorot(block_name(s, "tcn.gate_w"), {cfg.kernel, m, m}, cfg.kernel * m,
           cfg.kernel * m);
    zeros(block_name(s, "tcn.gate_b"), {m});
  }

  glorot("enc.readout.w1", {cfg.out_dim, m}, m, cfg.out_dim);
  zeros("enc.readout.b1", {cfg.out_dim});
  glorot("enc.readout.w2", {cfg.out_dim, cfg.out_dim}, cfg.out_dim, cfg.out_dim);
  zeros("enc.readout.b2", {cfg.out_dim});
}

void init_forecast_params(ParamStore& store, const EncoderConfig& cfg,
                          std::size_t horizon, std::uint64_t seed) {
  validate(cfg);
  if (horizon < 1) fail(Errc::invalid_argument, "forecast horizon must be >= 1");
  const std::size_t m = cfg.hidden_dim;
  auto glorot = [&](const std::string& name, std::vector<std::size_t> shape,
                    std::size_t fan_in, std::size_t fan_out) {
    store.add(name, diff::glorot_init(shape, fan_in, fan_out, seed, name));
  };
  glorot("fore.tcn.filter_w", {cfg.kernel, m, m}, cfg.kernel * m, cfg.kernel * m);
  store.add("fore.tcn.filter_b", Tensor::zeros({m}));
  glorot("fore.tcn.gate_w", {cfg.kernel, m, m}, cfg.kernel * m, cfg.kernel * m);
  store.add("fore.tcn.gate_b", Tensor::zeros({m}));
  glorot("fore.map.w", {m, horizon}, m, horizon);
  store.add("fore.map.b", Tensor::zeros({horizon}));
}

Var encode_features(Tape& tape, const Tensor& clip, const Tensor& transition,
                    const VarMap& params, const EncoderConfig& cfg) {
  return run_blocks(tape, clip, transition, params, cfg).back();
}

Var encode(Tape& tape, const Tensor& clip, const Tensor& transition,
           const VarMap& params, const EncoderConfig& cfg) {
  const std::vector<Var> outputs = run_blocks(tape, clip, transition, params, cfg);
  Var acc = outputs.back();
  if (!cfg.readout_last_block_only) {
    for (std::size_t s = 0; s + 1 < outputs.size(); ++s) {
      acc = tape.add(acc, outputs[s]);
    }
  }
  const Var pooled = tape.node_sum_time_mean(acc);
  const Var hidden = tape.relu(tape.affine_vec(pooled, lookup(params, "enc.readout.w1"),
                                               lookup(params, "enc.readout.b1")));
  return tape.affine_vec(hidden, lookup(params, "enc.readout.w2"),
                         lookup(params, "enc.readout.b2"));
}

Var forecast(Tape& tape, const Tensor& clip, const Tensor& transition,
             const VarMap& params, const EncoderConfig& cfg,
             std::size_t horizon) {
  if (horizon < 1) fail(Errc::invalid_argument, "forecast horizon must be >= 1");
  const Var features = encode_features(tape, clip, transition, params, cfg);
  const Var gated = tape.gated_tcn(features, lookup(params, "fore.tcn.filter_w"),
                                   lookup(params, "fore.tcn.filter_b"),
                                   lookup(params, "fore.tcn.gate_w"),
                                   lookup(params, "fore.tcn.gate_b"), 1);
  const Var last = tape.last_timestep(gated);
  const Var mapped = tape.matmul(last, lookup(params, "fore.map.w"));
  const Tensor& mv = tape.value(mapped);
  if (mv.dim(1) != horizon) {
    fail(Errc::dim_mismatch, "forecast map emits " + std::to_string(mv.dim(1)) +
                                 " steps, horizon is " + std::to_string(horizon));
  }
  return tape.add_bias_rows(mapped, lookup(params, "fore.map.b"));
}

Tensor encode_value(const Tensor& clip, const Tensor& transition,
                    const ParamStore& params, const EncoderConfig& cfg) {
  Tape tape;
  VarMap vars;
  for (const auto& [name, tensor] : params.values) {
    vars.emplace(name, tape.constant(tensor));
  }
  return tape.value(encode(tape, clip, transition, vars, cfg));
}

}  // namespace nr::encoder
