#include "neuroretrieve/crossmodal.hpp"

#include <cmath>

#include "neuroretrieve/error.hpp"

namespace nr::crossmodal {

using diff::ParamStore;
using diff::Tape;
using diff::Var;
using diff::VarMap;

Strategy parse_strategy(const std::string& text) {
  if (text == "none") return Strategy::none;
  if (text == "eeg_only") return Strategy::eeg_only;
  if (text == "image_only") return Strategy::image_only;
  if (text == "both") return Strategy::both;
  fail(Errc::invalid_argument,
       "unknown negative strategy '" + text +
           "' (expected none|eeg_only|image_only|both)");
}

std::string strategy_name(Strategy s) {
  switch (s) {
    case Strategy::none: return "none";
    case Strategy::eeg_only: return "eeg_only";
    case Strategy::image_only: return "image_only";
    case Strategy::both: return "both";
  }
  fail(Errc::invalid_argument, "invalid strategy value");
}

void init_params(ParamStore& store, const ProjectionConfig& cfg,
                 std::uint64_t seed) {
  if (cfg.eeg_dim < 1 || cfg.vis_dim < 1 || cfg.joint_dim < 1) {
    fail(Errc::invalid_argument, "projection dims must be >= 1");
  }
  store.add("proj.eeg.w", diff::glorot_init({cfg.eeg_dim, cfg.joint_dim},
                                            cfg.eeg_dim, cfg.joint_dim, seed,
                                            "proj.eeg.w"));
  store.add("proj.eeg.b", Tensor::full({cfg.joint_dim}, 0.01));
  store.add("proj.img.w", diff::glorot_init({cfg.vis_dim, cfg.joint_dim},
                                            cfg.vis_dim, cfg.joint_dim, seed,
                                            "proj.img.w"));
  store.add("proj.img.b", Tensor::full({cfg.joint_dim}, 0.01));
}

namespace {

Var lookup(const VarMap& params, const std::string& name) {
  const auto it = params.find(name);
  if (it == params.end()) {
    fail(Errc::missing_field, "parameter '" + name + "' not provided");
  }
  return it->second;
}

void check_which(const std::string& which) {
  if (which != "eeg" && which != "img") {
    fail(Errc::invalid_argument,
         "projection side must be 'eeg' or 'img', got '" + which + "'");
  }
}

}  // namespace

Var project_rows(Tape& tape, Var z, const VarMap& params,
                 const std::string& which) {
  check_which(which);
  const Var w = lookup(params, "proj." + which + ".w");
  const Var b = lookup(params, "proj." + which + ".b");
  return tape.relu(tape.add_bias_rows(tape.matmul(z, w), b));
}

Tensor project(const Tensor& z, const ParamStore& params,
               const std::string& which) {
  check_which(which);
  if (z.rank() != 1) {
    fail(Errc::shape_mismatch, "project expects a vector, got " + z.shape_str());
  }
  const Tensor& w = params.value("proj." + which + ".w");
  const Tensor& b = params.value("proj." + which + ".b");
  if (w.dim(0) != z.dim(0)) {
    fail(Errc::dim_mismatch, "projection expects " + std::to_string(w.dim(0)) +
                                 "-wide input, got " + std::to_string(z.dim(0)));
  }
  const std::size_t joint = w.dim(1);
  Tensor out({joint});
  for (std::size_t j = 0; j < joint; ++j) {
    double acc = b[j];
    for (std::size_t i = 0; i < z.dim(0); ++i) acc += z[i] * w.at(i, j);
    out[j] = acc > 0.0 ? acc : 0.0;
  }
  return out;
}

namespace {

double norm_of(const Tensor& a) {
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * a[i];
  return std::sqrt(acc);
}

}  // namespace

double similarity(const Tensor& a, const Tensor& b, double tau) {
  if (a.rank() != 1 || !a.same_shape(b)) {
    fail(Errc::shape_mismatch, "similarity expects equal-length vectors, got " +
                                   a.shape_str() + " and " + b.shape_str());
  }
  if (tau <= 0.0) fail(Errc::invalid_argument, "temperature must be positive");
  const double na = norm_of(a), nb = norm_of(b);
  if (na == 0.0 || nb == 0.0) {
    fail(Errc::invalid_argument, "cosine of a zero-norm vector is undefined");
  }
  double dot = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) dot += a[i] * b[i];
  return std::exp(dot / (na * nb) / tau);
}

Tensor similarity_matrix(const Tensor& z_e, const Tensor& z_i, double tau) {
  if (z_e.rank() != 2 || z_i.rank() != 2 || z_e.dim(1) != z_i.dim(1)) {
    fail(Errc::shape_mismatch, "similarity_matrix expects NxJ and MxJ, got " +
                                   z_e.shape_str() + " and " + z_i.shape_str());
  }
  const std::size_t n = z_e.dim(0), m = z_i.dim(0), j = z_e.dim(1);
  Tensor out({n, m});
  for (std::size_t r = 0; r < n; ++r) {
    Tensor a({j});
    for (std::size_t d = 0; d < j; ++d) a[d] = z_e.at(r, d);
    for (std::size_t c = 0; c < m; ++c) {
      Tensor b({j});
      for (std::size_t d = 0; d < j; ++d) b[d] = z_i.at(c, d);
      out.at(r, c) = similarity(a, b, tau);
    }
  }
  return out;
}

Tensor sample_negative_mask(std::size_t n, std::size_t sample_size, Rng& rng) {
  if (n < 1) fail(Errc::invalid_argument, "batch must be non-empty");
  Tensor mask = Tensor::zeros({n, n});
  const std::size_t pool = n - 1;
  if (sample_size == 0 || sample_size >= pool) {
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) mask.at(i, j) = i == j ? 0.0 : 1.0;
    return mask;
  }
  for (std::size_t i = 0; i < n; ++i) {
    const auto draw = rng.sample_without_replacement(pool, sample_size);
    for (std::size_t d : draw) {
      const std::size_t j = d < i ? d : d + 1;  // skip the diagonal slot
      mask.at(i, j) = 1.0;
    }
  }
  return mask;
}

Var infonce_loss(Tape& tape, Var z_e, Var z_i, double tau, Strategy strategy,
                 const Tensor& mask) {
  if (tau <= 0.0) fail(Errc::invalid_argument, "temperature must be positive");
  const Var ze_n = tape.l2_normalize_rows(z_e);
  const Var zi_n = tape.l2_normalize_rows(z_i);
  const double inv_tau = 1.0 / tau;
  const Var s_ei = tape.exp_scale(tape.matmul_nt(ze_n, zi_n), inv_tau);
  std::optional<Var> s_ee, s_ii;
  if (strategy == Strategy::eeg_only || strategy == Strategy::both) {
    s_ee = tape.exp_scale(tape.matmul_nt(ze_n, ze_n), inv_tau);
  }
  if (strategy == Strategy::image_only || strategy == Strategy::both) {
    s_ii = tape.exp_scale(tape.matmul_nt(zi_n, zi_n), inv_tau);
  }
  return tape.infonce_reduce(s_ei, s_ee, s_ii, mask);
}

}  // namespace nr::crossmodal
