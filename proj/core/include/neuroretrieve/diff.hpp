#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "neuroretrieve/rng.hpp"
#include "neuroretrieve/tensor.hpp"

namespace nr::diff {

class Tape;

// Handle into a tape. Cheap to copy; valid for the lifetime of its tape.
struct Var {
  Tape* tape = nullptr;
  std::size_t node = 0;

  const Tensor& value() const;
  const Tensor& grad() const;
};

// Reverse-mode tape over float64 tensors. Ops are fused at the granularity
// this model needs (whole-sequence graph convolution, whole-sequence gated
// TCN, one-node InfoNCE reduction) so a full clip forward is a handful of
// nodes backed by dense matrix products.
//
// Every forward checks its output for non-finite values and reports the op
// that produced them, so a diverging run names its first bad computation.
class Tape {
 public:
  Var leaf(Tensor value);      // gradient is tracked
  Var constant(Tensor value);  // gradient is not tracked

  const Tensor& value(Var v) const;
  const Tensor& grad(Var v) const;
  // nullptr when the node holds no gradient (constant, or unreached by
  // the last backward sweep — i.e. the output does not depend on it).
  const Tensor* grad_if(Var v) const;
  std::size_t size() const { return nodes_.size(); }

  // Seeds d(loss)=1 (scalar loss) and runs the reverse sweep.
  void backward(Var loss);
  // Seeds an arbitrary output gradient; used when a later stage (separate
  // tape) supplies d(loss)/d(output).
  void backward(Var output, const Tensor& seed);

  // --- elementwise / linear algebra ---
  Var add(Var a, Var b);                  // same shape
  Var mul(Var a, Var b);                  // same shape, elementwise
  Var scale(Var a, double c);
  Var relu(Var a);
  Var matmul(Var a, Var b);               // (m×k)·(k×n)
  Var matmul_nt(Var a, Var b);            // (m×k)·(n×k)ᵀ
  Var add_bias_rows(Var a, Var bias);     // (r×c) + (c) broadcast over rows
  Var affine_vec(Var x, Var w, Var bias); // w:(m×n), x:(n), bias:(m) → (m)
  Var row_softmax(Var a);
  Var l2_normalize_rows(Var a);           // zero-norm row is an error
  Var exp_scale(Var a, double inv_tau);   // exp(a·inv_tau)
  Var sum_squares(Var a);                 // scalar Σ x²
  Var mean_abs_error(Var pred, const Tensor& target);  // scalar
  Var stack_rows(const std::vector<Var>& rows);        // n×(dim of each row)

  // --- sequence ops; sequences are laid out time-major as T×V×C ---
  // X[t,v,:] = clip[v,t]·w + b, clip is a constant V×T matrix.
  Var lift(const Tensor& clip, Var w, Var b);
  // out[t] = Σ_{k<K} (Pᵏ X[t]) Θ_Wᵏ + (Ãᵏ X[t]) Θ_Aᵏ with P constant and
  // Ã on-tape; X[t] is the V×C slice at time t. Θ lists have length K.
  Var diffusion_gconv_seq(Var x, const Tensor& p, Var adaptive,
                          const std::vector<Var>& theta_w,
                          const std::vector<Var>& theta_a);
  // h = tanh(W_f ⋆ x + b_f) ⊙ sigmoid(W_g ⋆ x + b_g); ⋆ is a causal dilated
  // convolution along t (left zero padding, length preserved).
  // Filters are (kernel × C_out × C_in); biases (C_out).
  Var gated_tcn(Var x, Var filter_w, Var filter_b, Var gate_w, Var gate_b,
                std::size_t dilation);
  Var node_sum_time_mean(Var x);   // T×V×C → (C): Σ_v, mean over t
  Var last_timestep(Var x);        // T×V×C → V×C

  // --- image ops (single image, channels-first C×H×W) ---
  Var conv2d(Var x, Var w, Var bias);  // w: C_out×C_in×kh×kw, same padding
  Var avgpool2(Var x);                 // halves H and W
  Var flatten(Var x);                  // → (numel)

  // Denominator mask m is a constant N×N 0/1 matrix; m[i][j]=1 iff j is a
  // drawn negative for query i. s_ee/s_ii enter per the strategy flags.
  Var infonce_reduce(Var s_ei, std::optional<Var> s_ee, std::optional<Var> s_ii,
                     const Tensor& mask);

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    std::vector<std::size_t> inputs;
    std::function<void(Tape&, Node&)> backward;
    const char* op = "leaf";
    bool needs_grad = false;
    std::vector<Tensor> saved;
  };

  Var push(Tensor value, std::vector<std::size_t> inputs, const char* op,
           std::function<void(Tape&, Node&)> backward);
  Node& at(std::size_t i) { return nodes_[i]; }
  bool any_needs_grad(const std::vector<std::size_t>& ids) const;

  std::vector<Node> nodes_;

  friend struct Var;
  friend struct TapeAccess;
};

// Named trainable tensors plus matching gradient buffers.
struct ParamStore {
  std::map<std::string, Tensor> values;
  std::map<std::string, Tensor> grads;

  Tensor& add(const std::string& name, Tensor init);
  bool has(const std::string& name) const { return values.count(name) != 0; }
  Tensor& value(const std::string& name);
  const Tensor& value(const std::string& name) const;
  Tensor& grad(const std::string& name);
  void zero_grads();
  std::map<std::string, std::vector<std::size_t>> shapes() const;
};

// Glorot-uniform tensor: uniform(−a, a), a = sqrt(6/(fan_in+fan_out)).
// The draw stream is derived from (seed, name) so adding or reordering
// parameters never shifts another tensor's initialization.
Tensor glorot_init(const std::vector<std::size_t>& shape, std::size_t fan_in,
                   std::size_t fan_out, std::uint64_t seed, const std::string& name);
Tensor normal_init(const std::vector<std::size_t>& shape, double stddev,
                   std::uint64_t seed, const std::string& name);

using VarMap = std::map<std::string, Var>;

// One leaf per parameter, then after backward() collect_grads accumulates
// each leaf's gradient into the store (fixed map order → deterministic).
VarMap make_leaves(Tape& tape, const ParamStore& store);
void collect_grads(const Tape& tape, const VarMap& leaves, ParamStore& store);

using LossFn = std::function<Var(Tape&, const VarMap&)>;

// Builds the graph, checks the loss is a finite scalar, runs backward, and
// accumulates parameter gradients. Returns the loss value.
double evaluate_with_gradients(const LossFn& loss_fn, ParamStore& params);

struct GradCheckReport {
  bool pass = false;
  double max_rel_err = 0.0;
  std::string worst_tensor;
  std::map<std::string, double> per_tensor;  // max relative error each
};

// Central finite differences against the analytic gradient. Checks at most
// max_coords coordinates per tensor (drawn deterministically from seed);
// 0 means every coordinate.
GradCheckReport grad_check(const LossFn& loss_fn, ParamStore& params,
                           double epsilon = 1e-5, double tol = 1e-4,
                           std::size_t max_coords = 0, std::uint64_t seed = 0);

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Adam with bias correction. Moment buffers are keyed by parameter name and
// iterate in map order, so updates are deterministic.
class Adam {
 public:
  explicit Adam(AdamConfig config = {}) : cfg_(config) {}

  const AdamConfig& config() const { return cfg_; }
  std::uint64_t step_count() const { return step_; }

  void step(ParamStore& params);

  // Moments and step counter as checkpoint tensors under "opt.".
  std::map<std::string, Tensor> state() const;
  void restore(const std::map<std::string, Tensor>& state);

 private:
  AdamConfig cfg_;
  std::uint64_t step_ = 0;
  std::map<std::string, Tensor> m_, v_;
};

}  // namespace nr::diff
