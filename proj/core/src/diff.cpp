#include "neuroretrieve/diff.hpp"

#include <algorithm>
#include <cmath>

#include <Eigen/Dense>

#include "neuroretrieve/error.hpp"

namespace nr::diff {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MMap = Eigen::Map<RowMat>;
using CMMap = Eigen::Map<const RowMat>;
using VMap = Eigen::Map<Eigen::VectorXd>;
using CVMap = Eigen::Map<const Eigen::VectorXd>;

MMap mat(Tensor& t, std::size_t r, std::size_t c) {
  return MMap(t.data(), static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
}
CMMap mat(const Tensor& t, std::size_t r, std::size_t c) {
  return CMMap(t.data(), static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
}
// Mutable/const views of the V×C slice at time t of a T×V×C tensor.
MMap slice(Tensor& t, std::size_t idx, std::size_t r, std::size_t c) {
  return MMap(t.data() + idx * r * c, static_cast<Eigen::Index>(r),
              static_cast<Eigen::Index>(c));
}
CMMap slice(const Tensor& t, std::size_t idx, std::size_t r, std::size_t c) {
  return CMMap(t.data() + idx * r * c, static_cast<Eigen::Index>(r),
               static_cast<Eigen::Index>(c));
}
// Const views regardless of the argument's constness (overload resolution
// otherwise picks the mutable map for mutable tensors).
CMMap cmat(const Tensor& t, std::size_t r, std::size_t c) { return mat(t, r, c); }
CMMap cslice(const Tensor& t, std::size_t idx, std::size_t r, std::size_t c) {
  return slice(t, idx, r, c);
}

void require(bool ok, const char* op, const std::string& msg) {
  if (!ok) fail(Errc::shape_mismatch, std::string(op) + ": " + msg);
}

void require_rank2(const Tensor& t, const char* op, const char* which) {
  require(t.rank() == 2, op, std::string(which) + " must be rank-2, got " + t.shape_str());
}

void require_rank3(const Tensor& t, const char* op, const char* which) {
  require(t.rank() == 3, op, std::string(which) + " must be rank-3, got " + t.shape_str());
}

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace

const Tensor& Var::value() const { return tape->value(*this); }
const Tensor& Var::grad() const { return tape->grad(*this); }

const Tensor& Tape::value(Var v) const { return nodes_[v.node].value; }

const Tensor& Tape::grad(Var v) const {
  const Node& n = nodes_[v.node];
  if (n.grad.size() == 0)
    fail(Errc::invalid_argument, "gradient not computed for this node (op " +
                                     std::string(n.op) + ")");
  return n.grad;
}

const Tensor* Tape::grad_if(Var v) const {
  const Node& n = nodes_[v.node];
  return n.grad.size() == 0 ? nullptr : &n.grad;
}

bool Tape::any_needs_grad(const std::vector<std::size_t>& ids) const {
  for (std::size_t i : ids)
    if (nodes_[i].needs_grad) return true;
  return false;
}

Var Tape::push(Tensor value, std::vector<std::size_t> inputs, const char* op,
               std::function<void(Tape&, Node&)> backward) {
  if (!value.all_finite())
    fail(Errc::non_finite_loss, std::string("op \"") + op + "\" produced a non-finite value");
  Node n;
  n.value = std::move(value);
  n.inputs = std::move(inputs);
  n.op = op;
  n.needs_grad = any_needs_grad(n.inputs);
  if (n.needs_grad) n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return Var{this, nodes_.size() - 1};
}

Var Tape::leaf(Tensor value) {
  if (!value.all_finite()) fail(Errc::non_finite_loss, "leaf holds a non-finite value");
  Node n;
  n.value = std::move(value);
  n.op = "leaf";
  n.needs_grad = true;
  nodes_.push_back(std::move(n));
  return Var{this, nodes_.size() - 1};
}

Var Tape::constant(Tensor value) {
  if (!value.all_finite()) fail(Errc::non_finite_loss, "constant holds a non-finite value");
  Node n;
  n.value = std::move(value);
  n.op = "constant";
  n.needs_grad = false;
  nodes_.push_back(std::move(n));
  return Var{this, nodes_.size() - 1};
}

void Tape::backward(Var loss) {
  const Tensor& v = nodes_[loss.node].value;
  if (v.size() != 1)
    fail(Errc::invalid_argument,
         "backward without an explicit seed needs a scalar, got " + v.shape_str());
  backward(loss, Tensor::full(v.shape(), 1.0));
}

void Tape::backward(Var output, const Tensor& seed) {
  Node& out = nodes_[output.node];
  if (!seed.same_shape(out.value))
    fail(Errc::shape_mismatch, "backward seed shape " + seed.shape_str() +
                                   " does not match output " + out.value.shape_str());
  if (!out.needs_grad) return;  // nothing trainable upstream

  // Mark the subgraph that can influence the output.
  std::vector<char> reach(nodes_.size(), 0);
  std::vector<std::size_t> stack = {output.node};
  reach[output.node] = 1;
  while (!stack.empty()) {
    std::size_t i = stack.back();
    stack.pop_back();
    for (std::size_t in : nodes_[i].inputs)
      if (nodes_[in].needs_grad && !reach[in]) {
        reach[in] = 1;
        stack.push_back(in);
      }
  }
  for (std::size_t i = 0; i <= output.node; ++i)
    if (reach[i]) nodes_[i].grad = Tensor::zeros(nodes_[i].value.shape());
  out.grad = seed;
  for (std::size_t i = output.node + 1; i-- > 0;)
    if (reach[i] && nodes_[i].backward) nodes_[i].backward(*this, nodes_[i]);
}

// Grads live in nodes; ops capture input indices and use this accessor.
struct TapeAccess {
  static Tensor* grad_of(Tape& t, std::size_t idx);
  static const Tensor& value_of(const Tape& t, std::size_t idx);
};

namespace {

Tensor* grad_target(Tape& t, std::size_t idx) { return TapeAccess::grad_of(t, idx); }
const Tensor& val(const Tape& t, std::size_t idx) { return TapeAccess::value_of(t, idx); }

}  // namespace

Var Tape::add(Var a, Var b) {
  const Tensor &av = value(a), &bv = value(b);
  require(av.same_shape(bv), "add",
          "shapes differ: " + av.shape_str() + " vs " + bv.shape_str());
  Tensor out = av;
  VMap(out.data(), static_cast<Eigen::Index>(out.size())) +=
      CVMap(bv.data(), static_cast<Eigen::Index>(bv.size()));
  std::size_t ia = a.node, ib = b.node;
  return push(std::move(out), {ia, ib}, "add", [ia, ib](Tape& t, Node& n) {
    CVMap g(n.grad.data(), static_cast<Eigen::Index>(n.grad.size()));
    if (Tensor* ga = grad_target(t, ia))
      VMap(ga->data(), static_cast<Eigen::Index>(ga->size())) += g;
    if (Tensor* gb = grad_target(t, ib))
      VMap(gb->data(), static_cast<Eigen::Index>(gb->size())) += g;
  });
}

Var Tape::mul(Var a, Var b) {
  const Tensor &av = value(a), &bv = value(b);
  require(av.same_shape(bv), "mul",
          "shapes differ: " + av.shape_str() + " vs " + bv.shape_str());
  Tensor out = av;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  std::size_t ia = a.node, ib = b.node;
  return push(std::move(out), {ia, ib}, "mul", [ia, ib](Tape& t, Node& n) {
    const Tensor &av2 = val(t, ia), &bv2 = val(t, ib);
    if (Tensor* ga = grad_target(t, ia))
      for (std::size_t i = 0; i < n.grad.size(); ++i) (*ga)[i] += n.grad[i] * bv2[i];
    if (Tensor* gb = grad_target(t, ib))
      for (std::size_t i = 0; i < n.grad.size(); ++i) (*gb)[i] += n.grad[i] * av2[i];
  });
}

Var Tape::scale(Var a, double c) {
  Tensor out = value(a);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= c;
  std::size_t ia = a.node;
  return push(std::move(out), {ia}, "scale", [ia, c](Tape& t, Node& n) {
    if (Tensor* ga = grad_target(t, ia))
      for (std::size_t i = 0; i < n.grad.size(); ++i) (*ga)[i] += c * n.grad[i];
  });
}

Var Tape::relu(Var a) {
  Tensor out = value(a);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = out[i] > 0.0 ? out[i] : 0.0;
  std::size_t ia = a.node;
  return push(std::move(out), {ia}, "relu", [ia](Tape& t, Node& n) {
    const Tensor& av = val(t, ia);
    if (Tensor* ga = grad_target(t, ia))
      for (std::size_t i = 0; i < n.grad.size(); ++i)
        if (av[i] > 0.0) (*ga)[i] += n.grad[i];
  });
}

Var Tape::matmul(Var a, Var b) {
  const Tensor &av = value(a), &bv = value(b);
  require_rank2(av, "matmul", "lhs");
  require_rank2(bv, "matmul", "rhs");
  require(av.dim(1) == bv.dim(0), "matmul",
          "inner dims differ: " + av.shape_str() + " vs " + bv.shape_str());
  const std::size_t m = av.dim(0), k = av.dim(1), nn = bv.dim(1);
  Tensor out({m, nn});
  mat(out, m, nn).noalias() = mat(av, m, k) * mat(bv, k, nn);
  std::size_t ia = a.node, ib = b.node;
  return push(std::move(out), {ia, ib}, "matmul", [ia, ib, m, k, nn](Tape& t, Node& n) {
    CMMap g = cmat(n.grad, m, nn);
    if (Tensor* ga = grad_target(t, ia))
      mat(*ga, m, k).noalias() += g * mat(val(t, ib), k, nn).transpose();
    if (Tensor* gb = grad_target(t, ib))
      mat(*gb, k, nn).noalias() += mat(val(t, ia), m, k).transpose() * g;
  });
}

Var Tape::matmul_nt(Var a, Var b) {
  const Tensor &av = value(a), &bv = value(b);
  require_rank2(av, "matmul_nt", "lhs");
  require_rank2(bv, "matmul_nt", "rhs");
  require(av.dim(1) == bv.dim(1), "matmul_nt",
          "column dims differ: " + av.shape_str() + " vs " + bv.shape_str());
  const std::size_t m = av.dim(0), k = av.dim(1), nn = bv.dim(0);
  Tensor out({m, nn});
  mat(out, m, nn).noalias() = mat(av, m, k) * mat(bv, nn, k).transpose();
  std::size_t ia = a.node, ib = b.node;
  return push(std::move(out), {ia, ib}, "matmul_nt", [ia, ib, m, k, nn](Tape& t, Node& n) {
    CMMap g = cmat(n.grad, m, nn);
    if (Tensor* ga = grad_target(t, ia))
      mat(*ga, m, k).noalias() += g * mat(val(t, ib), nn, k);
    if (Tensor* gb = grad_target(t, ib))
      mat(*gb, nn, k).noalias() += g.transpose() * mat(val(t, ia), m, k);
  });
}

Var Tape::add_bias_rows(Var a, Var bias) {
  const Tensor &av = value(a), &bv = value(bias);
  require_rank2(av, "add_bias_rows", "matrix");
  require(bv.rank() == 1 && bv.dim(0) == av.dim(1), "add_bias_rows",
          "bias " + bv.shape_str() + " does not match columns of " + av.shape_str());
  const std::size_t r = av.dim(0), c = av.dim(1);
  Tensor out = av;
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] += bv[j];
  std::size_t ia = a.node, ib = bias.node;
  return push(std::move(out), {ia, ib}, "add_bias_rows", [ia, ib, r, c](Tape& t, Node& n) {
    if (Tensor* ga = grad_target(t, ia))
      VMap(ga->data(), static_cast<Eigen::Index>(r * c)) +=
          CVMap(n.grad.data(), static_cast<Eigen::Index>(r * c));
    if (Tensor* gb = grad_target(t, ib))
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) (*gb)[j] += n.grad[i * c + j];
  });
}

Var Tape::affine_vec(Var x, Var w, Var bias) {
  const Tensor &xv = value(x), &wv = value(w), &bv = value(bias);
  require(xv.rank() == 1, "affine_vec", "x must be rank-1, got " + xv.shape_str());
  require_rank2(wv, "affine_vec", "w");
  require(wv.dim(1) == xv.dim(0), "affine_vec",
          "w " + wv.shape_str() + " does not match x " + xv.shape_str());
  require(bv.rank() == 1 && bv.dim(0) == wv.dim(0), "affine_vec",
          "bias " + bv.shape_str() + " does not match w " + wv.shape_str());
  const std::size_t m = wv.dim(0), k = wv.dim(1);
  Tensor out({m});
  VMap(out.data(), static_cast<Eigen::Index>(m)).noalias() =
      mat(wv, m, k) * CVMap(xv.data(), static_cast<Eigen::Index>(k)) +
      CVMap(bv.data(), static_cast<Eigen::Index>(m));
  std::size_t ix = x.node, iw = w.node, ib = bias.node;
  return push(std::move(out), {ix, iw, ib}, "affine_vec", [ix, iw, ib, m, k](Tape& t, Node& n) {
    CVMap g(n.grad.data(), static_cast<Eigen::Index>(m));
    if (Tensor* gw = grad_target(t, iw))
      mat(*gw, m, k).noalias() +=
          g * CVMap(val(t, ix).data(), static_cast<Eigen::Index>(k)).transpose();
    if (Tensor* gx = grad_target(t, ix))
      VMap(gx->data(), static_cast<Eigen::Index>(k)).noalias() +=
          mat(val(t, iw), m, k).transpose() * g;
    if (Tensor* gb = grad_target(t, ib))
      VMap(gb->data(), static_cast<Eigen::Index>(m)) += g;
  });
}

Var Tape::row_softmax(Var a) {
  const Tensor& av = value(a);
  require_rank2(av, "row_softmax", "input");
  const std::size_t r = av.dim(0), c = av.dim(1);
  Tensor out = av;
  for (std::size_t i = 0; i < r; ++i) {
    double* row = out.data() + i * c;
    double mx = *std::max_element(row, row + c);
    double sum = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      row[j] = std::exp(row[j] - mx);
      sum += row[j];
    }
    for (std::size_t j = 0; j < c; ++j) row[j] /= sum;
  }
  std::size_t ia = a.node;
  return push(std::move(out), {ia}, "row_softmax", [ia, r, c](Tape& t, Node& n) {
    Tensor* ga = grad_target(t, ia);
    if (!ga) return;
    for (std::size_t i = 0; i < r; ++i) {
      const double* y = n.value.data() + i * c;
      const double* gy = n.grad.data() + i * c;
      double dot = 0.0;
      for (std::size_t j = 0; j < c; ++j) dot += gy[j] * y[j];
      double* gx = ga->data() + i * c;
      for (std::size_t j = 0; j < c; ++j) gx[j] += y[j] * (gy[j] - dot);
    }
  });
}

Var Tape::l2_normalize_rows(Var a) {
  const Tensor& av = value(a);
  require_rank2(av, "l2_normalize_rows", "input");
  const std::size_t r = av.dim(0), c = av.dim(1);
  Tensor out = av;
  Tensor norms({r});
  for (std::size_t i = 0; i < r; ++i) {
    double* row = out.data() + i * c;
    double s = 0.0;
    for (std::size_t j = 0; j < c; ++j) s += row[j] * row[j];
    double norm = std::sqrt(s);
    if (norm < 1e-150)
      fail(Errc::invalid_argument,
           "l2_normalize_rows: row " + std::to_string(i) + " has zero norm");
    for (std::size_t j = 0; j < c; ++j) row[j] /= norm;
    norms[i] = norm;
  }
  std::size_t ia = a.node;
  Var v = push(std::move(out), {ia}, "l2_normalize_rows", [ia, r, c](Tape& t, Node& n) {
    Tensor* ga = grad_target(t, ia);
    if (!ga) return;
    const Tensor& norms2 = n.saved[0];
    for (std::size_t i = 0; i < r; ++i) {
      const double* u = n.value.data() + i * c;
      const double* g = n.grad.data() + i * c;
      double dot = 0.0;
      for (std::size_t j = 0; j < c; ++j) dot += g[j] * u[j];
      double* gx = ga->data() + i * c;
      for (std::size_t j = 0; j < c; ++j) gx[j] += (g[j] - dot * u[j]) / norms2[i];
    }
  });
  nodes_[v.node].saved.push_back(std::move(norms));
  return v;
}

Var Tape::exp_scale(Var a, double inv_tau) {
  Tensor out = value(a);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::exp(out[i] * inv_tau);
  std::size_t ia = a.node;
  return push(std::move(out), {ia}, "exp_scale", [ia, inv_tau](Tape& t, Node& n) {
    if (Tensor* ga = grad_target(t, ia))
      for (std::size_t i = 0; i < n.grad.size(); ++i)
        (*ga)[i] += n.grad[i] * n.value[i] * inv_tau;
  });
}

Var Tape::sum_squares(Var a) {
  const Tensor& av = value(a);
  double s = 0.0;
  for (std::size_t i = 0; i < av.size(); ++i) s += av[i] * av[i];
  std::size_t ia = a.node;
  return push(Tensor::scalar(s), {ia}, "sum_squares", [ia](Tape& t, Node& n) {
    const Tensor& av2 = val(t, ia);
    if (Tensor* ga = grad_target(t, ia))
      for (std::size_t i = 0; i < av2.size(); ++i) (*ga)[i] += 2.0 * av2[i] * n.grad[0];
  });
}

Var Tape::mean_abs_error(Var pred, const Tensor& target) {
  const Tensor& pv = value(pred);
  require(pv.same_shape(target), "mean_abs_error",
          "prediction " + pv.shape_str() + " vs target " + target.shape_str());
  const double inv_n = 1.0 / static_cast<double>(pv.size());
  double s = 0.0;
  for (std::size_t i = 0; i < pv.size(); ++i) s += std::fabs(pv[i] - target[i]);
  std::size_t ip = pred.node;
  Var v = push(Tensor::scalar(s * inv_n), {ip}, "mean_abs_error",
               [ip, inv_n](Tape& t, Node& n) {
                 const Tensor& pv2 = val(t, ip);
                 const Tensor& tgt = n.saved[0];
                 if (Tensor* gp = grad_target(t, ip))
                   for (std::size_t i = 0; i < pv2.size(); ++i) {
                     double d = pv2[i] - tgt[i];
                     double sgn = d > 0.0 ? 1.0 : (d < 0.0 ? -1.0 : 0.0);
                     (*gp)[i] += n.grad[0] * inv_n * sgn;
                   }
               });
  nodes_[v.node].saved.push_back(target);
  return v;
}

Var Tape::stack_rows(const std::vector<Var>& rows) {
  require(!rows.empty(), "stack_rows", "need at least one row");
  const std::size_t c = value(rows[0]).size();
  std::vector<std::size_t> ids;
  ids.reserve(rows.size());
  for (const Var& r : rows) {
    require(value(r).size() == c, "stack_rows", "rows differ in length");
    ids.push_back(r.node);
  }
  Tensor out({rows.size(), c});
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const Tensor& rv = value(rows[i]);
    std::copy(rv.data(), rv.data() + c, out.data() + i * c);
  }
  std::vector<std::size_t> ids_copy = ids;
  return push(std::move(out), std::move(ids), "stack_rows",
              [ids_copy, c](Tape& t, Node& n) {
                for (std::size_t i = 0; i < ids_copy.size(); ++i)
                  if (Tensor* g = grad_target(t, ids_copy[i]))
                    for (std::size_t j = 0; j < c; ++j) (*g)[j] += n.grad[i * c + j];
              });
}

Var Tape::lift(const Tensor& clip, Var w, Var b) {
  require_rank2(clip, "lift", "clip");
  const Tensor &wv = value(w), &bv = value(b);
  require(wv.rank() == 1 && bv.rank() == 1 && wv.dim(0) == bv.dim(0), "lift",
          "w and b must be rank-1 of equal length");
  const std::size_t v = clip.dim(0), tt = clip.dim(1), d = wv.dim(0);
  Tensor out({tt, v, d});
  for (std::size_t t = 0; t < tt; ++t)
    for (std::size_t i = 0; i < v; ++i) {
      const double x = clip.at(i, t);
      double* row = out.data() + (t * v + i) * d;
      for (std::size_t j = 0; j < d; ++j) row[j] = x * wv[j] + bv[j];
    }
  std::size_t iw = w.node, ib = b.node;
  Var out_var = push(std::move(out), {iw, ib}, "lift", [iw, ib, v, tt, d](Tape& t, Node& n) {
    const Tensor& clip2 = n.saved[0];
    Tensor* gw = grad_target(t, iw);
    Tensor* gb = grad_target(t, ib);
    for (std::size_t ts = 0; ts < tt; ++ts)
      for (std::size_t i = 0; i < v; ++i) {
        const double x = clip2.at(i, ts);
        const double* g = n.grad.data() + (ts * v + i) * d;
        for (std::size_t j = 0; j < d; ++j) {
          if (gw) (*gw)[j] += g[j] * x;
          if (gb) (*gb)[j] += g[j];
        }
      }
  });
  nodes_[out_var.node].saved.push_back(clip);
  return out_var;
}

Var Tape::diffusion_gconv_seq(Var x, const Tensor& p, Var adaptive,
                              const std::vector<Var>& theta_w,
                              const std::vector<Var>& theta_a) {
  const Tensor& xv = value(x);
  require_rank3(xv, "diffusion_gconv", "x");
  const std::size_t tt = xv.dim(0), v = xv.dim(1), c = xv.dim(2);
  require(p.rank() == 2 && p.dim(0) == v && p.dim(1) == v, "diffusion_gconv",
          "transition matrix must be " + std::to_string(v) + " square");
  const Tensor& av = value(adaptive);
  require(av.rank() == 2 && av.dim(0) == v && av.dim(1) == v, "diffusion_gconv",
          "adaptive adjacency must be " + std::to_string(v) + " square");
  const std::size_t k_steps = theta_w.size();
  if (k_steps < 1)
    fail(Errc::invalid_argument, "diffusion_gconv: need at least one diffusion step");
  require(theta_a.size() == k_steps, "diffusion_gconv", "theta lists differ in length");
  std::size_t m = value(theta_w[0]).dim(1);
  for (std::size_t k = 0; k < k_steps; ++k) {
    const Tensor &tw = value(theta_w[k]), &ta = value(theta_a[k]);
    require(tw.rank() == 2 && tw.dim(0) == c && tw.dim(1) == m, "diffusion_gconv",
            "theta_w[" + std::to_string(k) + "] must be " + std::to_string(c) + "x" +
                std::to_string(m));
    require(ta.rank() == 2 && ta.dim(0) == c && ta.dim(1) == m, "diffusion_gconv",
            "theta_a[" + std::to_string(k) + "] must be " + std::to_string(c) + "x" +
                std::to_string(m));
  }

  // Forward, keeping the diffused sequences P^k X and Ã^k X for k ≥ 1.
  Tensor out({tt, v, m});
  std::vector<Tensor> diff_w(k_steps > 1 ? k_steps - 1 : 0);
  std::vector<Tensor> diff_a(k_steps > 1 ? k_steps - 1 : 0);
  for (auto& d : diff_w) d = Tensor({tt, v, c});
  for (auto& d : diff_a) d = Tensor({tt, v, c});
  CMMap pm = mat(p, v, v);
  CMMap am = mat(av, v, v);
  RowMat yw(v, c), ya(v, c), next(v, c);
  for (std::size_t t = 0; t < tt; ++t) {
    CMMap xt = slice(xv, t, v, c);
    MMap ot = slice(out, t, v, m);
    ot.noalias() = xt * mat(value(theta_w[0]), c, m);
    ot.noalias() += xt * mat(value(theta_a[0]), c, m);
    yw = xt;
    ya = xt;
    for (std::size_t k = 1; k < k_steps; ++k) {
      next.noalias() = pm * yw;
      yw = next;
      next.noalias() = am * ya;
      ya = next;
      slice(diff_w[k - 1], t, v, c) = yw;
      slice(diff_a[k - 1], t, v, c) = ya;
      ot.noalias() += yw * mat(value(theta_w[k]), c, m);
      ot.noalias() += ya * mat(value(theta_a[k]), c, m);
    }
  }

  std::vector<std::size_t> ids = {x.node, adaptive.node};
  for (const Var& th : theta_w) ids.push_back(th.node);
  for (const Var& th : theta_a) ids.push_back(th.node);
  std::size_t ix = x.node, iadj = adaptive.node;
  std::vector<std::size_t> iw_ids, ia_ids;
  for (const Var& th : theta_w) iw_ids.push_back(th.node);
  for (const Var& th : theta_a) ia_ids.push_back(th.node);

  Var result = push(
      std::move(out), std::move(ids), "diffusion_gconv",
      [ix, iadj, iw_ids, ia_ids, tt, v, c, m, k_steps](Tape& t, Node& n) {
        // saved: diff_w[0..K-2], diff_a[0..K-2], P
        const Tensor& p2 = n.saved.back();
        CMMap pm2 = mat(p2, v, v);
        CMMap am2 = mat(val(t, iadj), v, v);
        const Tensor& x2 = val(t, ix);
        Tensor* gx = grad_target(t, ix);
        Tensor* gadj = grad_target(t, iadj);
        RowMat rw(v, c), ra(v, c), tmp(v, c);
        for (std::size_t ts = 0; ts < tt; ++ts) {
          CMMap g = cslice(n.grad, ts, v, m);
          // dTheta for every step; the k-th diffused input is X for k=0,
          // otherwise the saved P^k X / Ã^k X.
          for (std::size_t k = 0; k < k_steps; ++k) {
            const Tensor& src_w = k == 0 ? x2 : n.saved[k - 1];
            const Tensor& src_a = k == 0 ? x2 : n.saved[k_steps - 1 + k - 1];
            CMMap xw = slice(src_w, ts, v, c);
            CMMap xa = slice(src_a, ts, v, c);
            if (Tensor* gw = grad_target(t, iw_ids[k]))
              mat(*gw, c, m).noalias() += xw.transpose() * g;
            if (Tensor* ga = grad_target(t, ia_ids[k]))
              mat(*ga, c, m).noalias() += xa.transpose() * g;
          }
          // Walk the diffusion chains backwards. rw/ra carry the gradient
          // into P^k X / Ã^k X for the current k.
          rw.setZero();
          ra.setZero();
          for (std::size_t k = k_steps; k-- > 1;) {
            rw.noalias() += g * mat(val(t, iw_ids[k]), c, m).transpose();
            ra.noalias() += g * mat(val(t, ia_ids[k]), c, m).transpose();
            if (gadj) {
              const Tensor& prev_src = k == 1 ? x2 : n.saved[k_steps - 1 + k - 2];
              CMMap prev = slice(prev_src, ts, v, c);
              mat(*gadj, v, v).noalias() += ra * prev.transpose();
            }
            tmp.noalias() = pm2.transpose() * rw;
            rw = tmp;
            tmp.noalias() = am2.transpose() * ra;
            ra = tmp;
          }
          if (gx) {
            MMap gxt = slice(*gx, ts, v, c);
            gxt.noalias() += rw + ra;
            gxt.noalias() += g * mat(val(t, iw_ids[0]), c, m).transpose();
            gxt.noalias() += g * mat(val(t, ia_ids[0]), c, m).transpose();
          }
        }
      });
  Node& nd = nodes_[result.node];
  for (auto& d : diff_w) nd.saved.push_back(std::move(d));
  for (auto& d : diff_a) nd.saved.push_back(std::move(d));
  nd.saved.push_back(p);
  return result;
}

Var Tape::gated_tcn(Var x, Var filter_w, Var filter_b, Var gate_w, Var gate_b,
                    std::size_t dilation) {
  const Tensor& xv = value(x);
  require_rank3(xv, "gated_tcn", "x");
  const Tensor &fw = value(filter_w), &gw = value(gate_w);
  const Tensor &fb = value(filter_b), &gb = value(gate_b);
  require_rank3(fw, "gated_tcn", "filter weights");
  require(fw.same_shape(gw), "gated_tcn", "filter/gate weight shapes differ");
  const std::size_t tt = xv.dim(0), v = xv.dim(1), cin = xv.dim(2);
  const std::size_t kernel = fw.dim(0), cout = fw.dim(1);
  require(fw.dim(2) == cin, "gated_tcn",
          "weights expect " + std::to_string(fw.dim(2)) + " input channels, got " +
              std::to_string(cin));
  require(fb.rank() == 1 && fb.dim(0) == cout && gb.same_shape(fb), "gated_tcn",
          "bias shapes must be (" + std::to_string(cout) + ")");
  require(dilation >= 1, "gated_tcn", "dilation must be >= 1");

  // a = tanh(conv_f), g = sigmoid(conv_g), h = a ⊙ g; padding is implicit:
  // taps reaching before t=0 are dropped (zero padding).
  Tensor act({tt, v, cout}), gate({tt, v, cout});
  for (std::size_t t = 0; t < tt; ++t) {
    MMap at = slice(act, t, v, cout);
    MMap gt = slice(gate, t, v, cout);
    at.rowwise() = CVMap(fb.data(), static_cast<Eigen::Index>(cout)).transpose();
    gt.rowwise() = CVMap(gb.data(), static_cast<Eigen::Index>(cout)).transpose();
    for (std::size_t j = 0; j < kernel; ++j) {
      if (t < j * dilation) break;
      CMMap xs = slice(xv, t - j * dilation, v, cin);
      at.noalias() += xs * slice(fw, j, cout, cin).transpose();
      gt.noalias() += xs * slice(gw, j, cout, cin).transpose();
    }
  }
  Tensor out({tt, v, cout});
  for (std::size_t i = 0; i < out.size(); ++i) {
    act[i] = std::tanh(act[i]);
    gate[i] = sigmoid(gate[i]);
    out[i] = act[i] * gate[i];
  }

  std::size_t ix = x.node, ifw = filter_w.node, ifb = filter_b.node;
  std::size_t igw = gate_w.node, igb = gate_b.node;
  Var result = push(
      std::move(out), {ix, ifw, ifb, igw, igb}, "gated_tcn",
      [ix, ifw, ifb, igw, igb, tt, v, cin, cout, kernel, dilation](Tape& t, Node& n) {
        const Tensor& act2 = n.saved[0];
        const Tensor& gate2 = n.saved[1];
        const Tensor& x2 = val(t, ix);
        Tensor* gx = grad_target(t, ix);
        Tensor* gfw = grad_target(t, ifw);
        Tensor* gfb = grad_target(t, ifb);
        Tensor* ggw = grad_target(t, igw);
        Tensor* ggb = grad_target(t, igb);
        Tensor du({v, cout}), dv({v, cout});
        for (std::size_t ts = 0; ts < tt; ++ts) {
          const double* gh = n.grad.data() + ts * v * cout;
          const double* a = act2.data() + ts * v * cout;
          const double* g = gate2.data() + ts * v * cout;
          for (std::size_t i = 0; i < v * cout; ++i) {
            du[i] = gh[i] * g[i] * (1.0 - a[i] * a[i]);
            dv[i] = gh[i] * a[i] * g[i] * (1.0 - g[i]);
          }
          if (gfb)
            for (std::size_t i = 0; i < v; ++i)
              for (std::size_t o = 0; o < cout; ++o) (*gfb)[o] += du[i * cout + o];
          if (ggb)
            for (std::size_t i = 0; i < v; ++i)
              for (std::size_t o = 0; o < cout; ++o) (*ggb)[o] += dv[i * cout + o];
          CMMap dum = cmat(du, v, cout);
          CMMap dvm = cmat(dv, v, cout);
          for (std::size_t j = 0; j < kernel; ++j) {
            if (ts < j * dilation) break;
            const std::size_t src = ts - j * dilation;
            CMMap xs = slice(x2, src, v, cin);
            if (gfw) slice(*gfw, j, cout, cin).noalias() += dum.transpose() * xs;
            if (ggw) slice(*ggw, j, cout, cin).noalias() += dvm.transpose() * xs;
            if (gx) {
              MMap gxs = slice(*gx, src, v, cin);
              gxs.noalias() += dum * slice(val(t, ifw), j, cout, cin);
              gxs.noalias() += dvm * slice(val(t, igw), j, cout, cin);
            }
          }
        }
      });
  Node& nd = nodes_[result.node];
  nd.saved.push_back(std::move(act));
  nd.saved.push_back(std::move(gate));
  return result;
}

Var Tape::node_sum_time_mean(Var x) {
  const Tensor& xv = value(x);
  require_rank3(xv, "node_sum_time_mean", "x");
  const std::size_t tt = xv.dim(0), v = xv.dim(1), c = xv.dim(2);
  const double inv_t = 1.0 / static_cast<double>(tt);
  Tensor out({c});
  for (std::size_t t = 0; t < tt; ++t)
    for (std::size_t i = 0; i < v; ++i) {
      const double* row = xv.data() + (t * v + i) * c;
      for (std::size_t j = 0; j < c; ++j) out[j] += row[j];
    }
  for (std::size_t j = 0; j < c; ++j) out[j] *= inv_t;
  std::size_t ix = x.node;
  return push(std::move(out), {ix}, "node_sum_time_mean",
              [ix, tt, v, c, inv_t](Tape& t, Node& n) {
                Tensor* gx = grad_target(t, ix);
                if (!gx) return;
                for (std::size_t ts = 0; ts < tt; ++ts)
                  for (std::size_t i = 0; i < v; ++i) {
                    double* row = gx->data() + (ts * v + i) * c;
                    for (std::size_t j = 0; j < c; ++j) row[j] += n.grad[j] * inv_t;
                  }
              });
}

Var Tape::last_timestep(Var x) {
  const Tensor& xv = value(x);
  require_rank3(xv, "last_timestep", "x");
  const std::size_t tt = xv.dim(0), v = xv.dim(1), c = xv.dim(2);
  Tensor out({v, c});
  std::copy(xv.data() + (tt - 1) * v * c, xv.data() + tt * v * c, out.data());
  std::size_t ix = x.node;
  return push(std::move(out), {ix}, "last_timestep", [ix, tt, v, c](Tape& t, Node& n) {
    if (Tensor* gx = grad_target(t, ix)) {
      double* dst = gx->data() + (tt - 1) * v * c;
      for (std::size_t i = 0; i < v * c; ++i) dst[i] += n.grad[i];
    }
  });
}

Var Tape::conv2d(Var x, Var w, Var bias) {
  const Tensor &xv = value(x), &wv = value(w), &bv = value(bias);
  require_rank3(xv, "conv2d", "x");
  require(wv.rank() == 4, "conv2d", "weights must be rank-4, got " + wv.shape_str());
  const std::size_t cin = xv.dim(0), h = xv.dim(1), wd = xv.dim(2);
  const std::size_t cout = wv.dim(0), kh = wv.dim(2), kw = wv.dim(3);
  require(wv.dim(1) == cin, "conv2d", "weight input channels mismatch");
  require(kh % 2 == 1 && kw % 2 == 1, "conv2d", "kernel must be odd for same padding");
  require(bv.rank() == 1 && bv.dim(0) == cout, "conv2d", "bias must be (C_out)");
  const std::size_t ph = kh / 2, pw = kw / 2;

  auto xat = [&](const Tensor& tsr, std::size_t c2, std::ptrdiff_t i, std::ptrdiff_t j) {
    return tsr[(c2 * h + static_cast<std::size_t>(i)) * wd + static_cast<std::size_t>(j)];
  };
  Tensor out({cout, h, wd});
  for (std::size_t o = 0; o < cout; ++o)
    for (std::size_t i = 0; i < h; ++i)
      for (std::size_t j = 0; j < wd; ++j) {
        double acc = bv[o];
        for (std::size_t c2 = 0; c2 < cin; ++c2)
          for (std::size_t dy = 0; dy < kh; ++dy) {
            std::ptrdiff_t si = static_cast<std::ptrdiff_t>(i + dy) -
                                static_cast<std::ptrdiff_t>(ph);
            if (si < 0 || si >= static_cast<std::ptrdiff_t>(h)) continue;
            for (std::size_t dx = 0; dx < kw; ++dx) {
              std::ptrdiff_t sj = static_cast<std::ptrdiff_t>(j + dx) -
                                  static_cast<std::ptrdiff_t>(pw);
              if (sj < 0 || sj >= static_cast<std::ptrdiff_t>(wd)) continue;
              acc += wv[((o * cin + c2) * kh + dy) * kw + dx] * xat(xv, c2, si, sj);
            }
          }
        out[(o * h + i) * wd + j] = acc;
      }

  std::size_t ix = x.node, iw = w.node, ib = bias.node;
  return push(std::move(out), {ix, iw, ib}, "conv2d",
              [ix, iw, ib, cin, cout, h, wd, kh, kw, ph, pw](Tape& t, Node& n) {
                const Tensor& x2 = val(t, ix);
                const Tensor& w2 = val(t, iw);
                Tensor* gx = grad_target(t, ix);
                Tensor* gw = grad_target(t, iw);
                Tensor* gb = grad_target(t, ib);
                for (std::size_t o = 0; o < cout; ++o)
                  for (std::size_t i = 0; i < h; ++i)
                    for (std::size_t j = 0; j < wd; ++j) {
                      const double g = n.grad[(o * h + i) * wd + j];
                      if (g == 0.0) continue;
                      if (gb) (*gb)[o] += g;
                      for (std::size_t c2 = 0; c2 < cin; ++c2)
                        for (std::size_t dy = 0; dy < kh; ++dy) {
                          std::ptrdiff_t si = static_cast<std::ptrdiff_t>(i + dy) -
                                              static_cast<std::ptrdiff_t>(ph);
                          if (si < 0 || si >= static_cast<std::ptrdiff_t>(h)) continue;
                          for (std::size_t dx = 0; dx < kw; ++dx) {
                            std::ptrdiff_t sj = static_cast<std::ptrdiff_t>(j + dx) -
                                                static_cast<std::ptrdiff_t>(pw);
                            if (sj < 0 || sj >= static_cast<std::ptrdiff_t>(wd)) continue;
                            const std::size_t xi =
                                (c2 * h + static_cast<std::size_t>(si)) * wd +
                                static_cast<std::size_t>(sj);
                            const std::size_t wi = ((o * cin + c2) * kh + dy) * kw + dx;
                            if (gw) (*gw)[wi] += g * x2[xi];
                            if (gx) (*gx)[xi] += g * w2[wi];
                          }
                        }
                    }
              });
}

Var Tape::avgpool2(Var x) {
  const Tensor& xv = value(x);
  require_rank3(xv, "avgpool2", "x");
  const std::size_t c = xv.dim(0), h = xv.dim(1), w = xv.dim(2);
  require(h % 2 == 0 && w % 2 == 0, "avgpool2", "spatial dims must be even");
  const std::size_t oh = h / 2, ow = w / 2;
  Tensor out({c, oh, ow});
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t i = 0; i < oh; ++i)
      for (std::size_t j = 0; j < ow; ++j) {
        double s = xv[(ch * h + 2 * i) * w + 2 * j] + xv[(ch * h + 2 * i) * w + 2 * j + 1] +
                   xv[(ch * h + 2 * i + 1) * w + 2 * j] +
                   xv[(ch * h + 2 * i + 1) * w + 2 * j + 1];
        out[(ch * oh + i) * ow + j] = 0.25 * s;
      }
  std::size_t ix = x.node;
  return push(std::move(out), {ix}, "avgpool2", [ix, c, h, w, oh, ow](Tape& t, Node& n) {
    Tensor* gx = grad_target(t, ix);
    if (!gx) return;
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t i = 0; i < oh; ++i)
        for (std::size_t j = 0; j < ow; ++j) {
          const double g = 0.25 * n.grad[(ch * oh + i) * ow + j];
          (*gx)[(ch * h + 2 * i) * w + 2 * j] += g;
          (*gx)[(ch * h + 2 * i) * w + 2 * j + 1] += g;
          (*gx)[(ch * h + 2 * i + 1) * w + 2 * j] += g;
          (*gx)[(ch * h + 2 * i + 1) * w + 2 * j + 1] += g;
        }
  });
}

Var Tape::flatten(Var x) {
  const Tensor& xv = value(x);
  Tensor out({xv.size()}, xv.vec());
  std::size_t ix = x.node;
  return push(std::move(out), {ix}, "flatten", [ix](Tape& t, Node& n) {
    if (Tensor* gx = grad_target(t, ix))
      for (std::size_t i = 0; i < n.grad.size(); ++i) (*gx)[i] += n.grad[i];
  });
}

Var Tape::infonce_reduce(Var s_ei, std::optional<Var> s_ee, std::optional<Var> s_ii,
                         const Tensor& mask) {
  const Tensor& sv = value(s_ei);
  require_rank2(sv, "infonce_reduce", "s_ei");
  const std::size_t n = sv.dim(0);
  require(sv.dim(1) == n, "infonce_reduce", "s_ei must be square");
  require(mask.rank() == 2 && mask.dim(0) == n && mask.dim(1) == n, "infonce_reduce",
          "mask must match s_ei");
  for (std::size_t i = 0; i < n; ++i) {
    if (mask.at(i, i) != 0.0)
      fail(Errc::invalid_argument, "infonce_reduce: mask diagonal must be zero");
    for (std::size_t j = 0; j < n; ++j)
      if (mask.at(i, j) != 0.0 && mask.at(i, j) != 1.0)
        fail(Errc::invalid_argument, "infonce_reduce: mask entries must be 0 or 1");
  }
  const bool has_ee = s_ee.has_value(), has_ii = s_ii.has_value();
  if (has_ee) require(value(*s_ee).same_shape(sv), "infonce_reduce", "s_ee shape");
  if (has_ii) require(value(*s_ii).same_shape(sv), "infonce_reduce", "s_ii shape");

  Tensor denoms({n});
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    double denom = sv.at(i, i);
    for (std::size_t j = 0; j < n; ++j) {
      if (mask.at(i, j) == 0.0) continue;
      denom += sv.at(i, j) + sv.at(j, i);
      if (has_ee) denom += value(*s_ee).at(i, j);
      if (has_ii) denom += value(*s_ii).at(i, j);
    }
    denoms[i] = denom;
    acc += std::log(denom) - std::log(sv.at(i, i));
  }
  const double inv_n = 1.0 / static_cast<double>(n);

  std::vector<std::size_t> ids = {s_ei.node};
  std::size_t iee = 0, iii = 0;
  if (has_ee) {
    iee = s_ee->node;
    ids.push_back(iee);
  }
  if (has_ii) {
    iii = s_ii->node;
    ids.push_back(iii);
  }
  std::size_t is = s_ei.node;
  Var result = push(
      Tensor::scalar(acc * inv_n), std::move(ids), "infonce_reduce",
      [is, iee, iii, has_ee, has_ii, n, inv_n](Tape& t, Node& nd) {
        const Tensor& mask2 = nd.saved[0];
        const Tensor& denoms2 = nd.saved[1];
        const Tensor& sv2 = val(t, is);
        Tensor* gs = grad_target(t, is);
        Tensor* gee = has_ee ? grad_target(t, iee) : nullptr;
        Tensor* gii = has_ii ? grad_target(t, iii) : nullptr;
        const double g0 = nd.grad[0] * inv_n;
        for (std::size_t i = 0; i < n; ++i) {
          const double cd = g0 / denoms2[i];
          if (gs) {
            gs->at(i, i) += cd - g0 / sv2.at(i, i);
            for (std::size_t j = 0; j < n; ++j) {
              if (mask2.at(i, j) == 0.0) continue;
              gs->at(i, j) += cd;
              gs->at(j, i) += cd;
            }
          }
          for (std::size_t j = 0; j < n; ++j) {
            if (mask2.at(i, j) == 0.0) continue;
            if (gee) gee->at(i, j) += cd;
            if (gii) gii->at(i, j) += cd;
          }
        }
      });
  Node& nd = nodes_[result.node];
  nd.saved.push_back(mask);
  nd.saved.push_back(std::move(denoms));
  return result;
}

Tensor* TapeAccess::grad_of(Tape& t, std::size_t idx) {
  Tape::Node& n = t.at(idx);
  if (!n.needs_grad || n.grad.size() == 0) return nullptr;
  return &n.grad;
}

const Tensor& TapeAccess::value_of(const Tape& t, std::size_t idx) {
  return t.value(Var{const_cast<Tape*>(&t), idx});
}

// --- parameter store ---

Tensor& ParamStore::add(const std::string& name, Tensor init) {
  if (values.count(name))
    fail(Errc::duplicate_id, "parameter \"" + name + "\" registered twice");
  grads[name] = Tensor::zeros(init.shape());
  return values[name] = std::move(init);
}

Tensor& ParamStore::value(const std::string& name) {
  auto it = values.find(name);
  if (it == values.end()) fail(Errc::not_found, "no parameter \"" + name + "\"");
  return it->second;
}

const Tensor& ParamStore::value(const std::string& name) const {
  auto it = values.find(name);
  if (it == values.end()) fail(Errc::not_found, "no parameter \"" + name + "\"");
  return it->second;
}

Tensor& ParamStore::grad(const std::string& name) {
  auto it = grads.find(name);
  if (it == grads.end()) fail(Errc::not_found, "no gradient \"" + name + "\"");
  return it->second;
}

void ParamStore::zero_grads() {
  for (auto& [name, g] : grads) g.fill(0.0);
}

std::map<std::string, std::vector<std::size_t>> ParamStore::shapes() const {
  std::map<std::string, std::vector<std::size_t>> out;
  for (const auto& [name, t] : values) out[name] = t.shape();
  return out;
}

Tensor glorot_init(const std::vector<std::size_t>& shape, std::size_t fan_in,
                   std::size_t fan_out, std::uint64_t seed, const std::string& name) {
  Rng rng(Rng::mix(seed, Rng::hash_str(name)));
  const double a = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  Tensor t(shape);
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = rng.uniform(-a, a);
  return t;
}

Tensor normal_init(const std::vector<std::size_t>& shape, double stddev,
                   std::uint64_t seed, const std::string& name) {
  Rng rng(Rng::mix(seed, Rng::hash_str(name)));
  Tensor t(shape);
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = stddev * rng.normal();
  return t;
}

VarMap make_leaves(Tape& tape, const ParamStore& store) {
  VarMap leaves;
  for (const auto& [name, value] : store.values) leaves[name] = tape.leaf(value);
  return leaves;
}

void collect_grads(const Tape& tape, const VarMap& leaves, ParamStore& store) {
  for (const auto& [name, var] : leaves) {
    const Tensor* g = tape.grad_if(var);  // unreached leaves keep gradient 0
    if (!g) continue;
    Tensor& dst = store.grad(name);
    for (std::size_t i = 0; i < g->size(); ++i) dst[i] += (*g)[i];
  }
}

double evaluate_with_gradients(const LossFn& loss_fn, ParamStore& params) {
  params.zero_grads();
  Tape tape;
  VarMap leaves = make_leaves(tape, params);
  Var loss = loss_fn(tape, leaves);
  const Tensor& lv = tape.value(loss);
  if (lv.size() != 1)
    fail(Errc::invalid_argument, "loss must be scalar, got " + lv.shape_str());
  tape.backward(loss);
  collect_grads(tape, leaves, params);
  return lv[0];
}

namespace {

double evaluate_loss_only(const LossFn& loss_fn, const ParamStore& params) {
  Tape tape;
  VarMap leaves = make_leaves(tape, params);
  Var loss = loss_fn(tape, leaves);
  return tape.value(loss)[0];
}

}  // namespace

GradCheckReport grad_check(const LossFn& loss_fn, ParamStore& params, double epsilon,
                           double tol, std::size_t max_coords, std::uint64_t seed) {
  GradCheckReport report;
  evaluate_with_gradients(loss_fn, params);
  std::map<std::string, Tensor> analytic = params.grads;

  ParamStore probe;
  probe.values = params.values;

  for (auto& [name, value] : probe.values) {
    std::vector<std::size_t> coords;
    if (max_coords == 0 || max_coords >= value.size()) {
      coords.resize(value.size());
      for (std::size_t i = 0; i < value.size(); ++i) coords[i] = i;
    } else {
      Rng rng(Rng::mix(seed, Rng::hash_str(name)));
      coords = rng.sample_without_replacement(value.size(), max_coords);
    }
    double worst = 0.0;
    for (std::size_t i : coords) {
      const double orig = value[i];
      value[i] = orig + epsilon;
      const double up = evaluate_loss_only(loss_fn, probe);
      value[i] = orig - epsilon;
      const double down = evaluate_loss_only(loss_fn, probe);
      value[i] = orig;
      const double numeric = (up - down) / (2.0 * epsilon);
      const double a = analytic.at(name)[i];
      const double err =
          std::fabs(a - numeric) / std::max({std::fabs(a), std::fabs(numeric), 1e-2});
      worst = std::max(worst, err);
    }
    report.per_tensor[name] = worst;
    if (worst > report.max_rel_err) {
      report.max_rel_err = worst;
      report.worst_tensor = name;
    }
  }
  report.pass = report.max_rel_err <= tol;
  return report;
}

// --- Adam ---

void Adam::step(ParamStore& params) {
  ++step_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_));
  for (auto& [name, value] : params.values) {
    const Tensor& g = params.grad(name);
    Tensor& m = m_[name];
    Tensor& v = v_[name];
    if (m.size() == 0) m = Tensor::zeros(value.shape());
    if (v.size() == 0) v = Tensor::zeros(value.shape());
    for (std::size_t i = 0; i < value.size(); ++i) {
      m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * g[i];
      v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * g[i] * g[i];
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      value[i] -= cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps);
    }
  }
}

std::map<std::string, Tensor> Adam::state() const {
  std::map<std::string, Tensor> out;
  out["opt.step"] = Tensor::scalar(static_cast<double>(step_));
  for (const auto& [name, t] : m_) out["opt.m." + name] = t;
  for (const auto& [name, t] : v_) out["opt.v." + name] = t;
  return out;
}

void Adam::restore(const std::map<std::string, Tensor>& state) {
  m_.clear();
  v_.clear();
  step_ = 0;
  for (const auto& [name, t] : state) {
    if (name == "opt.step")
      step_ = static_cast<std::uint64_t>(t[0]);
    else if (name.rfind("opt.m.", 0) == 0)
      m_[name.substr(6)] = t;
    else if (name.rfind("opt.v.", 0) == 0)
      v_[name.substr(6)] = t;
    else
      fail(Errc::unknown_field, "unexpected optimizer tensor \"" + name + "\"");
  }
}

}  // namespace nr::diff
