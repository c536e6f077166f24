#include "neuroretrieve/tensor.hpp"

#include <cmath>
#include <sstream>

#include "neuroretrieve/error.hpp"

namespace nr {

const char* errc_name(Errc c) {
  switch (c) {
    case Errc::bad_magic: return "bad_magic";
    case Errc::bad_version: return "bad_version";
    case Errc::truncated: return "truncated";
    case Errc::non_finite: return "non_finite";
    case Errc::duplicate_id: return "duplicate_id";
    case Errc::unknown_field: return "unknown_field";
    case Errc::missing_field: return "missing_field";
    case Errc::out_of_range: return "out_of_range";
    case Errc::shape_mismatch: return "shape_mismatch";
    case Errc::dim_mismatch: return "dim_mismatch";
    case Errc::not_found: return "not_found";
    case Errc::invalid_argument: return "invalid_argument";
    case Errc::unstable_filter: return "unstable_filter";
    case Errc::io_failure: return "io_failure";
    case Errc::non_finite_loss: return "non_finite_loss";
  }
  return "unknown";
}

std::size_t shape_product(const std::vector<std::size_t>& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

Tensor::Tensor(std::vector<std::size_t> shape)
    : shape_(std::move(shape)), data_(shape_product(shape_), 0.0) {}

Tensor::Tensor(std::vector<std::size_t> shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
  if (data_.size() != shape_product(shape_))
    fail(Errc::shape_mismatch, "tensor data size " + std::to_string(data_.size()) +
                                   " does not match shape " + shape_str());
}

Tensor Tensor::zeros(std::vector<std::size_t> shape) { return Tensor(std::move(shape)); }

Tensor Tensor::full(std::vector<std::size_t> shape, double value) {
  Tensor t(std::move(shape));
  t.fill(value);
  return t;
}

Tensor Tensor::scalar(double value) { return Tensor({1}, {value}); }

Tensor Tensor::row_vector(std::vector<double> values) {
  std::size_t n = values.size();
  return Tensor({1, n}, std::move(values));
}

void Tensor::fill(double value) {
  for (double& x : data_) x = value;
}

bool Tensor::all_finite() const {
  for (double x : data_)
    if (!std::isfinite(x)) return false;
  return true;
}

double Tensor::max_abs() const {
  double m = 0.0;
  for (double x : data_) m = std::max(m, std::fabs(x));
  return m;
}

std::string Tensor::shape_str() const {
  std::ostringstream os;
  os << "(";
  for (std::size_t i = 0; i < shape_.size(); ++i) os << (i ? "x" : "") << shape_[i];
  os << ")";
  return os.str();
}

}  // namespace nr
