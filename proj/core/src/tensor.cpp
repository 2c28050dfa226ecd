#include "pani/tensor.hpp"

#include <cmath>
#include <sstream>

#include "pani/errors.hpp"

namespace pani {

long shape_numel(const std::vector<long>& shape) {
  long n = 1;
  for (long e : shape) {
    if (e <= 0) throw DimensionError("tensor extents must be positive, got " + shape_str(shape));
    n *= e;
  }
  return n;
}

std::string shape_str(const std::vector<long>& shape) {
  std::ostringstream out;
  out << "(";
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) out << ",";
    out << shape[i];
  }
  out << ")";
  return out.str();
}

Tensor::Tensor(std::vector<long> shape_in) : shape(std::move(shape_in)) {
  data.assign(shape_numel(shape), 0.0);
}

Tensor::Tensor(std::vector<long> shape_in, std::vector<double> data_in)
    : shape(std::move(shape_in)), data(std::move(data_in)) {
  if (shape_numel(shape) != static_cast<long>(data.size())) {
    throw DimensionError("tensor data length " + std::to_string(data.size()) +
                         " does not match shape " + shape_str(shape));
  }
}

Tensor Tensor::scalar(double v) {
  Tensor t;
  t.data.assign(1, v);
  return t;
}

long Tensor::dim(int i) const {
  if (i < 0 || i >= rank()) {
    throw DimensionError("dim " + std::to_string(i) + " out of range for " + shape_str(shape));
  }
  return shape[i];
}

namespace {

long flat_index(const std::vector<long>& shape, int rank,
                std::initializer_list<long> idx) {
  if (static_cast<int>(idx.size()) != rank) {
    throw DimensionError("index rank " + std::to_string(idx.size()) +
                         " does not match tensor " + shape_str(shape));
  }
  long flat = 0;
  int d = 0;
  for (long i : idx) {
    if (i < 0 || i >= shape[d]) {
      throw DimensionError("index out of range in dim " + std::to_string(d) +
                           " for " + shape_str(shape));
    }
    flat = flat * shape[d] + i;
    ++d;
  }
  return flat;
}

}  // namespace

double& Tensor::at(std::initializer_list<long> idx) {
  return data[flat_index(shape, rank(), idx)];
}

double Tensor::at(std::initializer_list<long> idx) const {
  return data[flat_index(shape, rank(), idx)];
}

void Tensor::check_finite(const char* what) const {
  for (double v : data) {
    if (!std::isfinite(v)) {
      throw NumericError(std::string(what) + " produced a non-finite value");
    }
  }
}

double dot(const Tensor& a, const Tensor& b) {
  if (!a.same_shape(b)) {
    throw DimensionError("dot: shapes " + shape_str(a.shape) + " vs " + shape_str(b.shape));
  }
  double s = 0.0;
  for (long i = 0; i < a.numel(); ++i) s += a.data[i] * b.data[i];
  return s;
}

double l2_norm(const Tensor& t) {
  double s = 0.0;
  for (double v : t.data) s += v * v;
  return std::sqrt(s);
}

}  // namespace pani
