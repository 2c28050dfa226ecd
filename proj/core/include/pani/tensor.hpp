#pragma once

#include <initializer_list>
#include <string>
#include <vector>

namespace pani {

// Dense row-major tensor of doubles. Rank 0 holds a single element and acts
// as the scalar type. The only class invariant is data.size() == numel().
struct Tensor {
  std::vector<long> shape;
  std::vector<double> data;

  Tensor() = default;
  explicit Tensor(std::vector<long> shape_in);
  Tensor(std::vector<long> shape_in, std::vector<double> data_in);

  static Tensor scalar(double v);

  long numel() const { return static_cast<long>(data.size()); }
  int rank() const { return static_cast<int>(shape.size()); }
  bool is_scalar() const { return numel() == 1; }
  bool same_shape(const Tensor& other) const { return shape == other.shape; }
  long dim(int i) const;

  double& at(std::initializer_list<long> idx);
  double at(std::initializer_list<long> idx) const;

  // Throws NumericError naming `what` if any element is NaN or Inf.
  void check_finite(const char* what) const;
};

long shape_numel(const std::vector<long>& shape);
std::string shape_str(const std::vector<long>& shape);

double dot(const Tensor& a, const Tensor& b);
double l2_norm(const Tensor& t);

}  // namespace pani
